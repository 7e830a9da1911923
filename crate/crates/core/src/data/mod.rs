//! Synthetic multi-modal datasets.
//!
//! Scene triplets are rendered from a [`SceneDescriptor`] of flat objects at
//! distinct depth planes, so RGB, depth and segmentation agree at every pixel.
//! The opponent task draws one colored object per image and derives the two
//! opponent channels from its RGB values.

mod io;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::parallel;
use crate::tensor::{Shape, Tensor};

pub use io::{
    decode_pnm, decode_raw, encode_label_pgm, encode_pnm, encode_raw, read_image, read_labels, read_manifest,
    write_image, write_labels, write_manifest, DataError, ImageFormat, ManifestEntry,
};

/// Per-scene and per-sample RNG: stream `id` of the dataset seed.
pub fn item_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    /// Whether pixel center `(y, x)` lies inside the shape's box
    /// `[top, top + height) x [left, left + width)`.
    fn covers(self, o: &SceneObject, y: f64, x: f64) -> bool {
        let (u, v) = ((x - o.left) / o.width, (y - o.top) / o.height);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return false;
        }
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            // Apex at the top center, base along the bottom edge.
            ShapeKind::Triangle => (u - 0.5).abs() <= 0.5 * v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub class_id: u8,
    pub base_color: [f64; 3],
    /// Smaller is nearer; the background sits at 1.0.
    pub depth_plane: f64,
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDescriptor {
    pub scene_id: u64,
    pub background: [f64; 3],
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
    /// Class count including background class 0.
    pub classes: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            h: 32,
            w: 32,
            classes: 8,
            max_objects: 4,
        }
    }
}

/// Aligned RGB, depth and segmentation of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub scene_id: u64,
    /// `(1, 3, h, w)` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `(1, 1, h, w)` in `(0, 1]`.
    pub depth: Tensor<f32>,
    /// `h * w` class ids.
    pub seg: Vec<u8>,
}

const FAMILIES: [[f64; 3]; 4] = [
    [0.85, 0.25, 0.20],
    [0.20, 0.65, 0.30],
    [0.25, 0.35, 0.85],
    [0.85, 0.75, 0.20],
];
const COLOR_JITTER: f64 = 0.12;
const BAND_START: f64 = 0.1;
const BAND_STEP: f64 = 0.11;
const BAND_WIDTH: f64 = 0.08;

/// Shape and color family of an object class. Families are shared between
/// classes, so color alone does not identify a class.
pub fn class_style(class_id: u8) -> (ShapeKind, [f64; 3]) {
    let k = class_id.saturating_sub(1) as usize;
    let shape = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle][k % 3];
    (shape, FAMILIES[k % FAMILIES.len()])
}

/// Depth interval objects of a class are placed in.
pub fn class_depth_band(class_id: u8) -> (f64, f64) {
    let lo = BAND_START + BAND_STEP * class_id.saturating_sub(1) as f64;
    (lo, (lo + BAND_WIDTH).min(0.99))
}

/// Draws the object layout of one scene.
pub fn gen_scene_descriptor(seed: u64, scene_id: u64, cfg: &SceneConfig) -> SceneDescriptor {
    assert!(cfg.classes >= 2, "scenes need background plus at least one object class");
    let mut rng = item_rng(seed, scene_id);
    let g = rng.gen_range(0.15..0.35);
    let background = [g + rng.gen_range(-0.03..0.03), g, g + rng.gen_range(-0.03..0.03)];
    let count = rng.gen_range(1..=cfg.max_objects.max(1));
    let (h, w) = (cfg.h as f64, cfg.w as f64);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    while objects.len() < count {
        let class_id = rng.gen_range(1..cfg.classes) as u8;
        let (shape, family) = class_style(class_id);
        let (lo, hi) = class_depth_band(class_id);
        let depth_plane = rng.gen_range(lo..hi);
        let base_color = family.map(|c| (c + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0));
        let height = rng.gen_range(0.25..0.6) * h;
        let width = rng.gen_range(0.25..0.6) * w;
        let top = rng.gen_range(0.0..h - height);
        let left = rng.gen_range(0.0..w - width);
        if objects.iter().any(|o| o.depth_plane == depth_plane) {
            continue;
        }
        objects.push(SceneObject {
            shape,
            class_id,
            base_color,
            depth_plane,
            top,
            left,
            height,
            width,
        });
    }
    SceneDescriptor {
        scene_id,
        background,
        objects,
    }
}

/// Brightness falls off with depth; a mild vertical gradient adds texture.
fn shade(depth: f64, v: f64) -> f64 {
    (1.15 - 0.5 * depth) * (0.92 + 0.08 * v)
}

/// Rasterizes a descriptor. Each pixel takes the nearest covering object.
pub fn render_scene(desc: &SceneDescriptor, cfg: &SceneConfig) -> TripletSample {
    let (h, w) = (cfg.h, cfg.w);
    let plane = h * w;
    let mut rgb = vec![0f32; 3 * plane];
    let mut depth = vec![1f32; plane];
    let mut seg = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let front = desc
                .objects
                .iter()
                .filter(|o| o.shape.covers(o, cy, cx))
                .min_by(|a, b| a.depth_plane.total_cmp(&b.depth_plane));
            let p = y * w + x;
            let color = match front {
                Some(o) => {
                    seg[p] = o.class_id;
                    depth[p] = o.depth_plane as f32;
                    let v = (cy - o.top) / o.height;
                    o.base_color.map(|c| (c * shade(o.depth_plane, v)).clamp(0.0, 1.0))
                }
                None => {
                    let v = cy / h as f64;
                    desc.background.map(|c| (c * (0.9 + 0.2 * v)).clamp(0.0, 1.0))
                }
            };
            for (ch, c) in color.iter().enumerate() {
                rgb[ch * plane + p] = *c as f32;
            }
        }
    }
    TripletSample {
        scene_id: desc.scene_id,
        rgb: Tensor::from_vec(Shape::new(1, 3, h, w), rgb).expect("sized"),
        depth: Tensor::from_vec(Shape::new(1, 1, h, w), depth).expect("sized"),
        seg,
    }
}

pub fn gen_scene_triplet(seed: u64, scene_id: u64, cfg: &SceneConfig) -> TripletSample {
    render_scene(&gen_scene_descriptor(seed, scene_id, cfg), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsSample {
    pub scene_id: u64,
    pub rgb: Tensor<f32>,
    pub seg: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdSample {
    pub scene_id: u64,
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
}

/// Two disjoint paired training sets and a test set of full triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub d_rs: Vec<RsSample>,
    pub d_rd: Vec<RdSample>,
    pub d_ds_test: Vec<TripletSample>,
}

/// Scene ids for `(rs, rd, test)` drawn from a seed-shuffled pool of
/// `n_train + n_test` distinct ids.
pub fn split_ids(n_train: usize, n_test: usize, seed: u64) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    assert!(n_train % 2 == 0, "n_train must be even");
    let mut ids: Vec<u64> = (0..(n_train + n_test) as u64).collect();
    ids.shuffle(&mut item_rng(seed, u64::MAX));
    let test = ids.split_off(n_train);
    let rd = ids.split_off(n_train / 2);
    (ids, rd, test)
}

pub fn make_splits(n_train: usize, n_test: usize, seed: u64, cfg: &SceneConfig) -> DatasetSplit {
    let (rs, rd, test) = split_ids(n_train, n_test, seed);
    let render = |ids: &[u64]| parallel::map_indexed(ids.len(), |i| gen_scene_triplet(seed, ids[i], cfg));
    DatasetSplit {
        d_rs: render(&rs)
            .into_iter()
            .map(|t| RsSample {
                scene_id: t.scene_id,
                rgb: t.rgb,
                seg: t.seg,
            })
            .collect(),
        d_rd: render(&rd)
            .into_iter()
            .map(|t| RdSample {
                scene_id: t.scene_id,
                rgb: t.rgb,
                depth: t.depth,
            })
            .collect(),
        d_ds_test: render(&test),
    }
}

pub const OPPONENT_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpponentConfig {
    pub h: usize,
    pub w: usize,
}

impl Default for OpponentConfig {
    fn default() -> Self {
        OpponentConfig { h: 32, w: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpponentSample {
    pub id: u64,
    /// `(1, 1, h, w)`, `R - G`.
    pub theta1: Tensor<f32>,
    /// `(1, 1, h, w)`, `G - B`.
    pub theta2: Tensor<f32>,
    /// `(1, 3, h, w)` RGB in `[0, 1]`.
    pub theta3: Tensor<f32>,
    pub class_label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bloom {
    Disc,
    Square,
    Triangle,
    Diamond,
    Ring,
}

/// Petal and center colors per class. Pairs of classes share a shape, so
/// color separates them, including along the blue-yellow axis that `R - G`
/// cannot see.
const OPPONENT_TEMPLATES: [(Bloom, [f64; 3], [f64; 3]); OPPONENT_CLASSES] = [
    (Bloom::Disc, [0.90, 0.20, 0.25], [0.95, 0.85, 0.20]),
    (Bloom::Disc, [0.30, 0.30, 0.90], [0.95, 0.95, 0.90]),
    (Bloom::Square, [0.95, 0.85, 0.15], [0.60, 0.30, 0.10]),
    (Bloom::Square, [0.75, 0.30, 0.85], [0.95, 0.90, 0.30]),
    (Bloom::Triangle, [0.95, 0.55, 0.10], [0.30, 0.15, 0.10]),
    (Bloom::Triangle, [0.90, 0.90, 0.95], [0.90, 0.75, 0.10]),
    (Bloom::Diamond, [0.95, 0.50, 0.70], [0.95, 0.95, 0.40]),
    (Bloom::Diamond, [0.25, 0.75, 0.85], [0.10, 0.20, 0.50]),
    (Bloom::Ring, [0.65, 0.10, 0.20], [0.95, 0.80, 0.60]),
    (Bloom::Ring, [0.95, 0.95, 0.35], [0.85, 0.35, 0.10]),
];

fn bloom_part(kind: Bloom, u: f64, v: f64) -> Option<bool> {
    // Returns Some(true) for the center, Some(false) for petals.
    let (du, dv) = (u - 0.5, v - 0.5);
    let r2 = du * du + dv * dv;
    let center = r2 <= 0.02;
    let inside = match kind {
        Bloom::Disc => r2 <= 0.25,
        Bloom::Square => du.abs() <= 0.42 && dv.abs() <= 0.42,
        Bloom::Triangle => v >= 0.05 && (u - 0.5).abs() <= 0.5 * v,
        Bloom::Diamond => du.abs() + dv.abs() <= 0.5,
        Bloom::Ring => (0.04..=0.25).contains(&r2),
    };
    if center {
        Some(true)
    } else if inside {
        Some(false)
    } else {
        None
    }
}

pub fn gen_opponent_sample(seed: u64, id: u64, cfg: &OpponentConfig) -> OpponentSample {
    let mut rng = item_rng(seed, id);
    let class_label = (id % OPPONENT_CLASSES as u64) as u8;
    let (kind, petal, center) = OPPONENT_TEMPLATES[class_label as usize];
    let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| c.map(|v| (v + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
    let petal = jitter(&mut rng, petal);
    let center = jitter(&mut rng, center);
    let leaf = [
        rng.gen_range(0.05..0.25),
        rng.gen_range(0.30..0.50),
        rng.gen_range(0.05..0.20),
    ];
    let (h, w) = (cfg.h as f64, cfg.w as f64);
    let size = rng.gen_range(0.55..0.85);
    let (bh, bw) = (size * h, size * w);
    let top = rng.gen_range(0.0..=h - bh);
    let left = rng.gen_range(0.0..=w - bw);

    let plane = cfg.h * cfg.w;
    let mut rgb = vec![0f32; 3 * plane];
    for y in 0..cfg.h {
        for x in 0..cfg.w {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let (u, v) = ((cx - left) / bw, (cy - top) / bh);
            let lit = 0.9 + 0.1 * (cy / h);
            let color = match bloom_part(kind, u, v) {
                Some(true) => center,
                Some(false) => petal.map(|c| c * lit),
                None => leaf.map(|c| c * lit),
            };
            for ch in 0..3 {
                rgb[ch * plane + y * cfg.w + x] = color[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    let theta3 = Tensor::from_vec(Shape::new(1, 3, cfg.h, cfg.w), rgb).expect("sized");
    let (theta1, theta2) = opponent_channels(&theta3);
    OpponentSample {
        id,
        theta1,
        theta2,
        theta3,
        class_label,
    }
}

/// `(R - G, G - B)` of a batch of RGB images.
pub fn opponent_channels(rgb: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let s = rgb.shape();
    assert_eq!(s.c(), 3, "opponent channels need RGB input");
    let plane = s.plane();
    let mut t1 = Vec::with_capacity(s.n() * plane);
    let mut t2 = Vec::with_capacity(s.n() * plane);
    for b in 0..s.n() {
        let x = rgb.sample(b);
        t1.extend((0..plane).map(|p| x[p] - x[plane + p]));
        t2.extend((0..plane).map(|p| x[plane + p] - x[2 * plane + p]));
    }
    let one = s.with_c(1);
    (
        Tensor::from_vec(one, t1).expect("sized"),
        Tensor::from_vec(one, t2).expect("sized"),
    )
}

/// Opponent-task sets: `(Θ1, Θ2)` pairs, `(Θ1, Θ3)` pairs, and full test samples.
#[derive(Clone, Debug, PartialEq)]
pub struct OpponentSplit {
    pub d_12: Vec<OpponentSample>,
    pub d_13: Vec<OpponentSample>,
    pub test: Vec<OpponentSample>,
}

pub fn make_opponent_splits(n_train: usize, n_test: usize, seed: u64, cfg: &OpponentConfig) -> OpponentSplit {
    let (a, b, test) = split_ids(n_train, n_test, seed);
    let gen = |ids: &[u64]| parallel::map_indexed(ids.len(), |i| gen_opponent_sample(seed, ids[i], cfg));
    OpponentSplit {
        d_12: gen(&a),
        d_13: gen(&b),
        test: gen(&test),
    }
}
