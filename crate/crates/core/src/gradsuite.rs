//! Gradient checks over every differentiable tape op and every loss, run in
//! 64-bit mode on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, LossKind, PseudoLabel};
use crate::tensor::{grad_check, CeTarget, GradCheckReport, NormStats, Result, Shape, Tape, Tensor, Var};

/// Largest relative error the suite accepts.
pub const SUITE_TOLERANCE: f64 = 1e-5;
pub const SUITE_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub case: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_TOLERANCE && self.report.checked > 0
    }
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Shape>,
    /// Builds the scalar graph for one seed.
    graph: fn(u64) -> Graph,
}

/// Sums the output against fixed random weights so that every element
/// reaches the scalar with a distinct coefficient.
fn contract(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00);
    let w = tape.constant(Tensor::randn(tape.shape(y), 0.0, 1.0, &mut rng));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1abe1);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

macro_rules! elementwise {
    ($name:literal, |$t:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            shapes: vec![s(2, 2, 3, 3)],
            graph: |seed| {
                Box::new(move |$t: &mut Tape<f64>, v: &[Var]| {
                    let $x = v[0];
                    let y = $body;
                    contract($t, y, seed)
                })
            },
        }
    };
}

/// The pseudo-pair target is detached by design, so only the prediction is
/// checked; the target is a constant drawn from the seed.
fn pseudo_pair_case(name: &'static str, kind: LossKind, shape: Shape) -> Case {
    fn graph(kind: LossKind, seed: u64) -> Graph {
        Box::new(move |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a67);
            let target = t.constant(Tensor::randn(t.shape(v[0]), 0.0, 1.0, &mut rng));
            losses::pseudo_pair_term(t, kind, v[0], target, PseudoLabel::Hard)
        })
    }
    let graph: fn(u64) -> Graph = match kind {
        LossKind::L2 => |seed| graph(LossKind::L2, seed),
        LossKind::Berhu => |seed| graph(LossKind::Berhu, seed),
        LossKind::CrossEntropy => |seed| graph(LossKind::CrossEntropy, seed),
    };
    Case {
        name,
        shapes: vec![shape],
        graph,
    }
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "add",
            shapes: vec![s(2, 2, 3, 3), s(2, 2, 3, 3)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "sub",
            shapes: vec![s(2, 2, 3, 3), s(2, 2, 3, 3)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.sub(v[0], v[1])?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "mul",
            shapes: vec![s(2, 2, 3, 3), s(2, 2, 3, 3)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.mul(v[0], v[1])?;
                contract(t, y, seed)
            }),
        },
        elementwise!("scale", |t, x| t.scale(x, -1.7)),
        elementwise!("add_scalar", |t, x| t.add_scalar(x, 0.3)),
        elementwise!("relu", |t, x| t.relu(x)),
        elementwise!("leaky_relu", |t, x| t.leaky_relu(x, 0.2)),
        elementwise!("sigmoid", |t, x| t.sigmoid(x)),
        elementwise!("tanh", |t, x| t.tanh(x)),
        elementwise!("square", |t, x| t.square(x)),
        elementwise!("softmax_channels", |t, x| t.softmax_channels(x)),
        elementwise!("sample_norm", |t, x| t.sample_norm(x)),
        elementwise!("berhu_op", |t, x| t.berhu(x)),
        Case {
            name: "sum",
            shapes: vec![s(2, 2, 3, 3)],
            graph: |_| Box::new(|t, v| {
                let q = t.square(v[0]);
                Ok(t.sum(q))
            }),
        },
        Case {
            name: "mean",
            shapes: vec![s(2, 2, 3, 3)],
            graph: |_| Box::new(|t, v| {
                let q = t.tanh(v[0]);
                let q = t.square(q);
                Ok(t.mean(q))
            }),
        },
        Case {
            name: "conv2d_s1p1",
            shapes: vec![s(2, 2, 5, 5), s(3, 2, 3, 3), s(1, 3, 1, 1)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "conv2d_s2p1",
            shapes: vec![s(1, 2, 6, 6), s(2, 2, 4, 4), s(1, 2, 1, 1)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "maxpool2d",
            shapes: vec![s(2, 2, 4, 4)],
            graph: |seed| Box::new(move |t, v| {
                let (y, _) = t.maxpool2d(v[0], 2, 2)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "unpool",
            shapes: vec![s(2, 2, 2, 2)],
            graph: |seed| Box::new(move |t, v| {
                // Indices come from pooling a fixed map; gradient flows through values only.
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9001);
                let src = t.constant(Tensor::randn(s(2, 2, 4, 4), 0.0, 1.0, &mut rng));
                let (_, idx) = t.maxpool2d(src, 2, 2)?;
                let y = t.unpool(v[0], &idx, (4, 4))?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "upsample_nearest",
            shapes: vec![s(2, 2, 2, 3)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.upsample_nearest(v[0], 2)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "concat_channels",
            shapes: vec![s(2, 1, 3, 3), s(2, 2, 3, 3)],
            graph: |seed| Box::new(move |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "batch_norm_batch",
            shapes: vec![s(3, 2, 2, 2), s(1, 2, 1, 1), s(1, 2, 1, 1)],
            graph: |seed| Box::new(move |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &NormStats::Batch)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "batch_norm_fixed",
            shapes: vec![s(2, 2, 2, 2), s(1, 2, 1, 1), s(1, 2, 1, 1)],
            graph: |seed| Box::new(move |t, v| {
                let stats = NormStats::Fixed {
                    mean: vec![0.1, -0.3],
                    var: vec![0.5, 2.0],
                };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &stats)?;
                contract(t, y, seed)
            }),
        },
        Case {
            name: "softmax_cross_entropy_labels",
            shapes: vec![s(2, 4, 2, 2)],
            graph: |seed| Box::new(move |t, v| t.softmax_cross_entropy(v[0], CeTarget::Labels(labels(seed, 8, 4)))),
        },
        Case {
            name: "softmax_cross_entropy_soft",
            shapes: vec![s(2, 3, 2, 2)],
            graph: |seed| Box::new(move |t, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x50f7);
                let raw = t.constant(Tensor::randn(s(2, 3, 2, 2), 0.0, 1.0, &mut rng));
                let p = t.softmax_channels(raw);
                let target = t.value(p).clone();
                t.softmax_cross_entropy(v[0], CeTarget::Soft(target))
            }),
        },
        Case {
            name: "loss_l2",
            shapes: vec![s(2, 3, 3, 3), s(2, 3, 3, 3)],
            graph: |_| Box::new(|t, v| losses::l2(t, v[0], v[1])),
        },
        Case {
            name: "loss_berhu",
            shapes: vec![s(2, 1, 4, 4), s(2, 1, 4, 4)],
            graph: |_| Box::new(|t, v| losses::berhu(t, v[0], v[1])),
        },
        Case {
            name: "loss_cross_entropy",
            shapes: vec![s(2, 5, 3, 3)],
            graph: |seed| Box::new(move |t, v| losses::cross_entropy(t, v[0], CeTarget::Labels(labels(seed, 18, 5)))),
        },
        Case {
            name: "loss_lsgan_generator",
            shapes: vec![s(2, 1, 2, 2), s(2, 1, 2, 2)],
            graph: |_| Box::new(|t, v| losses::lsgan_generator(t, &[v[0], v[1]])),
        },
        Case {
            name: "loss_lsgan_discriminator",
            shapes: vec![s(2, 1, 2, 2), s(2, 1, 2, 2)],
            graph: |_| Box::new(|t, v| losses::lsgan_discriminator(t, &[v[0]], &[v[1]])),
        },
        pseudo_pair_case("loss_pseudo_pair_l2", LossKind::L2, s(2, 3, 2, 2)),
        pseudo_pair_case("loss_pseudo_pair_berhu", LossKind::Berhu, s(2, 1, 3, 3)),
        pseudo_pair_case("loss_pseudo_pair_ce", LossKind::CrossEntropy, s(2, 4, 2, 2)),
        Case {
            name: "conv_pool_mean_pipeline",
            shapes: vec![s(2, 1, 6, 6), s(2, 1, 3, 3), s(1, 2, 1, 1)],
            graph: |_| Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let y = t.relu(y);
                let (y, _) = t.maxpool2d(y, 2, 2)?;
                Ok(t.mean(y))
            }),
        },
    ]
}

/// Runs every case once per seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64> + Clone) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for case in cases() {
        for seed in seeds.clone() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|&sh| Tensor::randn(sh, 0.0, 1.0, &mut rng)).collect();
            let report = grad_check((case.graph)(seed), &inputs, SUITE_EPS)?;
            out.push(SuiteResult {
                case: case.name,
                seed,
                report,
            });
        }
    }
    Ok(out)
}

/// Names of every case in the suite.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}
