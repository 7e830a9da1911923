//! Modality-specific encoders and decoders, the adversarial critic, and the
//! translation, fusion and counting operations built from them.
//!
//! Every network lives in one [`ParamStore`] under its own parameter group
//! (`enc.depth`, `dec.seg`, `disc.rgb`, ...). A translator is never a stored
//! object: `T_XY` is the encoder of `X` followed by the decoder of `Y`, so a
//! depth encoder used for depth-to-RGB and depth-to-segmentation is one set
//! of parameters.

mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{PoolIndices, Real, Shape, Tensor, TensorError, Var};

pub use params::{
    apply_stat_updates, group_grads, BufferId, Param, ParamId, ParamStore, RunningStats, Session, StatUpdate,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{net} expects {expected} input channels, got {got}")]
    ChannelMismatch {
        net: String,
        expected: usize,
        got: usize,
    },
    #[error("no network for modality {0}")]
    MissingModality(Modality),
    #[error("latent codes are incompatible: {0}")]
    Incompatible(String),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Depth,
    Seg,
    Theta1,
    Theta2,
    Theta3,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Rgb,
        Modality::Depth,
        Modality::Seg,
        Modality::Theta1,
        Modality::Theta2,
        Modality::Theta3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Seg => "seg",
            Modality::Theta1 => "theta1",
            Modality::Theta2 => "theta2",
            Modality::Theta3 => "theta3",
        }
    }

    /// One-letter tag used in translator names such as `D→S`.
    pub fn letter(self) -> &'static str {
        match self {
            Modality::Rgb => "R",
            Modality::Depth => "D",
            Modality::Seg => "S",
            Modality::Theta1 => "Θ1",
            Modality::Theta2 => "Θ2",
            Modality::Theta3 => "Θ3",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        let found = match lower.as_str() {
            "r" | "rgb" => Some(Modality::Rgb),
            "d" | "depth" => Some(Modality::Depth),
            "s" | "seg" | "segmentation" => Some(Modality::Seg),
            other => Modality::ALL.iter().copied().find(|m| m.name() == other),
        };
        found.ok_or_else(|| format!("unknown modality {s:?} (expected rgb, depth, seg, theta1, theta2 or theta3)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OutputActivation {
    Linear,
    /// Per-pixel softmax over channels; losses consume the logits.
    Softmax,
    /// `lo + (hi - lo) * sigmoid(x)`.
    Bounded { lo: f64, hi: f64 },
}

/// Encoder-to-decoder hints used to restore spatial detail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideInfo {
    PoolIndices,
    Skip,
    None,
}

impl FromStr for SideInfo {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pool_indices" | "indices" => Ok(SideInfo::PoolIndices),
            "skip" => Ok(SideInfo::Skip),
            "none" => Ok(SideInfo::None),
            _ => Err(format!("unknown side info {s:?} (expected pool_indices, skip or none)")),
        }
    }
}

impl fmt::Display for SideInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SideInfo::PoolIndices => "pool_indices",
            SideInfo::Skip => "skip",
            SideInfo::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub channels: usize,
    /// Always false for RGB, whose decoder only upsamples.
    pub decoder_uses_pool_indices: bool,
    pub output_activation: OutputActivation,
}

impl ModalitySpec {
    pub fn rgb() -> Self {
        ModalitySpec {
            modality: Modality::Rgb,
            channels: 3,
            decoder_uses_pool_indices: false,
            output_activation: OutputActivation::Bounded { lo: 0.0, hi: 1.0 },
        }
    }

    pub fn depth() -> Self {
        ModalitySpec {
            modality: Modality::Depth,
            channels: 1,
            decoder_uses_pool_indices: true,
            output_activation: OutputActivation::Bounded { lo: 0.0, hi: 1.0 },
        }
    }

    pub fn seg(classes: usize) -> Self {
        ModalitySpec {
            modality: Modality::Seg,
            channels: classes,
            decoder_uses_pool_indices: true,
            output_activation: OutputActivation::Softmax,
        }
    }

    pub fn theta1() -> Self {
        ModalitySpec {
            modality: Modality::Theta1,
            channels: 1,
            decoder_uses_pool_indices: true,
            output_activation: OutputActivation::Bounded { lo: -1.0, hi: 1.0 },
        }
    }

    pub fn theta2() -> Self {
        ModalitySpec {
            modality: Modality::Theta2,
            ..Self::theta1()
        }
    }

    pub fn theta3() -> Self {
        ModalitySpec {
            modality: Modality::Theta3,
            channels: 3,
            decoder_uses_pool_indices: true,
            output_activation: OutputActivation::Bounded { lo: 0.0, hi: 1.0 },
        }
    }

    /// Applies an architecture-wide side-information choice. RGB keeps its
    /// index-free decoder regardless.
    pub fn with_side_info(mut self, side: SideInfo) -> Self {
        self.decoder_uses_pool_indices = self.modality != Modality::Rgb && side == SideInfo::PoolIndices;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(NetError::Arch(format!("{} has zero channels", self.modality)));
        }
        if self.modality == Modality::Rgb && self.decoder_uses_pool_indices {
            return Err(NetError::Arch("the RGB decoder cannot use pooling indices".into()));
        }
        if let OutputActivation::Bounded { lo, hi } = self.output_activation {
            if !(lo < hi) {
                return Err(NetError::Arch(format!("{}: empty output range [{lo}, {hi}]", self.modality)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub input_hw: (usize, usize),
    pub noise_sigma: f64,
    pub init_sigma: f64,
    pub side_info: SideInfo,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stage_widths: vec![16, 32, 64],
            convs_per_stage: vec![2, 2, 2],
            input_hw: (32, 32),
            noise_sigma: 0.5,
            init_sigma: 0.02,
            side_info: SideInfo::PoolIndices,
        }
    }
}

impl ArchConfig {
    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_widths.len();
        if s < 2 || self.convs_per_stage.len() != s {
            return Err(NetError::Arch(format!(
                "need at least 2 stages with one conv count each, got {} widths and {} counts",
                s,
                self.convs_per_stage.len()
            )));
        }
        if self.stage_widths.contains(&0) || self.convs_per_stage.contains(&0) {
            return Err(NetError::Arch("stage widths and conv counts must be positive".into()));
        }
        let f = 1usize << s;
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(NetError::Arch(format!(
                "input {h}x{w} is not divisible by 2^{s} = {f}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(NetError::Arch(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(NetError::Arch(format!("init sigma {} must be finite and > 0", self.init_sigma)));
        }
        Ok(())
    }

    /// Bottleneck shape for a batch of `n`.
    pub fn latent_shape(&self, n: usize) -> Shape {
        let f = 1usize << self.stages();
        Shape::new(
            n,
            *self.stage_widths.last().expect("validated"),
            self.input_hw.0 / f,
            self.input_hw.1 / f,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Relu,
    Leaky,
    Identity,
}

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    norm: Option<(ParamId, ParamId, BufferId)>,
}

struct Builder<'s, T, R> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut R,
    group: String,
    sigma: f64,
    count: usize,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bn: bool) -> ConvLayer {
        self.count += 1;
        let stem = format!("{}.conv{}", self.group, self.count);
        let w = Tensor::randn(Shape::new(c_out, c_in, k, k), 0.0, self.sigma, self.rng);
        let weight = self.store.add(&self.group, format!("{stem}.weight"), w);
        let bias = self
            .store
            .add(&self.group, format!("{stem}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
        let norm = bn.then(|| {
            let g = self
                .store
                .add(&self.group, format!("{stem}.bn.gamma"), Tensor::full(Shape::new(1, c_out, 1, 1), T::one()));
            let b = self
                .store
                .add(&self.group, format!("{stem}.bn.beta"), Tensor::zeros(Shape::new(1, c_out, 1, 1)));
            let s = self.store.add_buffer(&self.group, format!("{stem}.bn.running"), c_out);
            (g, b, s)
        });
        ConvLayer {
            weight,
            bias,
            stride,
            pad,
            norm,
        }
    }
}

impl ConvLayer {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, act: Act) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let mut y = s.tape.conv2d(x, w, b, self.stride, self.pad)?;
        if let Some((g, beta, stats)) = self.norm {
            y = s.batch_norm(y, g, beta, stats)?;
        }
        Ok(match act {
            Act::Relu => s.tape.relu(y),
            Act::Leaky => s.tape.leaky_relu(y, T::lit(LEAKY_SLOPE)),
            Act::Identity => y,
        })
    }
}

/// Graph-level latent code: tape handles for the features plus the side
/// information the encoder captured.
#[derive(Clone, Debug)]
pub struct LatentVar {
    /// Features after noise injection.
    pub features: Var,
    /// Features before noise injection.
    pub clean: Var,
    /// One entry per stage, shallowest first.
    pub indices: Vec<Arc<PoolIndices>>,
    /// Pre-pool activations per stage, shallowest first.
    pub skips: Vec<Var>,
    pub source: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet {
    spec: ModalitySpec,
    group: String,
    stages: Vec<Vec<ConvLayer>>,
}

impl EncoderNet {
    pub fn spec(&self) -> &ModalitySpec {
        &self.spec
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    /// Runs the encoder. `noise` adds `N(0, sigma^2)` to the bottleneck after
    /// the pooling indices have been recorded.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        noise: Option<(f64, &mut R)>,
    ) -> Result<LatentVar> {
        let got = s.tape.shape(x).c();
        if got != self.spec.channels {
            return Err(NetError::ChannelMismatch {
                net: self.group.clone(),
                expected: self.spec.channels,
                got,
            });
        }
        let mut h = x;
        let mut indices = Vec::with_capacity(self.stages.len());
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for conv in stage {
                h = conv.forward(s, h, Act::Relu)?;
            }
            skips.push(h);
            let (pooled, idx) = s.tape.maxpool2d(h, 2, 2)?;
            indices.push(idx);
            h = pooled;
        }
        let clean = h;
        let features = match noise {
            Some((sigma, rng)) if sigma > 0.0 => {
                let n = Tensor::randn(s.tape.shape(clean), 0.0, sigma, rng);
                let n = s.tape.constant(n);
                s.tape.add(clean, n)?
            }
            _ => clean,
        };
        Ok(LatentVar {
            features,
            clean,
            indices,
            skips,
            source: self.spec.modality,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Mirrored decoder restoring resolution by unpooling with encoder indices.
    Unpool,
    /// Mirrored decoder with nearest upsampling and no side information.
    Upsample,
    /// Mirrored decoder with nearest upsampling and encoder features concatenated.
    Skip,
    /// One upsample and conv per stage; never reads side information.
    Compact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    spec: ModalitySpec,
    group: String,
    kind: DecoderKind,
    levels: usize,
    /// Deepest stage first. The compact kind has no entry for level 0.
    stages: Vec<Vec<ConvLayer>>,
    head: ConvLayer,
}

/// Decoder output: `pre` is the value before the output activation (the
/// logits for segmentation).
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub pre: Var,
    pub out: Var,
}

impl DecoderNet {
    pub fn spec(&self) -> &ModalitySpec {
        &self.spec
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    /// Number of 2x upsampling steps.
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, code: &LatentVar) -> Result<Decoded> {
        let depth = self.levels();
        let needs_stack = match self.kind {
            DecoderKind::Unpool => code.indices.len(),
            DecoderKind::Skip => code.skips.len(),
            _ => depth,
        };
        if needs_stack != depth {
            return Err(NetError::Incompatible(format!(
                "{} needs side information for {depth} stages, code from {} has {needs_stack}",
                self.group, code.source
            )));
        }
        let mut h = code.features;
        for (i, stage) in self.stages.iter().enumerate() {
            let level = depth - 1 - i;
            h = match self.kind {
                DecoderKind::Unpool => {
                    let idx = &code.indices[level];
                    s.tape.unpool(h, idx, idx.input_hw())?
                }
                DecoderKind::Upsample | DecoderKind::Compact => s.tape.upsample_nearest(h, 2)?,
                DecoderKind::Skip => {
                    let up = s.tape.upsample_nearest(h, 2)?;
                    s.tape.concat_channels(up, code.skips[level])?
                }
            };
            for conv in stage {
                h = conv.forward(s, h, Act::Relu)?;
            }
        }
        if self.kind == DecoderKind::Compact {
            // The compact head also performs the last upsampling step.
            h = s.tape.upsample_nearest(h, 2)?;
        }
        let pre = self.head.forward(s, h, Act::Identity)?;
        let out = match self.spec.output_activation {
            OutputActivation::Linear => pre,
            OutputActivation::Softmax => s.tape.softmax_channels(pre),
            OutputActivation::Bounded { lo, hi } => {
                let sig = s.tape.sigmoid(pre);
                let scaled = s.tape.scale(sig, T::lit(hi - lo));
                s.tape.add_scalar(scaled, T::lit(lo))
            }
        };
        Ok(Decoded { pre, out })
    }
}

/// Least-squares critic: four stride-2 convolutions with LeakyReLU and a
/// 1-channel head, no output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    channels: usize,
    group: String,
    convs: Vec<ConvLayer>,
    head: ConvLayer,
}

pub const DISC_STAGES: usize = 4;

impl Discriminator {
    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let got = s.tape.shape(x).c();
        if got != self.channels {
            return Err(NetError::ChannelMismatch {
                net: self.group.clone(),
                expected: self.channels,
                got,
            });
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(s, h, Act::Leaky)?;
        }
        self.head.forward(s, h, Act::Identity)
    }
}

pub fn encoder_group(m: Modality) -> String {
    format!("enc.{m}")
}

pub fn decoder_group(m: Modality) -> String {
    format!("dec.{m}")
}

pub fn disc_group(m: Modality) -> String {
    format!("disc.{m}")
}

/// Creates the encoder and decoder of one modality inside `store`.
pub fn build_modality_nets<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    spec: &ModalitySpec,
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<(EncoderNet, DecoderNet)> {
    spec.validate()?;
    arch.validate()?;
    let widths = &arch.stage_widths;
    let cps = &arch.convs_per_stage;
    let depth = widths.len();

    let group = encoder_group(spec.modality);
    let mut b = Builder {
        store: &mut *store,
        rng: &mut *rng,
        group: group.clone(),
        sigma: arch.init_sigma,
        count: 0,
    };
    let mut enc_stages = Vec::with_capacity(depth);
    let mut c_in = spec.channels;
    for (&w, &n) in widths.iter().zip(cps) {
        let stage = (0..n)
            .map(|i| b.conv(if i == 0 { c_in } else { w }, w, 3, 1, 1, true))
            .collect();
        enc_stages.push(stage);
        c_in = w;
    }
    let encoder = EncoderNet {
        spec: spec.clone(),
        group,
        stages: enc_stages,
    };

    let kind = if spec.modality == Modality::Rgb {
        DecoderKind::Compact
    } else if spec.decoder_uses_pool_indices {
        DecoderKind::Unpool
    } else if arch.side_info == SideInfo::Skip {
        DecoderKind::Skip
    } else {
        DecoderKind::Upsample
    };
    let group = decoder_group(spec.modality);
    let mut b = Builder {
        store,
        rng,
        group: group.clone(),
        sigma: arch.init_sigma,
        count: 0,
    };
    let mut dec_stages = Vec::with_capacity(depth);
    let mut last = widths[depth - 1];
    for level in (0..depth).rev() {
        let w = widths[level];
        let below = if level > 0 { widths[level - 1] } else { w };
        if kind == DecoderKind::Compact {
            // The shallowest level has no body conv; the head follows its upsample.
            if level > 0 {
                dec_stages.push(vec![b.conv(w, below, 3, 1, 1, true)]);
                last = below;
            }
            continue;
        }
        let n = if level == 0 { cps[0] - 1 } else { cps[level] };
        let mut c = if kind == DecoderKind::Skip { 2 * w } else { w };
        let mut convs = Vec::with_capacity(n);
        for i in 0..n {
            let out = if i + 1 == n { below } else { w };
            convs.push(b.conv(c, out, 3, 1, 1, true));
            c = out;
        }
        last = c;
        dec_stages.push(convs);
    }
    let head = b.conv(last, spec.channels, 3, 1, 1, false);
    let decoder = DecoderNet {
        spec: spec.clone(),
        group,
        kind,
        levels: depth,
        stages: dec_stages,
        head,
    };
    Ok((encoder, decoder))
}

/// Creates a critic for `channels`-channel images whose first conv width is
/// `base_width` (doubling at each of the four stages).
pub fn build_discriminator<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    modality: Modality,
    channels: usize,
    base_width: usize,
    init_sigma: f64,
    rng: &mut R,
) -> Discriminator {
    let group = disc_group(modality);
    let mut b = Builder {
        store,
        rng,
        group: group.clone(),
        sigma: init_sigma,
        count: 0,
    };
    let mut c = channels;
    let mut convs = Vec::with_capacity(DISC_STAGES);
    for i in 0..DISC_STAGES {
        let w = base_width << i;
        convs.push(b.conv(c, w, 4, 2, 1, false));
        c = w;
    }
    let head = b.conv(c, 1, 3, 1, 1, false);
    Discriminator {
        channels,
        group,
        convs,
        head,
    }
}

/// Every encoder, decoder and critic of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MmNets<T> {
    pub store: ParamStore<T>,
    arch: ArchConfig,
    encoders: BTreeMap<Modality, EncoderNet>,
    decoders: BTreeMap<Modality, DecoderNet>,
    critic: Option<Discriminator>,
}

impl<T: Real> MmNets<T> {
    /// Builds one encoder/decoder pair per spec (in order) and, if
    /// `adversarial` names one of them, a critic for that modality.
    pub fn build(specs: &[ModalitySpec], arch: &ArchConfig, adversarial: Option<Modality>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoders = BTreeMap::new();
        let mut decoders = BTreeMap::new();
        for spec in specs {
            let spec = spec.clone().with_side_info(arch.side_info);
            if encoders.contains_key(&spec.modality) {
                return Err(NetError::Arch(format!("modality {} listed twice", spec.modality)));
            }
            let (e, d) = build_modality_nets(&mut store, &spec, arch, &mut rng)?;
            encoders.insert(spec.modality, e);
            decoders.insert(spec.modality, d);
        }
        let critic = match adversarial {
            Some(m) => {
                let spec = specs
                    .iter()
                    .find(|s| s.modality == m)
                    .ok_or(NetError::MissingModality(m))?;
                Some(build_discriminator(
                    &mut store,
                    m,
                    spec.channels,
                    arch.stage_widths[0],
                    arch.init_sigma,
                    &mut rng,
                ))
            }
            None => None,
        };
        Ok(MmNets {
            store,
            arch: arch.clone(),
            encoders,
            decoders,
            critic,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.encoders.keys().copied().collect()
    }

    pub fn encoder(&self, m: Modality) -> Result<&EncoderNet> {
        self.encoders.get(&m).ok_or(NetError::MissingModality(m))
    }

    pub fn decoder(&self, m: Modality) -> Result<&DecoderNet> {
        self.decoders.get(&m).ok_or(NetError::MissingModality(m))
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.critic.as_ref()
    }

    pub fn spec(&self, m: Modality) -> Result<&ModalitySpec> {
        Ok(self.encoder(m)?.spec())
    }

    /// `T_{from→to}` on a batch, without noise, in inference mode.
    pub fn translate(&self, from: Modality, to: Modality, image: &Tensor<T>) -> Result<Tensor<T>> {
        translate(&self.store, self.encoder(from)?, self.decoder(to)?, image)
    }

    /// Translation through an intermediate modality, decoding and re-encoding
    /// the intermediate image.
    pub fn cascade(&self, path: &[Modality], image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = image.clone();
        for pair in path.windows(2) {
            cur = self.translate(pair[0], pair[1], &cur)?;
        }
        Ok(cur)
    }
}

/// Value-level latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub features: Tensor<T>,
    /// Shallowest stage first, deepest last.
    pub index_stack: Vec<Arc<PoolIndices>>,
    /// Pre-pool activations per stage, read only by skip decoders.
    pub skip_features: Vec<Tensor<T>>,
    pub source_modality: Modality,
}

pub fn encode<T: Real, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    enc: &EncoderNet,
    image: &Tensor<T>,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<LatentCode<T>> {
    let mut s = Session::inference(store);
    let x = s.tape.constant(image.clone());
    let code = enc.forward(&mut s, x, Some((noise_sigma, rng)))?;
    Ok(LatentCode {
        features: s.tape.value(code.features).clone(),
        index_stack: code.indices,
        skip_features: code.skips.iter().map(|&v| s.tape.value(v).clone()).collect(),
        source_modality: code.source,
    })
}

/// Decodes a code to the target modality (after the output activation).
pub fn decode<T: Real>(store: &ParamStore<T>, dec: &DecoderNet, code: &LatentCode<T>) -> Result<Tensor<T>> {
    let mut s = Session::inference(store);
    let features = s.tape.constant(code.features.clone());
    let skips = code.skip_features.iter().map(|t| s.tape.constant(t.clone())).collect();
    let lv = LatentVar {
        features,
        clean: features,
        indices: code.index_stack.clone(),
        skips,
        source: code.source_modality,
    };
    let out = dec.forward(&mut s, &lv)?.out;
    Ok(s.tape.value(out).clone())
}

/// Encoder of the source followed by decoder of the target, noise-free.
pub fn translate<T: Real>(
    store: &ParamStore<T>,
    src: &EncoderNet,
    dst: &DecoderNet,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::inference(store);
    let x = s.tape.constant(image.clone());
    let code = src.forward::<T, ChaCha8Rng>(&mut s, x, None)?;
    let out = dst.forward(&mut s, &code)?.out;
    Ok(s.tape.value(out).clone())
}

/// `(1 - alpha) * a + alpha * b`, with side information from whichever code
/// came from `indices_from`.
pub fn fuse_latents<T: Real>(
    a: &LatentCode<T>,
    b: &LatentCode<T>,
    alpha: f64,
    indices_from: Modality,
) -> Result<LatentCode<T>> {
    if a.features.shape() != b.features.shape() {
        return Err(NetError::Incompatible(format!(
            "feature shapes {} and {} differ",
            a.features.shape(),
            b.features.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NetError::Incompatible(format!("alpha {alpha} outside [0, 1]")));
    }
    let side = if a.source_modality == indices_from {
        a
    } else if b.source_modality == indices_from {
        b
    } else {
        return Err(NetError::Incompatible(format!(
            "neither code comes from {indices_from} ({} and {})",
            a.source_modality, b.source_modality
        )));
    };
    let wa = T::lit(1.0 - alpha);
    let wb = T::lit(alpha);
    let data = a
        .features
        .data()
        .iter()
        .zip(b.features.data())
        .map(|(&x, &y)| wa * x + wb * y)
        .collect();
    Ok(LatentCode {
        features: Tensor::from_vec(a.features.shape(), data)?,
        index_stack: side.index_stack.clone(),
        skip_features: side.skip_features.clone(),
        source_modality: side.source_modality,
    })
}

pub fn discriminate<T: Real>(store: &ParamStore<T>, disc: &Discriminator, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::inference(store);
    let x = s.tape.constant(image.clone());
    let y = disc.forward(&mut s, x)?;
    Ok(s.tape.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// One dedicated translator per unordered modality pair.
    Pairwise,
    /// One encoder and one decoder per modality.
    MixAndMatch,
}

/// `(encoders, decoders)` needed to translate among `n` modalities.
pub fn count_required_networks(n: usize, strategy: Strategy) -> (usize, usize) {
    match strategy {
        Strategy::Pairwise => {
            let p = n * n.saturating_sub(1) / 2;
            (p, p)
        }
        Strategy::MixAndMatch => (n, n),
    }
}

#[cfg(test)]
mod tests;
