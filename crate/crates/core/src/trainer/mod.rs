//! The staged training schedule, pseudo-pair updates, alignment monitoring
//! and checkpoints.
//!
//! A task has an anchor modality and two partners. One paired set couples the
//! anchor with the first partner, the other couples it with the second; the
//! partners never appear together during training. In the scene task the
//! anchor is RGB, the first partner segmentation and the second depth.

mod checkpoint;
pub mod eval;

use std::collections::{BTreeMap, BTreeSet};

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, OpponentSample, OpponentSplit, TripletSample};
use crate::losses::{self, LossKind, LossReport, LossTerms, LossWeights, PseudoLabel, Slot, Term};
use crate::networks::{
    self, apply_stat_updates, group_grads, Decoded, LatentVar, MmNets, Modality, ModalitySpec, NetError,
    ParamStore, Session,
};
use crate::tensor::{AdamConfig, AdamState, CeTarget, Real, Shape, Tensor, TensorError, Var};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid data: {0}")]
    Data(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Modalities, loss kinds and the adversarial slot of a three-modality task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// Indexed by [`Slot::index`].
    pub specs: [ModalitySpec; 3],
    pub kinds: [LossKind; 3],
    /// Slot whose decoder outputs the critic judges.
    pub adversarial: Option<Slot>,
}

impl TaskSpec {
    /// RGB anchor, segmentation with `classes` labels, depth.
    pub fn scenes(classes: usize) -> Self {
        TaskSpec {
            specs: [ModalitySpec::rgb(), ModalitySpec::seg(classes), ModalitySpec::depth()],
            kinds: [LossKind::L2, LossKind::CrossEntropy, LossKind::Berhu],
            adversarial: Some(Slot::Anchor),
        }
    }

    /// `Θ1` anchor, `Θ2` and `Θ3` partners, all compared with L2.
    pub fn opponent() -> Self {
        TaskSpec {
            specs: [ModalitySpec::theta1(), ModalitySpec::theta2(), ModalitySpec::theta3()],
            kinds: [LossKind::L2; 3],
            adversarial: Some(Slot::Second),
        }
    }

    pub fn modality(&self, slot: Slot) -> Modality {
        self.specs[slot.index()].modality
    }

    pub fn l2_slots(&self) -> [bool; 3] {
        self.kinds.map(|k| k == LossKind::L2)
    }

    pub fn build_nets(&self, arch: &networks::ArchConfig, seed: u64) -> Result<MmNets<f32>> {
        let adv = self.adversarial.map(|s| self.modality(s));
        Ok(MmNets::build(&self.specs, arch, adv, seed)?)
    }
}

/// One modality of a set of samples: the encoder input and, for label
/// modalities, the per-pixel class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityData<T> {
    /// `(n, c, h, w)`; one-hot for label modalities.
    pub input: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> ModalityData<T> {
    pub fn dense(input: Tensor<T>) -> Self {
        ModalityData { input, labels: None }
    }

    /// One-hot encodes `(n, h, w)` labels over `classes` channels.
    pub fn from_labels(labels: Vec<usize>, n: usize, classes: usize, h: usize, w: usize) -> Result<Self> {
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(TrainError::Data(format!("{} labels for {n} maps of {h}x{w}", labels.len())));
        }
        let mut data = vec![T::zero(); n * classes * plane];
        for (i, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(TrainError::Data(format!("label {k} outside 0..{classes}")));
            }
            let (b, p) = (i / plane, i % plane);
            data[(b * classes + k) * plane + p] = T::one();
        }
        Ok(ModalityData {
            input: Tensor::from_vec(Shape::new(n, classes, h, w), data)?,
            labels: Some(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.input.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        let plane = self.input.shape().plane();
        ModalityData {
            input: self.input.gather_samples(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().flat_map(|&i| l[i * plane..(i + 1) * plane].iter().copied()).collect()),
        }
    }

    pub fn cast<U: Real>(&self) -> ModalityData<U> {
        ModalityData {
            input: self.input.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Anchor samples and their partner-modality counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSet<T> {
    pub anchor: ModalityData<T>,
    pub partner: ModalityData<T>,
}

impl<T: Real> PairedSet<T> {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        PairedSet {
            anchor: self.anchor.gather(idx),
            partner: self.partner.gather(idx),
        }
    }

    pub fn cast<U: Real>(&self) -> PairedSet<U> {
        PairedSet {
            anchor: self.anchor.cast(),
            partner: self.partner.cast(),
        }
    }
}

/// Training sets for both pairings plus test samples with all three
/// modalities aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    /// Anchor with the first partner.
    pub first: PairedSet<f32>,
    /// Anchor with the second partner.
    pub second: PairedSet<f32>,
    /// Indexed by [`Slot::index`].
    pub test: [ModalityData<f32>; 3],
    /// Class of each test sample, when the task has one.
    pub test_classes: Option<Vec<usize>>,
}

fn stack_field<'a>(items: impl Iterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = items.collect();
    Ok(Tensor::stack(&parts)?)
}

fn label_data(samples: &[&Vec<u8>], classes: usize, h: usize, w: usize) -> Result<ModalityData<f32>> {
    let labels = samples.iter().flat_map(|s| s.iter().map(|&k| k as usize)).collect();
    ModalityData::from_labels(labels, samples.len(), classes, h, w)
}

impl TaskData {
    pub fn from_scenes(split: &DatasetSplit, classes: usize) -> Result<Self> {
        if split.d_rs.is_empty() || split.d_rd.is_empty() || split.d_ds_test.is_empty() {
            return Err(TrainError::Data("every split must hold at least one scene".into()));
        }
        let s = split.d_rs[0].rgb.shape();
        let (h, w) = (s.h(), s.w());
        let test: &[TripletSample] = &split.d_ds_test;
        Ok(TaskData {
            first: PairedSet {
                anchor: ModalityData::dense(stack_field(split.d_rs.iter().map(|x| &x.rgb))?),
                partner: label_data(&split.d_rs.iter().map(|x| &x.seg).collect::<Vec<_>>(), classes, h, w)?,
            },
            second: PairedSet {
                anchor: ModalityData::dense(stack_field(split.d_rd.iter().map(|x| &x.rgb))?),
                partner: ModalityData::dense(stack_field(split.d_rd.iter().map(|x| &x.depth))?),
            },
            test: [
                ModalityData::dense(stack_field(test.iter().map(|x| &x.rgb))?),
                label_data(&test.iter().map(|x| &x.seg).collect::<Vec<_>>(), classes, h, w)?,
                ModalityData::dense(stack_field(test.iter().map(|x| &x.depth))?),
            ],
            test_classes: None,
        })
    }

    pub fn from_opponent(split: &OpponentSplit) -> Result<Self> {
        if split.d_12.is_empty() || split.d_13.is_empty() || split.test.is_empty() {
            return Err(TrainError::Data("every split must hold at least one sample".into()));
        }
        let dense = |v: &[OpponentSample], f: fn(&OpponentSample) -> &Tensor<f32>| {
            stack_field(v.iter().map(f)).map(ModalityData::dense)
        };
        Ok(TaskData {
            first: PairedSet {
                anchor: dense(&split.d_12, |s| &s.theta1)?,
                partner: dense(&split.d_12, |s| &s.theta2)?,
            },
            second: PairedSet {
                anchor: dense(&split.d_13, |s| &s.theta1)?,
                partner: dense(&split.d_13, |s| &s.theta3)?,
            },
            test: [
                dense(&split.test, |s| &s.theta1)?,
                dense(&split.test, |s| &s.theta2)?,
                dense(&split.test, |s| &s.theta3)?,
            ],
            test_classes: Some(split.test.iter().map(|s| s.class_label as usize).collect()),
        })
    }

    /// The first `n` test samples.
    pub fn test_subset(&self, n: usize) -> [ModalityData<f32>; 3] {
        let idx: Vec<usize> = (0..n.min(self.test[0].len())).collect();
        self.test.clone().map(|m| m.gather(&idx))
    }
}

/// One training stage of the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage_id: u8,
    pub iterations: u64,
    pub lr: f64,
    pub weights: LossWeights,
    pub autoencoders: bool,
    pub latent_consistency: bool,
    pub noise_sigma: f64,
    pub pseudo_pairs: bool,
    /// Parameter groups left untouched during the stage.
    pub frozen: BTreeSet<String>,
}

pub const DESK_ITERATIONS: [u64; 3] = [2000, 2000, 1000];
pub const DESK_BATCH: usize = 6;

impl StageConfig {
    /// Stage `id` (1 to 3) of the standard schedule with `anchor` as the
    /// frozen encoder from stage 2 on.
    pub fn standard(id: u8, iterations: u64, anchor: Modality) -> Self {
        let frozen: BTreeSet<String> = [networks::encoder_group(anchor)].into_iter().collect();
        match id {
            1 => StageConfig {
                stage_id: 1,
                iterations,
                lr: 2e-4,
                weights: LossWeights::stage1(),
                autoencoders: false,
                latent_consistency: false,
                noise_sigma: 0.0,
                pseudo_pairs: false,
                frozen: BTreeSet::new(),
            },
            2 => StageConfig {
                stage_id: 2,
                iterations,
                lr: 2e-4,
                weights: LossWeights::stage2(),
                autoencoders: true,
                latent_consistency: true,
                noise_sigma: 0.5,
                pseudo_pairs: false,
                frozen,
            },
            _ => StageConfig {
                stage_id: 3,
                iterations,
                lr: 2e-5,
                weights: LossWeights::stage3(),
                autoencoders: true,
                latent_consistency: true,
                noise_sigma: 0.5,
                pseudo_pairs: true,
                frozen,
            },
        }
    }

    /// All three stages with the given per-stage iteration counts.
    pub fn schedule(iterations: [u64; 3], anchor: Modality) -> Vec<StageConfig> {
        (1..=3).map(|id| Self::standard(id, iterations[id as usize - 1], anchor)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Schedule(format!("stage {}: {m}", self.stage_id)));
        if !(1..=3).contains(&self.stage_id) {
            return bad("stage id must be 1, 2 or 3".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        self.weights.validate().or_else(|m| bad(m))
    }
}

/// Checks ordering and that every frozen name is a real group.
pub fn validate_schedule(stages: &[StageConfig], store: &ParamStore<f32>) -> Result<()> {
    if stages.is_empty() {
        return Err(TrainError::Schedule("no stages".into()));
    }
    let groups: BTreeSet<String> = store.groups().into_iter().collect();
    let mut last = 0;
    for st in stages {
        st.validate()?;
        if st.stage_id < last {
            return Err(TrainError::Schedule(format!(
                "stage {} follows stage {last}; stages must be ordered",
                st.stage_id
            )));
        }
        last = st.stage_id;
        if let Some(g) = st.frozen.iter().find(|g| !groups.contains(*g)) {
            return Err(TrainError::Schedule(format!("stage {}: unknown frozen group {g}", st.stage_id)));
        }
    }
    Ok(())
}

/// Mean cosine similarity between latent features of each encoder pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Anchor with the first partner.
    pub af_rs: f64,
    /// Anchor with the second partner.
    pub af_rd: f64,
    /// Second partner with the first.
    pub af_ds: f64,
}

impl AlignmentReport {
    pub fn mean(&self) -> f64 {
        (self.af_rs + self.af_rd + self.af_ds) / 3.0
    }
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub stage: u8,
    pub report: LossReport,
    pub weights: LossWeights,
    pub alignment: Option<AlignmentReport>,
}

pub const LOG_HEADER: &str = "iteration,stage,loss_total,loss_rgb,loss_seg,loss_depth,loss_lat,loss_pp,af_rs,af_rd,af_ds";

impl LogRow {
    /// CSV line matching [`LOG_HEADER`]; absent values are empty fields.
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let t = &self.report.terms;
        let af = self.alignment;
        [
            self.iteration.to_string(),
            self.stage.to_string(),
            format!("{:.6}", self.report.total),
            opt(self.report.slot_value(Slot::Anchor, &self.weights)),
            opt(self.report.slot_value(Slot::First, &self.weights)),
            opt(self.report.slot_value(Slot::Second, &self.weights)),
            opt(t.get(Term::Latent)),
            opt(t.get(Term::PseudoPair)),
            opt(af.map(|a| a.af_rs)),
            opt(af.map(|a| a.af_rd)),
            opt(af.map(|a| a.af_ds)),
        ]
        .join(",")
    }
}

/// How often to write log rows and measure alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorConfig {
    /// Log every this many iterations; stage ends are always logged.
    pub log_every: u64,
    /// Test samples used for alignment measurements.
    pub samples: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            log_every: 100,
            samples: 32,
        }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub nets: MmNets<f32>,
    pub task: TaskSpec,
    /// One optimizer per parameter group.
    pub adam: BTreeMap<String, AdamState<f32>>,
    /// Iterations completed across all stages.
    pub iteration: u64,
    pub batch: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<LogRow>,
}

impl TrainState {
    pub fn new(task: TaskSpec, arch: &networks::ArchConfig, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(TrainError::Schedule("batch size must be positive".into()));
        }
        let nets = task.build_nets(arch, seed)?;
        let adam = nets
            .store
            .groups()
            .into_iter()
            .map(|g| {
                let params = nets.store.params().iter().filter(|p| p.group == g).map(|p| &p.value);
                let st = AdamState::new(AdamConfig::default(), params);
                (g, st)
            })
            .collect();
        // The sampling stream is separate from the one that initialized weights.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(TrainState {
            nets,
            task,
            adam,
            iteration: 0,
            batch,
            rng,
            history: Vec::new(),
        })
    }

    /// Adam step for `group` with gradients from a finished backward pass.
    fn step_group(&mut self, group: &str, lr: f64, grads: Vec<Option<&[f32]>>) {
        let st = self.adam.get_mut(group).expect("optimizer per group");
        st.config.lr = lr;
        let mut params: Vec<&mut Tensor<f32>> = self
            .nets
            .store
            .params_mut()
            .iter_mut()
            .filter(|p| p.group == group)
            .map(|p| &mut p.value)
            .collect();
        st.step(&mut params, &grads);
    }
}

/// A batch from each paired set.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub first: PairedSet<T>,
    pub second: PairedSet<T>,
}

impl<T: Real> Batch<T> {
    fn slot_samples(&self, slot: Slot) -> Vec<&ModalityData<T>> {
        match slot {
            Slot::Anchor => vec![&self.first.anchor, &self.second.anchor],
            Slot::First => vec![&self.first.partner],
            Slot::Second => vec![&self.second.partner],
        }
    }
}

pub fn sample_batch<R: Rng>(data: &TaskData, batch: usize, rng: &mut R) -> Batch<f32> {
    let mut pick = |set: &PairedSet<f32>| {
        let idx = index::sample(rng, set.len(), batch.min(set.len())).into_vec();
        set.gather(&idx)
    };
    let first = pick(&data.first);
    let second = pick(&data.second);
    Batch { first, second }
}

/// A training target on the tape.
struct Target {
    var: Var,
    labels: Option<Vec<usize>>,
}

fn slot_loss<T: Real>(s: &mut Session<'_, T>, kind: LossKind, out: &Decoded, target: &Target) -> Result<Var> {
    Ok(match kind {
        LossKind::L2 => losses::l2(&mut s.tape, out.out, target.var)?,
        LossKind::Berhu => losses::berhu(&mut s.tape, out.out, target.var)?,
        LossKind::CrossEntropy => {
            let labels = target
                .labels
                .clone()
                .ok_or_else(|| TrainError::Data("cross-entropy slot without labels".into()))?;
            losses::cross_entropy(&mut s.tape, out.pre, CeTarget::Labels(labels))?
        }
    })
}

fn sum_vars<T: Real>(s: &mut Session<'_, T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = s.tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Tape handles of one generator pass.
pub struct GeneratorGraph {
    pub terms: Vec<(Term, Var)>,
    pub total: Var,
    /// Outputs in the adversarial slot's modality.
    pub fakes: Vec<Var>,
}

/// Records the generator objective of one iteration: translations in both
/// directions on both paired sets, plus autoencoders, latent consistency and
/// the adversarial term as the stage enables them.
pub fn generator_graph<T: Real, R: Rng>(
    s: &mut Session<'_, T>,
    nets: &MmNets<T>,
    task: &TaskSpec,
    stage: &StageConfig,
    batch: &Batch<T>,
    rng: &mut R,
) -> Result<GeneratorGraph> {
    let [ma, mp, mq] = [Slot::Anchor, Slot::First, Slot::Second].map(|sl| task.modality(sl));
    let [ka, kp, kq] = task.kinds;
    let sigma = stage.noise_sigma;
    let target = |s: &mut Session<'_, T>, d: &ModalityData<T>| Target {
        var: s.tape.constant(d.input.clone()),
        labels: d.labels.clone(),
    };
    let a1 = target(s, &batch.first.anchor);
    let p = target(s, &batch.first.partner);
    let a2 = target(s, &batch.second.anchor);
    let q = target(s, &batch.second.partner);

    let (enc_a, enc_p, enc_q) = (nets.encoder(ma)?, nets.encoder(mp)?, nets.encoder(mq)?);
    let (dec_a, dec_p, dec_q) = (nets.decoder(ma)?, nets.decoder(mp)?, nets.decoder(mq)?);
    let la1 = enc_a.forward(s, a1.var, Some((sigma, &mut *rng)))?;
    let lp = enc_p.forward(s, p.var, Some((sigma, &mut *rng)))?;
    let la2 = enc_a.forward(s, a2.var, Some((sigma, &mut *rng)))?;
    let lq = enc_q.forward(s, q.var, Some((sigma, &mut *rng)))?;

    let adv = task.adversarial;
    let mut fakes = Vec::new();
    let mut decode = |s: &mut Session<'_, T>, slot: Slot, code: &LatentVar| -> Result<Decoded> {
        let dec = [dec_a, dec_p, dec_q][slot.index()];
        let d = dec.forward(s, code)?;
        if adv == Some(slot) {
            fakes.push(d.out);
        }
        Ok(d)
    };

    let mut terms = Vec::new();
    // Cross-modal translations.
    let d = decode(s, Slot::First, &la1)?;
    let t_first = slot_loss(s, kp, &d, &p)?;
    let d = decode(s, Slot::Second, &la2)?;
    let t_second = slot_loss(s, kq, &d, &q)?;
    let d = decode(s, Slot::Anchor, &lp)?;
    let from_p = slot_loss(s, ka, &d, &a1)?;
    let d = decode(s, Slot::Anchor, &lq)?;
    let from_q = slot_loss(s, ka, &d, &a2)?;
    let t_anchor = sum_vars(s, &[from_p, from_q])?;
    terms.push((Term::Translation(Slot::Anchor), t_anchor));
    terms.push((Term::Translation(Slot::First), t_first));
    terms.push((Term::Translation(Slot::Second), t_second));

    if stage.autoencoders {
        let d = decode(s, Slot::Anchor, &la1)?;
        let r1 = slot_loss(s, ka, &d, &a1)?;
        let d = decode(s, Slot::Anchor, &la2)?;
        let r2 = slot_loss(s, ka, &d, &a2)?;
        let ae_a = sum_vars(s, &[r1, r2])?;
        let d = decode(s, Slot::First, &lp)?;
        let ae_p = slot_loss(s, kp, &d, &p)?;
        let d = decode(s, Slot::Second, &lq)?;
        let ae_q = slot_loss(s, kq, &d, &q)?;
        terms.push((Term::Autoencoder(Slot::Anchor), ae_a));
        terms.push((Term::Autoencoder(Slot::First), ae_p));
        terms.push((Term::Autoencoder(Slot::Second), ae_q));
    }

    if stage.latent_consistency {
        let l1 = losses::l2(&mut s.tape, la1.clean, lp.clean)?;
        let l2 = losses::l2(&mut s.tape, la2.clean, lq.clean)?;
        terms.push((Term::Latent, sum_vars(s, &[l1, l2])?));
    }

    if let (Some(slot), Some(critic)) = (adv, nets.discriminator()) {
        let mut scores = Vec::with_capacity(fakes.len());
        for &f in &fakes {
            scores.push(critic.forward(s, f)?);
        }
        terms.push((Term::Adversarial(slot), losses::lsgan_generator(&mut s.tape, &scores)?));
    }

    let total = losses::weighted_total(&mut s.tape, &terms, &stage.weights, task.l2_slots())?;
    Ok(GeneratorGraph { terms, total, fakes })
}

/// Records the unweighted pseudo-pair loss. Partner-to-partner translations
/// are trained towards the detached output of the anchor translators:
/// `T_PQ(p)` against `T_AQ(a)` on the first set and `T_QP(q)` against
/// `T_AP(a)` on the second.
pub fn pseudo_pair_graph<T: Real, R: Rng>(
    s: &mut Session<'_, T>,
    nets: &MmNets<T>,
    task: &TaskSpec,
    batch: &Batch<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<Var> {
    let [ma, mp, mq] = [Slot::Anchor, Slot::First, Slot::Second].map(|sl| task.modality(sl));
    let [_, kp, kq] = task.kinds;
    let enc_a = nets.encoder(ma)?;
    let (dec_p, dec_q) = (nets.decoder(mp)?, nets.decoder(mq)?);

    let a1 = s.tape.constant(batch.first.anchor.input.clone());
    let p = s.tape.constant(batch.first.partner.input.clone());
    let a2 = s.tape.constant(batch.second.anchor.input.clone());
    let q = s.tape.constant(batch.second.partner.input.clone());
    // Targets come from the noise-free anchor code.
    let la1 = enc_a.forward::<T, R>(s, a1, None)?;
    let la2 = enc_a.forward::<T, R>(s, a2, None)?;
    let lp = nets.encoder(mp)?.forward(s, p, Some((sigma, &mut *rng)))?;
    let lq = nets.encoder(mq)?.forward(s, q, Some((sigma, &mut *rng)))?;

    let term = |s: &mut Session<'_, T>, kind: LossKind, target: Decoded, pred: Decoded| -> Result<Var> {
        let pred = if kind == LossKind::CrossEntropy { pred.pre } else { pred.out };
        Ok(losses::pseudo_pair_term(&mut s.tape, kind, pred, target.out, PseudoLabel::Hard)?)
    };
    let tq = dec_q.forward(s, &la1)?;
    let pq = dec_q.forward(s, &lp)?;
    let on_first = term(s, kq, tq, pq)?;
    let tp = dec_p.forward(s, &la2)?;
    let qp = dec_p.forward(s, &lq)?;
    let on_second = term(s, kp, tp, qp)?;
    sum_vars(s, &[on_first, on_second])
}

fn groups_except(store: &ParamStore<f32>, skip: impl Fn(&str) -> bool) -> Vec<String> {
    store.groups().into_iter().filter(|g| !skip(g)).collect()
}

fn generator_groups(state: &TrainState, stage: &StageConfig) -> Vec<String> {
    let critic = state.nets.discriminator().map(|d| d.group().to_string());
    groups_except(&state.nets.store, |g| {
        stage.frozen.contains(g) || critic.as_deref() == Some(g)
    })
}

/// One generator step followed by one critic step. Returns the unweighted
/// term values.
fn train_step(state: &mut TrainState, stage: &StageConfig, batch: &Batch<f32>) -> Result<LossTerms> {
    let trainable = generator_groups(state, stage);
    let mut s = Session::training(&state.nets.store, &trainable);
    let g = generator_graph(&mut s, &state.nets, &state.task, stage, batch, &mut state.rng)?;
    let terms: Vec<(Term, f64)> = g.terms.iter().map(|&(t, v)| (t, s.tape.scalar(v) as f64)).collect();
    let fakes: Vec<Tensor<f32>> = g.fakes.iter().map(|&f| s.tape.value(f).clone()).collect();
    let (tape, bound, updates) = s.into_parts();
    let grads = tape.backward(g.total)?;
    drop(tape);
    for group in &trainable {
        let ids = state.nets.store.group_ids(group);
        state.step_group(group, stage.lr, group_grads(&ids, &bound, &grads));
    }
    apply_stat_updates(&mut state.nets.store, &updates);

    if let (Some(slot), Some(critic)) = (state.task.adversarial, state.nets.discriminator().cloned()) {
        let group = critic.group().to_string();
        let mut s = Session::training(&state.nets.store, [group.as_str()]);
        let mut real = Vec::new();
        for d in batch.slot_samples(slot) {
            let x = s.tape.constant(d.input.clone());
            real.push(critic.forward(&mut s, x)?);
        }
        let mut fake = Vec::new();
        for f in fakes {
            let x = s.tape.constant(f);
            fake.push(critic.forward(&mut s, x)?);
        }
        let loss = losses::lsgan_discriminator(&mut s.tape, &real, &fake)?;
        let (tape, bound, _) = s.into_parts();
        let grads = tape.backward(loss)?;
        let ids = state.nets.store.group_ids(&group);
        state.step_group(&group, stage.lr, group_grads(&ids, &bound, &grads));
    }

    Ok(LossTerms {
        values: terms,
        l2_slots: state.task.l2_slots(),
    })
}

/// Trains the partner encoders and decoders on pseudo-pairs with weight
/// `stage.weights.pp`. Anchor groups and frozen groups are never updated.
/// Returns the unweighted loss.
pub fn pseudo_pair_update(state: &mut TrainState, stage: &StageConfig, batch: &Batch<f32>) -> Result<f64> {
    let lambda = stage.weights.pp;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let anchor = state.task.modality(Slot::Anchor);
    let anchor_groups = [networks::encoder_group(anchor), networks::decoder_group(anchor)];
    let critic = state.nets.discriminator().map(|d| d.group().to_string());
    let trainable = groups_except(&state.nets.store, |g| {
        stage.frozen.contains(g) || anchor_groups.iter().any(|a| a == g) || critic.as_deref() == Some(g)
    });
    let mut s = Session::training(&state.nets.store, &trainable);
    let loss = pseudo_pair_graph(&mut s, &state.nets, &state.task, batch, stage.noise_sigma, &mut state.rng)?;
    let value = s.tape.scalar(loss) as f64;
    let weighted = s.tape.scale(loss, lambda as f32);
    let (tape, bound, updates) = s.into_parts();
    let grads = tape.backward(weighted)?;
    for g in &trainable {
        let ids = state.nets.store.group_ids(g);
        let gg = group_grads(&ids, &bound, &grads);
        // Groups the loss does not reach keep their optimizer state untouched.
        if gg.iter().all(Option::is_none) {
            continue;
        }
        state.step_group(g, stage.lr, gg);
    }
    apply_stat_updates(&mut state.nets.store, &updates);
    Ok(value)
}

/// Cosine similarity of two equally long vectors; 0 if either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosine similarity between matching rows of two `(n, ...)` tensors.
pub fn alignment_factor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(TrainError::Data(format!("feature shapes {} and {} differ", a.shape(), b.shape())));
    }
    let n = a.shape().n();
    if n == 0 {
        return Err(TrainError::Data("alignment needs at least one sample".into()));
    }
    let rows = |t: &Tensor<f32>, i: usize| -> Vec<f64> { t.sample(i).iter().map(|&v| v as f64).collect() };
    Ok((0..n).map(|i| cosine(&rows(a, i), &rows(b, i))).sum::<f64>() / n as f64)
}

/// Noise-free latent features of every test sample.
pub fn encode_all(nets: &MmNets<f32>, m: Modality, data: &ModalityData<f32>) -> Result<Tensor<f32>> {
    let enc = nets.encoder(m)?;
    let chunks = eval::chunks(data.len());
    let mut parts = Vec::with_capacity(chunks.len());
    for idx in chunks {
        let mut s = Session::inference(&nets.store);
        let x = s.tape.constant(data.input.gather_samples(&idx));
        let code = enc.forward::<f32, ChaCha8Rng>(&mut s, x, None)?;
        parts.push(s.tape.value(code.features).clone());
    }
    Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
}

/// Alignment factors over aligned test samples, encoded without noise.
pub fn monitor_alignment(nets: &MmNets<f32>, task: &TaskSpec, test: &[ModalityData<f32>; 3]) -> Result<AlignmentReport> {
    if test[0].is_empty() {
        return Err(TrainError::Data("alignment needs at least one test sample".into()));
    }
    let f = |slot: Slot| encode_all(nets, task.modality(slot), &test[slot.index()]);
    let (fa, fp, fq) = (f(Slot::Anchor)?, f(Slot::First)?, f(Slot::Second)?);
    Ok(AlignmentReport {
        af_rs: alignment_factor(&fa, &fp)?,
        af_rd: alignment_factor(&fa, &fq)?,
        af_ds: alignment_factor(&fq, &fp)?,
    })
}

/// Stage index and stage-local iteration of global iteration `it`, or `None`
/// past the end.
fn locate(stages: &[StageConfig], it: u64) -> Option<(usize, u64)> {
    let mut start = 0;
    for (i, st) in stages.iter().enumerate() {
        if it < start + st.iterations {
            return Some((i, it - start));
        }
        start += st.iterations;
    }
    None
}

/// Trains from `state.iteration` until the schedule ends or `stop_at`
/// iterations have completed, whichever is first. Resuming a stopped state
/// continues exactly where it left off.
pub fn run_schedule(
    state: &mut TrainState,
    stages: &[StageConfig],
    data: &TaskData,
    monitor: &MonitorConfig,
    stop_at: Option<u64>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<()> {
    validate_schedule(stages, &state.nets.store)?;
    if data.first.is_empty() || data.second.is_empty() {
        return Err(TrainError::Data("both paired training sets must be non-empty".into()));
    }
    let monitor_set = data.test_subset(monitor.samples);
    let total: u64 = stages.iter().map(|s| s.iterations).sum();
    let end = stop_at.map_or(total, |s| s.min(total));
    while state.iteration < end {
        let (si, local) = locate(stages, state.iteration).expect("iteration inside schedule");
        let stage = &stages[si];
        let batch = sample_batch(data, state.batch, &mut state.rng);
        let mut terms = train_step(state, stage, &batch)?;
        if stage.pseudo_pairs {
            let pp = pseudo_pair_update(state, stage, &batch)?;
            terms.values.push((Term::PseudoPair, pp));
        }
        state.iteration += 1;
        let stage_end = local + 1 == stage.iterations;
        let logged = stage_end || (monitor.log_every > 0 && state.iteration % monitor.log_every == 0);
        if logged {
            let alignment = if monitor_set[0].is_empty() {
                None
            } else {
                Some(monitor_alignment(&state.nets, &state.task, &monitor_set)?)
            };
            let row = LogRow {
                iteration: state.iteration,
                stage: stage.stage_id,
                report: losses::total_loss(&terms, &stage.weights),
                weights: stage.weights,
                alignment,
            };
            on_row(&row);
            state.history.push(row);
        }
    }
    Ok(())
}

/// Alignment recorded at the end of each stage, in schedule order.
pub fn stage_end_alignment(history: &[LogRow], stages: &[StageConfig]) -> Vec<Option<AlignmentReport>> {
    let mut end = 0;
    stages
        .iter()
        .map(|st| {
            end += st.iterations;
            history.iter().find(|r| r.iteration == end).and_then(|r| r.alignment)
        })
        .collect()
}
