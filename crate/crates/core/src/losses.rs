//! Loss terms and their stage-weighted combination.
//!
//! Each loss exists twice: a graph function that records onto a [`Tape`] for
//! training, and a value function over plain tensors built on the same graph
//! function.

use crate::tensor::{CeTarget, Real, Result, Tape, Tensor, TensorError, Var};

/// Mean over the batch of each sample's Euclidean norm of `pred - target`.
pub fn l2<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    let norms = tape.sample_norm(r);
    Ok(tape.mean(norms))
}

/// Reverse Huber on `pred - target` with a per-sample threshold of one fifth
/// of the largest absolute residual; pixel mean, then batch mean.
pub fn berhu<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    let per_sample = tape.berhu(r);
    Ok(tape.mean(per_sample))
}

/// Softmax cross-entropy averaged over all pixels.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, target: CeTarget<T>) -> Result<Var> {
    tape.softmax_cross_entropy(logits, target)
}

fn mean_square_offset<T: Real>(tape: &mut Tape<T>, scores: &[Var], target: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "lsgan",
            msg: "no score maps".into(),
        });
    }
    let count: usize = scores.iter().map(|&s| tape.shape(s).numel()).sum();
    let mut acc: Option<Var> = None;
    for &s in scores {
        let shifted = tape.add_scalar(s, T::lit(-target));
        let sq = tape.square(shifted);
        let part = tape.sum(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    Ok(tape.scale(acc.expect("non-empty"), T::lit(1.0 / count as f64)))
}

/// Critic objective: real maps pushed to 1, fake maps to 0. Each side is a
/// mean over all score elements of its maps.
pub fn lsgan_discriminator<T: Real>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    let r = mean_square_offset(tape, real, 1.0)?;
    let f = mean_square_offset(tape, fake, 0.0)?;
    tape.add(r, f)
}

/// Generator objective: fake maps pushed to 1.
pub fn lsgan_generator<T: Real>(tape: &mut Tape<T>, fake: &[Var]) -> Result<Var> {
    mean_square_offset(tape, fake, 1.0)
}

/// How a modality's predictions are compared to targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L2,
    Berhu,
    CrossEntropy,
}

/// How a probability map is turned into a cross-entropy target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PseudoLabel {
    /// Per-pixel argmax class.
    #[default]
    Hard,
    /// The distribution itself.
    Soft,
}

/// Class id of the largest channel per `(n, h, w)` pixel; ties go to the
/// lowest class.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let s = probs.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n() * plane);
    for b in 0..s.n() {
        let x = probs.sample(b);
        for p in 0..plane {
            let mut best = 0;
            for k in 1..s.c() {
                if x[k * plane + p] > x[best * plane + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

/// One pseudo-pair comparison: `pred` is an unseen translation with gradient,
/// `target` the output of a translator through the anchor. The target node's
/// value is copied, so nothing upstream of it receives gradient.
///
/// For cross-entropy, `pred` must be logits and `target` probabilities.
pub fn pseudo_pair_term<T: Real>(
    tape: &mut Tape<T>,
    kind: LossKind,
    pred: Var,
    target: Var,
    label: PseudoLabel,
) -> Result<Var> {
    let fixed = tape.detach(target);
    match kind {
        LossKind::L2 => l2(tape, pred, fixed),
        LossKind::Berhu => berhu(tape, pred, fixed),
        LossKind::CrossEntropy => {
            let t = match label {
                PseudoLabel::Hard => CeTarget::Labels(argmax_labels(tape.value(fixed))),
                PseudoLabel::Soft => CeTarget::Soft(tape.value(fixed).clone()),
            };
            cross_entropy(tape, pred, t)
        }
    }
}

fn with_pair<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    op: &'static str,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{}", pred.shape()),
            got: format!("{}", target.shape()),
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let v = f(&mut tape, p, t)?;
    Ok(tape.scalar(v).to_f64().unwrap_or(f64::NAN))
}

pub fn l2_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    with_pair(pred, target, "l2_loss", l2)
}

pub fn berhu_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    with_pair(pred, target, "berhu_loss", berhu)
}

/// Whether a cross-entropy input holds logits or probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scores {
    Logits,
    Probs,
}

/// Mean over pixels of `-ln p(label)`. Probabilities are floored at
/// `1e-12` before the logarithm.
pub fn cross_entropy_loss<T: Real>(pred: &Tensor<T>, labels: &[usize], scores: Scores) -> Result<f64> {
    let logits = match scores {
        Scores::Logits => pred.clone(),
        Scores::Probs => pred.map(|p| p.max(T::lit(1e-12)).ln()),
    };
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let v = cross_entropy(&mut tape, x, CeTarget::Labels(labels.to_vec()))?;
    Ok(tape.scalar(v).to_f64().unwrap_or(f64::NAN))
}

/// `(critic loss, generator loss)` for one real and one fake score map.
pub fn lsgan_losses<T: Real>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let d = lsgan_discriminator(&mut tape, &[r], &[f])?;
    let g = lsgan_generator(&mut tape, &[f])?;
    let val = |v| tape.scalar(v).to_f64().unwrap_or(f64::NAN);
    Ok((val(d), val(g)))
}

/// Mean over the batch of the distance between two latent feature maps.
pub fn latent_consistency_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    with_pair(a, b, "latent_consistency_loss", l2)
}

/// Scene pseudo-pair loss: Berhu between depth decoded from segmentation and
/// depth decoded from RGB, plus cross-entropy of segmentation decoded from
/// depth (`t_ds_z_logits`) against the labels RGB yields (`t_rs_x`).
pub fn pseudo_pair_loss<T: Real>(
    t_rd_x: &Tensor<T>,
    t_sd_y: &Tensor<T>,
    t_rs_x: &Tensor<T>,
    t_ds_z_logits: &Tensor<T>,
) -> Result<f64> {
    if t_rs_x.shape() != t_ds_z_logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "pseudo_pair_loss",
            expected: format!("{}", t_rs_x.shape()),
            got: format!("{}", t_ds_z_logits.shape()),
        });
    }
    let depth = with_pair(t_sd_y, t_rd_x, "pseudo_pair_loss", |tape, p, t| {
        pseudo_pair_term(tape, LossKind::Berhu, p, t, PseudoLabel::Hard)
    })?;
    let seg = with_pair(t_ds_z_logits, t_rs_x, "pseudo_pair_loss", |tape, p, t| {
        pseudo_pair_term(tape, LossKind::CrossEntropy, p, t, PseudoLabel::Hard)
    })?;
    Ok(depth + seg)
}

/// Loss weights of one training stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Anchor-modality term (RGB in the scene task).
    pub rgb: f64,
    /// First partner term (segmentation in the scene task).
    pub seg: f64,
    /// Second partner term (depth in the scene task).
    pub depth: f64,
    /// Latent consistency.
    pub lat: f64,
    /// Multiplier of pixel L2 inside any L2-compared modality term.
    pub l2: f64,
    pub pp: f64,
}

impl LossWeights {
    pub fn stage1() -> Self {
        LossWeights {
            rgb: 1.0,
            seg: 100.0,
            depth: 10.0,
            lat: 1.0,
            l2: 1.0,
            pp: 0.0,
        }
    }

    pub fn stage2() -> Self {
        LossWeights {
            rgb: 10.0,
            lat: 10.0,
            l2: 100.0,
            ..Self::stage1()
        }
    }

    pub fn stage3() -> Self {
        LossWeights {
            pp: 100.0,
            ..Self::stage2()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in self.named() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("weight {name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("rgb", self.rgb),
            ("seg", self.seg),
            ("depth", self.depth),
            ("lat", self.lat),
            ("l2", self.l2),
            ("pp", self.pp),
        ]
    }

    fn slot(&self, slot: Slot) -> f64 {
        match slot {
            Slot::Anchor => self.rgb,
            Slot::First => self.seg,
            Slot::Second => self.depth,
        }
    }
}

/// Modality role within a task: the anchor shared by both paired sets, and
/// the partners paired with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Anchor,
    First,
    Second,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Anchor, Slot::First, Slot::Second];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    /// Cross-modal reconstructions landing in the slot's modality.
    Translation(Slot),
    /// Self-reconstruction of the slot's modality.
    Autoencoder(Slot),
    /// Generator side of the adversarial loss on the slot's outputs.
    Adversarial(Slot),
    Latent,
    PseudoPair,
}

/// Unweighted term values of one iteration. Disabled terms are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub values: Vec<(Term, f64)>,
    /// Slots whose reconstruction terms are pixel L2 and so carry `λ_L2`.
    pub l2_slots: [bool; 3],
}

impl LossTerms {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.values.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }
}

/// Weight multiplying `term` in the total.
pub fn coefficient(term: Term, weights: &LossWeights, l2_slots: [bool; 3]) -> f64 {
    let pixel = |s: Slot| if l2_slots[s.index()] { weights.l2 } else { 1.0 };
    match term {
        Term::Translation(s) | Term::Autoencoder(s) => weights.slot(s) * pixel(s),
        Term::Adversarial(s) => weights.slot(s),
        Term::Latent => weights.lat,
        Term::PseudoPair => weights.pp,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
}

impl LossReport {
    /// A slot's combined term before its slot weight:
    /// `λ_L2·(translation + autoencoder) + adversarial` for L2 slots.
    pub fn slot_value(&self, slot: Slot, weights: &LossWeights) -> Option<f64> {
        let pixel = if self.terms.l2_slots[slot.index()] { weights.l2 } else { 1.0 };
        let parts = [
            (Term::Translation(slot), pixel),
            (Term::Autoencoder(slot), pixel),
            (Term::Adversarial(slot), 1.0),
        ];
        let present: Vec<f64> = parts
            .iter()
            .filter_map(|&(t, k)| self.terms.get(t).map(|v| k * v))
            .collect();
        (!present.is_empty()).then(|| present.iter().sum())
    }
}

/// Weighted sum of the enabled terms.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> LossReport {
    let total = terms
        .values
        .iter()
        .map(|&(t, v)| coefficient(t, weights, terms.l2_slots) * v)
        .sum();
    LossReport {
        terms: terms.clone(),
        total,
    }
}

/// The same weighted sum recorded on a tape.
pub fn weighted_total<T: Real>(
    tape: &mut Tape<T>,
    terms: &[(Term, Var)],
    weights: &LossWeights,
    l2_slots: [bool; 3],
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(t, v) in terms {
        let scaled = tape.scale(v, T::lit(coefficient(t, weights, l2_slots)));
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(c: usize, h: usize, w: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, c, h, w), data.to_vec()).unwrap()
    }

    #[test]
    fn l2_examples() {
        let a = t(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 1.0);
        assert!((l2_loss(&b, &a).unwrap() - 2.0).abs() < 1e-12);
        let c = a.map(|v| v + 3.0);
        assert!((l2_loss(&c, &a).unwrap() - 6.0).abs() < 1e-12);
        assert!(l2_loss(&a, &t(1, 1, 4, &[0.0; 4])).is_err());
    }

    #[test]
    fn berhu_examples() {
        let z = t(1, 1, 3, &[0.0; 3]);
        assert_eq!(berhu_loss(&z, &z).unwrap(), 0.0);
        let r = t(1, 1, 3, &[1.0, 2.0, 10.0]);
        assert!((berhu_loss(&r, &z).unwrap() - 29.0 / 3.0).abs() < 1e-12);
        let five = t(1, 1, 3, &[5.0; 3]);
        assert!((berhu_loss(&five, &z).unwrap() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn berhu_branches_meet_at_threshold() {
        // Max residual 5 gives c = 1; a residual of exactly 1 sits on the boundary.
        let z = t(1, 1, 2, &[0.0; 2]);
        let r = t(1, 1, 2, &[1.0, 5.0]);
        let c: f64 = 1.0;
        let quad_at_c = (c * c + c * c) / (2.0 * c);
        assert_eq!(quad_at_c, c);
        let expected = (c + (25.0 + 1.0) / 2.0) / 2.0;
        assert!((berhu_loss(&r, &z).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::full(Shape::new(1, 4, 2, 2), 0.25);
        let v = cross_entropy_loss(&uniform, &[0, 1, 2, 3], Scores::Probs).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let half = t(2, 1, 1, &[0.5, 0.5]);
        assert!((cross_entropy_loss(&half, &[1], Scores::Probs).unwrap() - 2f64.ln()).abs() < 1e-12);
        let sharp = t(2, 1, 1, &[40.0, 0.0]);
        assert!(cross_entropy_loss(&sharp, &[0], Scores::Logits).unwrap() < 1e-12);
        assert!(cross_entropy_loss(&sharp, &[2], Scores::Logits).is_err());
    }

    #[test]
    fn lsgan_examples() {
        let ones = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let zeros = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let halves = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 0.5);
        assert_eq!(lsgan_losses(&ones, &zeros).unwrap(), (0.0, 1.0));
        let (d, _) = lsgan_losses(&halves, &halves).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        assert_eq!(lsgan_losses(&zeros, &zeros).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn latent_examples() {
        let a = t(4, 1, 1, &[0.0; 4]);
        let b = t(4, 1, 1, &[1.0; 4]);
        assert_eq!(latent_consistency_loss(&a, &a).unwrap(), 0.0);
        assert!((latent_consistency_loss(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(
            latent_consistency_loss(&a, &b).unwrap(),
            latent_consistency_loss(&b, &a).unwrap()
        );
    }

    #[test]
    fn pseudo_pair_examples() {
        let depth = t(1, 1, 3, &[0.2, 0.4, 0.6]);
        let seg = t(3, 1, 2, &[0.7, 0.1, 0.2, 0.3, 0.1, 0.6]);
        let v = pseudo_pair_loss(&depth, &depth, &seg, &seg).unwrap();
        let self_ce = cross_entropy_loss(&seg, &argmax_labels(&seg), Scores::Logits).unwrap();
        assert!((v - self_ce).abs() < 1e-12);
        let shifted = t(1, 1, 3, &[1.2, 2.4, 10.6]);
        let with_depth = pseudo_pair_loss(&depth, &shifted, &seg, &seg).unwrap();
        assert!((with_depth - self_ce - 29.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_class_on_ties() {
        let p = t(3, 1, 2, &[0.5, 0.1, 0.5, 0.1, 0.0, 0.8]);
        assert_eq!(argmax_labels(&p), vec![0, 2]);
    }

    #[test]
    fn stage_weight_presets() {
        let s1 = LossWeights::stage1();
        assert_eq!((s1.rgb, s1.seg, s1.depth, s1.lat, s1.l2), (1.0, 100.0, 10.0, 1.0, 1.0));
        let s2 = LossWeights::stage2();
        assert_eq!((s2.rgb, s2.lat, s2.l2), (10.0, 10.0, 100.0));
        assert_eq!((s2.seg, s2.depth), (100.0, 10.0));
        assert_eq!(LossWeights::stage3().pp, 100.0);
    }

    fn sample_terms() -> LossTerms {
        LossTerms {
            values: vec![
                (Term::Translation(Slot::Anchor), 0.5),
                (Term::Adversarial(Slot::Anchor), 0.25),
                (Term::Translation(Slot::First), 2.0),
                (Term::Autoencoder(Slot::Second), 0.125),
                (Term::Latent, 3.0),
                (Term::PseudoPair, 1.5),
            ],
            l2_slots: [true, false, false],
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::stage3();
        let r = total_loss(&sample_terms(), &w);
        let expected = 10.0 * (100.0 * 0.5 + 0.25) + 100.0 * 2.0 + 10.0 * 0.125 + 10.0 * 3.0 + 100.0 * 1.5;
        assert!((r.total - expected).abs() < 1e-9 * expected);
        assert!((r.slot_value(Slot::Anchor, &w).unwrap() - (100.0 * 0.5 + 0.25)).abs() < 1e-12);
        assert_eq!(r.slot_value(Slot::First, &w), Some(2.0));
        let empty = total_loss(&LossTerms::default(), &w);
        assert_eq!(empty.total, 0.0);
    }

    #[test]
    fn doubling_a_weight_doubles_its_contribution() {
        let terms = sample_terms();
        let w = LossWeights::stage2();
        let base = total_loss(&terms, &w).total;
        let doubled = total_loss(
            &terms,
            &LossWeights {
                lat: 2.0 * w.lat,
                ..w
            },
        )
        .total;
        assert_eq!(doubled - base, w.lat * 3.0);
    }

    #[test]
    fn tape_total_matches_report() {
        let terms = sample_terms();
        let w = LossWeights::stage3();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<(Term, Var)> = terms
            .values
            .iter()
            .map(|&(t, v)| (t, tape.constant(Tensor::scalar(v))))
            .collect();
        let total = weighted_total(&mut tape, &vars, &w, terms.l2_slots).unwrap();
        let report = total_loss(&terms, &w);
        assert!((tape.scalar(total) - report.total).abs() < 1e-9 * report.total);
    }

    #[test]
    fn weights_reject_negative_values() {
        let w = LossWeights {
            pp: -1.0,
            ..LossWeights::stage3()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::stage1().validate().is_ok());
    }
}
