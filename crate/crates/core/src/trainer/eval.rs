//! Zero-pair, cascade and fused evaluation of a trained task.

use rand_chacha::ChaCha8Rng;

use super::{ModalityData, Result, TaskSpec, TrainError};
use crate::losses::{argmax_labels, LossKind, Slot};
use crate::metrics::{self, DepthMetrics, MetricRow, OpponentOracle, SegMetrics, DEPTH_EPS};
use crate::networks::{fuse_latents, LatentCode, MmNets, Modality, Session};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 16;

/// Consecutive index runs covering `0..n`.
pub fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(EVAL_CHUNK)
        .map(|s| (s..(s + EVAL_CHUNK).min(n)).collect())
        .collect()
}

fn code(nets: &MmNets<f32>, m: Modality, x: &Tensor<f32>) -> Result<LatentCode<f32>> {
    let mut s = Session::inference(&nets.store);
    let v = s.tape.constant(x.clone());
    let c = nets.encoder(m)?.forward::<f32, ChaCha8Rng>(&mut s, v, None)?;
    Ok(LatentCode {
        features: s.tape.value(c.features).clone(),
        index_stack: c.indices,
        skip_features: c.skips.iter().map(|&v| s.tape.value(v).clone()).collect(),
        source_modality: m,
    })
}

fn concat(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>())?)
}

/// `T_{from→to}` over every sample, noise-free.
pub fn translate_all(nets: &MmNets<f32>, from: Modality, to: Modality, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let parts = chunks(x.shape().n())
        .into_iter()
        .map(|idx| Ok(nets.translate(from, to, &x.gather_samples(&idx))?))
        .collect::<Result<Vec<_>>>()?;
    concat(parts)
}

/// Translation along `path`, materializing each intermediate image.
pub fn cascade_all(nets: &MmNets<f32>, path: &[Modality], x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let parts = chunks(x.shape().n())
        .into_iter()
        .map(|idx| Ok(nets.cascade(path, &x.gather_samples(&idx))?))
        .collect::<Result<Vec<_>>>()?;
    concat(parts)
}

/// Decodes `(1 - alpha) f_a(xa) + alpha f_b(xb)` with `to`'s decoder, using
/// `a`'s side information.
pub fn fused_all(
    nets: &MmNets<f32>,
    (ma, xa): (Modality, &Tensor<f32>),
    (mb, xb): (Modality, &Tensor<f32>),
    alpha: f64,
    to: Modality,
) -> Result<Tensor<f32>> {
    if xa.shape().n() != xb.shape().n() {
        return Err(TrainError::Data("fusion inputs differ in sample count".into()));
    }
    let dec = nets.decoder(to)?;
    let parts = chunks(xa.shape().n())
        .into_iter()
        .map(|idx| {
            let a = code(nets, ma, &xa.gather_samples(&idx))?;
            let b = code(nets, mb, &xb.gather_samples(&idx))?;
            let fused = fuse_latents(&a, &b, alpha, ma)?;
            Ok(crate::networks::decode(&nets.store, dec, &fused)?)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(parts)
}

/// How a prediction for a target slot was produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Route {
    /// Encoder of one slot straight into the target decoder.
    Direct { from: Slot, to: Slot },
    /// Through the anchor, reconstructing the anchor image in between.
    Cascade { from: Slot, to: Slot },
    /// Anchor and partner codes averaged with weight `alpha` on the partner.
    Fused { partner: Slot, to: Slot, alpha: f64 },
}

impl Route {
    pub fn label(&self, task: &TaskSpec) -> String {
        let l = |s: Slot| task.modality(s).letter();
        match *self {
            Route::Direct { from, to } => format!("{}→{}", l(from), l(to)),
            Route::Cascade { from, to } => format!("{}→{}→{}", l(from), l(Slot::Anchor), l(to)),
            Route::Fused { partner, to, .. } => format!("({},{})→{}", l(Slot::Anchor), l(partner), l(to)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub alpha: f64,
    pub cascade: bool,
    pub fusion: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            alpha: 0.2,
            cascade: true,
            fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEntry {
    pub route: Route,
    pub row: MetricRow,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub entries: Vec<EvalEntry>,
}

impl Evaluation {
    pub fn get(&self, route: Route) -> Option<&MetricRow> {
        self.entries.iter().find(|e| e.route == route).map(|e| &e.row)
    }

    pub fn seg(&self, route: Route) -> Option<&SegMetrics> {
        match self.get(route)? {
            MetricRow::Seg { metrics, .. } => Some(metrics),
            _ => None,
        }
    }

    pub fn depth(&self, route: Route) -> Option<&DepthMetrics> {
        match self.get(route)? {
            MetricRow::Depth { metrics, .. } => Some(metrics),
            _ => None,
        }
    }

    pub fn accuracy(&self, route: Route) -> Option<f64> {
        match self.get(route)? {
            MetricRow::Accuracy { accuracy, .. } => Some(*accuracy),
            _ => None,
        }
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        self.entries.iter().map(|e| e.row.clone()).collect()
    }
}

/// What a target slot is scored with.
enum Scorer<'a> {
    Seg { labels: &'a [usize], classes: usize },
    Depth { gt: &'a [f32] },
    Oracle { oracle: &'a OpponentOracle, classes: &'a [usize] },
}

impl Scorer<'_> {
    fn score(&self, method: String, pred: &Tensor<f32>) -> Result<MetricRow> {
        let err = |e: metrics::MetricsError| TrainError::Data(e.to_string());
        Ok(match self {
            Scorer::Seg { labels, classes } => MetricRow::Seg {
                method,
                metrics: metrics::segmentation_metrics(&argmax_labels(pred), labels, *classes).map_err(err)?,
            },
            Scorer::Depth { gt } => MetricRow::Depth {
                method,
                metrics: metrics::depth_metrics(pred.data(), gt, DEPTH_EPS).map_err(err)?,
            },
            Scorer::Oracle { oracle, classes } => MetricRow::Accuracy {
                method,
                accuracy: metrics::opponent_accuracy(pred, classes, oracle).map_err(err)?,
            },
        })
    }
}

/// Scores every partner target reachable with a metric: the unseen direct
/// translation from the other partner, the cascade through the anchor, the
/// fused anchor+partner code, and the seen translation from the anchor.
pub fn evaluate(
    nets: &MmNets<f32>,
    task: &TaskSpec,
    test: &[ModalityData<f32>; 3],
    test_classes: Option<&[usize]>,
    oracle: Option<&OpponentOracle>,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let mut out = Evaluation::default();
    for (to, from) in [(Slot::First, Slot::Second), (Slot::Second, Slot::First)] {
        let target = &test[to.index()];
        let spec = &task.specs[to.index()];
        let scorer = match (task.kinds[to.index()], &target.labels, oracle, test_classes) {
            (LossKind::CrossEntropy, Some(labels), _, _) => Scorer::Seg {
                labels,
                classes: spec.channels,
            },
            (LossKind::Berhu, _, _, _) => Scorer::Depth {
                gt: target.input.data(),
            },
            (LossKind::L2, _, Some(oracle), Some(classes)) if spec.channels == 3 => Scorer::Oracle { oracle, classes },
            _ => continue,
        };
        let m = |s: Slot| task.modality(s);
        let src = &test[from.index()].input;
        let anchor = &test[Slot::Anchor.index()].input;
        let mut push = |route: Route, pred: Tensor<f32>| -> Result<()> {
            let row = scorer.score(route.label(task), &pred)?;
            out.entries.push(EvalEntry { route, row });
            Ok(())
        };
        push(Route::Direct { from, to }, translate_all(nets, m(from), m(to), src)?)?;
        if opts.cascade {
            let pred = cascade_all(nets, &[m(from), m(Slot::Anchor), m(to)], src)?;
            push(Route::Cascade { from, to }, pred)?;
        }
        if opts.fusion {
            let pred = fused_all(nets, (m(Slot::Anchor), anchor), (m(from), src), opts.alpha, m(to))?;
            push(
                Route::Fused {
                    partner: from,
                    to,
                    alpha: opts.alpha,
                },
                pred,
            )?;
        }
        let seen = Route::Direct { from: Slot::Anchor, to };
        push(seen, translate_all(nets, m(Slot::Anchor), m(to), anchor)?)?;
    }
    Ok(out)
}
