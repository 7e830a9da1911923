//! Segmentation and depth metrics, the opponent-task classifier oracle, and
//! report files.

use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{what}: {a} predictions for {b} ground-truth values")]
    Length { what: &'static str, a: usize, b: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("classifier oracle is not fitted")]
    NotFitted,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("report line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Pixel accuracy.
    pub global: f64,
}

/// IoU per class, mean IoU over classes present in either map, and pixel
/// accuracy, all over the pooled pixels.
pub fn segmentation_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Length {
            what: "segmentation",
            a: pred.len(),
            b: gt.len(),
        });
    }
    let mut inter = vec![0u64; classes];
    let mut pred_n = vec![0u64; classes];
    let mut gt_n = vec![0u64; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        for label in [p, g] {
            if label >= classes {
                return Err(MetricsError::Label { label, classes });
            }
        }
        pred_n[p] += 1;
        gt_n[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            let union = pred_n[k] + gt_n[k] - inter[k];
            (union > 0).then(|| inter[k] as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let global = if pred.is_empty() {
        0.0
    } else {
        inter.iter().sum::<u64>() as f64 / pred.len() as f64
    };
    Ok(SegMetrics {
        per_class_iou,
        miou,
        global,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse_lin: f64,
    pub rmse_log: f64,
}

pub const DEPTH_EPS: f64 = 1e-6;

/// Threshold accuracies at `1.25^k` and linear/log RMSE over all pixels
/// jointly. Both maps are clamped to at least `eps`.
pub fn depth_metrics(pred: &[f32], gt: &[f32], eps: f64) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Length {
            what: "depth",
            a: pred.len(),
            b: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Invalid("depth metrics need at least one pixel".into()));
    }
    let mut hits = [0u64; 3];
    let (mut lin, mut log) = (0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = ((p as f64).max(eps), (g as f64).max(eps));
        let ratio = (p / g).max(g / p);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
        lin += (p - g) * (p - g);
        log += (p.ln() - g.ln()).powi(2);
    }
    let n = pred.len() as f64;
    Ok(DepthMetrics {
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        rmse_lin: (lin / n).sqrt(),
        rmse_log: (log / n).sqrt(),
    })
}

const HIST_BINS: usize = 8;
const DESCRIPTOR_LEN: usize = 3 * HIST_BINS + 4;

/// Color histograms plus four shape moments of one `(3, h, w)` image.
///
/// Everything is weighted by saliency: each pixel's color distance from the
/// mean color of the image border. Histograms then describe the object rather
/// than how much of the frame it fills, and use linear soft binning so small
/// color jitter moves mass smoothly between neighboring bins. Moments are
/// scaled by the variance of a uniform image so all features are O(1).
pub fn opponent_descriptor(image: &[f32], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    assert_eq!(image.len(), 3 * plane, "descriptor needs a 3-channel image");
    let px = |p: usize| [0, 1, 2].map(|ch| image[ch * plane + p] as f64);
    let border: Vec<usize> = (0..plane)
        .filter(|&p| {
            let (y, x) = (p / w, p % w);
            y == 0 || x == 0 || y + 1 == h || x + 1 == w
        })
        .collect();
    let mut bg = [0.0; 3];
    for &p in &border {
        let c = px(p);
        (0..3).for_each(|i| bg[i] += c[i] / border.len() as f64);
    }
    let mut weight: Vec<f64> = (0..plane)
        .map(|p| {
            let c = px(p);
            ((c[0] - bg[0]).powi(2) + (c[1] - bg[1]).powi(2) + (c[2] - bg[2]).powi(2)).sqrt()
        })
        .collect();
    let mut mass: f64 = weight.iter().sum();
    let salient = mass > 1e-12;
    if !salient {
        // Flat image: describe its color over all pixels, with no shape.
        weight.iter_mut().for_each(|v| *v = 1.0);
        mass = plane as f64;
    }

    let mut d = vec![0.0; DESCRIPTOR_LEN];
    for ch in 0..3 {
        for p in 0..plane {
            let pos = image[ch * plane + p].clamp(0.0, 1.0) as f64 * HIST_BINS as f64 - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let share = weight[p] / mass;
            let bin = |b: f64| (b.max(0.0) as usize).min(HIST_BINS - 1);
            d[ch * HIST_BINS + bin(lo)] += share * (1.0 - frac);
            d[ch * HIST_BINS + bin(lo + 1.0)] += share * frac;
        }
    }
    if !salient {
        return d;
    }
    let (mut cy, mut cx) = (0.0, 0.0);
    for (p, &wt) in weight.iter().enumerate() {
        cy += wt * (p / w) as f64 / mass;
        cx += wt * (p % w) as f64 / mass;
    }
    let (mut syy, mut sxx, mut core) = (0.0, 0.0, 0.0);
    let r_core = 0.15 * h.max(w) as f64;
    for (p, &wt) in weight.iter().enumerate() {
        let (dy, dx) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
        syy += wt * dy * dy / mass;
        sxx += wt * dx * dx / mass;
        if dy * dy + dx * dx <= r_core * r_core {
            core += wt / mass;
        }
    }
    let spread = ((h * h + w * w) as f64) / 12.0;
    let max_w = weight.iter().cloned().fold(0.0, f64::max);
    let tail = &mut d[3 * HIST_BINS..];
    tail[0] = mass / (plane as f64 * max_w);
    tail[1] = (syy + sxx) / spread;
    tail[2] = (syy - sxx).abs() / spread;
    tail[3] = core;
    d
}

/// Nearest-centroid classifier over [`opponent_descriptor`]s.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpponentOracle {
    centroids: Vec<Vec<f64>>,
}

impl OpponentOracle {
    /// Fits one centroid per class from `(n, 3, h, w)` ground-truth images.
    pub fn fit(images: &Tensor<f32>, labels: &[usize], classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.n() != labels.len() {
            return Err(MetricsError::Length {
                what: "oracle fit",
                a: s.n(),
                b: labels.len(),
            });
        }
        let mut sums = vec![vec![0.0; DESCRIPTOR_LEN]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &k) in labels.iter().enumerate() {
            if k >= classes {
                return Err(MetricsError::Label { label: k, classes });
            }
            let d = opponent_descriptor(images.sample(i), s.h(), s.w());
            sums[k].iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            counts[k] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(MetricsError::Invalid(format!("class {k} has no training images")));
        }
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        Ok(OpponentOracle { centroids })
    }

    pub fn is_fitted(&self) -> bool {
        !self.centroids.is_empty()
    }

    /// Class of one `(3, h, w)` image; ties go to the lowest class.
    pub fn classify(&self, image: &[f32], h: usize, w: usize) -> Result<usize> {
        if !self.is_fitted() {
            return Err(MetricsError::NotFitted);
        }
        let d = opponent_descriptor(image, h, w);
        let dist = |c: &Vec<f64>| c.iter().zip(&d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            let v = dist(c);
            if v < best.1 {
                best = (k, v);
            }
        }
        Ok(best.0)
    }
}

/// Fraction of `(n, 3, h, w)` images the oracle assigns to their class.
pub fn opponent_accuracy(images: &Tensor<f32>, labels: &[usize], oracle: &OpponentOracle) -> Result<f64> {
    let s = images.shape();
    if s.n() != labels.len() {
        return Err(MetricsError::Length {
            what: "opponent accuracy",
            a: s.n(),
            b: labels.len(),
        });
    }
    if s.n() == 0 {
        return Err(MetricsError::Invalid("no images to classify".into()));
    }
    let mut correct = 0;
    for (i, &k) in labels.iter().enumerate() {
        if oracle.classify(images.sample(i), s.h(), s.w())? == k {
            correct += 1;
        }
    }
    Ok(correct as f64 / s.n() as f64)
}

/// A named evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricRow {
    Seg { method: String, metrics: SegMetrics },
    Depth { method: String, metrics: DepthMetrics },
    Accuracy { method: String, accuracy: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    TextTable,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "text-table" | "table" => Ok(ReportFormat::TextTable),
            _ => Err(format!("unknown report format {s:?} (csv or text-table)")),
        }
    }
}

const DEPTH_COLUMNS: [&str; 5] = ["delta1", "delta2", "delta3", "rmse_lin", "rmse_log"];

fn seg_header(classes: usize) -> Vec<String> {
    let mut h = vec!["method".to_string()];
    h.extend((0..classes).map(|k| format!("iou_{k}")));
    h.extend(["miou".to_string(), "global".to_string()]);
    h
}

/// CSV cells use the shortest representation that parses back to the same
/// value; text tables round to four decimals.
fn table_rows(rows: &[MetricRow], classes: usize, format: ReportFormat) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let num = |v: f64| match format {
        ReportFormat::Csv => format!("{v}"),
        ReportFormat::TextTable => format!("{v:.4}"),
    };
    let mut seg = Vec::new();
    let mut depth = Vec::new();
    let mut acc = Vec::new();
    for r in rows {
        match r {
            MetricRow::Seg { method, metrics } => {
                let mut line = vec![method.clone()];
                line.extend((0..classes).map(|k| {
                    metrics
                        .per_class_iou
                        .get(k)
                        .copied()
                        .flatten()
                        .map_or_else(|| "-".to_string(), num)
                }));
                line.extend([num(metrics.miou), num(metrics.global)]);
                seg.push(line);
            }
            MetricRow::Depth { method, metrics: m } => {
                let vals = [m.delta1, m.delta2, m.delta3, m.rmse_lin, m.rmse_log];
                let mut line = vec![method.clone()];
                line.extend(vals.map(num));
                depth.push(line);
            }
            MetricRow::Accuracy { method, accuracy } => acc.push(vec![method.clone(), num(*accuracy)]),
        }
    }
    let mut out = Vec::new();
    if !seg.is_empty() {
        out.push((seg_header(classes), seg));
    }
    if !depth.is_empty() {
        let mut h = vec!["method".to_string()];
        h.extend(DEPTH_COLUMNS.map(str::to_string));
        out.push((h, depth));
    }
    if !acc.is_empty() {
        out.push((vec!["method".to_string(), "accuracy".to_string()], acc));
    }
    out
}

/// Renders rows as CSV sections (segmentation, depth, accuracy), each with
/// its own header and separated by a blank line, or as aligned text tables.
pub fn render_report(rows: &[MetricRow], classes: usize, format: ReportFormat) -> String {
    let mut out = String::new();
    for (i, (header, lines)) in table_rows(rows, classes, format).into_iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        match format {
            ReportFormat::Csv => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
                for record in std::iter::once(&header).chain(&lines) {
                    w.write_record(record).expect("in-memory csv write");
                }
                let bytes = w.into_inner().expect("in-memory csv flush");
                out.push_str(std::str::from_utf8(&bytes).expect("cells are utf-8"));
            }
            ReportFormat::TextTable => {
                let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
                for l in &lines {
                    for (w, c) in widths.iter_mut().zip(l) {
                        *w = (*w).max(c.chars().count());
                    }
                }
                let fmt_line = |cells: &[String]| {
                    cells
                        .iter()
                        .zip(&widths)
                        .enumerate()
                        .map(|(j, (c, &w))| {
                            if j == 0 {
                                format!("{c:<w$}")
                            } else {
                                format!("{c:>w$}")
                            }
                        })
                        .collect::<Vec<_>>()
                        .join("  ")
                };
                writeln!(out, "{}", fmt_line(&header)).expect("string write");
                let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                writeln!(out, "{}", "-".repeat(rule)).expect("string write");
                for l in &lines {
                    writeln!(out, "{}", fmt_line(l)).expect("string write");
                }
            }
        }
    }
    out
}

pub fn emit_report(rows: &[MetricRow], classes: usize, path: &Path, format: ReportFormat) -> Result<()> {
    std::fs::write(path, render_report(rows, classes, format)).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses CSV written by [`render_report`] back into rows. Sections are
/// separated by blank lines and each starts with its own header.
pub fn parse_report_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut start = 0;
    while start < lines.len() {
        if lines[start].trim().is_empty() {
            start += 1;
            continue;
        }
        let end = (start..lines.len()).find(|&i| lines[i].trim().is_empty()).unwrap_or(lines.len());
        parse_section(&lines[start..end].join("\n"), start, &mut rows)?;
        start = end;
    }
    Ok(rows)
}

/// One header-led block; `offset` is the index of its header line.
fn parse_section(block: &str, offset: usize, rows: &mut Vec<MetricRow>) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(block.as_bytes());
    let bad = |line: usize, msg: String| MetricsError::Parse { line, msg };
    let header = reader.headers().map_err(|e| bad(offset + 1, e.to_string()))?.clone();
    for record in reader.records() {
        let record = record.map_err(|e| bad(offset + 1, e.to_string()))?;
        let line_no = offset + record.position().map_or(1, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(bad(line_no, format!("{} fields, header has {}", record.len(), header.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad(line_no, format!("not a number: {s:?}"))) };
        let method = record[0].to_string();
        let vals: Vec<&str> = record.iter().skip(1).collect();
        let row = match header.get(1) {
            Some("accuracy") => MetricRow::Accuracy {
                method,
                accuracy: num(vals[0])?,
            },
            Some("delta1") => MetricRow::Depth {
                method,
                metrics: DepthMetrics {
                    delta1: num(vals[0])?,
                    delta2: num(vals[1])?,
                    delta3: num(vals[2])?,
                    rmse_lin: num(vals[3])?,
                    rmse_log: num(vals[4])?,
                },
            },
            _ => {
                let k = vals.len().checked_sub(2).ok_or_else(|| bad(line_no, "too few segmentation columns".into()))?;
                let per_class_iou = vals[..k]
                    .iter()
                    .map(|s| if *s == "-" { Ok(None) } else { num(s).map(Some) })
                    .collect::<Result<_>>()?;
                MetricRow::Seg {
                    method,
                    metrics: SegMetrics {
                        per_class_iou,
                        miou: num(vals[k])?,
                        global: num(vals[k + 1])?,
                    },
                }
            }
        };
        rows.push(row);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
