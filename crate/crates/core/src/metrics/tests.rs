use super::*;
use crate::data::{gen_opponent_sample, OpponentConfig, OPPONENT_CLASSES};
use proptest::prelude::*;

/// Brute-force confusion matrix, then IoU per class from its row and column sums.
fn confusion_oracle(pred: &[usize], gt: &[usize], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        m[g][p] += 1;
    }
    let ious = (0..k)
        .map(|c| {
            let tp = m[c][c];
            let row: usize = m[c].iter().sum();
            let col: usize = (0..k).map(|r| m[r][c]).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let diag: usize = (0..k).map(|c| m[c][c]).sum();
    (ious, diag as f64 / pred.len() as f64)
}

#[test]
fn perfect_segmentation() {
    let gt = vec![0, 1, 2, 2, 1, 0];
    let m = segmentation_metrics(&gt, &gt, 4).unwrap();
    assert!(m.per_class_iou[..3].iter().all(|v| *v == Some(1.0)));
    assert_eq!(m.per_class_iou[3], None);
    assert_eq!((m.miou, m.global), (1.0, 1.0));
}

#[test]
fn two_by_two_example() {
    let pred = [0, 0, 1, 1];
    let gt = [0, 1, 1, 1];
    let m = segmentation_metrics(&pred, &gt, 2).unwrap();
    let (ious, global) = confusion_oracle(&pred, &gt, 2);
    assert_eq!(m.per_class_iou, ious);
    assert!((m.per_class_iou[0].unwrap() - 0.5).abs() < 1e-6);
    assert!((m.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-6);
    assert!((m.miou - 0.583_333).abs() < 1e-6);
    assert!((m.global - 0.75).abs() < 1e-6);
    assert_eq!(m.global, global);
}

#[test]
fn absent_class_leaves_mean_alone() {
    let pred = [0, 0, 1, 1];
    let gt = [0, 1, 1, 1];
    let a = segmentation_metrics(&pred, &gt, 2).unwrap();
    let b = segmentation_metrics(&pred, &gt, 5).unwrap();
    assert_eq!(a.miou, b.miou);
    assert_eq!(b.per_class_iou[2..], [None, None, None]);
}

#[test]
fn segmentation_rejects_bad_input() {
    assert!(segmentation_metrics(&[0, 1], &[0], 2).is_err());
    assert!(matches!(
        segmentation_metrics(&[0, 3], &[0, 1], 2),
        Err(MetricsError::Label { label: 3, classes: 2 })
    ));
}

proptest! {
    #[test]
    fn segmentation_matches_confusion_oracle(
        pred in prop::collection::vec(0usize..5, 64),
        gt in prop::collection::vec(0usize..5, 64),
    ) {
        let m = segmentation_metrics(&pred, &gt, 5).unwrap();
        let (ious, global) = confusion_oracle(&pred, &gt, 5);
        prop_assert_eq!(&m.per_class_iou, &ious);
        prop_assert_eq!(m.global, global);
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        prop_assert!((m.miou - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.global));
    }

    #[test]
    fn depth_deltas_are_monotone(
        gt in prop::collection::vec(0.05f32..1.0, 1..40),
        noise in prop::collection::vec(0.3f32..3.0, 40),
    ) {
        let pred: Vec<f32> = gt.iter().zip(&noise).map(|(g, k)| g * k).collect();
        let m = depth_metrics(&pred, &gt, DEPTH_EPS).unwrap();
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        prop_assert!(m.rmse_lin >= 0.0 && m.rmse_log >= 0.0);
        let differs = pred.iter().zip(&gt).any(|(p, g)| p != g);
        prop_assert_eq!(m.rmse_lin > 0.0, differs);
        prop_assert_eq!(m.rmse_log > 0.0, differs);
    }
}

#[test]
fn depth_examples() {
    let gt = [0.2f32, 0.5, 0.9, 1.0];
    let m = depth_metrics(&gt, &gt, DEPTH_EPS).unwrap();
    assert_eq!((m.delta1, m.delta2, m.delta3, m.rmse_lin, m.rmse_log), (1.0, 1.0, 1.0, 0.0, 0.0));

    let scaled: Vec<f32> = gt.iter().map(|g| g * 1.3).collect();
    let m = depth_metrics(&scaled, &gt, DEPTH_EPS).unwrap();
    assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 1.0, 1.0));

    let e = std::f32::consts::E;
    let m = depth_metrics(&[e * e], &[e], DEPTH_EPS).unwrap();
    assert!((m.rmse_log - 1.0).abs() < 1e-6);
    assert!((m.rmse_lin - (e * e - e) as f64).abs() < 1e-5);
}

#[test]
fn depth_clamps_to_eps() {
    let m = depth_metrics(&[0.0, -1.0], &[1e-6, 1e-6], 1e-6).unwrap();
    assert_eq!(m.delta1, 1.0);
    assert!(depth_metrics(&[], &[], 1e-6).is_err());
}

fn balanced_opponent(seed: u64, per_class: usize) -> (Tensor<f32>, Vec<usize>) {
    let cfg = OpponentConfig::default();
    let samples: Vec<_> = (0..(per_class * OPPONENT_CLASSES) as u64)
        .map(|id| gen_opponent_sample(seed, id, &cfg))
        .collect();
    let images = Tensor::stack(&samples.iter().map(|s| &s.theta3).collect::<Vec<_>>()).unwrap();
    (images, samples.iter().map(|s| s.class_label as usize).collect())
}

#[test]
fn oracle_must_be_fitted() {
    let (images, labels) = balanced_opponent(0, 1);
    assert!(matches!(
        opponent_accuracy(&images, &labels, &OpponentOracle::default()),
        Err(MetricsError::NotFitted)
    ));
}

#[test]
fn oracle_recognizes_ground_truth_and_not_gray() {
    let (train, train_labels) = balanced_opponent(1, 20);
    let oracle = OpponentOracle::fit(&train, &train_labels, OPPONENT_CLASSES).unwrap();
    assert_eq!(oracle, OpponentOracle::fit(&train, &train_labels, OPPONENT_CLASSES).unwrap());
    let (test, test_labels) = balanced_opponent(2, 10);
    let acc = opponent_accuracy(&test, &test_labels, &oracle).unwrap();
    assert!(acc >= 0.95, "ground-truth accuracy {acc}");
    // Identical gray images all land in one class: exactly chance on a balanced set.
    let gray = Tensor::full(test.shape(), 0.5f32);
    assert!((opponent_accuracy(&gray, &test_labels, &oracle).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn descriptor_is_normalized() {
    let (images, _) = balanced_opponent(3, 1);
    let d = opponent_descriptor(images.sample(0), 32, 32);
    for ch in 0..3 {
        let mass: f64 = d[ch * 8..(ch + 1) * 8].iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }
    let flat = opponent_descriptor(&vec![0.3; 3 * 64], 8, 8);
    assert!(flat[24..].iter().all(|&v| v == 0.0));
}

fn sample_rows() -> Vec<MetricRow> {
    vec![
        MetricRow::Seg {
            method: "D→S".into(),
            metrics: segmentation_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 3).unwrap(),
        },
        MetricRow::Depth {
            method: "(R,S)→D".into(),
            metrics: depth_metrics(&[0.5, 0.4], &[0.45, 0.5], DEPTH_EPS).unwrap(),
        },
        MetricRow::Accuracy {
            method: "Θ2→Θ3".into(),
            accuracy: 0.37,
        },
    ]
}

#[test]
fn csv_report_round_trips() {
    let rows = sample_rows();
    let text = render_report(&rows, 3, ReportFormat::Csv);
    assert_eq!(text, render_report(&rows, 3, ReportFormat::Csv));
    assert_eq!(parse_report_csv(&text).unwrap(), rows);
    let header = text.lines().next().unwrap();
    let per_class = header.split(',').filter(|h| h.starts_with("iou_")).count();
    assert_eq!(per_class, 3);
}

#[test]
fn text_table_lists_per_class_then_summary() {
    let text = render_report(&sample_rows(), 3, ReportFormat::TextTable);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["method", "iou_0", "iou_1", "iou_2", "miou", "global"]);
    assert!(text.contains("Θ2→Θ3"));
    // Class 2 never occurs, so its cell is a dash.
    assert!(text.lines().nth(2).unwrap().contains(" - "));
}

#[test]
fn emit_report_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    emit_report(&sample_rows(), 3, &a, ReportFormat::Csv).unwrap();
    emit_report(&sample_rows(), 3, &b, ReportFormat::Csv).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(emit_report(&sample_rows(), 3, &dir.path().join("no/such/dir.csv"), ReportFormat::Csv).is_err());
}

#[test]
fn malformed_csv_reports_line() {
    let bad = "method,accuracy\nx,0.5\ny,abc\n";
    assert!(matches!(parse_report_csv(bad), Err(MetricsError::Parse { line: 3, .. })));
}
