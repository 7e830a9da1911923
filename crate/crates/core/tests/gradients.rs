use mmnets::gradsuite::{case_names, run_suite, SUITE_TOLERANCE};

#[test]
fn every_case_passes_on_ten_seeds() {
    let results = run_suite(0..10).unwrap();
    assert_eq!(results.len(), case_names().len() * 10);
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    for r in &results {
        assert!(r.passed(), "{} seed {}: {:?}", r.case, r.seed, r.report);
    }
    assert!(worst.report.max_rel_error < SUITE_TOLERANCE);
}
