use bvap::gradsuite::{check_names, run_suite, run_suite_with_corrupted_sigmoid};

#[test]
fn fresh_build_passes_every_check() {
    let entries = run_suite().unwrap();
    assert_eq!(entries.len(), check_names().len());
    for e in &entries {
        assert!(e.passed(), "{}", e.report_line());
    }
}

#[test]
fn report_has_one_line_per_op() {
    let names = check_names();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    for needle in [
        "conv2d",
        "relu",
        "sigmoid",
        "max_pool",
        "nearest_resize",
        "contrast",
        "reduction_attention",
        "dense_combine",
        "centre_bias",
        "kl_loss",
    ] {
        assert!(names.iter().any(|n| n.starts_with(needle)), "{needle}");
    }
}

#[test]
fn corrupted_sigmoid_derivative_is_caught() {
    let entries = run_suite_with_corrupted_sigmoid(1.5).unwrap();
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    assert!(failed.contains(&"sigmoid"), "{failed:?}");
    assert!(failed.iter().any(|n| n.starts_with("reduction_attention")), "{failed:?}");
    for e in entries.iter().filter(|e| !e.passed()) {
        assert!(e.report_line().starts_with("FAIL"));
    }
}
