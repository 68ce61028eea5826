use basisconv::verify::{format_table, run_all};

#[test]
fn every_property_check_passes() {
    let checks = run_all(0).unwrap();
    let table = format_table(&checks);
    assert!(checks.iter().all(|c| c.passed()), "\n{table}");
    assert_eq!(table.lines().count(), checks.len() + 1);
}

#[test]
fn gradient_suite_holds_across_seeds() {
    for seed in 1..6 {
        for c in basisconv::verify::gradient_checks(seed).unwrap() {
            assert!(c.passed(), "seed {seed}: {c:?}");
        }
    }
}
