use edat_conformance::scenarios;

#[test]
fn matcher_agrees_with_reference() {
    let report = scenarios::run(1, 20_000);
    assert!(report.failures.is_empty(), "{} failures:\n{}", report.failures.len(), report.failures.join("\n"));
    assert!(report.activations > 1000);
}
