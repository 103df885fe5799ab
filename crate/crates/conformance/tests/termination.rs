use edat_conformance::termination;

#[test]
fn verdicts_are_safe_and_prompt() {
    let report = termination::run(0, 5000);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert!(report.terminated >= 3500, "{report:?}");
    assert!(report.max_rounds_after_quiescence <= 2);
    // Rounds that look clean while the world is busy must occur, or the
    // safety check says nothing about the confirming round.
    assert!(report.deceptive_rounds > 0, "{report:?}");
}
