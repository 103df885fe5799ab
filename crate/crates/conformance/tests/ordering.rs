use edat_conformance::ordering;

#[test]
fn fifo_and_slot_order_on_loopback() {
    let report = ordering::run_loopback(0, 200, 20);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert_eq!(report.runs, 200);
}

#[test]
fn fifo_and_slot_order_over_tcp() {
    let report = ordering::run_tcp(4, 100);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert!(report.checks > 1600);
}
