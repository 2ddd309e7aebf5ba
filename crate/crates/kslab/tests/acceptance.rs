//! End-to-end acceptance run: executes the full verification ledger and
//! prints one line per item. Slower than the unit suites because it re-runs
//! the eigenvalue sweep and the reference collapse from scratch.

use kslab::verify_all;

#[test]
fn all_ledger_items_pass() {
    let report = verify_all(0);
    let mut out = Vec::new();
    report.write_ledger(&mut out).unwrap();
    print!("{}", String::from_utf8(out).unwrap());
    assert_eq!(report.checks.len(), 10);
    assert!(
        report.all_passed(),
        "failed ledger items: {:?}",
        report.failed_ids()
    );
}
