use vqp_core::conformance::safety::safety_suite;

#[test]
fn shared_qp_never_errors_and_dispatch_is_exact() {
    let r = safety_suite(10_000).unwrap();
    println!("{} cases, raw qp reached ERR in {}", r.cases, r.raw_errs);
    assert_eq!(r.cases, 10_000);
    assert!(r.raw_errs >= 1);
}
