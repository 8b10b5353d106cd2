mod support;

use support::fd;

#[test]
fn every_op_matches_central_differences() {
    for op in fd::OPS {
        let mut worst: f64 = 0.0;
        for case in 0..100u64 {
            let err = fd::run_case(op, case * 7919 + 17);
            assert!(err < 1e-4, "{op} case {case}: relative error {err:e}");
            worst = worst.max(err);
        }
        eprintln!("{op:>18}: worst relative error {worst:.2e}");
    }
}
