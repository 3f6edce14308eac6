use acdnet_core::gradcheck::{network_check, operator_suite};
use acdnet_core::net::build_acdnet;

#[test]
fn operators_over_twenty_seeds() {
    for seed in 0..20 {
        for (op, err) in operator_suite(seed) {
            assert!(err < 1e-4, "seed {seed} {op}: {err:e}");
        }
    }
}

#[test]
fn toy_network_matches_finite_differences() {
    let spec = build_acdnet(2000, 2000, 4, 1).unwrap();
    for seed in 0..20 {
        let r = network_check(&spec, seed, 2, 2).unwrap();
        assert!(r.checked > 90, "{r:?}");
        assert!(r.max_rel_err < 1e-3, "seed {seed}: {} at {}", r.max_rel_err, r.worst);
    }
}
