mod support;

use std::collections::HashSet;

use support::{gradient_check, micro_net, ParamKind};

#[test]
fn backprop_matches_central_differences_on_random_micro_nets() {
    let mut seen = HashSet::new();
    for seed in 0..24 {
        let net = micro_net(seed);
        for (kind, err) in gradient_check(&net, 1e-5) {
            assert!(err <= 1e-6, "seed {seed} {kind:?}: relative error {err:e}");
            seen.insert(kind);
        }
    }
    for kind in [ParamKind::ConvWeight, ParamKind::ConvBias, ParamKind::FcWeight, ParamKind::FcBias, ParamKind::Gamma, ParamKind::Beta] {
        assert!(seen.contains(&kind), "{kind:?} never exercised");
    }
}
