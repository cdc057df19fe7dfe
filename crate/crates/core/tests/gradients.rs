mod common;

use common::directional_check;
use dualstop::loss::LossKind;
use dualstop::market::UtilityFamily;

#[test]
fn loss_gradients_match_directional_differences() {
    for seed in 0..6 {
        for kind in [LossKind::Dgm, LossKind::Fbr] {
            for family in [UtilityFamily::Power { gamma: 0.5 }, UtilityFamily::NonHara] {
                for scaled in [false, true] {
                    let rel = directional_check(kind, scaled, family, seed);
                    assert!(rel < 1e-5, "seed {seed} {kind:?} {family:?} scaled={scaled}: rel {rel:e}");
                }
            }
        }
    }
}
