mod common;

use hugnn::math::Rng;
use proptest::prelude::*;

#[test]
fn fifty_seeds_hold_every_structural_property() {
    let bad: Vec<String> = (0..50).flat_map(common::structural_case).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn structural_properties_on_arbitrary_seeds(seed in 1000u64..u64::MAX) {
        let bad = common::structural_case(seed);
        prop_assert!(bad.is_empty(), "{:#?}", bad);
    }

    #[test]
    fn softmax_ignores_row_shifts(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        prop_assert!(common::softmax_shift_violation(&mut rng).is_none());
    }
}
