mod common;

use promptir::network::{ModelConfig, PromptIr};
use promptir::rng;
use proptest::prelude::*;

#[test]
fn forward_preserves_size_and_weights_are_distributions() {
    let checked = common::shape_suite().unwrap();
    assert_eq!(checked, 57);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn restored_size_equals_input_size(h in 8usize..40, w in 8usize..40, b in 1usize..3) {
        let model = PromptIr::new(ModelConfig::default(), 3).unwrap();
        let x = common::uniform(rng::derive(h as u64 * 97 + w as u64, "p"), &[b, 3, h, w], 0.0, 1.0);
        let y = model.restore(&x).unwrap();
        prop_assert_eq!(y.shape(), &[b, 3, h, w]);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn undersized_inputs_are_rejected() {
    let model = PromptIr::new(ModelConfig::default(), 3).unwrap();
    assert!(model
        .restore(&common::uniform(1, &[1, 3, 7, 16], 0.0, 1.0))
        .is_err());
}
