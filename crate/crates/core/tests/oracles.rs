mod common;

use common::{adam_oracle, brute_psnr, brute_ssim, metric_oracle, ADAM_TOL, PSNR_TOL, SSIM_TOL};
use promptir::metrics::{psnr, ssim};
use proptest::prelude::*;

#[test]
fn psnr_and_ssim_match_brute_force() {
    let (dp, ds) = metric_oracle();
    assert!(dp <= PSNR_TOL, "psnr deviation {dp:e}");
    assert!(ds <= SSIM_TOL, "ssim deviation {ds:e}");
}

#[test]
fn adam_follows_the_scalar_reference() {
    let worst = adam_oracle();
    assert!(worst <= ADAM_TOL, "{worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metric_invariants(seed in 0u64..10_000, h in 11usize..20, w in 11usize..20) {
        let a = common::uniform(seed, &[3, h, w], 0.0, 1.0);
        let b = common::uniform(seed + 1, &[3, h, w], 0.0, 1.0);
        let s_ab = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((s_ab - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        prop_assert!(s_ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert!((p - brute_psnr(a.data(), b.data())).abs() < 1e-9);
        prop_assert!((s_ab - brute_ssim(a.data(), b.data(), 3, h, w)).abs() < 1e-6);
    }
}
