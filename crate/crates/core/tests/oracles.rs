mod common;

use common::{lp_min, w_oracle};
use kac_core::rng::substream;
use kac_core::sampling::{rescale, sample_empirical, SourceLaw};
use kac_core::transport::w_distance;
use proptest::prelude::*;

#[test]
fn lp_oracle_small_cases() {
    assert_eq!(lp_min(&[1.0, 2.0], &[vec![1.0, 1.0]], &[1.0]), Some(1.0));
    assert_eq!(lp_min(&[1.0], &[vec![1.0]], &[-1.0]), None);
    // Redundant constraint: x + y = 1 stated twice.
    assert_eq!(lp_min(&[3.0, 1.0], &[vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 2.0]), Some(1.0));
    // 2x2 transport with crossing costs.
    let c = [0.0, 1.0, 1.0, 0.0];
    let a = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]];
    assert!((lp_min(&c, &a, &[0.7, 0.3, 0.4, 0.6]).unwrap() - 0.3).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn network_simplex_matches_dense_lp(seed in any::<u64>(), n in 2usize..7, m in 2usize..7, d in 2usize..4) {
        let law = SourceLaw::gaussian(d);
        let a = rescale(&sample_empirical(&law, n, &mut substream(seed, &[0]))).unwrap().to_measure();
        let b = rescale(&sample_empirical(&law, m, &mut substream(seed, &[1]))).unwrap().to_measure();
        let w = w_distance(&a, &b).unwrap();
        prop_assert!((w - w_oracle(&a, &b)).abs() <= 1e-9);
    }
}
