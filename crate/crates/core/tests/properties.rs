use nalgebra::SymmetricEigen;
use proptest::prelude::*;

use treeagg::feasible::symmetric_tree_dep_corr;
use treeagg::gaussian::{mildly_covariance, rho13_interval, ThreeLeaf};
use treeagg::presets;
use treeagg::reordering::run_reordering;
use treeagg::rng::SeedStream;

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn interval_endpoints_are_psd(
        s in prop::array::uniform3(0.05f64..5.0),
        r12 in -1.0f64..=1.0,
        r0 in -1.0f64..=1.0,
    ) {
        let p = ThreeLeaf::new(s, r12, r0).unwrap();
        let iv = rho13_interval(&p);
        prop_assert!(-1.0 <= iv.min && iv.min <= iv.tree_dep && iv.tree_dep <= iv.max && iv.max <= 1.0);
        for r in [iv.min, iv.mid, iv.max] {
            let c = mildly_covariance(&p, r).unwrap();
            let scale = c.diagonal().amax();
            prop_assert!(SymmetricEigen::new(c).eigenvalues.min() >= -1e-9 * scale);
        }
    }

    #[test]
    fn symmetric_decay_bounded(rho in -1.0f64..=1.0, k in 1u32..10) {
        let a = symmetric_tree_dep_corr(k, rho);
        let b = symmetric_tree_dep_corr(k + 1, rho);
        prop_assert!(b.abs() <= a.abs() + 1e-15);
        prop_assert!(a.abs() <= rho.abs() + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn reordering_reproducible_and_additive(seed in any::<u64>(), n in 2usize..400) {
        let model = presets::gaussian_four_leaf();
        let a = run_reordering(&model, n, &SeedStream::new(seed), true).unwrap();
        let b = run_reordering(&model, n, &SeedStream::new(seed), true).unwrap();
        let (ba, bb) = (a.root().sample_block().unwrap(), b.root().sample_block().unwrap());
        prop_assert_eq!(&ba.data, &bb.data);
        for k in 0..n {
            let sum: f64 = ba.data.row(k).sum();
            prop_assert!((sum - a.root().sums[k]).abs() <= 1e-9 * (1.0 + sum.abs()));
        }
    }
}

#[test]
fn reordering_rejects_single_sample() {
    assert!(run_reordering(&presets::gaussian_four_leaf(), 1, &SeedStream::new(0), true).is_err());
}
