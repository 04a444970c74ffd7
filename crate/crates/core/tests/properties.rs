//! Property tests for the semigroup algebra, the shift map, and the
//! weighted test-function distance.

use std::sync::Arc;

use proptest::prelude::*;
use slowfast_core::filtering::{distance_d, FilterEstimate, TestDictionary};
use slowfast_core::noise::{sample_path, CovarianceSpec, Grid};
use slowfast_core::spectral::{
    semigroup_apply, Block, HVector, SpaceName, SpaceSpec, SpectralOperator,
};

/// Blocks from the admissible family: energy-scaled wave blocks and stable
/// scalars, for which the semigroup norms stay within `e^{gamma1 |t|}`.
fn block_strategy() -> impl Strategy<Value = Block> {
    prop_oneof![
        (0.5f64..16.0, 0.0f64..1.5).prop_map(|(l, g)| Block::Two([[0.0, l], [-l, -g]])),
        (-1.5f64..0.0).prop_map(Block::One),
    ]
}

fn operator_strategy() -> impl Strategy<Value = SpectralOperator> {
    proptest::collection::vec(block_strategy(), 1..4).prop_map(|blocks| {
        let layout: Vec<usize> = blocks.iter().map(|b| b.size()).collect();
        let sp = Arc::new(SpaceSpec::new(SpaceName::H1, layout).unwrap());
        SpectralOperator::new(sp, blocks).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn semigroup_composition(op in operator_strategy(),
                             s in -5.0f64..5.0,
                             t in -5.0f64..5.0,
                             raw in proptest::collection::vec(-10.0f64..10.0, 8)) {
        let v = HVector::new(op.space.clone(), raw[..op.space.dim].to_vec()).unwrap();
        let mid = semigroup_apply(&op, t, &v).unwrap();
        let one = semigroup_apply(&op, s, &mid).unwrap();
        let two = semigroup_apply(&op, s + t, &v).unwrap();
        let diff: f64 = one
            .coeffs
            .iter()
            .zip(&two.coeffs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // relative to the largest magnitude the composition passes through
        let scale = v.norm().max(mid.norm()).max(two.norm()).max(1e-30);
        prop_assert!(diff <= 1e-12 * scale, "diff {diff} at scale {scale}");
    }

    #[test]
    fn semigroup_linearity(op in operator_strategy(),
                           t in -5.0f64..5.0,
                           alpha in -3.0f64..3.0,
                           beta in -3.0f64..3.0,
                           raw in proptest::collection::vec(-10.0f64..10.0, 16)) {
        let d = op.space.dim;
        let u = HVector::new(op.space.clone(), raw[..d].to_vec()).unwrap();
        let v = HVector::new(op.space.clone(), raw[8..8 + d].to_vec()).unwrap();
        let comb = HVector::new(
            op.space.clone(),
            (0..d).map(|i| alpha * u.coeffs[i] + beta * v.coeffs[i]).collect(),
        )
        .unwrap();
        let lhs = semigroup_apply(&op, t, &comb).unwrap();
        let eu = semigroup_apply(&op, t, &u).unwrap();
        let ev = semigroup_apply(&op, t, &v).unwrap();
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..d {
            let want = alpha * eu.coeffs[i] + beta * ev.coeffs[i];
            diff += (lhs.coeffs[i] - want) * (lhs.coeffs[i] - want);
            scale += want * want;
        }
        prop_assert!(diff.sqrt() <= 1e-12 * scale.sqrt().max(1.0));
    }

    #[test]
    fn fast_semigroup_dissipativity(entries in proptest::collection::vec(-8.0f64..-2.0, 1..5),
                                    eps in 0.01f64..0.5,
                                    raw in proptest::collection::vec(-10.0f64..10.0, 5),
                                    t in 0.0f64..3.0) {
        // realized decay at least e^{-gamma2 t / eps} with gamma2 = min |b|
        let d = entries.len();
        let gamma2 = entries.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
        let sp = Arc::new(SpaceSpec::diagonal(SpaceName::H2, d).unwrap());
        let b = SpectralOperator::diagonal(sp.clone(), entries).unwrap();
        let v = HVector::new(sp, raw[..d].to_vec()).unwrap();
        let decayed = semigroup_apply(&b, t / eps, &v).unwrap();
        prop_assert!(decayed.norm() <= (-gamma2 * t / eps).exp() * v.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn shift_flow_property(a in -40i64..40, b in -40i64..40, seed in 0u64..1000) {
        let c1 = CovarianceSpec::flat(1, 1.0).unwrap();
        let g = Grid::new(0.25, -25.0, 25.0).unwrap();
        let p = sample_path(&c1, &c1, 0, g, seed, 0);
        let v = p.view();
        let lhs = v.shifted_cells(a).shifted_cells(b);
        let rhs = v.shifted_cells(a + b);
        for k in -5..5 {
            prop_assert_eq!(lhs.w1(k).unwrap(), rhs.w1(k).unwrap());
        }
    }

    #[test]
    fn distance_bounded_by_dictionary(vals_a in proptest::collection::vec(-1.0f64..1.0, 16),
                                      vals_b in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let dict = TestDictionary::default_for_dim(4, 16, 1.0).unwrap();
        let a = FilterEstimate { t: 0.0, pi: vals_a, log_rho1: 0.0, ess: 2.0 };
        let b = FilterEstimate { t: 0.0, pi: vals_b, log_rho1: 0.0, ess: 2.0 };
        let d = distance_d(&a, &b, &dict).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(d <= dict.distance_bound() + 1e-15);
        let self_d = distance_d(&a, &a, &dict).unwrap();
        prop_assert_eq!(self_d, 0.0);
    }
}
