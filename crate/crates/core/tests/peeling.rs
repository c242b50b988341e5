use hodlr_core::hodlr::{best_hodlr, random_hodlr, HodlrMatrix, Layout};
use hodlr_core::linops::{make_hard_block_instance, Counted, DenseOperator};
use hodlr_core::peel::{gn_peel, peel, rsvd_peel, PeelConfig, Variant};
use hodlr_core::rng::{gaussian_matrix, StreamKey};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn exact_instance(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
    random_hodlr(n, k, &mut StreamKey::new(seed).rng()).unwrap().to_dense().unwrap()
}

fn rel_err(h: &HodlrMatrix, a: &DMatrix<f64>) -> f64 {
    (h.to_dense().unwrap() - a).norm() / a.norm()
}

#[test]
fn exact_inputs_are_fixed_points() {
    let a = exact_instance(32, 2, 1);
    let op = DenseOperator::new(a.clone()).unwrap();
    for variant in [Variant::GeneralizedNystrom, Variant::Rsvd] {
        for t in 1..=4 {
            let cfg = PeelConfig::new(variant, 2, 2, t, 2, t).with_seed(t as u64);
            let (h, _) = peel(&op, &cfg).unwrap();
            assert!(rel_err(&h, &a) <= 1e-8, "{variant} t={t}: {:e}", rel_err(&h, &a));
        }
    }
    let a = exact_instance(256, 4, 2);
    let op = DenseOperator::new(a.clone()).unwrap();
    for t in 1..=3 {
        let (h, _) = rsvd_peel(&op, &PeelConfig::new(Variant::Rsvd, 4, 4, t, 4, t)).unwrap();
        assert!(rel_err(&h, &a) <= 1e-8);
    }
}

#[test]
fn gn_output_assembles_to_source() {
    let a = exact_instance(64, 2, 3);
    let op = DenseOperator::new(a.clone()).unwrap();
    let (h, _) = gn_peel(&op, &PeelConfig::new(Variant::GeneralizedNystrom, 2, 4, 1, 8, 1)).unwrap();
    assert!(rel_err(&h, &a) <= 1e-9);
    let back = HodlrMatrix::deserialize(&h.serialize()).unwrap();
    assert_eq!(back, h);
}

#[test]
fn untruncated_blocks_keep_sketch_rank() {
    let a = gaussian_matrix(64, 64, &mut StreamKey::new(4).rng());
    let op = DenseOperator::new(a.clone()).unwrap();
    let cfg = PeelConfig::new(Variant::GeneralizedNystrom, 2, 5, 1, 10, 1).with_truncation(false);
    let (h, _) = gn_peel(&op, &cfg).unwrap();
    assert_eq!(h.max_rank(), 5);
    let (t, _) = gn_peel(&op, &cfg.clone().with_truncation(true)).unwrap();
    assert_eq!(t.max_rank(), 2);
}

fn hard_block_ratios(s_r: usize, t: usize) -> Vec<f64> {
    let k = 1;
    let op = make_hard_block_instance(k, 1e8).unwrap();
    (0..20)
        .map(|seed| {
            let cfg = PeelConfig::new(Variant::Rsvd, k, s_r, t, s_r, t).with_seed(seed);
            let (h, _) = rsvd_peel(&op, &cfg).unwrap();
            (h.to_dense().unwrap() - op.matrix()).norm_squared() / 4.0
        })
        .collect()
}

#[test]
fn truncated_rsvd_doubles_hard_block_error() {
    let op = make_hard_block_instance(1, 1e8).unwrap();
    let best = best_hodlr(op.matrix(), 1).unwrap();
    assert!(((best.to_dense().unwrap() - op.matrix()).norm_squared() - 4.0).abs() < 1e-9);
    // Sketches wide enough to see the whole level-1 block make every trial land on 8 |X|^2.
    for r in hard_block_ratios(4, 1) {
        assert!((r - 2.0).abs() < 1e-6, "ratio {r}");
    }
}

#[test]
fn perforation_shrinks_hard_block_excess() {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let e8 = mean(hard_block_ratios(4, 8)) - 1.0;
    let e16 = mean(hard_block_ratios(4, 16)) - 1.0;
    assert!(e8 < 0.5, "excess at t=8: {e8}");
    assert!(e16 < 0.6 * e8, "excess t=8 {e8}, t=16 {e16}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn query_counts_are_exact(
        log_n in 3usize..7,
        k in 1usize..4,
        extra_r in 0usize..4,
        extra_l in 0usize..4,
        t_r in 1usize..4,
        t_l in 1usize..4,
        rsvd in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = 1 << log_n;
        let variant = if rsvd { Variant::Rsvd } else { Variant::GeneralizedNystrom };
        let s_r = k + extra_r;
        let cfg = PeelConfig::new(variant, k, s_r, t_r, s_r + extra_l, t_l).with_seed(seed);
        let op = Counted::new(DenseOperator::new(gaussian_matrix(n, n, &mut StreamKey::new(seed).rng())).unwrap());
        let (_, rep) = peel(&op, &cfg).unwrap();
        let layout = Layout::new(n, k).unwrap();
        let l = layout.levels;
        let transpose = match variant {
            Variant::GeneralizedNystrom => (2 * l + 1) * cfg.s_l * t_l,
            Variant::Rsvd => 2 * l * s_r * t_l + layout.n_base * t_l,
        };
        prop_assert_eq!(op.counter().forward(), 2 * l * s_r * t_r);
        prop_assert_eq!(op.counter().transpose(), transpose);
        prop_assert_eq!((rep.forward_queries, rep.transpose_queries), (op.counter().forward(), op.counter().transpose()));
    }

    #[test]
    fn peeling_is_deterministic(seed in any::<u64>(), rsvd in any::<bool>()) {
        let variant = if rsvd { Variant::Rsvd } else { Variant::GeneralizedNystrom };
        let op = DenseOperator::new(gaussian_matrix(32, 32, &mut StreamKey::new(seed).rng())).unwrap();
        let cfg = PeelConfig::new(variant, 2, 4, 2, 6, 2).with_seed(seed);
        prop_assert_eq!(peel(&op, &cfg).unwrap().0.serialize(), peel(&op, &cfg).unwrap().0.serialize());
    }
}
