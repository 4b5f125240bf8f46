mod common;

use asymseg::alignment::alignment_loss;
use asymseg::encoder::TierName;
use asymseg::fuser::{fuse, prior_matrix};
use asymseg::metrics::ConfusionMatrix;
use asymseg::model::ModelConfig;
use asymseg::nn::{ParamStore, Session};
use asymseg::profile::profile_model;
use asymseg::tensor::Tensor;
use common::checks;
use proptest::prelude::*;

#[test]
fn prior_rows_identity_and_convexity() {
    checks::prior_and_fusion(1000).unwrap();
}

#[test]
fn alignment_invariants() {
    checks::alignment().unwrap();
}

#[test]
fn metrics_match_brute_force_tally() {
    checks::metrics().unwrap();
}

#[test]
fn profiler_ordering_and_matcher_overhead() {
    checks::profiler().unwrap();
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0..5.0f64, n * d).prop_map(move |v| Tensor::from_f64([n, d], &v).unwrap())
}

fn token_triple() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (1usize..10, 1usize..6).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), matrix(n, d)))
}

fn distribution(l: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-6..1.0f64, l).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fused_tokens_stay_in_the_context_hull((sem, st, con) in token_triple()) {
        let (n, d) = (con.shape()[0], con.shape()[1]);
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, false);
        let (a, b, c) = (s.graph.constant(sem), s.graph.constant(st), s.graph.constant(con.clone()));
        let p = prior_matrix(&mut s, a, b).unwrap();
        for row in s.graph.value(p).data().chunks_exact(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let f = fuse(&mut s, p, c).unwrap();
        let (fv, cv) = (s.graph.value(f).data(), con.data());
        for j in 0..d {
            let lo = (0..n).map(|i| cv[i * d + j]).fold(f64::INFINITY, f64::min);
            let hi = (0..n).map(|i| cv[i * d + j]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                prop_assert!(fv[i * d + j] >= lo - 1e-12 && fv[i * d + j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn divergence_is_non_negative((p, q) in (2usize..20).prop_flat_map(|l| (distribution(l), distribution(l)))) {
        let l = p.len();
        let mut store = ParamStore::<f64>::new();
        let mut s = Session::new(&mut store, true);
        let pv = s.graph.constant(Tensor::from_f64([1, l], &p).unwrap());
        let qv = s.graph.constant(Tensor::from_f64([1, l], &q).unwrap());
        let same = s.graph.constant(Tensor::from_f64([1, l], &p).unwrap());
        let k = alignment_loss(&mut s, pv, qv).unwrap();
        let z = alignment_loss(&mut s, pv, same).unwrap();
        prop_assert!(s.graph.value(k).item() >= 0.0);
        prop_assert!(s.graph.value(z).item().abs() <= 1e-9);
    }

    #[test]
    fn confusion_metrics_match_tally(
        pairs in prop::collection::vec((0u8..5, prop_oneof![9 => 0u8..5, 1 => Just(255u8)]), 1..300)
    ) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&pred, &truth).unwrap();
        prop_assume!(cm.total() > 0);
        let t = checks::brute_force(&pred, &truth, 5);
        prop_assert!((cm.moa().unwrap() - t.moa).abs() <= 1e-12);
        prop_assert!((cm.mf1().unwrap() - t.mf1).abs() <= 1e-12);
        prop_assert!((cm.miou().unwrap() - t.miou).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn smaller_dsm_tier_is_cheaper_at_any_size(k in 1usize..5) {
        let size = 32 * k;
        let cost = |dsm| {
            let cfg = ModelConfig { rgb_tier: TierName::Base, dsm_tier: Some(dsm), ..ModelConfig::default() };
            profile_model(&cfg, size).unwrap()
        };
        let (small, base) = (cost(TierName::Small), cost(TierName::Base));
        prop_assert!(small.flops < base.flops);
        prop_assert!(small.params < base.params);
    }
}
