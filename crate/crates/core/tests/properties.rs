//! Randomised invariants of the scorer, the nearest-component rule, and the
//! feature file format.

use mixtfsl::bank::{nearest_component_target, MixtureBank};
use mixtfsl::data::{load_features, write_features, Dataset, Split};
use mixtfsl::encoder::{init_encoder, snapshot};
use mixtfsl::losses::{margin_softmax_prob, MarginSoftmaxParams};
use mixtfsl::seed::rng_for;
use mixtfsl::Tensor;
use proptest::prelude::*;

fn vec_in(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, usize)> {
    (2usize..=8, 1usize..=6).prop_flat_map(|(dim, n)| (vec_in(dim), prop::collection::vec(vec_in(dim), n), 0..n))
}

fn refs(c: &[Vec<f64>]) -> Vec<&[f64]> {
    c.iter().map(|v| v.as_slice()).collect()
}

fn plain_softmax(z: &[f64], c: &[Vec<f64>], t: usize, tau: f64) -> f64 {
    let cos = |u: &[f64]| {
        let d: f64 = z.iter().zip(u).map(|(a, b)| a * b).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (n(z) * n(u))
    };
    let l: Vec<f64> = c.iter().map(|u| cos(u) / tau).collect();
    let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = l.iter().map(|x| (x - mx).exp()).sum();
    (l[t] - mx).exp() / s
}

proptest! {
    #[test]
    fn probability_is_scale_invariant((z, c, t) in problem(), s in 1e-3..1e3f64, tau in 0.05..1.0f64, m in -0.3..0.3f64) {
        let p = MarginSoftmaxParams { tau, margin: m, gamma: 0.8 };
        let a = margin_softmax_prob(&z, &refs(&c), t, &p).unwrap();
        let zs: Vec<f64> = z.iter().map(|x| x * s).collect();
        let b = margin_softmax_prob(&zs, &refs(&c), t, &p).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn zero_margin_is_cosine_softmax((z, c, t) in problem(), tau in 0.05..1.0f64) {
        let p = MarginSoftmaxParams { tau, margin: 0.0, gamma: 0.8 };
        let a = margin_softmax_prob(&z, &refs(&c), t, &p).unwrap();
        prop_assert!((a - plain_softmax(&z, &c, t, tau)).abs() <= 1e-12);
    }

    #[test]
    fn single_candidate_is_certain(z in vec_in(5), u in vec_in(5), tau in 0.01..2.0f64, m in -0.5..0.5f64) {
        let p = MarginSoftmaxParams { tau, margin: m, gamma: 0.8 };
        prop_assert_eq!(margin_softmax_prob(&z, &[&u], 0, &p).unwrap(), 1.0);
    }

    #[test]
    fn lower_tau_sharpens_the_winner((z, c, _t) in problem(), tau in 0.05..1.0f64) {
        // the most similar candidate gains probability as tau shrinks
        prop_assume!(c.len() >= 2);
        let best = (0..c.len()).max_by(|&a, &b| plain_softmax(&z, &c, a, 1.0).total_cmp(&plain_softmax(&z, &c, b, 1.0))).unwrap();
        let at = |tau: f64| margin_softmax_prob(&z, &refs(&c), best, &MarginSoftmaxParams { tau, margin: 0.0, gamma: 0.8 }).unwrap();
        prop_assert!(at(tau * 0.8) >= at(tau) - 1e-12);
    }

    #[test]
    fn margin_is_monotone((z, c, t) in problem(), tau in 0.05..1.0f64, m1 in -0.3..0.3f64, dm in 0.0..0.3f64) {
        // a larger positive angular margin never raises the target's probability
        // while theta + m stays within [0, pi]
        let theta = {
            let d: f64 = z.iter().zip(&c[t]).map(|(a, b)| a * b).sum();
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d / (n(&z) * n(&c[t]))).clamp(-1.0, 1.0).acos()
        };
        prop_assume!(theta + m1 >= 0.0 && theta + m1 + dm <= std::f64::consts::PI);
        let at = |m: f64| margin_softmax_prob(&z, &refs(&c), t, &MarginSoftmaxParams { tau, margin: m, gamma: 0.8 }).unwrap();
        prop_assert!(at(m1 + dm) <= at(m1) + 1e-12);
    }

    #[test]
    fn nearest_component_ignores_scale(z in vec_in(4), s in 1e-3..1e3f64, seed in 0u64..1000) {
        let rng = &mut rng_for(seed, "prop/bank");
        let bank = mixtfsl::bank::init_bank(2, 4, 4, rng).unwrap();
        let zs: Vec<f64> = z.iter().map(|x| x * s).collect();
        for k in 0..2 {
            prop_assert_eq!(bank.nearest_component(&z, k).unwrap(), bank.nearest_component(&zs, k).unwrap());
        }
    }

    #[test]
    fn target_assignment_ignores_input_scale_of_linear_encoder(x in vec_in(3), s in 1e-2..1e2f64, seed in 0u64..1000) {
        // bias-free single linear layer: f(s x) = s f(x)
        let rng = &mut rng_for(seed, "prop/target");
        let mut enc = init_encoder(&[3, 4], rng).unwrap();
        enc.layers[0].bias = Tensor::zeros(&[4]);
        let bank: MixtureBank = mixtfsl::bank::init_bank(2, 3, 4, rng).unwrap();
        let t = snapshot(&enc, &bank);
        let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
        for k in 0..2 {
            prop_assert_eq!(nearest_component_target(&x, &t, k).unwrap(), nearest_component_target(&xs, &t, k).unwrap());
        }
    }

    #[test]
    fn feature_csv_round_trips(
        rows in prop::collection::vec((prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), -1i64..4), 1..20),
        label in -50i64..50,
    ) {
        let n = rows.len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
        let ds = Dataset::new(Split::Novel, Tensor::matrix(n, 3, data).unwrap(), vec![label; n], rows.iter().map(|r| r.1).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_features(&path, &[&ds]).unwrap();
        let back = load_features(&path).unwrap();
        prop_assert_eq!(&back.novel, &ds);
        prop_assert!(back.base.is_empty() && back.val.is_empty());
    }
}
