//! Evaluation statistics and the planted structure of the synthetic data.

use mixtfsl::bank::MixtureBank;
use mixtfsl::data::{generate, Dataset, Split, SynthSpec};
use mixtfsl::encoder::{snapshot, DenseLayer, EncoderParams};
use mixtfsl::episodes::{
    evaluate_embeddings, mean_ci95, sample_episodes, shuffle_query_labels, EpisodeShape, Protocol,
};
use mixtfsl::losses::assign_from_target;
use mixtfsl::seed::rng_for;
use mixtfsl::trainer::{validate, ValidationConfig};
use mixtfsl::Tensor;

fn identity_encoder(d: usize) -> EncoderParams {
    EncoderParams::from_layers(
        vec![d, d],
        vec![DenseLayer {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(&[d]),
        }],
    )
    .unwrap()
}

#[test]
fn two_episode_ci_example() {
    let (m, ci) = mean_ci95(&[1.0, 0.0]);
    assert_eq!(m, 0.5);
    assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    assert!((ci - 0.98).abs() < 1e-12);
}

#[test]
fn shuffled_labels_score_chance() {
    let data = generate(&SynthSpec::default()).unwrap();
    let novel = &data.splits.novel;
    let shape = EpisodeShape::default();
    let mut episodes = sample_episodes(novel, shape, 600, 3, "chance").unwrap();
    for (i, ep) in episodes.iter_mut().enumerate() {
        shuffle_query_labels(ep, &mut rng_for(3, &format!("shuffle/{i}")));
    }
    let accs = evaluate_embeddings(novel.features(), &episodes, &Protocol::NearestCentroid).unwrap();
    let (m, ci) = mean_ci95(&accs);
    assert!((m - 0.2).abs() <= ci, "mean {m} ± {ci}");
}

#[test]
fn ci_shrinks_like_inverse_sqrt_n() {
    let data = generate(&SynthSpec::default()).unwrap();
    let mut episodes = sample_episodes(&data.splits.novel, EpisodeShape::default(), 800, 4, "ci").unwrap();
    // chance-level accuracies have a well-behaved spread
    for (i, ep) in episodes.iter_mut().enumerate() {
        shuffle_query_labels(ep, &mut rng_for(4, &format!("shuffle/{i}")));
    }
    let accs = evaluate_embeddings(data.splits.novel.features(), &episodes, &Protocol::NearestCentroid).unwrap();
    let (_, ci200) = mean_ci95(&accs[..200]);
    let (_, ci800) = mean_ci95(&accs);
    let ratio = ci200 / ci800;
    assert!((1.5..2.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn separated_validation_clusters_have_no_error() {
    let spec = SynthSpec {
        min_modes: 1,
        max_modes: 1,
        mode_std: 0.01,
        class_separation: 6.0,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let enc = identity_encoder(spec.dim);
    let cfg = ValidationConfig::default();
    let e1 = validate(&enc, &data.splits.val, &cfg, 5).unwrap();
    let e2 = validate(&enc, &data.splits.val, &cfg, 5).unwrap();
    assert!(e1 < 1e-9, "error {e1}");
    assert_eq!(e1, e2);
}

#[test]
fn validation_rejects_too_few_classes() {
    let spec = SynthSpec {
        val_classes: 3,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    assert!(validate(&identity_encoder(spec.dim), &data.splits.val, &ValidationConfig::default(), 0).is_err());
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's 2-means restarted from every pair of samples; lowest inertia wins.
fn two_means(points: &[&[f64]]) -> [Vec<f64>; 2] {
    let mut best = (f64::INFINITY, [points[0].to_vec(), points[1].to_vec()]);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let mut c = [points[i].to_vec(), points[j].to_vec()];
            for _ in 0..50 {
                let mut sums = [vec![0.0; c[0].len()], vec![0.0; c[0].len()]];
                let mut n = [0usize; 2];
                for p in points {
                    let k = usize::from(sq(p, &c[1]) < sq(p, &c[0]));
                    sums[k].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
                    n[k] += 1;
                }
                if n.contains(&0) {
                    break;
                }
                for k in 0..2 {
                    c[k] = sums[k].iter().map(|s| s / n[k] as f64).collect();
                }
            }
            let inertia: f64 = points.iter().map(|p| sq(p, &c[0]).min(sq(p, &c[1]))).sum();
            if inertia < best.0 {
                best = (inertia, c);
            }
        }
    }
    best.1
}

#[test]
fn two_means_recovers_planted_modes() {
    let spec = SynthSpec {
        min_modes: 2,
        max_modes: 2,
        mode_std: 0.3,
        mode_separation: 6.0,
        samples_per_class: 40,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let base = &data.splits.base;
    for label in [0i64, 5, 11] {
        let idx = &base.indices_by_class()[&label];
        let pts: Vec<&[f64]> = idx.iter().map(|&i| base.sample(i)).collect();
        let found = two_means(&pts);
        let planted = &data.mode_means[label as usize];
        let sep = sq(&planted[0], &planted[1]).sqrt();
        let err = |a: usize, b: usize| sq(&found[a], &planted[0]).sqrt().max(sq(&found[b], &planted[1]).sqrt());
        let e = err(0, 1).min(err(1, 0));
        assert!(e <= 0.1 * sep, "label {label}: error {e} vs separation {sep}");
    }
}

#[test]
fn components_on_the_modes_split_the_class() {
    // identity encoder, one class, components placed at the two planted modes
    let spec = SynthSpec {
        base_classes: 1,
        min_modes: 2,
        max_modes: 2,
        mode_std: 0.2,
        mode_separation: 5.0,
        ..SynthSpec::default()
    };
    let data = generate(&spec).unwrap();
    let modes = &data.mode_means[0];
    let comps = Tensor::from_rows(&[modes[0].clone(), modes[1].clone()]).unwrap();
    let bank = MixtureBank::from_components(comps, vec![0, 0], 1).unwrap();
    let target = snapshot(&identity_encoder(spec.dim), &bank);
    let base: &Dataset = &data.splits.base;
    assert_eq!(base.split, Split::Base);
    let pseudo = assign_from_target(base.features(), &vec![0; base.len()], &target).unwrap();
    let agree = pseudo.iter().zip(base.modes()).filter(|(p, m)| **p as i64 == **m).count();
    assert!(agree as f64 >= 0.95 * base.len() as f64, "{agree}/{}", base.len());
}

#[test]
fn synthetic_row_counts_and_modes() {
    let spec = SynthSpec::default();
    let data = generate(&spec).unwrap();
    assert_eq!(data.splits.base.len(), 16 * 120);
    assert_eq!(data.splits.val.len(), 8 * 120);
    assert_eq!(data.splits.novel.len(), 8 * 120);
    for (label, modes) in data.mode_means.iter().enumerate() {
        assert!((2..=3).contains(&modes.len()), "label {label}");
    }
}
