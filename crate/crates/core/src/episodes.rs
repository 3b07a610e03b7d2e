//! Inductive N-way K-shot evaluation.
//!
//! Episodes are drawn independently from per-episode generators derived from
//! one seed, so the result does not depend on evaluation order or thread
//! count.

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};
use crate::tensor::{dot, norm, Tensor};

/// Shape of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
        }
    }
}

/// One simulated few-shot task. Indices point into the source dataset;
/// labels are episode-local in `0..n_way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<i64>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

pub fn sample_episode(dataset: &Dataset, shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    let EpisodeShape {
        n_way,
        k_shot,
        n_query,
    } = shape;
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("n_way and k_shot must be >= 1".into()));
    }
    let need = k_shot + n_query;
    let by_class = dataset.indices_by_class();
    let eligible: Vec<(&i64, &Vec<usize>)> = by_class.iter().filter(|(_, v)| v.len() >= need).collect();
    if eligible.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "{n_way}-way episode needs {n_way} classes with >= {need} samples; {} of {} classes qualify",
            eligible.len(),
            by_class.len()
        )));
    }
    let chosen = index::sample(rng, eligible.len(), n_way);
    let mut ep = Episode {
        classes: Vec::with_capacity(n_way),
        support: Vec::with_capacity(n_way * k_shot),
        support_labels: Vec::with_capacity(n_way * k_shot),
        query: Vec::with_capacity(n_way * n_query),
        query_labels: Vec::with_capacity(n_way * n_query),
    };
    for (local, ci) in chosen.into_iter().enumerate() {
        let (&label, members) = eligible[ci];
        ep.classes.push(label);
        let picks = index::sample(rng, members.len(), need);
        for (n, p) in picks.into_iter().enumerate() {
            if n < k_shot {
                ep.support.push(members[p]);
                ep.support_labels.push(local);
            } else {
                ep.query.push(members[p]);
                ep.query_labels.push(local);
            }
        }
    }
    Ok(ep)
}

/// Linear classifier trained on frozen support embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    pub bias: bool,
    /// L2-normalise embeddings before the head.
    pub normalize: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            bias: true,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `n_way × M`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub normalize: bool,
}

impl LinearHead {
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let z = if self.normalize { normalize_rows(z) } else { z.clone() };
        let mut out = z.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            let c = out.cols();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += b.data()[i % c];
            }
        }
        Ok(out)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(z)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

fn normalize_rows(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n > 0.0 {
            out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Full-batch gradient descent on softmax cross-entropy, zero init.
pub fn fit_linear_head(z: &Tensor, labels: &[usize], n_way: usize, cfg: &HeadConfig) -> Result<LinearHead> {
    if z.rows() != labels.len() {
        return Err(Error::Shape {
            op: "fit_linear_head",
            left: z.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let z = if cfg.normalize { normalize_rows(z) } else { z.clone() };
    let mut weight = Tensor::zeros(&[n_way, z.cols()]);
    let mut bias = Tensor::zeros(&[n_way]);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.leaf(z.clone());
        let w = tape.leaf(weight.clone());
        let b = tape.leaf(bias.clone());
        let mut logits = tape.matmul_t(x, w)?;
        if cfg.bias {
            logits = tape.add_row(logits, b)?;
        }
        let lse = tape.log_sum_exp_rows(logits)?;
        let tgt = tape.pick_cols(logits, labels)?;
        let nll = tape.sub(lse, tgt)?;
        let loss = tape.mean(nll);
        let g = tape.backward(loss)?;
        let gw = g.get(w);
        weight.data_mut().iter_mut().zip(gw.data()).for_each(|(p, d)| *p -= cfg.lr * d);
        if cfg.bias {
            let gb = g.get(b);
            bias.data_mut().iter_mut().zip(gb.data()).for_each(|(p, d)| *p -= cfg.lr * d);
        }
    }
    Ok(LinearHead {
        weight,
        bias: cfg.bias.then_some(bias),
        normalize: cfg.normalize,
    })
}

/// Trains a head on the episode's support set with the encoder held fixed.
pub fn finetune_head(
    encoder: &EncoderParams,
    dataset: &Dataset,
    episode: &Episode,
    cfg: &HeadConfig,
) -> Result<LinearHead> {
    let z = encoder.embed(&dataset.gather(&episode.support))?;
    fit_linear_head(&z, &episode.support_labels, episode.classes.len(), cfg)
}

/// How query samples are classified inside an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Cosine similarity to the per-class mean support embedding.
    NearestCentroid,
    /// Linear softmax head fitted on the support embeddings.
    LinearHead(HeadConfig),
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::LinearHead(HeadConfig::default())
    }
}

fn safe_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Query accuracy of one episode given precomputed embeddings of the whole
/// dataset (row `i` embeds sample `i`).
pub fn episode_accuracy(embeddings: &Tensor, episode: &Episode, protocol: &Protocol) -> Result<f64> {
    if episode.query.is_empty() {
        return Err(Error::InsufficientData("episode has no query samples".into()));
    }
    let n_way = episode.classes.len();
    let queries = embeddings.gather_rows(&episode.query)?;
    let predictions: Vec<usize> = match protocol {
        Protocol::NearestCentroid => {
            let m = embeddings.cols();
            let mut protos = vec![vec![0.0; m]; n_way];
            let mut counts = vec![0usize; n_way];
            for (&i, &l) in episode.support.iter().zip(&episode.support_labels) {
                protos[l].iter_mut().zip(embeddings.row(i)).for_each(|(p, x)| *p += x);
                counts[l] += 1;
            }
            for (p, &c) in protos.iter_mut().zip(&counts) {
                p.iter_mut().for_each(|x| *x /= c.max(1) as f64);
            }
            (0..queries.rows())
                .map(|q| {
                    let sims: Vec<f64> = protos.iter().map(|p| safe_cosine(queries.row(q), p)).collect();
                    argmax(&sims)
                })
                .collect()
        }
        Protocol::LinearHead(cfg) => {
            let support = embeddings.gather_rows(&episode.support)?;
            fit_linear_head(&support, &episode.support_labels, n_way, cfg)?.predict(&queries)?
        }
    };
    let correct = predictions
        .iter()
        .zip(&episode.query_labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Mean and 95% confidence half-width `1.96·s/√n` (sample standard deviation).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub shape: EpisodeShape,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

impl EvalResult {
    pub fn from_accuracies(shape: EpisodeShape, accuracies: Vec<f64>) -> Self {
        let (mean, ci95) = mean_ci95(&accuracies);
        Self {
            shape,
            accuracies,
            mean,
            ci95,
        }
    }
}

/// Samples the episodes for `(seed, label)`; episode `i` uses its own stream.
pub fn sample_episodes(
    dataset: &Dataset,
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
    label: &str,
) -> Result<Vec<Episode>> {
    (0..n_episodes)
        .map(|i| sample_episode(dataset, shape, &mut rng_for(seed, &format!("{label}/{i}"))))
        .collect()
}

/// Accuracy of every episode against precomputed embeddings, in episode order.
pub fn evaluate_embeddings(embeddings: &Tensor, episodes: &[Episode], protocol: &Protocol) -> Result<Vec<f64>> {
    episodes
        .par_iter()
        .map(|ep| episode_accuracy(embeddings, ep, protocol))
        .collect()
}

/// Few-shot accuracy of a frozen encoder on `dataset`.
pub fn evaluate(
    encoder: &EncoderParams,
    dataset: &Dataset,
    protocol: &Protocol,
    shape: EpisodeShape,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if encoder.input_dim() != dataset.dim() {
        return Err(Error::Shape {
            op: "evaluate",
            left: vec![encoder.input_dim()],
            right: vec![dataset.dim()],
        });
    }
    let episodes = sample_episodes(dataset, shape, n_episodes, seed, "eval")?;
    let embeddings = encoder.embed(dataset.features())?;
    let accs = evaluate_embeddings(&embeddings, &episodes, protocol)?;
    Ok(EvalResult::from_accuracies(shape, accs))
}

/// Randomly relabels the query set of an episode (chance-level control).
pub fn shuffle_query_labels(episode: &mut Episode, rng: &mut Rng) {
    episode.query_labels.shuffle(rng);
}
