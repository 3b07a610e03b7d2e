//! Angular-margin temperature softmax and the training objectives built on it.
//!
//! For an embedding `z`, a target candidate `u_t` and the remaining
//! candidates `u_l`,
//!
//! ```text
//! p = exp(cos(θ_t + m)/τ) / (exp(cos(θ_t + m)/τ) + Σ_l exp(cos θ_l / τ))
//! ```
//!
//! where `θ` is the angle between `z` and a candidate. `cos(θ + m)` is
//! expanded as `cos θ cos m − sin θ sin m` with `sin θ = sqrt(1 − cos²θ)`,
//! so no `acos` is ever taken. Only the target gets the margin.
//!
//! * assignment: target is the nearest same-class component, candidates are
//!   every live component of every class. Gradients reach encoder and bank.
//! * diversity: target is the true class, candidates are the class centroids
//!   behind a stop-gradient. Gradients reach the encoder only.
//! * progressive: like assignment, but the target comes from a frozen
//!   [`TargetSnapshot`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::bank::{cosine_similarity, MixtureBank};
use crate::encoder::TargetSnapshot;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginSoftmaxParams {
    /// Temperature `τ > 0`.
    pub tau: f64,
    /// Angular margin in radians; may be negative.
    pub margin: f64,
    /// Temperature decay per target update, in `(0, 1)`.
    pub gamma: f64,
}

impl Default for MarginSoftmaxParams {
    fn default() -> Self {
        Self {
            tau: 0.05,
            margin: -0.02,
            gamma: 0.8,
        }
    }
}

impl MarginSoftmaxParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        Ok(())
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }
}

/// `cos(θ + m)` from `cos θ`.
fn cos_plus_margin(cos: f64, m: f64) -> f64 {
    let c = cos.clamp(-1.0, 1.0);
    let s = (1.0 - c * c).max(0.0).sqrt();
    c * m.cos() - s * m.sin()
}

/// Probability of `candidates[target]` for embedding `z`, evaluated directly.
pub fn margin_softmax_prob(
    z: &[f64],
    candidates: &[&[f64]],
    target: usize,
    params: &MarginSoftmaxParams,
) -> Result<f64> {
    if target >= candidates.len() {
        return Err(Error::Index {
            what: "candidates",
            index: target,
            len: candidates.len(),
        });
    }
    let logits = candidates
        .iter()
        .enumerate()
        .map(|(l, u)| {
            let c = cosine_similarity(z, u)?;
            let c = if l == target {
                cos_plus_margin(c, params.margin)
            } else {
                c
            };
            Ok(c / params.tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((logits[target] - log_sum_exp(&logits)).exp())
}

/// Row-normalises a matrix on the tape.
fn normalize_rows(tape: &mut Tape, x: Var, what: &'static str) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ss = tape.sum_rows(sq)?;
    if tape.value(ss).data().iter().any(|&v| v == 0.0) {
        return Err(Error::ZeroNorm(what));
    }
    let n = tape.sqrt(ss);
    tape.div_col(x, n)
}

/// Mean `−log p` over the rows of `z`, where row `i` targets
/// `candidates[targets[i]]`.
pub fn margin_nll(
    tape: &mut Tape,
    z: Var,
    candidates: Var,
    targets: &[usize],
    params: &MarginSoftmaxParams,
) -> Result<Var> {
    let zn = normalize_rows(tape, z, "embedding")?;
    let un = normalize_rows(tape, candidates, "candidate")?;
    let raw = tape.matmul_t(zn, un)?;
    let cos = tape.clamp(raw, -1.0, 1.0);

    let ct = tape.pick_cols(cos, targets)?;
    let ct2 = tape.mul(ct, ct)?;
    let one_minus = {
        let neg = tape.scale(ct2, -1.0);
        tape.add_scalar(neg, 1.0)
    };
    let clamped = tape.clamp(one_minus, 0.0, 1.0);
    let st = tape.sqrt(clamped);
    let a = tape.scale(ct, params.margin.cos());
    let b = tape.scale(st, params.margin.sin());
    let with_margin = tape.sub(a, b)?;

    let mixed = tape.put_cols(cos, targets, with_margin)?;
    let logits = tape.scale(mixed, 1.0 / params.tau);
    let lse = tape.log_sum_exp_rows(logits)?;
    let tgt = tape.pick_cols(logits, targets)?;
    let nll = tape.sub(lse, tgt)?;
    Ok(tape.mean(nll))
}

/// Nearest same-class live component for every row of `z`.
pub fn assign_nearest(z: &Tensor, classes: &[usize], bank: &MixtureBank) -> Result<Vec<usize>> {
    classes
        .iter()
        .enumerate()
        .map(|(i, &k)| bank.nearest_component(z.row(i), k))
        .collect()
}

/// Pseudo-labels from the frozen target for a batch of raw inputs.
pub fn assign_from_target(
    inputs: &Tensor,
    classes: &[usize],
    target: &TargetSnapshot,
) -> Result<Vec<usize>> {
    let z = target.encoder().embed(inputs)?;
    assign_nearest(&z, classes, target.bank())
}

/// Margin loss of `z` against all live components with the given
/// pseudo-labels (global component indices).
pub fn assignment_loss_with_labels(
    tape: &mut Tape,
    z: Var,
    bank_var: Var,
    bank: &MixtureBank,
    pseudo: &[usize],
    params: &MarginSoftmaxParams,
) -> Result<Var> {
    let live = bank.live_indices();
    let mut position = vec![usize::MAX; bank.len()];
    for (p, &j) in live.iter().enumerate() {
        position[j] = p;
    }
    let targets = pseudo
        .iter()
        .map(|&j| match position.get(j) {
            Some(&p) if p != usize::MAX => Ok(p),
            _ => Err(Error::DeadComponent(j)),
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates = tape.gather_rows(bank_var, &live)?;
    margin_nll(tape, z, candidates, &targets, params)
}

/// Assignment loss. Returns the loss node and the pseudo-labels used.
pub fn assignment_loss(
    tape: &mut Tape,
    z: Var,
    bank_var: Var,
    bank: &MixtureBank,
    classes: &[usize],
    params: &MarginSoftmaxParams,
) -> Result<(Var, Vec<usize>)> {
    let pseudo = assign_nearest(tape.value(z), classes, bank)?;
    let loss = assignment_loss_with_labels(tape, z, bank_var, bank, &pseudo, params)?;
    Ok((loss, pseudo))
}

/// Diversity loss towards the stop-gradient class centroids.
pub fn diversity_loss(
    tape: &mut Tape,
    z: Var,
    bank_var: Var,
    bank: &MixtureBank,
    classes: &[usize],
    params: &MarginSoftmaxParams,
) -> Result<Var> {
    let weights = tape.leaf(bank.centroid_weights()?);
    let centroids = tape.matmul(weights, bank_var)?;
    let frozen = tape.stop_gradient(centroids);
    margin_nll(tape, z, frozen, classes, params)
}

/// Loss terms of the initial stage.
#[derive(Clone, Debug)]
pub struct InitialLoss {
    pub total: Var,
    pub assignment: Var,
    pub diversity: Var,
    pub pseudo: Vec<usize>,
}

/// Unweighted sum of the assignment and diversity losses.
pub fn initial_loss(
    tape: &mut Tape,
    z: Var,
    bank_var: Var,
    bank: &MixtureBank,
    classes: &[usize],
    params: &MarginSoftmaxParams,
) -> Result<InitialLoss> {
    let (assignment, pseudo) = assignment_loss(tape, z, bank_var, bank, classes, params)?;
    let diversity = diversity_loss(tape, z, bank_var, bank, classes, params)?;
    let total = tape.add(assignment, diversity)?;
    Ok(InitialLoss {
        total,
        assignment,
        diversity,
        pseudo,
    })
}

/// Progressive-following loss: pseudo-labels come from `target` applied to
/// the raw `inputs`; scoring uses the live `z` and bank.
#[allow(clippy::too_many_arguments)]
pub fn progressive_loss(
    tape: &mut Tape,
    z: Var,
    bank_var: Var,
    bank: &MixtureBank,
    inputs: &Tensor,
    classes: &[usize],
    target: &TargetSnapshot,
    params: &MarginSoftmaxParams,
) -> Result<(Var, Vec<usize>)> {
    let pseudo = assign_from_target(inputs, classes, target)?;
    let loss = assignment_loss_with_labels(tape, z, bank_var, bank, &pseudo, params)?;
    Ok((loss, pseudo))
}
