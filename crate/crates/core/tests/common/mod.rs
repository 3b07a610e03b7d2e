//! Shared fixtures for the integration tests: a finite-difference oracle
//! for the training losses and small training helpers.

#![allow(dead_code)]

use mixtfsl::autodiff::Tape;
use mixtfsl::bank::{init_bank, MixtureBank};
use mixtfsl::encoder::{init_encoder, snapshot, EncoderParams, TargetSnapshot};
use mixtfsl::losses::{assignment_loss, diversity_loss, initial_loss, progressive_loss, MarginSoftmaxParams};
use mixtfsl::seed::{rng_for, Rng};
use mixtfsl::Tensor;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so that exact zeros on one
/// side do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Assignment,
    Diversity,
    Initial,
    Progressive,
}

pub const ALL_LOSSES: [LossKind; 4] = [
    LossKind::Assignment,
    LossKind::Diversity,
    LossKind::Initial,
    LossKind::Progressive,
];

#[derive(Clone, Debug)]
pub struct Instance {
    pub encoder: EncoderParams,
    pub bank: MixtureBank,
    pub inputs: Tensor,
    pub classes: Vec<usize>,
    pub target: TargetSnapshot,
    pub params: MarginSoftmaxParams,
}

fn jitter(t: &mut Tensor, rng: &mut Rng, scale: f64) {
    t.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-scale..scale));
}

/// A random small problem: M <= 8, <= 3 classes, <= 4 components per class,
/// a one-hidden-layer encoder, some dead components, and a target snapshot
/// that differs from the live model.
pub fn random_instance(seed: u64, index: usize) -> Instance {
    let rng = &mut rng_for(seed, &format!("gradcheck/{index}"));
    let d = rng.random_range(2..=5);
    let h = rng.random_range(3..=6);
    let m = rng.random_range(2..=8);
    let classes_n = rng.random_range(1..=3);
    let per = rng.random_range(1..=4);
    let b = rng.random_range(1..=5);
    let mut encoder = init_encoder(&[d, h, m], rng).unwrap();
    for l in &mut encoder.layers {
        jitter(&mut l.bias, rng, 0.3);
    }
    let mut bank = init_bank(classes_n, per, m, rng).unwrap();
    // kill one component of some classes, never the last one
    for k in 0..classes_n {
        if per > 1 && rng.random_bool(0.5) {
            bank.kill(&[k * per + rng.random_range(0..per)]);
        }
    }
    let target = {
        let mut te = encoder.clone();
        te.tensors_mut().for_each(|t| jitter(t, rng, 0.2));
        let mut tb = bank.clone();
        jitter(tb.components_mut(), rng, 0.2);
        snapshot(&te, &tb)
    };
    let inputs = Tensor::matrix(b, d, (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let classes = (0..b).map(|_| rng.random_range(0..classes_n)).collect();
    let params = MarginSoftmaxParams {
        tau: rng.random_range(0.05..1.0),
        margin: rng.random_range(-0.1..0.1),
        gamma: 0.8,
    };
    Instance {
        encoder,
        bank,
        inputs,
        classes,
        target,
        params,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(-1.0, 1.0)
}

/// Straight-line MLP evaluation. Also returns the smallest |pre-activation|
/// of the hidden layers, to keep finite differences away from ReLU kinks.
pub fn mlp(encoder: &EncoderParams, x: &[f64]) -> (Vec<f64>, f64) {
    let mut h = x.to_vec();
    let mut kink = f64::INFINITY;
    let n = encoder.layers.len();
    for (li, l) in encoder.layers.iter().enumerate() {
        let (rows, cols) = (l.weight.rows(), l.weight.cols());
        let mut out = l.bias.data().to_vec();
        for (i, &hi) in h.iter().enumerate().take(rows) {
            for (j, o) in out.iter_mut().enumerate().take(cols) {
                *o += hi * l.weight.data()[i * cols + j];
            }
        }
        if li + 1 < n {
            for o in &mut out {
                kink = kink.min(o.abs());
                *o = o.max(0.0);
            }
        }
        h = out;
    }
    (h, kink)
}

/// `−ln p` of one target among candidates, with the margin applied through
/// `acos` (a different route than the library's expansion).
fn nll(z: &[f64], candidates: &[Vec<f64>], target: usize, p: &MarginSoftmaxParams) -> f64 {
    let logits: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let c = cos(z, u);
            if i == target {
                (c.acos() + p.margin).cos() / p.tau
            } else {
                c / p.tau
            }
        })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn live_rows(bank: &MixtureBank) -> (Vec<usize>, Vec<Vec<f64>>) {
    let live = bank.live_indices();
    let rows = live.iter().map(|&j| bank.component(j).to_vec()).collect();
    (live, rows)
}

/// Mean of the live components of each class.
pub fn oracle_centroids(bank: &MixtureBank) -> Vec<Vec<f64>> {
    (0..bank.num_classes())
        .map(|k| {
            let live = bank.live_of_class(k);
            let mut c = vec![0.0; bank.dim()];
            for &j in &live {
                c.iter_mut().zip(bank.component(j)).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().for_each(|a| *a /= live.len() as f64);
            c
        })
        .collect()
}

/// Nearest live same-class component by cosine and its margin over the
/// runner-up (infinite when the class has one live component).
pub fn oracle_nearest(bank: &MixtureBank, z: &[f64], k: usize) -> (usize, f64) {
    let mut sims: Vec<(f64, usize)> = bank
        .live_of_class(k)
        .into_iter()
        .map(|j| (cos(z, bank.component(j)), j))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let gap = if sims.len() > 1 { sims[0].0 - sims[1].0 } else { f64::INFINITY };
    (sims[0].1, gap)
}

/// Everything the oracle holds fixed while parameters move: the
/// pseudo-labels (argmax carries no gradient) and the class centroids
/// (stop-gradient).
pub struct Frozen {
    pub pseudo: Vec<usize>,
    pub target_pseudo: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
}

pub fn freeze(inst: &Instance) -> Frozen {
    let z: Vec<Vec<f64>> = (0..inst.inputs.rows()).map(|i| mlp(&inst.encoder, inst.inputs.row(i)).0).collect();
    let tz: Vec<Vec<f64>> = (0..inst.inputs.rows())
        .map(|i| mlp(inst.target.encoder(), inst.inputs.row(i)).0)
        .collect();
    Frozen {
        pseudo: z.iter().zip(&inst.classes).map(|(z, &k)| oracle_nearest(&inst.bank, z, k).0).collect(),
        target_pseudo: tz
            .iter()
            .zip(&inst.classes)
            .map(|(z, &k)| oracle_nearest(inst.target.bank(), z, k).0)
            .collect(),
        centroids: oracle_centroids(&inst.bank),
    }
}

/// Loss value from the oracle's own arithmetic.
pub fn oracle_loss(kind: LossKind, encoder: &EncoderParams, bank: &MixtureBank, inst: &Instance, fz: &Frozen) -> f64 {
    let (live, rows) = live_rows(bank);
    let pos = |j: usize| live.iter().position(|&l| l == j).expect("pseudo-label is live");
    let b = inst.inputs.rows();
    let mut assign = 0.0;
    let mut div = 0.0;
    let mut prog = 0.0;
    for i in 0..b {
        let (z, _) = mlp(encoder, inst.inputs.row(i));
        assign += nll(&z, &rows, pos(fz.pseudo[i]), &inst.params);
        div += nll(&z, &fz.centroids, inst.classes[i], &inst.params);
        prog += nll(&z, &rows, pos(fz.target_pseudo[i]), &inst.params);
    }
    let n = b as f64;
    match kind {
        LossKind::Assignment => assign / n,
        LossKind::Diversity => div / n,
        LossKind::Initial => (assign + div) / n,
        LossKind::Progressive => prog / n,
    }
}

/// Library loss and its gradients, flattened as every encoder tensor in
/// order followed by the bank.
pub fn analytic(kind: LossKind, inst: &Instance) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = inst.encoder.bind(&mut tape);
    let bank_var = tape.leaf(inst.bank.components().clone());
    let x = tape.leaf(inst.inputs.clone());
    let z = inst.encoder.forward(&mut tape, &bound, x).unwrap();
    let (bank, cls, p) = (&inst.bank, &inst.classes, &inst.params);
    let loss = match kind {
        LossKind::Assignment => assignment_loss(&mut tape, z, bank_var, bank, cls, p).unwrap().0,
        LossKind::Diversity => diversity_loss(&mut tape, z, bank_var, bank, cls, p).unwrap(),
        LossKind::Initial => initial_loss(&mut tape, z, bank_var, bank, cls, p).unwrap().total,
        LossKind::Progressive => {
            progressive_loss(&mut tape, z, bank_var, bank, &inst.inputs, cls, &inst.target, p)
                .unwrap()
                .0
        }
    };
    let grads = tape.backward(loss).unwrap();
    let mut flat = Vec::new();
    for &(w, b) in &bound.layers {
        flat.extend_from_slice(grads.get(w).data());
        flat.extend_from_slice(grads.get(b).data());
    }
    flat.extend_from_slice(grads.get(bank_var).data());
    (tape.value(loss).item(), flat)
}

fn perturbed(inst: &Instance, p: usize, delta: f64) -> (EncoderParams, MixtureBank) {
    let mut enc = inst.encoder.clone();
    let mut bank = inst.bank.clone();
    let mut left = p;
    let mut done = false;
    for t in enc.tensors_mut() {
        if left < t.len() {
            t.data_mut()[left] += delta;
            done = true;
            break;
        }
        left -= t.len();
    }
    if !done {
        bank.components_mut().data_mut()[left] += delta;
    }
    (enc, bank)
}

/// Whether finite differences are trustworthy here: no hidden unit near
/// its kink and no near-tie in any nearest-component selection.
pub fn well_conditioned(inst: &Instance) -> bool {
    (0..inst.inputs.rows()).all(|i| {
        let (z, kink) = mlp(&inst.encoder, inst.inputs.row(i));
        let (zt, kink_t) = mlp(inst.target.encoder(), inst.inputs.row(i));
        let k = inst.classes[i];
        kink > 1e-3
            && kink_t > 1e-3
            && oracle_nearest(&inst.bank, &z, k).1 > 1e-4
            && oracle_nearest(inst.target.bank(), &zt, k).1 > 1e-4
    })
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub struct Check {
    pub value_err: f64,
    pub max_rel_err: f64,
    pub bank_grad_max_abs: f64,
    pub params: usize,
}

/// Compares library gradients with central differences of the oracle.
pub fn grad_check(kind: LossKind, inst: &Instance) -> Check {
    let fz = freeze(inst);
    let (value, grad) = analytic(kind, inst);
    let value_err = (value - oracle_loss(kind, &inst.encoder, &inst.bank, inst, &fz)).abs();
    let mut max_rel_err: f64 = 0.0;
    for (p, &g) in grad.iter().enumerate() {
        let (e1, b1) = perturbed(inst, p, FD_STEP);
        let (e0, b0) = perturbed(inst, p, -FD_STEP);
        let fd = (oracle_loss(kind, &e1, &b1, inst, &fz) - oracle_loss(kind, &e0, &b0, inst, &fz)) / (2.0 * FD_STEP);
        max_rel_err = max_rel_err.max(rel_err(g, fd));
    }
    let bank_len = inst.bank.components().len();
    let bank_grad_max_abs = grad[grad.len() - bank_len..].iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Check {
        value_err,
        max_rel_err,
        bank_grad_max_abs,
        params: grad.len(),
    }
}

/// Indices of the first `n` well-conditioned instances for `seed`.
pub fn usable_instances(seed: u64, n: usize) -> Vec<Instance> {
    (0..)
        .map(|i| random_instance(seed, i))
        .filter(well_conditioned)
        .take(n)
        .collect()
}
