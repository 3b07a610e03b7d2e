//! Two-stage training: initial training on assignment + diversity losses,
//! then progressive following against a frozen target with a decaying
//! temperature.
//!
//! Both stages select the model with the lowest validation error and return
//! that model, not the last iterate. The validation error is pluggable (see
//! [`Validator`] and the `*_with` entry points) so the stopping logic can be
//! exercised on scripted error sequences.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{count_assignments, surviving_histogram};
use crate::autodiff::Tape;
use crate::bank::{init_bank, MixtureBank};
use crate::data::{Dataset, Splits};
use crate::encoder::{init_encoder, snapshot, EncoderParams, TargetSnapshot};
use crate::episodes::{evaluate_embeddings, sample_episodes, Episode, EpisodeShape, Protocol};
use crate::error::{Error, Result};
use crate::losses::{assignment_loss, initial_loss, progressive_loss, MarginSoftmaxParams};
use crate::model::Model;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::seed::{rng_for, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub episodes: usize,
    pub shape: EpisodeShape,
    pub protocol: Protocol,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            shape: EpisodeShape::default(),
            protocol: Protocol::NearestCentroid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Maximum initial-stage epochs.
    pub max_epochs: usize,
    /// Initial-stage patience.
    pub patience_initial: usize,
    /// Progressive-stage patience.
    pub patience_progressive: usize,
    /// Number of target updates in the progressive stage.
    pub rounds: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub components_per_class: usize,
    pub optimizer: AdamConfig,
    pub scorer: MarginSoftmaxParams,
    pub validation: ValidationConfig,
    /// Train the initial stage on the assignment loss alone.
    pub ablate_diversity: bool,
    /// Skip progressive following.
    pub stage1_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            patience_initial: 10,
            patience_progressive: 8,
            rounds: 3,
            batch_size: 32,
            hidden: vec![64, 64],
            embedding_dim: 32,
            components_per_class: 15,
            optimizer: AdamConfig::default(),
            scorer: MarginSoftmaxParams::default(),
            validation: ValidationConfig::default(),
            ablate_diversity: false,
            stage1_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Long schedule for image-scale feature extractors.
    pub fn large_scale() -> Self {
        Self {
            max_epochs: 400,
            patience_initial: 20,
            patience_progressive: 15,
            rounds: 3,
            batch_size: 128,
            validation: ValidationConfig {
                episodes: 600,
                ..ValidationConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("max_epochs", self.max_epochs),
            ("patience_initial", self.patience_initial),
            ("patience_progressive", self.patience_progressive),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("components_per_class", self.components_per_class),
            ("validation.episodes", self.validation.episodes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("optimizer.lr must be > 0".into());
        }
        self.scorer.validate()
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(self.embedding_dim);
        w
    }
}

/// Base split in training form: inputs plus bank class indices.
#[derive(Clone, Debug)]
pub struct BaseSet {
    pub inputs: Tensor,
    pub classes: Vec<usize>,
    pub modes: Vec<i64>,
    /// Dataset label of each bank class.
    pub class_labels: Vec<i64>,
}

impl BaseSet {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InsufficientData("base split is empty".into()));
        }
        let class_labels = ds.classes();
        let classes = ds
            .labels()
            .iter()
            .map(|l| class_labels.binary_search(l).expect("label from this dataset"))
            .collect();
        Ok(Self {
            inputs: ds.features().clone(),
            classes,
            modes: ds.modes().to_vec(),
            class_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }
}

/// Episodic validation error `1 − accuracy` on a fixed set of episodes.
pub struct Validator<'a> {
    dataset: &'a Dataset,
    episodes: Vec<Episode>,
    protocol: Protocol,
}

impl<'a> Validator<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &ValidationConfig, seed: u64) -> Result<Self> {
        if dataset.classes().len() < cfg.shape.n_way {
            return Err(Error::InsufficientData(format!(
                "validation split has {} classes, episodes need {}",
                dataset.classes().len(),
                cfg.shape.n_way
            )));
        }
        let episodes = sample_episodes(dataset, cfg.shape, cfg.episodes, seed, "validation")?;
        Ok(Self {
            dataset,
            episodes,
            protocol: cfg.protocol.clone(),
        })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn error(&self, encoder: &EncoderParams) -> Result<f64> {
        let z = encoder.embed(self.dataset.features())?;
        let accs = evaluate_embeddings(&z, &self.episodes, &self.protocol)?;
        Ok(1.0 - accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Validation error of `encoder` under `cfg`, episodes derived from `seed`.
pub fn validate(encoder: &EncoderParams, val_set: &Dataset, cfg: &ValidationConfig, seed: u64) -> Result<f64> {
    Validator::new(val_set, cfg, seed)?.error(encoder)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stage {
    Initial,
    Progressive,
}

impl Stage {
    fn number(self) -> u8 {
        match self {
            Stage::Initial => 1,
            Stage::Progressive => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Progressive => "progressive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// Global epoch index across both stages, from 1.
    pub epoch: usize,
    pub stage: u8,
    /// Progressive round (0 in the initial stage).
    pub round: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub tau: f64,
    pub live_components: usize,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetUpdate {
    pub round: usize,
    /// Global epoch after which the update happened.
    pub epoch: usize,
    pub tau_after: f64,
    pub pruned: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Global epochs at which a new best model was stored.
    pub best_epochs: Vec<usize>,
    pub target_updates: Vec<TargetUpdate>,
    /// Temperature in effect before each round, plus the final value.
    pub tau_schedule: Vec<f64>,
    pub initial_val_accuracy: f64,
    pub stage1_best_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub live_per_class: Vec<usize>,
    /// `surviving_histogram[c]` classes ended with `c` live components.
    pub surviving_histogram: Vec<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,stage,loss,val_accuracy,tau,live_components\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.epoch, e.stage, e.loss, e.val_accuracy, e.tau, e.live_components
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Encoder and bank being optimised, with their Adam state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub encoder: EncoderParams,
    pub bank: MixtureBank,
    adam: AdamState,
}

impl Learner {
    pub fn new(encoder: EncoderParams, bank: MixtureBank) -> Self {
        let adam = Self::fresh_state(&encoder, &bank);
        Self { encoder, bank, adam }
    }

    fn fresh_state(encoder: &EncoderParams, bank: &MixtureBank) -> AdamState {
        let mut params: Vec<&Tensor> = encoder.tensors().collect();
        params.push(bank.components());
        AdamState::new(&params)
    }

    /// Drops optimizer moments (used between stages).
    pub fn reset_optimizer(&mut self) {
        self.adam = Self::fresh_state(&self.encoder, &self.bank);
    }

    /// One gradient step on a batch; returns the batch loss.
    pub fn step(
        &mut self,
        inputs: &Tensor,
        classes: &[usize],
        objective: Objective<'_>,
        scorer: &MarginSoftmaxParams,
        opt: &AdamConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.encoder.bind(&mut tape);
        let bank_var = tape.leaf(self.bank.components().clone());
        let x = tape.leaf(inputs.clone());
        let z = self.encoder.forward(&mut tape, &bound, x)?;
        let loss = match objective {
            Objective::Initial { diversity: true } => {
                initial_loss(&mut tape, z, bank_var, &self.bank, classes, scorer)?.total
            }
            Objective::Initial { diversity: false } => {
                assignment_loss(&mut tape, z, bank_var, &self.bank, classes, scorer)?.0
            }
            Objective::Progressive(target) => {
                progressive_loss(&mut tape, z, bank_var, &self.bank, inputs, classes, target, scorer)?.0
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = tape.backward(loss)?;
        let mut flat: Vec<Tensor> = Vec::with_capacity(bound.layers.len() * 2 + 1);
        for &(w, b) in &bound.layers {
            flat.push(grads.take(w));
            flat.push(grads.take(b));
        }
        flat.push(grads.take(bank_var));
        let mut params: Vec<&mut Tensor> = self.encoder.tensors_mut().collect();
        params.push(self.bank.components_mut());
        adam_step(&mut params, &flat, &mut self.adam, opt)?;
        Ok(value)
    }

    /// One shuffled pass over the base set; returns the mean batch loss.
    #[allow(clippy::too_many_arguments)]
    pub fn epoch(
        &mut self,
        base: &BaseSet,
        batch_size: usize,
        objective: Objective<'_>,
        scorer: &MarginSoftmaxParams,
        opt: &AdamConfig,
        rng: &mut Rng,
        stage: Stage,
        epoch: usize,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..base.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let inputs = base.inputs.gather_rows(chunk)?;
            let classes: Vec<usize> = chunk.iter().map(|&i| base.classes[i]).collect();
            let loss = self.step(&inputs, &classes, objective, scorer, opt)?;
            if !loss.is_finite() || !self.encoder.is_finite() || !self.bank.components().is_finite() {
                return Err(Error::NonFinite {
                    stage: stage.name(),
                    epoch,
                    batch: b,
                });
            }
            total += loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    Initial { diversity: bool },
    Progressive(&'a TargetSnapshot),
}

/// Result of one stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub encoder: EncoderParams,
    pub bank: MixtureBank,
    pub best_error: f64,
    /// Temperature at the end of the stage.
    pub tau: f64,
}

/// Initial training with the configured episodic validator.
pub fn initial_training(
    encoder: EncoderParams,
    bank: MixtureBank,
    base: &BaseSet,
    val_set: &Dataset,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<StageOutcome> {
    let validator = Validator::new(val_set, &cfg.validation, cfg.seed)?;
    initial_training_with(encoder, bank, base, cfg, &mut |e| validator.error(e), report)
}

/// Initial training against an arbitrary validation-error function.
pub fn initial_training_with(
    encoder: EncoderParams,
    bank: MixtureBank,
    base: &BaseSet,
    cfg: &TrainConfig,
    error_of: &mut dyn FnMut(&EncoderParams) -> Result<f64>,
    report: &mut TrainReport,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let mut learner = Learner::new(encoder, bank);
    let mut best = (learner.encoder.clone(), learner.bank.clone());
    let mut best_err = error_of(&learner.encoder)?;
    report.initial_val_accuracy = 1.0 - best_err;
    let mut rng = rng_for(cfg.seed, "shuffle/initial");
    let objective = Objective::Initial {
        diversity: !cfg.ablate_diversity,
    };

    let (mut epochs, mut patience) = (0usize, 0usize);
    while epochs < cfg.max_epochs && patience < cfg.patience_initial {
        let global = report.epochs.len() + 1;
        let loss = learner.epoch(
            base,
            cfg.batch_size,
            objective,
            &cfg.scorer,
            &cfg.optimizer,
            &mut rng,
            Stage::Initial,
            global,
        )?;
        let err = error_of(&learner.encoder)?;
        let improved = err < best_err;
        if improved {
            best = (learner.encoder.clone(), learner.bank.clone());
            best_err = err;
            patience = 0;
            report.best_epochs.push(global);
        } else {
            patience += 1;
        }
        epochs += 1;
        report.epochs.push(EpochRecord {
            epoch: global,
            stage: Stage::Initial.number(),
            round: 0,
            loss,
            val_accuracy: 1.0 - err,
            tau: cfg.scorer.tau,
            live_components: learner.bank.live_count(),
            improved,
        });
    }
    report.stage1_best_val_accuracy = 1.0 - best_err;
    report.best_val_accuracy = 1.0 - best_err;
    Ok(StageOutcome {
        encoder: best.0,
        bank: best.1,
        best_error: best_err,
        tau: cfg.scorer.tau,
    })
}

/// Temperature after `t` target updates.
pub fn tau_after(tau0: f64, gamma: f64, t: usize) -> f64 {
    tau0 * gamma.powi(t as i32)
}

/// Assignment pass with the target over the whole base set, then prune.
/// Returns the removed component indices.
fn prune_with(target: &TargetSnapshot, base: &BaseSet) -> Result<Vec<usize>> {
    let mut bank = target.bank().clone();
    count_assignments(target.encoder(), &mut bank, &base.inputs, &base.classes)?;
    Ok(bank.prune())
}

/// Progressive following with the configured episodic validator.
pub fn progressive_following(
    stage1: StageOutcome,
    base: &BaseSet,
    val_set: &Dataset,
    cfg: &TrainConfig,
    report: &mut TrainReport,
) -> Result<StageOutcome> {
    let validator = Validator::new(val_set, &cfg.validation, cfg.seed)?;
    progressive_following_with(stage1, base, cfg, &mut |e| validator.error(e), report)
}

/// Progressive following against an arbitrary validation-error function.
///
/// Each round trains on pseudo-labels from a frozen target until
/// `patience_progressive` consecutive epochs fail to improve, then replaces
/// the target with the best model so far, multiplies `τ` by `γ`, and prunes
/// components the new target assigns no base sample to. A round also ends
/// after `max_epochs` epochs.
pub fn progressive_following_with(
    stage1: StageOutcome,
    base: &BaseSet,
    cfg: &TrainConfig,
    error_of: &mut dyn FnMut(&EncoderParams) -> Result<f64>,
    report: &mut TrainReport,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let tau0 = cfg.scorer.tau;
    let mut learner = Learner::new(stage1.encoder, stage1.bank);
    let mut best = (learner.encoder.clone(), learner.bank.clone());
    let mut best_err = stage1.best_error;
    let mut target = snapshot(&learner.encoder, &learner.bank);
    let mut rng = rng_for(cfg.seed, "shuffle/progressive");
    report.tau_schedule.push(tau0);

    for round in 1..=cfg.rounds {
        let scorer = cfg.scorer.with_tau(tau_after(tau0, cfg.scorer.gamma, round - 1));
        let (mut patience, mut epochs) = (0usize, 0usize);
        while patience < cfg.patience_progressive && epochs < cfg.max_epochs {
            epochs += 1;
            let global = report.epochs.len() + 1;
            let loss = learner.epoch(
                base,
                cfg.batch_size,
                Objective::Progressive(&target),
                &scorer,
                &cfg.optimizer,
                &mut rng,
                Stage::Progressive,
                global,
            )?;
            let err = error_of(&learner.encoder)?;
            let improved = err < best_err;
            if improved {
                best = (learner.encoder.clone(), learner.bank.clone());
                best_err = err;
                patience = 0;
                report.best_epochs.push(global);
            } else {
                patience += 1;
            }
            report.epochs.push(EpochRecord {
                epoch: global,
                stage: Stage::Progressive.number(),
                round,
                loss,
                val_accuracy: 1.0 - err,
                tau: scorer.tau,
                live_components: learner.bank.live_count(),
                improved,
            });
        }

        target = snapshot(&best.0, &best.1);
        let pruned = prune_with(&target, base)?;
        learner.bank.kill(&pruned);
        best.1.kill(&pruned);
        target = snapshot(&best.0, &best.1);
        let tau = tau_after(tau0, cfg.scorer.gamma, round);
        report.tau_schedule.push(tau);
        report.target_updates.push(TargetUpdate {
            round,
            epoch: report.epochs.len(),
            tau_after: tau,
            pruned,
        });
    }
    report.best_val_accuracy = 1.0 - best_err;
    Ok(StageOutcome {
        encoder: best.0,
        bank: best.1,
        best_error: best_err,
        tau: tau_after(tau0, cfg.scorer.gamma, cfg.rounds),
    })
}

/// Initialises encoder and bank for `base` from the run seed.
pub fn init_model(cfg: &TrainConfig, base: &BaseSet) -> Result<(EncoderParams, MixtureBank)> {
    let encoder = init_encoder(&cfg.widths(base.inputs.cols()), &mut rng_for(cfg.seed, "init/encoder"))?;
    let bank = init_bank(
        base.num_classes(),
        cfg.components_per_class,
        cfg.embedding_dim,
        &mut rng_for(cfg.seed, "init/bank"),
    )?;
    Ok((encoder, bank))
}

/// Both stages followed by a final assignment pass and prune.
pub fn full_pipeline(cfg: &TrainConfig, splits: &Splits) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let base = BaseSet::from_dataset(&splits.base)?;
    let validator = Validator::new(&splits.val, &cfg.validation, cfg.seed)?;
    let mut error_of = |e: &EncoderParams| validator.error(e);
    let (encoder, bank) = init_model(cfg, &base)?;
    let mut report = TrainReport::default();

    let stage1 = initial_training_with(encoder, bank, &base, cfg, &mut error_of, &mut report)?;
    let outcome = if cfg.stage1_only {
        report.tau_schedule.push(cfg.scorer.tau);
        stage1
    } else {
        progressive_following_with(stage1, &base, cfg, &mut error_of, &mut report)?
    };

    let mut bank = outcome.bank;
    count_assignments(&outcome.encoder, &mut bank, &base.inputs, &base.classes)?;
    bank.prune();
    bank.reset_counts();
    report.live_per_class = bank.live_per_class();
    report.surviving_histogram = surviving_histogram(&bank);

    let model = Model {
        encoder: outcome.encoder,
        bank,
        scorer: cfg.scorer.with_tau(outcome.tau),
        class_labels: base.class_labels,
    };
    Ok((model, report))
}
