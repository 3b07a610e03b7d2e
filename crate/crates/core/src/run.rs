//! Config-driven commands behind the `mixtfsl` binary.
//!
//! A run is described by one TOML file (every key optional, defaults below)
//! plus `key=value` overrides using the same dotted names:
//!
//! ```toml
//! seed = 0                    # root seed; copied into synth.seed and train.seed
//! output_dir = "runs/default"
//!
//! [data]
//! source = "synthetic"        # or "files", with paths = ["a.csv", ...]
//!
//! [synth]                     # SynthSpec fields
//! mode_std = 1.5
//!
//! [train]                     # TrainConfig fields
//! components_per_class = 15
//! [train.scorer]
//! tau = 0.05
//!
//! [eval]
//! episodes = 600
//! n_way = 5
//! shots = [1, 5]
//! n_query = 15
//! [eval.protocol]
//! kind = "linear_head"        # or "nearest_centroid"
//! ```
//!
//! Every command writes the resolved config (`config.toml`) and the seed
//! (`seed.txt`) into the output directory before doing anything else, so a
//! run directory is enough to repeat the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate, load_features, write_features, Splits, SynthSpec};
use crate::episodes::{evaluate, EpisodeShape, EvalResult, Protocol};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{full_pipeline, TrainConfig, TrainReport};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_FILE: &str = "seed.txt";
pub const MODEL_FILE: &str = "model.bin";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Where the features come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Regenerate the synthetic benchmark from `[synth]`.
    #[default]
    Synthetic,
    /// Feature CSVs, concatenated split by split.
    Files { paths: Vec<PathBuf> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub shots: Vec<usize>,
    pub n_query: usize,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 600,
            n_way: 5,
            shots: vec![1, 5],
            n_query: 15,
            protocol: Protocol::default(),
        }
    }
}

impl EvalConfig {
    pub fn shapes(&self) -> Vec<EpisodeShape> {
        self.shots
            .iter()
            .map(|&k_shot| EpisodeShape {
                n_way: self.n_way,
                k_shot,
                n_query: self.n_query,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides in order, and
    /// resolves the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    /// Propagates the root seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        if let DataConfig::Synthetic = self.data {
            self.synth.validate()?;
        }
        if let DataConfig::Files { paths } = &self.data {
            if paths.is_empty() {
                return Err(Error::Config("data.paths is empty".into()));
            }
        }
        self.train.validate()?;
        let e = &self.eval;
        if e.episodes == 0 || e.n_way < 2 || e.n_query == 0 || e.shots.is_empty() || e.shots.contains(&0) {
            return Err(Error::Config(
                "eval needs episodes >= 1, n_way >= 2, n_query >= 1 and non-zero shots".into(),
            ));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes the resolved config and seed into the output directory.
    pub fn write_provenance(&self) -> Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        std::fs::write(self.output_dir.join(CONFIG_FILE), self.to_toml())?;
        std::fs::write(self.output_dir.join(SEED_FILE), format!("{}\n", self.seed))?;
        Ok(())
    }

    pub fn model_path(&self) -> PathBuf {
        self.output_dir.join(MODEL_FILE)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Process exit status for an error: 2 config, 3 data, 4 numeric, 1 other.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. } | Error::Data(_) | Error::InsufficientData(_) | Error::ModelFormat(_) => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    match &cfg.data {
        DataConfig::Synthetic => Ok(generate(&cfg.synth)?.splits),
        DataConfig::Files { paths } => {
            let parts = paths
                .iter()
                .map(|p| {
                    load_features(p).map_err(|e| match e {
                        Error::Io(io) => Error::Data(format!("{}: {io}", p.display())),
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Splits::merge(parts)
        }
    }
}

/// Writes `base.csv`, `val.csv` and `novel.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.write_provenance()?;
    let data = generate(&cfg.synth)?;
    let mut written = Vec::new();
    for d in data.splits.all() {
        let path = cfg.output_dir.join(format!("{}.csv", d.split.as_str()));
        write_features(&path, &[d])?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
struct Summary<'a> {
    report: &'a TrainReport,
    novel: &'a [EvalSummary],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean: f64,
    pub ci95: f64,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        Self {
            n_way: r.shape.n_way,
            k_shot: r.shape.k_shot,
            episodes: r.accuracies.len(),
            mean: r.mean,
            ci95: r.ci95,
        }
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub report: TrainReport,
    pub novel: Vec<EvalResult>,
}

/// Trains, then writes the model, the per-epoch report, and a summary that
/// includes novel-split accuracy under the `[eval]` settings.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.write_provenance()?;
    let splits = load_data(cfg)?;
    let (model, report) = full_pipeline(&cfg.train, &splits)?;
    model.save(&cfg.model_path())?;
    std::fs::write(cfg.output_dir.join(REPORT_FILE), report.to_csv())?;
    let novel = eval_model(cfg, &model, &splits)?;
    let summaries: Vec<EvalSummary> = novel.iter().map(EvalSummary::from).collect();
    let summary = Summary {
        report: &report,
        novel: &summaries,
    };
    std::fs::write(
        cfg.output_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    Ok(TrainOutput { model, report, novel })
}

fn check_dim(model: &Model, splits: &Splits) -> Result<()> {
    if model.encoder.input_dim() != splits.dim() {
        return Err(Error::Data(format!(
            "model expects {}-dimensional features, data has {}",
            model.encoder.input_dim(),
            splits.dim()
        )));
    }
    Ok(())
}

fn eval_model(cfg: &RunConfig, model: &Model, splits: &Splits) -> Result<Vec<EvalResult>> {
    check_dim(model, splits)?;
    cfg.eval
        .shapes()
        .into_iter()
        .map(|shape| evaluate(&model.encoder, &splits.novel, &cfg.eval.protocol, shape, cfg.eval.episodes, cfg.seed))
        .collect()
}

/// Evaluates a saved model on the novel split; writes per-episode accuracies
/// (`n_way,k_shot,episode_index,accuracy`) and a JSON summary.
pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<Vec<EvalResult>> {
    let model = Model::load(model_path)?;
    let splits = load_data(cfg)?;
    check_dim(&model, &splits)?;
    cfg.write_provenance()?;
    let results = eval_model(cfg, &model, &splits)?;
    let mut csv = String::from("n_way,k_shot,episode_index,accuracy\n");
    for r in &results {
        for (i, a) in r.accuracies.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{i},{a}", r.shape.n_way, r.shape.k_shot);
        }
    }
    std::fs::write(cfg.output_dir.join(EVAL_CSV), csv)?;
    let summaries: Vec<EvalSummary> = results.iter().map(EvalSummary::from).collect();
    std::fs::write(
        cfg.output_dir.join(EVAL_JSON),
        serde_json::to_string_pretty(&summaries).expect("summary serialises"),
    )?;
    Ok(results)
}

/// Header of the embedding export.
pub fn embeddings_header(dim: usize) -> String {
    let mut h = String::from("split,label,mode,component");
    for i in 0..dim {
        let _ = write!(h, ",z{i}");
    }
    h
}

/// One `sample` row per base sample (with its nearest live component) and
/// one `component` row per live component (mode `-1`).
pub fn cmd_export_embeddings(cfg: &RunConfig, model_path: &Path) -> Result<PathBuf> {
    let model = Model::load(model_path)?;
    let splits = load_data(cfg)?;
    check_dim(&model, &splits)?;
    cfg.write_provenance()?;
    let base = &splits.base;
    let z = model.encoder.embed(base.features())?;
    let class_index = |label: i64| {
        model
            .class_labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::Data(format!("base label {label} is not a class of the model")))
    };
    let mut out = embeddings_header(z.cols());
    out.push('\n');
    for i in 0..base.len() {
        let k = class_index(base.labels()[i])?;
        let j = model.bank.nearest_component(z.row(i), k)?;
        let _ = write!(out, "sample,{},{},{j}", base.labels()[i], base.modes()[i]);
        z.row(i).iter().for_each(|v| {
            let _ = write!(out, ",{v}");
        });
        out.push('\n');
    }
    for j in model.bank.live_indices() {
        let _ = write!(out, "component,{},-1,{j}", model.class_labels[model.bank.class_of(j)]);
        model.bank.component(j).iter().for_each(|v| {
            let _ = write!(out, ",{v}");
        });
        out.push('\n');
    }
    let path = cfg.output_dir.join(EMBEDDINGS_FILE);
    std::fs::write(&path, out)?;
    Ok(path)
}
