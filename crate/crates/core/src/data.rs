//! Datasets, the synthetic multimodal benchmark, and the feature CSV format.
//!
//! # Feature CSV
//!
//! ```text
//! split,label,mode,f0,f1,...,f{D-1}
//! base,0,1,0.25,-1.5,...
//! ```
//!
//! * `split` is one of `base`, `val`, `novel`.
//! * `label` is an integer class id; a label may appear in only one split.
//! * `mode` is the ground-truth mode id within the class, or `-1` if unknown.
//! * every row carries exactly `D` finite feature values.
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save followed by a load reproduces every bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Split::Base),
            "val" => Some(Split::Val),
            "novel" => Some(Split::Novel),
            _ => None,
        }
    }
}

/// Labeled samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    features: Tensor,
    labels: Vec<i64>,
    modes: Vec<i64>,
}

impl Dataset {
    pub fn new(split: Split, features: Tensor, labels: Vec<i64>, modes: Vec<i64>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() || labels.len() != modes.len() {
            return Err(Error::Data(format!(
                "features {:?} do not match {} labels / {} modes",
                features.shape(),
                labels.len(),
                modes.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            split,
            features,
            labels,
            modes,
        })
    }

    pub fn empty(split: Split, dim: usize) -> Self {
        Self {
            split,
            features: Tensor::zeros(&[0, dim]),
            labels: Vec::new(),
            modes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn modes(&self) -> &[i64] {
        &self.modes
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<i64> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sample indices grouped by label, labels ascending.
    pub fn indices_by_class(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// Feature rows for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        self.features.gather_rows(indices).expect("indices come from this dataset")
    }
}

/// Base, validation and novel splits with pairwise-disjoint label sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub base: Dataset,
    pub val: Dataset,
    pub novel: Dataset,
}

impl Splits {
    pub fn new(base: Dataset, val: Dataset, novel: Dataset) -> Result<Self> {
        let dims: BTreeSet<usize> = [&base, &val, &novel]
            .iter()
            .filter(|d| !d.is_empty())
            .map(|d| d.dim())
            .collect();
        if dims.len() > 1 {
            return Err(Error::Data(format!("splits disagree on feature width: {dims:?}")));
        }
        let splits = Self { base, val, novel };
        let mut owner: BTreeMap<i64, Split> = BTreeMap::new();
        for d in splits.all() {
            for l in d.classes() {
                if let Some(prev) = owner.insert(l, d.split) {
                    return Err(Error::Data(format!(
                        "label {l} appears in both {} and {}",
                        prev.as_str(),
                        d.split.as_str()
                    )));
                }
            }
        }
        Ok(splits)
    }

    pub fn all(&self) -> [&Dataset; 3] {
        [&self.base, &self.val, &self.novel]
    }

    pub fn dim(&self) -> usize {
        self.all().iter().find(|d| !d.is_empty()).map_or(0, |d| d.dim())
    }

    /// Concatenates splits read from several files.
    pub fn merge(parts: Vec<Splits>) -> Result<Self> {
        let mut acc: [Vec<(Vec<f64>, i64, i64)>; 3] = Default::default();
        let mut dim = None;
        for p in &parts {
            for (slot, d) in acc.iter_mut().zip(p.all()) {
                if d.is_empty() {
                    continue;
                }
                if *dim.get_or_insert(d.dim()) != d.dim() {
                    return Err(Error::Data("feature files disagree on width".into()));
                }
                for i in 0..d.len() {
                    slot.push((d.sample(i).to_vec(), d.labels[i], d.modes[i]));
                }
            }
        }
        let dim = dim.unwrap_or(0);
        let build = |split: Split, rows: &[(Vec<f64>, i64, i64)]| -> Result<Dataset> {
            let data = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
            Dataset::new(
                split,
                Tensor::matrix(rows.len(), dim, data)?,
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| r.2).collect(),
            )
        };
        Splits::new(
            build(Split::Base, &acc[0])?,
            build(Split::Val, &acc[1])?,
            build(Split::Novel, &acc[2])?,
        )
    }
}

/// Parameters of the synthetic multimodal benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
    pub min_modes: usize,
    pub max_modes: usize,
    pub dim: usize,
    /// Minimum distance between any two class means.
    pub class_separation: f64,
    /// Minimum distance between two mode means of the same class.
    pub mode_separation: f64,
    /// Per-coordinate standard deviation around a mode mean.
    pub mode_std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            base_classes: 16,
            val_classes: 8,
            novel_classes: 8,
            min_modes: 2,
            max_modes: 3,
            dim: 16,
            class_separation: 4.0,
            mode_separation: 4.0,
            mode_std: 1.5,
            samples_per_class: 120,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.min_modes == 0 || self.max_modes < self.min_modes {
            return bad("need 1 <= min_modes <= max_modes");
        }
        if !(self.class_separation > 0.0 && self.mode_separation > 0.0 && self.mode_std >= 0.0) {
            return bad("separations must be > 0 and mode_std >= 0");
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return bad("dim and samples_per_class must be >= 1");
        }
        if self.base_classes + self.val_classes + self.novel_classes == 0 {
            return bad("no classes requested");
        }
        Ok(())
    }
}

/// Generated benchmark with its planted structure.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub splits: Splits,
    /// Class means, indexed by label.
    pub class_means: Vec<Vec<f64>>,
    /// Mode means per label.
    pub mode_means: Vec<Vec<Vec<f64>>>,
}

fn gaussian(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Rejection-samples `n` points from `draw` with pairwise distance `>= min_dist`.
fn separated_points(rng: &mut Rng, n: usize, min_dist: f64, mut draw: impl FnMut(&mut Rng) -> Vec<f64>) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pts.len() < n {
        let p = draw(rng);
        attempts += 1;
        if pts.iter().all(|q| dist(&p, q) >= min_dist) {
            pts.push(p);
            attempts = 0;
        } else if attempts > 10_000 {
            // crowded: restart the whole set
            pts.clear();
            attempts = 0;
        }
    }
    pts
}

/// Draws the benchmark. Labels run `0..base`, then val, then novel.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let total = spec.base_classes + spec.val_classes + spec.novel_classes;
    let d = spec.dim;
    let mut rng = rng_for(spec.seed, "synth/means");
    // Class means spread so that random draws are typically well separated.
    let spread = spec.class_separation * 1.5 / (2.0f64).sqrt();
    let class_means = separated_points(&mut rng, total, spec.class_separation, |r| gaussian(r, d, spread));

    let mut mode_rng = rng_for(spec.seed, "synth/modes");
    let mode_means: Vec<Vec<Vec<f64>>> = class_means
        .iter()
        .map(|mean| {
            let k = mode_rng.random_range(spec.min_modes..=spec.max_modes);
            if k == 1 {
                return vec![mean.clone()];
            }
            // Unit directions at least 60 degrees apart, scaled so that mode
            // means are at least `mode_separation` apart.
            let dirs = separated_points(&mut mode_rng, k, 1.0, |r| {
                let g = gaussian(r, d, 1.0);
                let n = norm(&g);
                g.into_iter().map(|x| x / n).collect()
            });
            dirs.into_iter()
                .map(|u| mean.iter().zip(&u).map(|(m, x)| m + x * spec.mode_separation).collect())
                .collect()
        })
        .collect();

    let mut sample_rng = rng_for(spec.seed, "synth/samples");
    let mut build = |split: Split, labels: std::ops::Range<usize>| -> Result<Dataset> {
        let mut data = Vec::new();
        let (mut ls, mut ms) = (Vec::new(), Vec::new());
        for label in labels {
            let modes = &mode_means[label];
            for s in 0..spec.samples_per_class {
                // round-robin keeps mode sizes balanced
                let m = s % modes.len();
                let noise = gaussian(&mut sample_rng, d, spec.mode_std);
                data.extend(modes[m].iter().zip(&noise).map(|(a, b)| a + b));
                ls.push(label as i64);
                ms.push(m as i64);
            }
        }
        Dataset::new(split, Tensor::matrix(ls.len(), d, data)?, ls, ms)
    };
    let nb = spec.base_classes;
    let nv = nb + spec.val_classes;
    let base = build(Split::Base, 0..nb)?;
    let val = build(Split::Val, nb..nv)?;
    let novel = build(Split::Novel, nv..total)?;
    Ok(SynthData {
        splits: Splits::new(base, val, novel)?,
        class_means,
        mode_means,
    })
}

pub fn csv_header(dim: usize) -> String {
    let mut h = String::from("split,label,mode");
    for i in 0..dim {
        let _ = write!(h, ",f{i}");
    }
    h
}

/// Writes datasets in the feature CSV grammar.
pub fn write_features(path: &Path, datasets: &[&Dataset]) -> Result<()> {
    let dim = datasets.iter().find(|d| !d.is_empty()).map_or(0, |d| d.dim());
    let mut out = String::new();
    out.push_str(&csv_header(dim));
    out.push('\n');
    for d in datasets {
        for i in 0..d.len() {
            let _ = write!(out, "{},{},{}", d.split.as_str(), d.labels[i], d.modes[i]);
            for v in d.sample(i) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parses a feature CSV. Errors carry 1-based line numbers.
pub fn load_features(path: &Path) -> Result<Splits> {
    let file = std::fs::File::open(path)?;
    parse_features(BufReader::new(file))
}

pub fn parse_features(reader: impl BufRead) -> Result<Splits> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    let header = header.trim_end_matches('\r');
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[..3] != ["split", "label", "mode"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with split,label,mode, got `{header}`"),
        });
    }
    let dim = cols.len() - 3;
    if header != csv_header(dim) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected header `{header}`"),
        });
    }

    let mut rows: [(Vec<f64>, Vec<i64>, Vec<i64>); 3] = Default::default();
    let mut owner: BTreeMap<i64, Split> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(err(format!("expected {} columns, found {}", dim + 3, fields.len())));
        }
        let split = Split::parse(fields[0]).ok_or_else(|| err(format!("unknown split `{}`", fields[0])))?;
        let label: i64 = fields[1].parse().map_err(|_| err(format!("bad label `{}`", fields[1])))?;
        let mode: i64 = fields[2].parse().map_err(|_| err(format!("bad mode `{}`", fields[2])))?;
        if mode < -1 {
            return Err(err(format!("mode must be >= -1, got {mode}")));
        }
        if let Some(prev) = owner.insert(label, split) {
            if prev != split {
                return Err(err(format!(
                    "label {label} appears in both {} and {}",
                    prev.as_str(),
                    split.as_str()
                )));
            }
        }
        let slot = &mut rows[split as usize];
        for f in &fields[3..] {
            let v: f64 = f.parse().map_err(|_| err(format!("bad value `{f}`")))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value `{f}`")));
            }
            slot.0.push(v);
        }
        slot.1.push(label);
        slot.2.push(mode);
    }
    let [b, v, n] = rows;
    let mk = |split: Split, (x, l, m): (Vec<f64>, Vec<i64>, Vec<i64>)| -> Result<Dataset> {
        Dataset::new(split, Tensor::matrix(l.len(), dim, x)?, l, m)
    };
    Splits::new(mk(Split::Base, b)?, mk(Split::Val, v)?, mk(Split::Novel, n)?)
}
