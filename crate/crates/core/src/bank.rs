//! Learnable per-class mixture components.
//!
//! All components live in one `K×M` matrix so the optimizer and the tape see
//! a single parameter tensor. A component's global row index is its
//! pseudo-label. Pruned components stay in the matrix but are marked dead
//! and never take part in selection, scoring, or centroids again.

use rand::Rng as _;

use crate::encoder::{xavier_bound, TargetSnapshot};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureBank {
    components: Tensor,
    class_of: Vec<usize>,
    live: Vec<bool>,
    counts: Vec<usize>,
    num_classes: usize,
    per_class: usize,
}

/// One centroid row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Tensor,
}

/// Xavier-uniform bank: each class block is treated as an `N^k × M` matrix.
pub fn init_bank(num_classes: usize, per_class: usize, dim: usize, rng: &mut Rng) -> Result<MixtureBank> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config(format!(
            "bank needs classes, per-class size and dim >= 1 (got {num_classes}, {per_class}, {dim})"
        )));
    }
    let bound = xavier_bound(per_class, dim);
    let total = num_classes * per_class;
    let mut data = Vec::with_capacity(total * dim);
    for _ in 0..total {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
            if norm(&row) > 0.0 {
                data.extend(row);
                break;
            }
        }
    }
    Ok(MixtureBank {
        components: Tensor::matrix(total, dim, data)?,
        class_of: (0..total).map(|j| j / per_class).collect(),
        live: vec![true; total],
        counts: vec![0; total],
        num_classes,
        per_class,
    })
}

/// Cosine of the angle between two non-zero vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

impl MixtureBank {
    /// Builds a bank from explicit components. `class_of[j]` is the class of row `j`.
    pub fn from_components(components: Tensor, class_of: Vec<usize>, num_classes: usize) -> Result<Self> {
        if components.rank() != 2 || components.rows() != class_of.len() {
            return Err(Error::Shape {
                op: "from_components",
                left: components.shape().to_vec(),
                right: vec![class_of.len()],
            });
        }
        if let Some(&k) = class_of.iter().find(|&&k| k >= num_classes) {
            return Err(Error::Index {
                what: "classes",
                index: k,
                len: num_classes,
            });
        }
        let total = class_of.len();
        let per_class = (0..num_classes)
            .map(|k| class_of.iter().filter(|&&c| c == k).count())
            .max()
            .unwrap_or(0);
        let bank = Self {
            components,
            class_of,
            live: vec![true; total],
            counts: vec![0; total],
            num_classes,
            per_class,
        };
        for j in 0..total {
            if !(norm(bank.component(j)) > 0.0) || bank.component(j).iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("component {j} is zero or non-finite")));
            }
        }
        Ok(bank)
    }

    pub(crate) fn set_liveness(&mut self, live: Vec<bool>) -> Result<()> {
        if live.len() != self.live.len() {
            return Err(Error::ModelFormat("liveness length mismatch".into()));
        }
        self.live = live;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Initial number of components per class (`N^k`).
    pub fn per_class(&self) -> usize {
        self.per_class
    }

    /// Total component slots, dead ones included.
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn components(&self) -> &Tensor {
        &self.components
    }

    /// Mutable access for the optimizer; the caller keeps components finite.
    pub fn components_mut(&mut self) -> &mut Tensor {
        &mut self.components
    }

    pub fn component(&self, j: usize) -> &[f64] {
        self.components.row(j)
    }

    pub fn class_of(&self, j: usize) -> usize {
        self.class_of[j]
    }

    pub fn classes(&self) -> &[usize] {
        &self.class_of
    }

    pub fn is_live(&self, j: usize) -> bool {
        self.live.get(j).copied().unwrap_or(false)
    }

    pub fn liveness(&self) -> &[bool] {
        &self.live
    }

    pub fn live_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.live[j]).collect()
    }

    pub fn live_of_class(&self, k: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.live[j] && self.class_of[j] == k)
            .collect()
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }

    /// Live components per class.
    pub fn live_per_class(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for j in self.live_indices() {
            out[self.class_of[j]] += 1;
        }
        out
    }

    /// Index of the live component of class `k` with the highest cosine to `z`.
    /// Ties go to the lowest index.
    pub fn nearest_component(&self, z: &[f64], k: usize) -> Result<usize> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                op: "nearest_component",
                left: vec![z.len()],
                right: vec![self.dim()],
            });
        }
        if norm(z) == 0.0 {
            return Err(Error::ZeroNorm("nearest_component"));
        }
        // |z| is a common positive factor, so dot/|u| orders like the cosine.
        let mut best: Option<(usize, f64)> = None;
        for j in self.live_of_class(k) {
            let u = self.component(j);
            let score = dot(z, u) / norm(u);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        best.map(|(j, _)| j).ok_or(Error::NoLiveComponents(k))
    }

    /// Mean of each class's live components, recomputed from scratch.
    pub fn centroids(&self) -> Result<CentroidSet> {
        let m = self.dim();
        let mut data = vec![0.0; self.num_classes * m];
        for k in 0..self.num_classes {
            let members = self.live_of_class(k);
            if members.is_empty() {
                return Err(Error::NoLiveComponents(k));
            }
            let row = &mut data[k * m..(k + 1) * m];
            for &j in &members {
                for (r, u) in row.iter_mut().zip(self.component(j)) {
                    *r += u;
                }
            }
            let inv = 1.0 / members.len() as f64;
            row.iter_mut().for_each(|r| *r *= inv);
        }
        Ok(CentroidSet {
            centroids: Tensor::matrix(self.num_classes, m, data)?,
        })
    }

    /// `C×K` matrix `A` with `A · components = centroids`.
    pub fn centroid_weights(&self) -> Result<Tensor> {
        let k_total = self.len();
        let mut a = Tensor::zeros(&[self.num_classes, k_total]);
        for k in 0..self.num_classes {
            let members = self.live_of_class(k);
            if members.is_empty() {
                return Err(Error::NoLiveComponents(k));
            }
            let w = 1.0 / members.len() as f64;
            for j in members {
                a.data_mut()[k * k_total + j] = w;
            }
        }
        Ok(a)
    }

    pub fn record_assignment(&mut self, j: usize) -> Result<()> {
        if !self.is_live(j) {
            return Err(Error::DeadComponent(j));
        }
        self.counts[j] += 1;
        Ok(())
    }

    pub fn reset_counts(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Marks every live component with a zero count as dead and returns the
    /// removed indices. A class in which nothing was counted (no samples)
    /// keeps its first live component.
    pub fn prune(&mut self) -> Vec<usize> {
        let mut removed = Vec::new();
        for k in 0..self.num_classes {
            let members = self.live_of_class(k);
            let any_counted = members.iter().any(|&j| self.counts[j] > 0);
            for (pos, &j) in members.iter().enumerate() {
                let keep = self.counts[j] > 0 || (!any_counted && pos == 0);
                if !keep {
                    self.live[j] = false;
                    removed.push(j);
                }
            }
        }
        removed.sort_unstable();
        removed
    }

    /// Applies a dead set computed on another copy of the same bank.
    pub fn kill(&mut self, indices: &[usize]) {
        for &j in indices {
            if j < self.live.len() {
                self.live[j] = false;
            }
        }
    }
}

/// Pseudo-label for input `x` of class `k` under the frozen target.
pub fn nearest_component_target(x: &[f64], target: &TargetSnapshot, k: usize) -> Result<usize> {
    let z = target.encoder().embed_one(x)?;
    target.bank().nearest_component(&z, k)
}
