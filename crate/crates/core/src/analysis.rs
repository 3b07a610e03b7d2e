//! Post-training inspection of the mixture: assignment passes, surviving
//! component counts, and purity against planted modes.

use std::collections::BTreeMap;

use crate::bank::MixtureBank;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::losses::assign_nearest;
use crate::tensor::Tensor;

/// Nearest same-class component of every sample under `encoder`/`bank`.
pub fn assignments(encoder: &EncoderParams, bank: &MixtureBank, inputs: &Tensor, classes: &[usize]) -> Result<Vec<usize>> {
    let z = encoder.embed(inputs)?;
    assign_nearest(&z, classes, bank)
}

/// Resets the bank's counters and records one full assignment pass.
pub fn count_assignments(
    encoder: &EncoderParams,
    bank: &mut MixtureBank,
    inputs: &Tensor,
    classes: &[usize],
) -> Result<()> {
    let pseudo = assignments(encoder, bank, inputs, classes)?;
    bank.reset_counts();
    for j in pseudo {
        bank.record_assignment(j)?;
    }
    Ok(())
}

/// `hist[c]` is the number of classes with exactly `c` live components.
pub fn surviving_histogram(bank: &MixtureBank) -> Vec<usize> {
    let per_class = bank.live_per_class();
    let max = per_class.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0; max + 1];
    for c in per_class {
        hist[c] += 1;
    }
    hist
}

pub fn median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Mean over classes of the sample-weighted purity of that class's used
/// components. A component's purity is the fraction of its assigned samples
/// that come from its most frequent ground-truth mode.
pub fn mean_class_purity(pseudo: &[usize], classes: &[usize], modes: &[i64], num_classes: usize) -> f64 {
    let mut per_component: BTreeMap<usize, BTreeMap<i64, usize>> = BTreeMap::new();
    for ((&j, &_k), &m) in pseudo.iter().zip(classes).zip(modes) {
        *per_component.entry(j).or_default().entry(m).or_default() += 1;
    }
    let mut majority = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    let class_of: BTreeMap<usize, usize> = pseudo.iter().copied().zip(classes.iter().copied()).collect();
    for (j, hist) in &per_component {
        let k = class_of[j];
        majority[k] += hist.values().copied().max().unwrap_or(0);
        total[k] += hist.values().sum::<usize>();
    }
    let scores: Vec<f64> = (0..num_classes)
        .filter(|&k| total[k] > 0)
        .map(|k| majority[k] as f64 / total[k] as f64)
        .collect();
    scores.iter().sum::<f64>() / scores.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3, 1, 2]), 2.0);
        assert_eq!(median(&[1, 1, 2, 4]), 1.5);
    }

    #[test]
    fn purity_of_clean_and_mixed_components() {
        // class 0: component 0 gets modes (0,0), component 1 gets (1,1) -> 1.0
        // class 1: component 2 gets modes (0,1,1,1) -> 0.75
        let pseudo = [0, 0, 1, 1, 2, 2, 2, 2];
        let classes = [0, 0, 0, 0, 1, 1, 1, 1];
        let modes = [0, 0, 1, 1, 0, 1, 1, 1];
        let p = mean_class_purity(&pseudo, &classes, &modes, 2);
        assert!((p - 0.875).abs() < 1e-15);
    }
}
