//! Quadratic Weighted Kappa and agreement statistics.
//!
//! ```text
//! QWK = 1 - sum_ij w_ij O_ij / sum_ij w_ij E_ij
//! w_ij = (i - j)^2 / K^2,  E_ij = row_i * col_j / n
//! ```
//! `O` counts (gold = i, predicted = j). Any positive constant in the weight
//! denominator cancels, so the `K` vs `K - 1` reading of the normalizer does not
//! change the value. When `sum w E == 0` the statistic is undefined and
//! [`Qwk::Degenerate`] is returned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlomError, Result};
use crate::score_space::ScoreScale;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Qwk {
    Value(f64),
    Degenerate,
}

impl Qwk {
    pub fn value(self) -> Option<f64> {
        match self {
            Qwk::Value(v) => Some(v),
            Qwk::Degenerate => None,
        }
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Qwk::Degenerate)
    }
}

/// Rows are gold levels, columns predicted levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_levels: usize,
    counts: Vec<u64>,
    n: u64,
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[usize], golds: &[usize], scale: &ScoreScale) -> Result<Self> {
        check_pairs(preds, golds, scale)?;
        let l = scale.n_levels();
        let mut counts = vec![0u64; l * l];
        for (&p, &g) in preds.iter().zip(golds) {
            counts[g * l + p] += 1;
        }
        Ok(Self {
            n_levels: l,
            counts,
            n: preds.len() as u64,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.n_levels + pred]
    }

    pub fn row_marginals(&self) -> Vec<u64> {
        (0..self.n_levels)
            .map(|i| (0..self.n_levels).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn col_marginals(&self) -> Vec<u64> {
        (0..self.n_levels)
            .map(|j| (0..self.n_levels).map(|i| self.get(i, j)).sum())
            .collect()
    }

    /// QWK over the full matrix with weights `(i - j)^2 / weight_denominator`.
    pub fn qwk_weighted(&self, weight_denominator: f64) -> Result<Qwk> {
        if !weight_denominator.is_finite() || weight_denominator <= 0.0 {
            return invalid("weight denominator must be a positive finite number");
        }
        let rows = self.row_marginals();
        let cols = self.col_marginals();
        let n = self.n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                let d = i as f64 - j as f64;
                let w = d * d / weight_denominator;
                num += w * self.get(i, j) as f64;
                den += w * r as f64 * c as f64 / n;
            }
        }
        if den == 0.0 {
            return Ok(Qwk::Degenerate);
        }
        Ok(Qwk::Value(1.0 - num / den))
    }
}

fn check_pairs(preds: &[usize], golds: &[usize], scale: &ScoreScale) -> Result<()> {
    if preds.len() != golds.len() {
        return invalid(format!(
            "prediction/gold length mismatch: {} vs {}",
            preds.len(),
            golds.len()
        ));
    }
    if preds.is_empty() {
        return invalid("QWK needs at least one pair");
    }
    for &v in preds.iter().chain(golds) {
        scale.check_level(v)?;
    }
    Ok(())
}

/// QWK on internal levels.
///
/// Uses the moment form of the quadratic-weight sums, evaluated exactly in
/// integers: `sum w O = sum (p - g)^2` and
/// `n * sum w E = n * sum_i r_i i^2 + n * sum_j c_j j^2 - 2 (sum_i r_i i)(sum_j c_j j)`.
pub fn qwk(preds: &[usize], golds: &[usize], scale: &ScoreScale) -> Result<Qwk> {
    check_pairs(preds, golds, scale)?;
    let n = preds.len() as i128;
    let mut observed: i128 = 0;
    let (mut sg, mut sg2, mut sp, mut sp2) = (0i128, 0i128, 0i128, 0i128);
    for (&p, &g) in preds.iter().zip(golds) {
        let (p, g) = (p as i128, g as i128);
        observed += (p - g) * (p - g);
        sg += g;
        sg2 += g * g;
        sp += p;
        sp2 += p * p;
    }
    let expected_times_n = n * sg2 + n * sp2 - 2 * sg * sp;
    if expected_times_n == 0 {
        return Ok(Qwk::Degenerate);
    }
    Ok(Qwk::Value(
        1.0 - (n * observed) as f64 / expected_times_n as f64,
    ))
}

/// Mean of the non-degenerate values; degenerate keys are listed separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: f64,
    pub degenerate: Vec<String>,
}

pub fn macro_average(per_trait: &BTreeMap<String, Qwk>) -> Result<MacroAverage> {
    let mut vals = Vec::new();
    let mut degenerate = Vec::new();
    for (t, q) in per_trait {
        match q {
            Qwk::Value(v) => vals.push(*v),
            Qwk::Degenerate => degenerate.push(t.clone()),
        }
    }
    if vals.is_empty() {
        return Err(DlomError::AllDegenerate);
    }
    Ok(MacroAverage {
        value: vals.iter().sum::<f64>() / vals.len() as f64,
        degenerate,
    })
}

/// Per-trait QWK with its macro average; degenerate traits are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QwkReport {
    pub per_trait: BTreeMap<String, Option<f64>>,
    pub macro_avg: Option<f64>,
    pub degenerate_traits: Vec<String>,
}

impl QwkReport {
    pub fn from_per_trait(per_trait: &BTreeMap<String, Qwk>) -> Self {
        let macro_avg = macro_average(per_trait).ok();
        Self {
            per_trait: per_trait
                .iter()
                .map(|(k, v)| (k.clone(), v.value()))
                .collect(),
            macro_avg: macro_avg.as_ref().map(|m| m.value),
            degenerate_traits: per_trait
                .iter()
                .filter(|(_, v)| v.is_degenerate())
                .map(|(k, _)| k.clone())
                .collect(),
        }
    }
}

pub fn mean_absolute_error(preds: &[usize], golds: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .zip(golds)
        .map(|(p, g)| p.abs_diff(*g) as f64)
        .sum::<f64>()
        / preds.len() as f64
}

/// Fraction of predictions at least `min_gap` levels away from gold.
pub fn far_error_rate(preds: &[usize], golds: &[usize], min_gap: usize) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.abs_diff(**g) >= min_gap)
        .count() as f64
        / preds.len() as f64
}
