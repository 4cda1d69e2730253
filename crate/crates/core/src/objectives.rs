//! Training objective over score-wise logits.
//!
//! ```text
//! p      = softmax(z)
//! L_CE   = -log p_y
//! E[s]   = sum_k k * p_k
//! L_dist = SmoothL1(E[s] - y)
//! L      = L_CE + lambda * L_dist + beta * (lambda - 0.5)^2,   lambda = sigmoid(lambda_logit)
//! ```
//! With `distance_aware` off, `L = L_CE` and `lambda_logit` receives no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::score_space::ScoreLogits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda_logit: f64,
    pub beta: f64,
    pub smooth_l1_delta: f64,
    pub distance_aware: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_logit: 0.0,
            beta: 0.01,
            smooth_l1_delta: 1.0,
            distance_aware: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_logit.is_finite() {
            return invalid("lambda_logit must be finite");
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return invalid(format!("beta must be >= 0, got {}", self.beta));
        }
        if !self.smooth_l1_delta.is_finite() || self.smooth_l1_delta <= 0.0 {
            return invalid(format!(
                "smooth_l1_delta must be > 0, got {}",
                self.smooth_l1_delta
            ));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        sigmoid(self.lambda_logit)
    }

    pub fn regularizer(&self) -> f64 {
        let d = self.lambda() - 0.5;
        self.beta * d * d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub total: f64,
    pub ce: f64,
    /// SmoothL1 distance term; 0 when the distance-aware path is off.
    pub dist: f64,
    pub lambda_value: f64,
    pub grad_z: Vec<f64>,
    pub grad_lambda_logit: f64,
}

pub fn softmax_stable(z: &ScoreLogits) -> Vec<f64> {
    let v = z.as_slice();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-log p_y` via log-sum-exp, with gradient `p - onehot(y)`.
pub fn cross_entropy(z: &ScoreLogits, y: usize) -> Result<(f64, Vec<f64>)> {
    if y >= z.len() {
        return invalid(format!("gold level {y} outside 0..={}", z.k_max()));
    }
    let loss = log_sum_exp(z.as_slice()) - z.as_slice()[y];
    let mut grad = softmax_stable(z);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Expected level under `p` and its gradient with respect to the logits that produced `p`:
/// `d E[s] / d z_j = p_j (j - E[s])`.
pub fn expected_score(p: &[f64]) -> (f64, Vec<f64>) {
    let e: f64 = p.iter().enumerate().map(|(k, pk)| k as f64 * pk).sum();
    let grad = p
        .iter()
        .enumerate()
        .map(|(j, pj)| pj * (j as f64 - e))
        .collect();
    (e, grad)
}

/// Huber-style SmoothL1 with transition point `delta`; returns `(value, d value / d d)`.
pub fn smooth_l1(d: f64, delta: f64) -> (f64, f64) {
    if d.abs() <= delta {
        (0.5 * d * d / delta, d / delta)
    } else {
        (d.abs() - 0.5 * delta, d.signum())
    }
}

pub fn combined_loss(z: &ScoreLogits, y: usize, cfg: &ObjectiveConfig) -> Result<LossBundle> {
    cfg.validate()?;
    let (ce, mut grad_z) = cross_entropy(z, y)?;
    let lambda = cfg.lambda();
    if !cfg.distance_aware {
        return Ok(LossBundle {
            total: ce,
            ce,
            dist: 0.0,
            lambda_value: lambda,
            grad_z,
            grad_lambda_logit: 0.0,
        });
    }
    let p = softmax_stable(z);
    let (es, d_es) = expected_score(&p);
    let (dist, d_dist) = smooth_l1(es - y as f64, cfg.smooth_l1_delta);
    for (g, de) in grad_z.iter_mut().zip(&d_es) {
        *g += lambda * d_dist * de;
    }
    // regularizer depends on lambda only; z gets nothing from it
    let reg = cfg.regularizer();
    let grad_lambda_logit = (dist + 2.0 * cfg.beta * (lambda - 0.5)) * lambda * (1.0 - lambda);
    Ok(LossBundle {
        total: ce + lambda * dist + reg,
        ce,
        dist,
        lambda_value: lambda,
        grad_z,
        grad_lambda_logit,
    })
}
