//! Decision-level gated fusion of a multimodal and a text-only branch.
//!
//! Forward:
//! ```text
//! h     = tanh([z_m ; z_t])
//! alpha = sigmoid(w . h + b)
//! z     = alpha * z_m + (1 - alpha) * z_t
//! ```
//! The gate sees only the two score-logit vectors, never hidden states.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{all_finite, dot, sigmoid};
use crate::score_space::{ScoreLogits, ScoreScale};

/// Linear gate over `2(K+1)` inputs followed by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParameters {
    pub w: Vec<f64>,
    pub b: f64,
}

impl GateParameters {
    /// `w = 0, b = 0`, i.e. `alpha = 0.5` for every input.
    pub fn zeros(scale: &ScoreScale) -> Self {
        Self {
            w: vec![0.0; 2 * scale.n_levels()],
            b: 0.0,
        }
    }

    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if w.is_empty() || !w.len().is_multiple_of(2) {
            return invalid(format!(
                "gate weight length {} must be even and non-zero",
                w.len()
            ));
        }
        if !all_finite(&w) || !b.is_finite() {
            return invalid("gate parameters must be finite");
        }
        Ok(Self { w, b })
    }

    pub fn n_levels(&self) -> usize {
        self.w.len() / 2
    }

    pub fn apply(&mut self, grads: &GateGrads, lr: f64) {
        for (w, g) in self.w.iter_mut().zip(&grads.w) {
            *w -= lr * g;
        }
        self.b -= lr * grads.b;
    }
}

/// Forward quantities cached for [`fuse_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub h: Vec<f64>,
    pub a: f64,
    pub alpha: f64,
    pub z_m: ScoreLogits,
    pub z_t: ScoreLogits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub w: Vec<f64>,
    pub b: f64,
}

impl GateGrads {
    pub fn zeros(n_levels: usize) -> Self {
        Self {
            w: vec![0.0; 2 * n_levels],
            b: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &GateGrads) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += b;
        }
        self.b += other.b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w.iter_mut().for_each(|v| *v *= s);
        self.b *= s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub z_m: Vec<f64>,
    pub z_t: Vec<f64>,
    pub gate: GateGrads,
}

pub fn fuse_forward(
    z_m: &ScoreLogits,
    z_t: &ScoreLogits,
    params: &GateParameters,
) -> Result<(ScoreLogits, FusionTrace)> {
    let n = z_m.len();
    if z_t.len() != n {
        return invalid(format!(
            "branch logits differ in length: {} vs {}",
            n,
            z_t.len()
        ));
    }
    if params.w.len() != 2 * n {
        return invalid(format!(
            "gate expects {} levels per branch, logits have {n}",
            params.n_levels()
        ));
    }
    let h: Vec<f64> = z_m
        .as_slice()
        .iter()
        .chain(z_t.as_slice())
        .map(|v| v.tanh())
        .collect();
    let a = dot(&params.w, &h) + params.b;
    let alpha = sigmoid(a);
    let fused: Vec<f64> = z_m
        .as_slice()
        .iter()
        .zip(z_t.as_slice())
        .map(|(m, t)| alpha * m + (1.0 - alpha) * t)
        .collect();
    let trace = FusionTrace {
        h,
        a,
        alpha,
        z_m: z_m.clone(),
        z_t: z_t.clone(),
    };
    Ok((ScoreLogits::new(fused)?, trace))
}

pub fn fuse_backward(
    trace: &FusionTrace,
    params: &GateParameters,
    grad_z: &[f64],
) -> Result<FusionGrads> {
    let n = trace.z_m.len();
    if grad_z.len() != n || params.w.len() != 2 * n || trace.h.len() != 2 * n {
        return invalid("fusion backward: dimension mismatch between trace, params and gradient");
    }
    // The cached pre-activation must be reproducible from these parameters.
    if dot(&params.w, &trace.h) + params.b != trace.a {
        return invalid("fusion backward: trace was produced with different gate parameters");
    }
    let alpha = trace.alpha;
    let zm = trace.z_m.as_slice();
    let zt = trace.z_t.as_slice();

    let d_alpha: f64 = grad_z
        .iter()
        .zip(zm.iter().zip(zt))
        .map(|(g, (m, t))| g * (m - t))
        .sum();
    let d_a = d_alpha * alpha * (1.0 - alpha);

    let gate = GateGrads {
        w: trace.h.iter().map(|h| d_a * h).collect(),
        b: d_a,
    };
    // d/dc of tanh(c) with c = [z_m; z_t]
    let d_c: Vec<f64> = params
        .w
        .iter()
        .zip(&trace.h)
        .map(|(w, h)| d_a * w * (1.0 - h * h))
        .collect();
    let z_m_grad = (0..n).map(|k| alpha * grad_z[k] + d_c[k]).collect();
    let z_t_grad = (0..n)
        .map(|k| (1.0 - alpha) * grad_z[k] + d_c[n + k])
        .collect();
    Ok(FusionGrads {
        z_m: z_m_grad,
        z_t: z_t_grad,
        gate,
    })
}
