//! Desk-scale backbone: a two-layer tanh encoder per branch producing vocabulary
//! logits, plus the pooling-head classifier used as a baseline.

use crate::error::{invalid, Result};
use crate::math::all_finite;
use crate::rng::SplitMix64;
use crate::score_space::{ScoreLogits, ScoreScale};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!("{rows}x{cols} matrix given {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform in `[-1/sqrt(cols), 1/sqrt(cols)]`.
    pub fn uniform_fan_in(rows: usize, cols: usize, rng: &mut SplitMix64) -> Self {
        let s = 1.0 / (cols as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.uniform(-s, s)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x + bias`
    pub fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| bias[r] + self.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// `self^T * g`, skipping zero rows of `g`.
    pub fn transpose_mul(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += gr * a;
            }
        }
        out
    }

    /// `self += g * x^T`, skipping zero rows of `g`.
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        let cols = self.cols;
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (d, xv) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *d += gr * xv;
            }
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Dense) {
        for (d, o) in self.data.iter_mut().zip(&other.data) {
            *d += a * o;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchEncoder {
    pub w1: Dense,
    pub b1: Vec<f64>,
    pub w2: Dense,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub x: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Dense,
    pub b1: Vec<f64>,
    pub w2: Dense,
    pub b2: Vec<f64>,
    pub x: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(enc: &BranchEncoder) -> Self {
        Self {
            w1: Dense::zeros(enc.w1.rows, enc.w1.cols),
            b1: vec![0.0; enc.b1.len()],
            w2: Dense::zeros(enc.w2.rows, enc.w2.cols),
            b2: vec![0.0; enc.b2.len()],
            x: vec![0.0; enc.feature_dim()],
        }
    }
}

impl BranchEncoder {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, vocab_size: usize) -> Self {
        Self {
            w1: Dense::zeros(hidden_dim, feature_dim),
            b1: vec![0.0; hidden_dim],
            w2: Dense::zeros(vocab_size, hidden_dim),
            b2: vec![0.0; vocab_size],
        }
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(
        feature_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let w1 = Dense::uniform_fan_in(hidden_dim, feature_dim, rng);
        let s1 = 1.0 / (feature_dim as f64).sqrt();
        let b1 = (0..hidden_dim).map(|_| rng.uniform(-s1, s1)).collect();
        let w2 = Dense::uniform_fan_in(vocab_size, hidden_dim, rng);
        let s2 = 1.0 / (hidden_dim as f64).sqrt();
        let b2 = (0..vocab_size).map(|_| rng.uniform(-s2, s2)).collect();
        Self { w1, b1, w2, b2 }
    }

    pub fn from_parts(w1: Dense, b1: Vec<f64>, w2: Dense, b2: Vec<f64>) -> Result<Self> {
        let enc = Self { w1, b1, w2, b2 };
        enc.validate()?;
        Ok(enc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b1.len() != self.w1.rows
            || self.w2.cols != self.w1.rows
            || self.b2.len() != self.w2.rows
        {
            return invalid("encoder dimensions are inconsistent");
        }
        if ![&self.w1.data, &self.b1, &self.w2.data, &self.b2]
            .iter()
            .all(|v| all_finite(v))
        {
            return invalid("encoder parameters must be finite");
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn vocab_size(&self) -> usize {
        self.w2.rows
    }

    /// `W2 tanh(W1 x + b1) + b2`.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderCache)> {
        if x.len() != self.feature_dim() {
            return invalid(format!(
                "encoder expects {} features, got {}",
                self.feature_dim(),
                x.len()
            ));
        }
        let hidden: Vec<f64> = self
            .w1
            .affine(x, &self.b1)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let out = self.w2.affine(&hidden, &self.b2);
        Ok((
            out,
            EncoderCache {
                x: x.to_vec(),
                hidden,
            },
        ))
    }

    pub fn encode_backward(&self, cache: &EncoderCache, grad_out: &[f64]) -> Result<EncoderGrads> {
        let mut g = EncoderGrads::zeros_like(self);
        let d_pre = self.accumulate_backward(cache, grad_out, &mut g)?;
        g.x = self.w1.transpose_mul(&d_pre);
        Ok(g)
    }

    /// Adds this instance's parameter gradients into `acc`; `acc.x` is left
    /// untouched. Returns the gradient at the hidden pre-activation.
    pub fn accumulate_backward(
        &self,
        cache: &EncoderCache,
        grad_out: &[f64],
        acc: &mut EncoderGrads,
    ) -> Result<Vec<f64>> {
        if cache.x.len() != self.feature_dim()
            || cache.hidden.len() != self.hidden_dim()
            || grad_out.len() != self.vocab_size()
        {
            return invalid(
                "encoder backward: cache or gradient does not match encoder dimensions",
            );
        }
        for (a, g) in acc.b2.iter_mut().zip(grad_out) {
            *a += g;
        }
        acc.w2.add_outer(grad_out, &cache.hidden);
        let d_hidden = self.w2.transpose_mul(grad_out);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        for (a, g) in acc.b1.iter_mut().zip(&d_pre) {
            *a += g;
        }
        acc.w1.add_outer(&d_pre, &cache.x);
        Ok(d_pre)
    }

    pub fn apply(&mut self, g: &EncoderGrads, lr: f64) {
        self.w1.axpy(-lr, &g.w1);
        self.w2.axpy(-lr, &g.w2);
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= lr * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= lr * d;
        }
    }
}

/// Affine `(K+1)`-way head over a pooled feature vector. Features arrive already
/// pooled, so `pool` is the identity here.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingHeadBaseline {
    pub w: Dense,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w: Dense,
    pub b: Vec<f64>,
    pub x: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &PoolingHeadBaseline) -> Self {
        Self {
            w: Dense::zeros(head.w.rows, head.w.cols),
            b: vec![0.0; head.b.len()],
            x: vec![0.0; head.feature_dim()],
        }
    }
}

impl PoolingHeadBaseline {
    pub fn zeros(scale: &ScoreScale, feature_dim: usize) -> Self {
        Self {
            w: Dense::zeros(scale.n_levels(), feature_dim),
            b: vec![0.0; scale.n_levels()],
        }
    }

    pub fn init(scale: &ScoreScale, feature_dim: usize, rng: &mut SplitMix64) -> Self {
        let w = Dense::uniform_fan_in(scale.n_levels(), feature_dim, rng);
        let s = 1.0 / (feature_dim as f64).sqrt();
        let b = (0..scale.n_levels()).map(|_| rng.uniform(-s, s)).collect();
        Self { w, b }
    }

    pub fn from_parts(w: Dense, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows || w.rows < 2 {
            return invalid("pooling head dimensions are inconsistent");
        }
        if !all_finite(&w.data) || !all_finite(&b) {
            return invalid("pooling head parameters must be finite");
        }
        Ok(Self { w, b })
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &[f64]) -> Result<ScoreLogits> {
        if x.len() != self.feature_dim() {
            return invalid(format!(
                "pooling head expects {} features, got {}",
                self.feature_dim(),
                x.len()
            ));
        }
        ScoreLogits::new(self.w.affine(x, &self.b))
    }

    pub fn backward(&self, x: &[f64], grad_z: &[f64]) -> Result<HeadGrads> {
        let mut g = HeadGrads::zeros_like(self);
        self.accumulate_backward(x, grad_z, &mut g)?;
        g.x = self.w.transpose_mul(grad_z);
        Ok(g)
    }

    pub fn accumulate_backward(
        &self,
        x: &[f64],
        grad_z: &[f64],
        acc: &mut HeadGrads,
    ) -> Result<()> {
        if x.len() != self.feature_dim() || grad_z.len() != self.w.rows {
            return invalid("pooling head backward: dimension mismatch");
        }
        acc.w.add_outer(grad_z, x);
        for (a, g) in acc.b.iter_mut().zip(grad_z) {
            *a += g;
        }
        Ok(())
    }

    pub fn apply(&mut self, g: &HeadGrads, lr: f64) {
        self.w.axpy(-lr, &g.w);
        for (p, d) in self.b.iter_mut().zip(&g.b) {
            *p -= lr * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_space::{decide, extract_score_logits, ScoreTokenSet};

    fn rel(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    fn random_encoder(rng: &mut SplitMix64) -> BranchEncoder {
        let f = 1 + rng.below(6) as usize;
        let h = 1 + rng.below(5) as usize;
        let v = 2 + rng.below(8) as usize;
        let mut e = BranchEncoder::init(f, h, v, rng);
        // larger weights so tanh leaves its linear regime
        e.w1.data.iter_mut().for_each(|w| *w *= 2.0);
        e
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let e = BranchEncoder::zeros(3, 4, 5);
        let (out, _) = e.encode(&[1.0, -2.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.0; 5]);
    }

    #[test]
    fn hand_evaluable_single_path() {
        let e = BranchEncoder::from_parts(
            Dense::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            vec![0.0],
            Dense::from_vec(2, 1, vec![1.0, -1.0]).unwrap(),
            vec![0.0, 0.0],
        )
        .unwrap();
        let (out, _) = e.encode(&[0.5, 9.0]).unwrap();
        assert_eq!(out, vec![0.5f64.tanh(), -(0.5f64.tanh())]);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_naive_loops() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..20 {
            let e = random_encoder(&mut rng);
            let x: Vec<f64> = (0..e.feature_dim()).map(|_| rng.normal()).collect();
            let (out, _) = e.encode(&x).unwrap();
            let mut hidden = vec![0.0; e.hidden_dim()];
            for i in 0..e.hidden_dim() {
                let mut s = e.b1[i];
                for j in 0..e.feature_dim() {
                    s += e.w1.data[i * e.feature_dim() + j] * x[j];
                }
                hidden[i] = s.tanh();
            }
            for o in 0..e.vocab_size() {
                let mut s = e.b2[o];
                for i in 0..e.hidden_dim() {
                    s += e.w2.data[o * e.hidden_dim() + i] * hidden[i];
                }
                assert!((s - out[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let e = BranchEncoder::zeros(3, 4, 5);
        assert!(e.encode(&[1.0]).is_err());
        let (_, cache) = e.encode(&[1.0, 2.0, 3.0]).unwrap();
        assert!(e.encode_backward(&cache, &[1.0; 4]).is_err());
        let other = BranchEncoder::zeros(2, 4, 5);
        assert!(other.encode_backward(&cache, &[1.0; 5]).is_err());
        assert!(BranchEncoder::from_parts(
            Dense::zeros(2, 3),
            vec![0.0; 3],
            Dense::zeros(4, 2),
            vec![0.0; 4]
        )
        .is_err());
    }

    #[test]
    fn backward_zero_upstream_and_bias_identity() {
        let mut rng = SplitMix64::new(9);
        let e = random_encoder(&mut rng);
        let x: Vec<f64> = (0..e.feature_dim()).map(|_| rng.normal()).collect();
        let (_, cache) = e.encode(&x).unwrap();
        let g = e
            .encode_backward(&cache, &vec![0.0; e.vocab_size()])
            .unwrap();
        assert!(g
            .w1
            .data
            .iter()
            .chain(&g.b1)
            .chain(&g.w2.data)
            .chain(&g.b2)
            .chain(&g.x)
            .all(|v| *v == 0.0));
        let up: Vec<f64> = (0..e.vocab_size()).map(|_| rng.normal()).collect();
        let g = e.encode_backward(&cache, &up).unwrap();
        assert_eq!(g.b2, up);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(31);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let e = random_encoder(&mut rng);
            let x: Vec<f64> = (0..e.feature_dim()).map(|_| rng.normal()).collect();
            let up: Vec<f64> = (0..e.vocab_size()).map(|_| rng.normal()).collect();
            let loss = |enc: &BranchEncoder, x: &[f64]| -> f64 {
                let (o, _) = enc.encode(x).unwrap();
                o.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = e.encode(&x).unwrap();
            let g = e.encode_backward(&cache, &up).unwrap();
            let check =
                |analytic: f64, plus: f64, minus: f64| rel(analytic, (plus - minus) / (2.0 * eps));
            for i in 0..e.w1.data.len() {
                let (mut p, mut m) = (e.clone(), e.clone());
                p.w1.data[i] += eps;
                m.w1.data[i] -= eps;
                worst = worst.max(check(g.w1.data[i], loss(&p, &x), loss(&m, &x)));
            }
            for i in 0..e.b1.len() {
                let (mut p, mut m) = (e.clone(), e.clone());
                p.b1[i] += eps;
                m.b1[i] -= eps;
                worst = worst.max(check(g.b1[i], loss(&p, &x), loss(&m, &x)));
            }
            for i in 0..e.w2.data.len() {
                let (mut p, mut m) = (e.clone(), e.clone());
                p.w2.data[i] += eps;
                m.w2.data[i] -= eps;
                worst = worst.max(check(g.w2.data[i], loss(&p, &x), loss(&m, &x)));
            }
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += eps;
                xm[i] -= eps;
                worst = worst.max(check(g.x[i], loss(&e, &xp), loss(&e, &xm)));
            }
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn identity_tokens_read_the_leading_vocabulary_rows() {
        let mut rng = SplitMix64::new(12);
        let scale = ScoreScale::new(3, 0).unwrap();
        let e = BranchEncoder::init(5, 4, 16, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (vocab, _) = e.encode(&x).unwrap();
        let z = extract_score_logits(&vocab, &ScoreTokenSet::identity(&scale)).unwrap();
        assert_eq!(z.as_slice(), &vocab[..4]);
    }

    #[test]
    fn head_examples() {
        let scale = ScoreScale::new(3, 0).unwrap();
        let head = PoolingHeadBaseline::zeros(&scale, 6);
        let z = head.forward(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        assert_eq!(decide(&z), 0);

        let mut eye = Dense::zeros(4, 4);
        for i in 0..4 {
            eye.data[i * 4 + i] = 1.0;
        }
        let head = PoolingHeadBaseline::from_parts(eye, vec![0.0; 4]).unwrap();
        let x = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(head.forward(&x).unwrap().as_slice(), &x);
        assert!(head.forward(&[1.0]).is_err());
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = SplitMix64::new(45);
        let eps = 1e-5;
        for _ in 0..30 {
            let scale = ScoreScale::new(1 + rng.below(8) as usize, 0).unwrap();
            let f = 1 + rng.below(6) as usize;
            let head = PoolingHeadBaseline::init(&scale, f, &mut rng);
            let x: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
            let up: Vec<f64> = (0..scale.n_levels()).map(|_| rng.normal()).collect();
            let loss = |h: &PoolingHeadBaseline| -> f64 {
                h.forward(&x)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let g = head.backward(&x, &up).unwrap();
            for i in 0..head.w.data.len() {
                let (mut p, mut m) = (head.clone(), head.clone());
                p.w.data[i] += eps;
                m.w.data[i] -= eps;
                assert!(rel(g.w.data[i], (loss(&p) - loss(&m)) / (2.0 * eps)) < 1e-5);
            }
            for i in 0..head.b.len() {
                let (mut p, mut m) = (head.clone(), head.clone());
                p.b[i] += eps;
                m.b[i] -= eps;
                assert!(rel(g.b[i], (loss(&p) - loss(&m)) / (2.0 * eps)) < 1e-5);
            }
        }
    }
}
