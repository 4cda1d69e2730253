//! Ordered score space, score-token set, logit extraction and the argmax rule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlomError, Result};
use crate::math::all_finite;

/// Ordered score levels `0..=k_max`, mapped to external rubric scores by `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawScale", into = "RawScale")]
pub struct ScoreScale {
    k_max: usize,
    offset: i64,
}

#[derive(Serialize, Deserialize)]
struct RawScale {
    k_max: usize,
    offset: i64,
}

impl TryFrom<RawScale> for ScoreScale {
    type Error = DlomError;
    fn try_from(r: RawScale) -> Result<Self> {
        ScoreScale::new(r.k_max, r.offset)
    }
}

impl From<ScoreScale> for RawScale {
    fn from(s: ScoreScale) -> Self {
        RawScale {
            k_max: s.k_max,
            offset: s.offset,
        }
    }
}

impl ScoreScale {
    pub fn new(k_max: usize, offset: i64) -> Result<Self> {
        if k_max < 1 {
            return invalid("a score scale needs at least two levels (k_max >= 1)");
        }
        Ok(Self { k_max, offset })
    }

    /// Scale covering the inclusive external range `[min, max]`.
    pub fn from_range(min: i64, max: i64) -> Result<Self> {
        if max <= min {
            return invalid(format!(
                "score range [{min}, {max}] must span at least two values"
            ));
        }
        Self::new((max - min) as usize, min)
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn n_levels(&self) -> usize {
        self.k_max + 1
    }

    pub fn external_range(&self) -> (i64, i64) {
        (self.offset, self.offset + self.k_max as i64)
    }

    pub fn to_external(&self, level: usize) -> Result<i64> {
        if level > self.k_max {
            return invalid(format!("level {level} outside 0..={}", self.k_max));
        }
        Ok(level as i64 + self.offset)
    }

    pub fn from_external(&self, score: i64) -> Result<usize> {
        let (lo, hi) = self.external_range();
        if score < lo || score > hi {
            return invalid(format!("score {score} outside [{lo}, {hi}]"));
        }
        Ok((score - self.offset) as usize)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.k_max {
            return invalid(format!("level {level} outside 0..={}", self.k_max));
        }
        Ok(())
    }
}

/// Vocabulary index of the token standing for each score level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreTokenSet {
    token_ids: Vec<usize>,
}

impl ScoreTokenSet {
    pub fn new(token_ids: Vec<usize>, scale: &ScoreScale) -> Result<Self> {
        if token_ids.len() != scale.n_levels() {
            return invalid(format!(
                "score-token set has {} ids but the scale has {} levels",
                token_ids.len(),
                scale.n_levels()
            ));
        }
        let mut sorted = token_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return invalid("score-token ids must be distinct");
        }
        Ok(Self { token_ids })
    }

    /// Tokens `0..=k_max`.
    pub fn identity(scale: &ScoreScale) -> Self {
        Self {
            token_ids: (0..scale.n_levels()).collect(),
        }
    }

    /// Level `k` maps to `k * stride + stride / 2` with `stride = vocab_size / (K+1)`,
    /// so the score tokens are scattered through a larger vocabulary.
    pub fn strided(scale: &ScoreScale, vocab_size: usize) -> Result<Self> {
        let n = scale.n_levels();
        if vocab_size < n {
            return invalid(format!(
                "vocabulary of {vocab_size} cannot hold {n} score tokens"
            ));
        }
        let stride = vocab_size / n;
        Ok(Self {
            token_ids: (0..n).map(|k| k * stride + stride / 2).collect(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.token_ids.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(DlomError::TokenOutOfRange { id, vocab_size }),
            None => Ok(()),
        }
    }
}

/// Unnormalized scores `z_0..z_K` over the ordered levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLogits(Vec<f64>);

impl ScoreLogits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return invalid(format!(
                "score logits need at least 2 levels, got {}",
                values.len()
            ));
        }
        if !all_finite(&values) {
            return invalid("score logits contain a non-finite value");
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.0.len() - 1
    }

    pub fn check_scale(&self, scale: &ScoreScale) -> Result<()> {
        if self.len() != scale.n_levels() {
            return invalid(format!(
                "score logits have {} entries, scale has {} levels",
                self.len(),
                scale.n_levels()
            ));
        }
        Ok(())
    }
}

/// Gathers the score-token entries of a vocabulary logit vector: `z[k] = vocab[ids[k]]`.
pub fn extract_score_logits(vocab_logits: &[f64], tokens: &ScoreTokenSet) -> Result<ScoreLogits> {
    tokens.check_vocab(vocab_logits.len())?;
    if !all_finite(vocab_logits) {
        return invalid("vocabulary logits contain a non-finite value");
    }
    ScoreLogits::new(tokens.ids().iter().map(|&id| vocab_logits[id]).collect())
}

/// Argmax over score levels; ties go to the lowest level.
pub fn decide(z: &ScoreLogits) -> usize {
    let mut best = 0;
    for (k, &v) in z.as_slice().iter().enumerate().skip(1) {
        if v > z.0[best] {
            best = k;
        }
    }
    best
}
