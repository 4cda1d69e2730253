//! Trait records, the line-delimited JSON dataset format, synthetic two-modality
//! data and essay-level fold plans.
//!
//! One record per line:
//!
//! ```json
//! {"instance_id":"e17","trait_id":"coherence","gold":4,"score_range":[1,6],"x_text":[0.1,-0.3],"x_visual":[0.7,0.2]}
//! ```
//!
//! `score_range` is the inclusive external range of the trait; it may be omitted
//! when the loader is given a default scale. `x_visual` is optional.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DlomError, Result};
use crate::math::all_finite;
use crate::rng::SplitMix64;
use crate::score_space::ScoreScale;

#[derive(Debug, Clone, PartialEq)]
pub struct TraitRecord {
    pub instance_id: String,
    pub trait_id: String,
    pub x_text: Vec<f64>,
    pub x_visual: Option<Vec<f64>>,
    /// External rubric score.
    pub gold: i64,
    pub scale: ScoreScale,
}

impl TraitRecord {
    pub fn gold_level(&self) -> Result<usize> {
        self.scale.from_external(self.gold)
    }
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    instance_id: String,
    trait_id: String,
    gold: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_range: Option<[i64; 2]>,
    x_text: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_visual: Option<Vec<f64>>,
}

/// Checks the per-dataset invariants: finite non-empty features of uniform
/// width, gold inside its scale, one scale per trait, no duplicate
/// (instance, trait) pairs, and visual features on all records or none.
pub fn validate_records(records: &[TraitRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let text_dim = first.x_text.len();
    let visual_dim = first.x_visual.as_ref().map(Vec::len);
    let mut scales: BTreeMap<&str, ScoreScale> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in records {
        let who = format!("record ({}, {})", r.instance_id, r.trait_id);
        if r.x_text.is_empty() {
            return invalid(format!("{who}: x_text is empty"));
        }
        if r.x_text.len() != text_dim {
            return invalid(format!(
                "{who}: x_text has {} features, expected {text_dim}",
                r.x_text.len()
            ));
        }
        if r.x_visual.as_ref().map(Vec::len) != visual_dim {
            return invalid(format!(
                "{who}: x_visual presence or width differs from the first record"
            ));
        }
        if !all_finite(&r.x_text) || !r.x_visual.as_deref().is_none_or(all_finite) {
            return invalid(format!("{who}: non-finite feature value"));
        }
        if r.scale.from_external(r.gold).is_err() {
            let (lo, hi) = r.scale.external_range();
            return invalid(format!("{who}: gold {} outside [{lo}, {hi}]", r.gold));
        }
        match scales.get(r.trait_id.as_str()) {
            Some(s) if *s != r.scale => {
                return invalid(format!(
                    "{who}: trait {} uses two different score ranges",
                    r.trait_id
                ));
            }
            Some(_) => {}
            None => {
                scales.insert(&r.trait_id, r.scale);
            }
        }
        if !seen.insert((r.instance_id.as_str(), r.trait_id.as_str())) {
            return invalid(format!("{who}: duplicate record"));
        }
    }
    Ok(())
}

pub fn parse_records(
    text: &str,
    source: &str,
    default_scale: Option<ScoreScale>,
) -> Result<Vec<TraitRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, source, i + 1, default_scale)?);
    }
    validate_records(&out)?;
    Ok(out)
}

fn parse_line(
    line: &str,
    source: &str,
    lineno: usize,
    default_scale: Option<ScoreScale>,
) -> Result<TraitRecord> {
    let perr = |message: String| DlomError::Parse {
        path: source.to_string(),
        line: lineno,
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
    let scale = match (raw.score_range, default_scale) {
        (Some([lo, hi]), _) => ScoreScale::from_range(lo, hi).map_err(|e| perr(e.to_string()))?,
        (None, Some(s)) => s,
        (None, None) => {
            return Err(perr(format!(
                "record {} has no score_range and no default scale was given",
                raw.instance_id
            )))
        }
    };
    Ok(TraitRecord {
        instance_id: raw.instance_id,
        trait_id: raw.trait_id,
        x_text: raw.x_text,
        x_visual: raw.x_visual,
        gold: raw.gold,
        scale,
    })
}

pub fn load_records(path: &Path, default_scale: Option<ScoreScale>) -> Result<Vec<TraitRecord>> {
    let source = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, &source, i + 1, default_scale)?);
    }
    if out.is_empty() {
        log::warn!("{source}: no records");
    }
    validate_records(&out)?;
    Ok(out)
}

pub fn write_records<W: Write>(records: &[TraitRecord], mut w: W) -> Result<()> {
    for r in records {
        let (lo, hi) = r.scale.external_range();
        let raw = RawRecord {
            instance_id: r.instance_id.clone(),
            trait_id: r.trait_id.clone(),
            gold: r.gold,
            score_range: Some([lo, hi]),
            x_text: r.x_text.clone(),
            x_visual: r.x_visual.clone(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[TraitRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Parameters of the synthetic two-modality generator.
///
/// Each instance draws a gold level uniformly, then
/// `x_text = y * u_t + N(0, text_noise^2)` and `x_visual = y * u_v + N(0, sigma_v^2)`,
/// where `u_t`, `u_v` are fixed seeded unit directions and `sigma_v` is drawn per
/// instance: `visual_noise_high` with probability `visual_high_prob`, otherwise
/// `visual_noise_low`. Setting `*_signal = false` replaces that modality with
/// standard normal noise carrying no information about the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_instances: usize,
    pub k_max: usize,
    pub offset: i64,
    pub traits: Vec<String>,
    pub feature_dim: usize,
    pub text_noise: f64,
    pub visual_noise_low: f64,
    pub visual_noise_high: f64,
    pub visual_high_prob: f64,
    pub with_visual: bool,
    pub text_signal: bool,
    pub visual_signal: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_instances: 2000,
            k_max: 5,
            offset: 0,
            traits: vec!["score".to_string()],
            feature_dim: 16,
            text_noise: 1.0,
            visual_noise_low: 0.1,
            visual_noise_high: 10.0,
            visual_high_prob: 0.5,
            with_visual: true,
            text_signal: true,
            visual_signal: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn scale(&self) -> Result<ScoreScale> {
        ScoreScale::new(self.k_max, self.offset)
    }

    pub fn validate(&self) -> Result<()> {
        self.scale()?;
        if self.n_instances == 0 || self.feature_dim == 0 || self.traits.is_empty() {
            return invalid("synthetic spec needs instances, features and at least one trait");
        }
        for (name, v) in [
            ("text_noise", self.text_noise),
            ("visual_noise_low", self.visual_noise_low),
            ("visual_noise_high", self.visual_noise_high),
        ] {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("{name} must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.visual_high_prob) {
            return invalid("visual_high_prob must lie in [0, 1]");
        }
        let distinct: BTreeSet<&String> = self.traits.iter().collect();
        if distinct.len() != self.traits.len() {
            return invalid("trait names must be distinct");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<TraitRecord>,
    pub text_direction: Vec<f64>,
    pub visual_direction: Vec<f64>,
    /// Visual noise level drawn for each instance, in instance order.
    pub visual_sigma: Vec<f64>,
}

fn unit_direction(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let scale = spec.scale()?;
    let mut rng = SplitMix64::new(spec.seed);
    let d = spec.feature_dim;
    let text_direction = unit_direction(&mut rng, d);
    let visual_direction = unit_direction(&mut rng, d);
    let width = (spec.n_instances - 1).to_string().len();
    let mut records = Vec::with_capacity(spec.n_instances * spec.traits.len());
    let mut visual_sigma = Vec::with_capacity(spec.n_instances);
    for i in 0..spec.n_instances {
        let sigma_v = if rng.next_f64() < spec.visual_high_prob {
            spec.visual_noise_high
        } else {
            spec.visual_noise_low
        };
        visual_sigma.push(sigma_v);
        let instance_id = format!("s{i:0width$}");
        for t in &spec.traits {
            let level = rng.below(scale.n_levels() as u64) as usize;
            let y = level as f64;
            let x_text: Vec<f64> = if spec.text_signal {
                text_direction
                    .iter()
                    .map(|u| y * u + spec.text_noise * rng.normal())
                    .collect()
            } else {
                (0..d).map(|_| rng.normal()).collect()
            };
            let x_visual = spec.with_visual.then(|| {
                if spec.visual_signal {
                    visual_direction
                        .iter()
                        .map(|u| y * u + sigma_v * rng.normal())
                        .collect()
                } else {
                    (0..d).map(|_| rng.normal()).collect()
                }
            });
            records.push(TraitRecord {
                instance_id: instance_id.clone(),
                trait_id: t.clone(),
                x_text,
                x_visual,
                gold: scale.to_external(level)?,
                scale,
            });
        }
    }
    Ok(SyntheticDataset {
        records,
        text_direction,
        visual_direction,
        visual_sigma,
    })
}

/// Essay-level assignment of instances to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, instance_id: &str) -> Option<usize> {
        self.assignment.get(instance_id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for f in self.assignment.values() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Sorts the distinct ids, shuffles them with `SplitMix64::new(seed)` and deals
/// them round-robin, so position `i` of the shuffled list lands in fold `i % n_folds`.
/// The plan depends on the id set only, never on input order.
pub fn make_folds<'a, I>(ids: I, n_folds: usize, seed: u64) -> Result<FoldPlan>
where
    I: IntoIterator<Item = &'a str>,
{
    if n_folds < 2 {
        return invalid("need at least two folds");
    }
    let distinct: BTreeSet<&str> = ids.into_iter().collect();
    if distinct.len() < n_folds {
        return invalid(format!(
            "{} distinct instances cannot fill {n_folds} folds",
            distinct.len()
        ));
    }
    let mut order: Vec<&str> = distinct.into_iter().collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % n_folds))
        .collect();
    Ok(FoldPlan {
        n_folds,
        seed,
        assignment,
    })
}
