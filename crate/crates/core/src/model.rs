//! Per-trait scoring models and the gradient-descent training loop.

use std::borrow::Cow;
use std::collections::BTreeMap;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::backbone::{BranchEncoder, EncoderCache, EncoderGrads, HeadGrads, PoolingHeadBaseline};
use crate::dataset::{validate_records, TraitRecord};
use crate::error::{invalid, DlomError, Result};
use crate::fusion::{fuse_backward, fuse_forward, GateGrads, GateParameters};
use crate::metrics::{far_error_rate, mean_absolute_error, qwk, Qwk};
use crate::objectives::{combined_loss, LossBundle, ObjectiveConfig};
use crate::rng::SplitMix64;
use crate::score_space::{decide, extract_score_logits, ScoreLogits, ScoreScale, ScoreTokenSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    /// Score-token logits from the text branch, cross-entropy only.
    Dlom,
    /// Gated fusion of a multimodal and a text-only branch.
    DlomGf,
    /// Text branch with the distance-aware objective.
    DlomDa,
    /// Separate `(K+1)`-way head on pooled features.
    BaselineCls,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dlom => "dlom",
            Mode::DlomGf => "dlom_gf",
            Mode::DlomDa => "dlom_da",
            Mode::BaselineCls => "baseline_cls",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum InferenceStrategy {
    Fused,
    TextOnly,
    MmOnly,
}

impl InferenceStrategy {
    pub const ALL: [InferenceStrategy; 3] = [Self::Fused, Self::TextOnly, Self::MmOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fused => "fused",
            Self::TextOnly => "text_only",
            Self::MmOnly => "mm_only",
        }
    }
}

/// What the multimodal branch encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MultimodalInput {
    /// Visual features only.
    Visual,
    /// Text features followed by visual features.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum LambdaSharing {
    PerTrait,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden_dim: usize,
    /// Vocabulary size as a multiple of the number of score levels.
    pub vocab_multiplier: usize,
    pub mm_input: MultimodalInput,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            vocab_multiplier: 4,
            mm_input: MultimodalInput::Visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Decision {
        text: BranchEncoder,
    },
    Gated {
        text: BranchEncoder,
        multimodal: BranchEncoder,
        gate: GateParameters,
        mm_input: MultimodalInput,
    },
    Pooling {
        head: PoolingHeadBaseline,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScorerGrads {
    Decision {
        text: EncoderGrads,
    },
    Gated {
        text: EncoderGrads,
        multimodal: EncoderGrads,
        gate: GateGrads,
    },
    Pooling {
        head: HeadGrads,
    },
}

impl ScorerGrads {
    pub fn zeros_like(scorer: &Scorer) -> Self {
        match scorer {
            Scorer::Decision { text } => ScorerGrads::Decision {
                text: EncoderGrads::zeros_like(text),
            },
            Scorer::Gated {
                text,
                multimodal,
                gate,
                ..
            } => ScorerGrads::Gated {
                text: EncoderGrads::zeros_like(text),
                multimodal: EncoderGrads::zeros_like(multimodal),
                gate: GateGrads::zeros(gate.n_levels()),
            },
            Scorer::Pooling { head } => ScorerGrads::Pooling {
                head: HeadGrads::zeros_like(head),
            },
        }
    }

    /// Parameter gradients in [`TraitModel::parameters`] order (without lambda).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let enc = |g: &EncoderGrads, out: &mut Vec<f64>| {
            out.extend_from_slice(&g.w1.data);
            out.extend_from_slice(&g.b1);
            out.extend_from_slice(&g.w2.data);
            out.extend_from_slice(&g.b2);
        };
        match self {
            ScorerGrads::Decision { text } => enc(text, &mut out),
            ScorerGrads::Gated {
                text,
                multimodal,
                gate,
            } => {
                enc(text, &mut out);
                enc(multimodal, &mut out);
                out.extend_from_slice(&gate.w);
                out.push(gate.b);
            }
            ScorerGrads::Pooling { head } => {
                out.extend_from_slice(&head.w.data);
                out.extend_from_slice(&head.b);
            }
        }
        out
    }
}

/// One trained scorer for one trait.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitModel {
    pub trait_id: String,
    pub scale: ScoreScale,
    pub tokens: ScoreTokenSet,
    pub scorer: Scorer,
    pub objective: ObjectiveConfig,
}

/// Logits of one instance under one inference strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub logits: ScoreLogits,
    pub level: usize,
    pub alpha: Option<f64>,
}

fn scatter(tokens: &ScoreTokenSet, grad_z: &[f64], vocab_size: usize) -> Vec<f64> {
    let mut g = vec![0.0; vocab_size];
    for (&id, &v) in tokens.ids().iter().zip(grad_z) {
        g[id] = v;
    }
    g
}

impl TraitModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        trait_id: &str,
        scale: ScoreScale,
        mode: Mode,
        arch: &Architecture,
        text_dim: usize,
        visual_dim: Option<usize>,
        objective: ObjectiveConfig,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if arch.hidden_dim == 0 || arch.vocab_multiplier == 0 || text_dim == 0 {
            return invalid("hidden_dim, vocab_multiplier and feature width must be positive");
        }
        let vocab = arch.vocab_multiplier * scale.n_levels();
        let (scorer, tokens) = match mode {
            Mode::Dlom | Mode::DlomDa => (
                Scorer::Decision {
                    text: BranchEncoder::init(text_dim, arch.hidden_dim, vocab, rng),
                },
                ScoreTokenSet::strided(&scale, vocab)?,
            ),
            Mode::DlomGf => {
                let Some(vd) = visual_dim else {
                    return invalid("dlom_gf needs visual features on every record");
                };
                let mm_dim = match arch.mm_input {
                    MultimodalInput::Visual => vd,
                    MultimodalInput::Concat => text_dim + vd,
                };
                let text = BranchEncoder::init(text_dim, arch.hidden_dim, vocab, rng);
                let multimodal = BranchEncoder::init(mm_dim, arch.hidden_dim, vocab, rng);
                (
                    Scorer::Gated {
                        text,
                        multimodal,
                        gate: GateParameters::zeros(&scale),
                        mm_input: arch.mm_input,
                    },
                    ScoreTokenSet::strided(&scale, vocab)?,
                )
            }
            Mode::BaselineCls => (
                Scorer::Pooling {
                    head: PoolingHeadBaseline::init(&scale, text_dim, rng),
                },
                ScoreTokenSet::identity(&scale),
            ),
        };
        Ok(Self {
            trait_id: trait_id.to_string(),
            scale,
            tokens,
            scorer,
            objective,
        })
    }

    fn mm_features<'r>(rec: &'r TraitRecord, mm_input: MultimodalInput) -> Result<Cow<'r, [f64]>> {
        let Some(v) = rec.x_visual.as_deref() else {
            return invalid(format!("record {} has no visual features", rec.instance_id));
        };
        Ok(match mm_input {
            MultimodalInput::Visual => Cow::Borrowed(v),
            MultimodalInput::Concat => Cow::Owned([rec.x_text.as_slice(), v].concat()),
        })
    }

    fn branch(&self, enc: &BranchEncoder, x: &[f64]) -> Result<(ScoreLogits, EncoderCache)> {
        let (vocab, cache) = enc.encode(x)?;
        Ok((extract_score_logits(&vocab, &self.tokens)?, cache))
    }

    pub fn score(&self, rec: &TraitRecord, strategy: InferenceStrategy) -> Result<ScoredInstance> {
        let (logits, alpha) = match &self.scorer {
            Scorer::Decision { text } => {
                if strategy == InferenceStrategy::MmOnly {
                    return invalid("mm_only inference needs a gated model");
                }
                (self.branch(text, &rec.x_text)?.0, None)
            }
            Scorer::Gated {
                text,
                multimodal,
                gate,
                mm_input,
            } => {
                let (z_t, _) = self.branch(text, &rec.x_text)?;
                let (z_m, _) = self.branch(multimodal, &Self::mm_features(rec, *mm_input)?)?;
                let (z, trace) = fuse_forward(&z_m, &z_t, gate)?;
                let chosen = match strategy {
                    InferenceStrategy::Fused => z,
                    InferenceStrategy::TextOnly => z_t,
                    InferenceStrategy::MmOnly => z_m,
                };
                (chosen, Some(trace.alpha))
            }
            Scorer::Pooling { head } => {
                if strategy == InferenceStrategy::MmOnly {
                    return invalid("mm_only inference needs a gated model");
                }
                (head.forward(&rec.x_text)?, None)
            }
        };
        Ok(ScoredInstance {
            level: decide(&logits),
            logits,
            alpha,
        })
    }

    /// Loss of one record; adds its parameter gradients into `grads`.
    pub fn accumulate_gradients(
        &self,
        rec: &TraitRecord,
        grads: &mut ScorerGrads,
    ) -> Result<LossBundle> {
        let y = rec.gold_level()?;
        match (&self.scorer, grads) {
            (Scorer::Decision { text }, ScorerGrads::Decision { text: g }) => {
                let (z, cache) = self.branch(text, &rec.x_text)?;
                let bundle = combined_loss(&z, y, &self.objective)?;
                let gv = scatter(&self.tokens, &bundle.grad_z, text.vocab_size());
                text.accumulate_backward(&cache, &gv, g)?;
                Ok(bundle)
            }
            (
                Scorer::Gated {
                    text,
                    multimodal,
                    gate,
                    mm_input,
                },
                ScorerGrads::Gated {
                    text: gt,
                    multimodal: gm,
                    gate: gg,
                },
            ) => {
                let (z_t, cache_t) = self.branch(text, &rec.x_text)?;
                let (z_m, cache_m) =
                    self.branch(multimodal, &Self::mm_features(rec, *mm_input)?)?;
                let (z, trace) = fuse_forward(&z_m, &z_t, gate)?;
                let bundle = combined_loss(&z, y, &self.objective)?;
                let fg = fuse_backward(&trace, gate, &bundle.grad_z)?;
                gg.add_assign(&fg.gate);
                text.accumulate_backward(
                    &cache_t,
                    &scatter(&self.tokens, &fg.z_t, text.vocab_size()),
                    gt,
                )?;
                multimodal.accumulate_backward(
                    &cache_m,
                    &scatter(&self.tokens, &fg.z_m, multimodal.vocab_size()),
                    gm,
                )?;
                Ok(bundle)
            }
            (Scorer::Pooling { head }, ScorerGrads::Pooling { head: g }) => {
                let z = head.forward(&rec.x_text)?;
                let bundle = combined_loss(&z, y, &self.objective)?;
                head.accumulate_backward(&rec.x_text, &bundle.grad_z, g)?;
                Ok(bundle)
            }
            _ => invalid("gradient buffer does not match the scorer kind"),
        }
    }

    pub fn loss(&self, rec: &TraitRecord) -> Result<f64> {
        let mut g = ScorerGrads::zeros_like(&self.scorer);
        Ok(self.accumulate_gradients(rec, &mut g)?.total)
    }

    pub fn apply(&mut self, grads: &ScorerGrads, lr: f64) -> Result<()> {
        match (&mut self.scorer, grads) {
            (Scorer::Decision { text }, ScorerGrads::Decision { text: g }) => text.apply(g, lr),
            (
                Scorer::Gated {
                    text,
                    multimodal,
                    gate,
                    ..
                },
                ScorerGrads::Gated {
                    text: gt,
                    multimodal: gm,
                    gate: gg,
                },
            ) => {
                text.apply(gt, lr);
                multimodal.apply(gm, lr);
                gate.apply(gg, lr);
            }
            (Scorer::Pooling { head }, ScorerGrads::Pooling { head: g }) => head.apply(g, lr),
            _ => return invalid("gradient buffer does not match the scorer kind"),
        }
        Ok(())
    }

    /// All trainable values: scorer parameters in a fixed order, then `lambda_logit`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_parameters(|v| out.push(*v));
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let n = self.parameters().len();
        if values.len() != n {
            return invalid(format!("expected {n} parameters, got {}", values.len()));
        }
        let mut it = values.iter();
        self.visit_parameters_mut(|v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    fn visit_parameters(&self, mut f: impl FnMut(&f64)) {
        let mut clone = self.clone();
        clone.visit_parameters_mut(|v| f(v));
    }

    fn visit_parameters_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        fn enc(e: &mut BranchEncoder, f: &mut impl FnMut(&mut f64)) {
            e.w1.data.iter_mut().for_each(&mut *f);
            e.b1.iter_mut().for_each(&mut *f);
            e.w2.data.iter_mut().for_each(&mut *f);
            e.b2.iter_mut().for_each(&mut *f);
        }
        match &mut self.scorer {
            Scorer::Decision { text } => enc(text, &mut f),
            Scorer::Gated {
                text,
                multimodal,
                gate,
                ..
            } => {
                enc(text, &mut f);
                enc(multimodal, &mut f);
                gate.w.iter_mut().for_each(&mut f);
                f(&mut gate.b);
            }
            Scorer::Pooling { head } => {
                head.w.data.iter_mut().for_each(&mut f);
                head.b.iter_mut().for_each(&mut f);
            }
        }
        f(&mut self.objective.lambda_logit);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub mode: Mode,
    pub arch: Architecture,
    pub objective: ObjectiveConfig,
    pub lambda_sharing: LambdaSharing,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            mode: Mode::Dlom,
            arch: Architecture::default(),
            objective: ObjectiveConfig::default(),
            lambda_sharing: LambdaSharing::PerTrait,
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be >= 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return invalid("learning_rate must be a positive finite number");
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        self.objective.validate()
    }
}

/// Scorers for every trait, sorted by trait id.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub lambda_sharing: LambdaSharing,
    pub traits: Vec<TraitModel>,
}

impl TrainedModel {
    pub fn get(&self, trait_id: &str) -> Option<&TraitModel> {
        self.traits.iter().find(|t| t.trait_id == trait_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mixing weight in effect during the epoch, per trait.
    pub lambda: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

/// Groups records by trait, each group sorted by instance id.
pub fn group_by_trait(records: &[TraitRecord]) -> BTreeMap<&str, Vec<&TraitRecord>> {
    let mut groups: BTreeMap<&str, Vec<&TraitRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.trait_id.as_str()).or_default().push(r);
    }
    for v in groups.values_mut() {
        v.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    }
    groups
}

/// Mini-batch gradient descent for a fixed number of epochs; no early stopping.
///
/// Each trait gets its own scorer. Within an epoch every trait visits its
/// records in a seeded shuffled order; each batch applies the mean gradient.
/// `lambda_logit` (distance-aware runs only) is updated once per epoch from the
/// mean gradient over the epoch, per trait or pooled across traits.
pub fn train(
    records: &[TraitRecord],
    settings: &TrainSettings,
) -> Result<(TrainedModel, TrainingLog)> {
    settings.validate()?;
    if records.is_empty() {
        return invalid("no training records");
    }
    validate_records(records)?;
    let groups = group_by_trait(records);
    let mut models = Vec::with_capacity(groups.len());
    for (ti, (trait_id, recs)) in groups.iter().enumerate() {
        let first = recs[0];
        let mut rng = SplitMix64::derive(settings.seed, ti as u64);
        models.push(TraitModel::new(
            trait_id,
            first.scale,
            settings.mode,
            &settings.arch,
            first.x_text.len(),
            first.x_visual.as_ref().map(Vec::len),
            settings.objective,
            &mut rng,
        )?);
    }
    let distance_aware = settings.objective.distance_aware;
    let lr = settings.learning_rate;
    let mut log = TrainingLog::default();
    for epoch in 0..settings.epochs {
        let lambda: BTreeMap<String, f64> = models
            .iter()
            .map(|m| (m.trait_id.clone(), m.objective.lambda()))
            .collect();
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut lambda_grads = vec![0.0; models.len()];
        for (ti, (model, recs)) in models.iter_mut().zip(groups.values()).enumerate() {
            let mut order: Vec<usize> = (0..recs.len()).collect();
            SplitMix64::derive(
                settings.seed ^ 0xA5A5_A5A5,
                ((epoch as u64) << 24) | ti as u64,
            )
            .shuffle(&mut order);
            for batch in order.chunks(settings.batch_size) {
                let mut grads = ScorerGrads::zeros_like(&model.scorer);
                for &i in batch {
                    let rec = recs[i];
                    let bundle = model.accumulate_gradients(rec, &mut grads)?;
                    if !bundle.total.is_finite() {
                        return Err(DlomError::NonFiniteLoss {
                            epoch,
                            trait_id: rec.trait_id.clone(),
                            instance_id: rec.instance_id.clone(),
                        });
                    }
                    loss_sum += bundle.total;
                    lambda_grads[ti] += bundle.grad_lambda_logit;
                }
                model.apply(&grads, lr / batch.len() as f64)?;
            }
            count += recs.len();
        }
        if distance_aware {
            match settings.lambda_sharing {
                LambdaSharing::PerTrait => {
                    for ((m, g), recs) in models.iter_mut().zip(&lambda_grads).zip(groups.values())
                    {
                        m.objective.lambda_logit -= lr * g / recs.len() as f64;
                    }
                }
                LambdaSharing::Shared => {
                    let g = lambda_grads.iter().sum::<f64>() / count as f64;
                    for m in models.iter_mut() {
                        m.objective.lambda_logit -= lr * g;
                    }
                }
            }
        }
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / count as f64,
            lambda,
        });
    }
    Ok((
        TrainedModel {
            lambda_sharing: settings.lambda_sharing,
            traits: models,
        },
        log,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitEvaluation {
    pub instance_ids: Vec<String>,
    pub preds: Vec<usize>,
    pub golds: Vec<usize>,
    pub alphas: Vec<f64>,
    pub qwk: Qwk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub strategy: InferenceStrategy,
    pub per_trait: BTreeMap<String, TraitEvaluation>,
}

impl Evaluation {
    pub fn qwk_by_trait(&self) -> BTreeMap<String, Qwk> {
        self.per_trait
            .iter()
            .map(|(k, v)| (k.clone(), v.qwk))
            .collect()
    }

    fn pooled(&self) -> (Vec<usize>, Vec<usize>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for t in self.per_trait.values() {
            p.extend_from_slice(&t.preds);
            g.extend_from_slice(&t.golds);
        }
        (p, g)
    }

    /// Mean absolute level error over all traits.
    pub fn mae(&self) -> f64 {
        let (p, g) = self.pooled();
        mean_absolute_error(&p, &g)
    }

    pub fn far_error_rate(&self, min_gap: usize) -> f64 {
        let (p, g) = self.pooled();
        far_error_rate(&p, &g, min_gap)
    }

    pub fn accuracy(&self) -> f64 {
        let (p, g) = self.pooled();
        if p.is_empty() {
            return 0.0;
        }
        p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.per_trait
            .values()
            .flat_map(|t| t.alphas.iter().copied())
            .collect()
    }
}

pub fn evaluate(
    model: &TrainedModel,
    records: &[TraitRecord],
    strategy: InferenceStrategy,
) -> Result<Evaluation> {
    let mut per_trait = BTreeMap::new();
    for (trait_id, recs) in group_by_trait(records) {
        let Some(m) = model.get(trait_id) else {
            return invalid(format!("model has no scorer for trait {trait_id}"));
        };
        let mut ev = TraitEvaluation {
            instance_ids: Vec::with_capacity(recs.len()),
            preds: Vec::with_capacity(recs.len()),
            golds: Vec::with_capacity(recs.len()),
            alphas: Vec::new(),
            qwk: Qwk::Degenerate,
        };
        for rec in recs {
            if rec.scale != m.scale {
                return invalid(format!(
                    "record {} uses a different scale than the model",
                    rec.instance_id
                ));
            }
            let s = m.score(rec, strategy)?;
            ev.instance_ids.push(rec.instance_id.clone());
            ev.preds.push(s.level);
            ev.golds.push(rec.gold_level()?);
            ev.alphas.extend(s.alpha);
        }
        ev.qwk = qwk(&ev.preds, &ev.golds, &m.scale)?;
        per_trait.insert(trait_id.to_string(), ev);
    }
    Ok(Evaluation {
        strategy,
        per_trait,
    })
}
