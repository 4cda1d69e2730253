//! Run orchestration behind the CLI: configuration, training, cross-validation,
//! gradient checks and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{self, generate_synthetic, make_folds, FoldPlan, SyntheticSpec, TraitRecord};
use crate::error::{invalid, DlomError, Result};
use crate::gradcheck::{self, GradcheckOptions, GradcheckReport};
use crate::math::{mean, sample_std};
use crate::metrics::{macro_average, Qwk, QwkReport};
use crate::model::{
    evaluate, train, Architecture, InferenceStrategy, LambdaSharing, Mode, MultimodalInput,
    TrainSettings, TrainedModel, TrainingLog,
};
use crate::objectives::ObjectiveConfig;
use crate::score_space::ScoreScale;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    File {
        path: PathBuf,
        /// Inclusive external range for records without their own `score_range`.
        #[serde(default)]
        score_range: Option<[i64; 2]>,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Seed of the fold shuffle; defaults to `seed`.
    pub fold_seed: Option<u64>,
    pub n_folds: usize,
    pub hidden_dim: usize,
    pub vocab_multiplier: usize,
    pub mm_input: MultimodalInput,
    pub lambda_sharing: LambdaSharing,
    pub objective: ObjectiveConfig,
    pub inference_strategy: InferenceStrategy,
    pub data: DataSource,
    /// Folds trained concurrently. Scheduling only; never part of the output.
    #[serde(skip_serializing)]
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dlom,
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            fold_seed: None,
            n_folds: 5,
            hidden_dim: 16,
            vocab_multiplier: 4,
            mm_input: MultimodalInput::Visual,
            lambda_sharing: LambdaSharing::PerTrait,
            objective: ObjectiveConfig::default(),
            inference_strategy: InferenceStrategy::Fused,
            data: DataSource::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DlomError::Validation(format!("config: {e}")))
    }

    /// Applies mode-implied settings: `dlom_da` always runs the distance-aware objective.
    pub fn resolved(mut self) -> Self {
        if self.mode == Mode::DlomDa {
            self.objective.distance_aware = true;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train_settings().validate()?;
        if self.mode == Mode::DlomDa && !self.objective.distance_aware {
            return invalid("dlom_da requires objective.distance_aware");
        }
        if self.n_folds < 2 {
            return invalid("n_folds must be >= 2");
        }
        if self.inference_strategy == InferenceStrategy::MmOnly && self.mode != Mode::DlomGf {
            return invalid("mm_only inference needs mode dlom_gf");
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if self.mode == Mode::DlomGf && !spec.with_visual {
                return invalid("dlom_gf requires visual features");
            }
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            mode: self.mode,
            arch: Architecture {
                hidden_dim: self.hidden_dim,
                vocab_multiplier: self.vocab_multiplier,
                mm_input: self.mm_input,
            },
            objective: self.objective,
            lambda_sharing: self.lambda_sharing,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    fn strategies(&self) -> Vec<InferenceStrategy> {
        if self.mode == Mode::DlomGf {
            InferenceStrategy::ALL.to_vec()
        } else {
            vec![self.inference_strategy]
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<TraitRecord>> {
    match &cfg.data {
        DataSource::File { path, score_range } => {
            let default_scale = match score_range {
                Some([lo, hi]) => Some(ScoreScale::from_range(*lo, *hi)?),
                None => None,
            };
            dataset::load_records(path, default_scale)
        }
        DataSource::Synthetic(spec) => Ok(generate_synthetic(spec)?.records),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train_records: usize,
    pub n_eval_records: usize,
    /// QWK under the configured strategy.
    pub per_trait: BTreeMap<String, Option<f64>>,
    pub macro_avg: Option<f64>,
    pub degenerate_traits: Vec<String>,
    pub mae: f64,
    pub far_error_rate: f64,
    pub accuracy: f64,
    pub mean_alpha: Option<f64>,
    /// Every strategy the model supports, keyed by strategy name.
    pub strategies: BTreeMap<String, QwkReport>,
    pub final_lambda: BTreeMap<String, f64>,
    /// Smallest and largest mixing weight seen over all epochs and traits.
    pub lambda_range: [f64; 2],
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub per_trait_mean: BTreeMap<String, Option<f64>>,
    pub macro_mean: Option<f64>,
    pub macro_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    pub strategy: InferenceStrategy,
    pub traits: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub per_trait_mean: BTreeMap<String, Option<f64>>,
    /// Sample standard deviation across folds.
    pub per_trait_std: BTreeMap<String, Option<f64>>,
    pub macro_mean: Option<f64>,
    pub macro_std: Option<f64>,
    pub mae_mean: f64,
    pub far_error_rate_mean: f64,
    pub alpha: Option<AlphaStats>,
    pub strategies: BTreeMap<String, StrategySummary>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn summarize(folds: &[BTreeMap<String, Option<f64>>], traits: &[String]) -> StrategySummary {
    let mut per_trait_mean = BTreeMap::new();
    for t in traits {
        let vals: Vec<f64> = folds
            .iter()
            .filter_map(|f| f.get(t).copied().flatten())
            .collect();
        per_trait_mean.insert(t.clone(), mean(&vals));
    }
    let macros: Vec<f64> = folds
        .iter()
        .filter_map(|f| {
            let m: BTreeMap<String, Qwk> = f
                .iter()
                .map(|(k, v)| (k.clone(), v.map_or(Qwk::Degenerate, Qwk::Value)))
                .collect();
            macro_average(&m).ok().map(|a| a.value)
        })
        .collect();
    StrategySummary {
        per_trait_mean,
        macro_mean: mean(&macros),
        macro_std: sample_std(&macros),
    }
}

fn fold_report(
    fold: usize,
    cfg: &RunConfig,
    model: &TrainedModel,
    log: &TrainingLog,
    n_train: usize,
    eval_records: &[TraitRecord],
) -> Result<FoldReport> {
    let mut strategies = BTreeMap::new();
    let mut primary = None;
    for s in cfg.strategies() {
        let ev = evaluate(model, eval_records, s)?;
        strategies.insert(
            s.as_str().to_string(),
            QwkReport::from_per_trait(&ev.qwk_by_trait()),
        );
        if s == cfg.inference_strategy {
            primary = Some(ev);
        }
    }
    let ev = primary.expect("configured strategy is always evaluated");
    let q = &strategies[cfg.inference_strategy.as_str()];
    let alphas = ev.alphas();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for e in &log.epochs {
        for l in e.lambda.values() {
            lo = lo.min(*l);
            hi = hi.max(*l);
        }
    }
    Ok(FoldReport {
        fold,
        n_train_records: n_train,
        n_eval_records: eval_records.len(),
        per_trait: q.per_trait.clone(),
        macro_avg: q.macro_avg,
        degenerate_traits: q.degenerate_traits.clone(),
        mae: ev.mae(),
        far_error_rate: ev.far_error_rate(2),
        accuracy: ev.accuracy(),
        mean_alpha: mean(&alphas),
        strategies,
        final_lambda: model
            .traits
            .iter()
            .map(|t| (t.trait_id.clone(), t.objective.lambda()))
            .collect(),
        lambda_range: [lo, hi],
        final_train_loss: log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
    })
}

fn assemble(
    command: &str,
    cfg: &RunConfig,
    folds: Vec<FoldReport>,
    alphas: Vec<f64>,
    started: Instant,
) -> RunReport {
    let traits: Vec<String> = folds
        .iter()
        .flat_map(|f| f.per_trait.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut strategies = BTreeMap::new();
    for s in cfg.strategies() {
        let per_fold: Vec<BTreeMap<String, Option<f64>>> = folds
            .iter()
            .map(|f| f.strategies[s.as_str()].per_trait.clone())
            .collect();
        strategies.insert(s.as_str().to_string(), summarize(&per_fold, &traits));
    }
    let primary = strategies[cfg.inference_strategy.as_str()].clone();
    let mut per_trait_std = BTreeMap::new();
    for t in &traits {
        let vals: Vec<f64> = folds
            .iter()
            .filter_map(|f| f.per_trait.get(t).copied().flatten())
            .collect();
        per_trait_std.insert(t.clone(), sample_std(&vals));
    }
    let maes: Vec<f64> = folds.iter().map(|f| f.mae).collect();
    let fars: Vec<f64> = folds.iter().map(|f| f.far_error_rate).collect();
    let alpha = (!alphas.is_empty()).then(|| AlphaStats {
        mean: mean(&alphas).unwrap_or(0.0),
        std: sample_std(&alphas).unwrap_or(0.0),
        min: alphas.iter().copied().fold(f64::INFINITY, f64::min),
        max: alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: alphas.len(),
    });
    RunReport {
        command: command.to_string(),
        config: cfg.clone(),
        strategy: cfg.inference_strategy,
        traits,
        folds,
        per_trait_mean: primary.per_trait_mean,
        per_trait_std,
        macro_mean: primary.macro_mean,
        macro_std: primary.macro_std,
        mae_mean: mean(&maes).unwrap_or(0.0),
        far_error_rate_mean: mean(&fars).unwrap_or(0.0),
        alpha,
        strategies,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    }
}

/// Output of a training run, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: TrainingLog,
    pub report: RunReport,
}

/// Trains on every record and evaluates on the same records.
pub fn run_train(cfg: &RunConfig, records: &[TraitRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let (model, log) = train(records, &cfg.train_settings())?;
    let fold = fold_report(0, cfg, &model, &log, records.len(), records)?;
    let alphas = if cfg.mode == Mode::DlomGf {
        evaluate(&model, records, cfg.inference_strategy)?.alphas()
    } else {
        Vec::new()
    };
    let report = assemble("train", cfg, vec![fold], alphas, started);
    Ok(TrainOutcome { model, log, report })
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let records = load_dataset(&cfg)?;
    let out = run_train(&cfg, &records)?;
    fs::create_dir_all(out_dir)?;
    checkpoint::save(&out_dir.join("model.ckpt"), &out.model)?;
    write_json(&out_dir.join("training_log.json"), &out.log)?;
    write_json(&out_dir.join(REPORT_FILE), &out.report)?;
    Ok(out.report)
}

#[derive(Debug, Clone)]
pub struct CrossvalOutcome {
    pub plan: FoldPlan,
    pub models: Vec<TrainedModel>,
    pub report: RunReport,
}

/// Model, report and held-out gate values of one fold.
type FoldOutput = (TrainedModel, FoldReport, Vec<f64>);

/// Trains a fresh model per fold on the other folds and evaluates the held-out one.
pub fn run_crossval(cfg: &RunConfig, records: &[TraitRecord]) -> Result<CrossvalOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let plan = make_folds(
        records.iter().map(|r| r.instance_id.as_str()),
        cfg.n_folds,
        cfg.fold_seed.unwrap_or(cfg.seed),
    )?;
    let settings = cfg.train_settings();
    let run_fold = |f: usize| -> Result<FoldOutput> {
        let (train_set, eval_set): (Vec<TraitRecord>, Vec<TraitRecord>) = records
            .iter()
            .cloned()
            .partition(|r| plan.fold_of(&r.instance_id) != Some(f));
        let (model, log) = train(&train_set, &settings)?;
        let report = fold_report(f, cfg, &model, &log, train_set.len(), &eval_set)?;
        let alphas = if cfg.mode == Mode::DlomGf {
            evaluate(&model, &eval_set, cfg.inference_strategy)?.alphas()
        } else {
            Vec::new()
        };
        Ok((model, report, alphas))
    };

    let n = cfg.n_folds;
    let slots: Mutex<Vec<Option<Result<FoldOutput>>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = cfg.threads.clamp(1, n);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::SeqCst);
                if f >= n {
                    break;
                }
                let r = run_fold(f);
                slots.lock().expect("fold results lock")[f] = Some(r);
            });
        }
    });

    let mut models = Vec::with_capacity(n);
    let mut folds = Vec::with_capacity(n);
    let mut alphas = Vec::new();
    for slot in slots.into_inner().expect("fold results lock") {
        let (m, r, a) = slot.expect("every fold ran")?;
        models.push(m);
        folds.push(r);
        alphas.extend(a);
    }
    let report = assemble("crossval", cfg, folds, alphas, started);
    Ok(CrossvalOutcome {
        plan,
        models,
        report,
    })
}

pub fn cmd_crossval(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let records = load_dataset(&cfg)?;
    if records.is_empty() {
        return invalid("cross-validation needs a non-empty dataset");
    }
    let out = run_crossval(&cfg, &records)?;
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    for (i, m) in out.models.iter().enumerate() {
        checkpoint::save(&ckpt_dir.join(format!("fold{i}.ckpt")), m)?;
    }
    write_json(&out_dir.join("fold_plan.json"), &out.plan)?;
    write_json(&out_dir.join(REPORT_FILE), &out.report)?;
    Ok(out.report)
}

pub fn cmd_gradcheck(opts: &GradcheckOptions, out_dir: Option<&Path>) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return invalid("trials must be >= 1");
    }
    let report = gradcheck::run(opts)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(report)
}

pub fn cmd_synth(spec: &SyntheticSpec, out: &Path) -> Result<usize> {
    let ds = generate_synthetic(spec)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    dataset::save_records(out, &ds.records)?;
    Ok(ds.records.len())
}

/// Trait-by-model grid built from run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub values: BTreeMap<String, Option<f64>>,
    pub avg: Option<f64>,
}

pub fn build_table(runs: &[(String, RunReport)]) -> ReportTable {
    let columns: Vec<String> = runs
        .iter()
        .flat_map(|(_, r)| r.traits.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows = Vec::new();
    for (label, r) in runs {
        let entries: Vec<(String, &BTreeMap<String, Option<f64>>)> = if r.strategies.len() > 1 {
            r.strategies
                .iter()
                .map(|(s, sum)| (format!("{label}:{s}"), &sum.per_trait_mean))
                .collect()
        } else {
            vec![(label.clone(), &r.per_trait_mean)]
        };
        for (row_label, vals) in entries {
            let q: BTreeMap<String, Qwk> = vals
                .iter()
                .map(|(k, v)| (k.clone(), v.map_or(Qwk::Degenerate, Qwk::Value)))
                .collect();
            rows.push(ReportRow {
                label: row_label,
                values: vals.clone(),
                avg: macro_average(&q).ok().map(|a| a.value),
            });
        }
    }
    ReportTable { columns, rows }
}

fn cell(v: Option<Option<f64>>) -> String {
    match v {
        None => "-".to_string(),
        Some(None) => "NA".to_string(),
        Some(Some(x)) => format!("{x:.3}"),
    }
}

pub fn table_tsv(t: &ReportTable) -> String {
    let mut out = String::from("model");
    for c in &t.columns {
        out.push('\t');
        out.push_str(c);
    }
    out.push_str("\tAvg\n");
    for r in &t.rows {
        out.push_str(&r.label);
        for c in &t.columns {
            out.push('\t');
            out.push_str(&cell(r.values.get(c).copied()));
        }
        out.push('\t');
        out.push_str(&cell(Some(r.avg)));
        out.push('\n');
    }
    out
}

pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return invalid("report needs at least one run directory");
    }
    let missing: Vec<String> = run_dirs
        .iter()
        .map(|d| d.join(REPORT_FILE))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DlomError::MissingArtifacts(missing));
    }
    let mut runs = Vec::new();
    for d in run_dirs {
        let text = fs::read_to_string(d.join(REPORT_FILE))?;
        let report: RunReport = serde_json::from_str(&text)?;
        let label = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        runs.push((label, report));
    }
    let table = build_table(&runs);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("table.tsv"), table_tsv(&table))?;
    write_json(&out_dir.join("table.json"), &table)?;
    Ok(table)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            epochs: 2,
            hidden_dim: 3,
            data: DataSource::Synthetic(SyntheticSpec {
                n_instances: 25,
                k_max: 2,
                feature_dim: 3,
                traits: vec!["a".into(), "b".into()],
                ..Default::default()
            }),
            ..Default::default()
        }
    }

    #[test]
    fn config_parses_from_toml_with_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            mode = "dlom_gf"
            epochs = 7
            [objective]
            beta = 0.5
            [data.synthetic]
            n_instances = 30
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::DlomGf);
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.objective.beta, 0.5);
        assert_eq!(cfg.objective.smooth_l1_delta, 1.0);
        assert_eq!(cfg.learning_rate, 0.05);
        match cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.n_instances, 30),
            _ => panic!(),
        }
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let file =
            RunConfig::from_toml("[data.file]\npath = \"x.jsonl\"\nscore_range = [1, 6]").unwrap();
        assert!(matches!(
            file.data,
            DataSource::File {
                score_range: Some([1, 6]),
                ..
            }
        ));
    }

    #[test]
    fn config_invariants() {
        let mut c = tiny(Mode::Dlom);
        c.epochs = 0;
        assert!(c.validate().is_err());
        let c = tiny(Mode::DlomDa);
        assert!(c.validate().is_err());
        assert!(c.resolved().validate().is_ok());
        let mut c = tiny(Mode::Dlom);
        c.inference_strategy = InferenceStrategy::MmOnly;
        assert!(c.validate().is_err());
        let mut c = tiny(Mode::DlomGf);
        if let DataSource::Synthetic(s) = &mut c.data {
            s.with_visual = false;
        }
        assert!(c.validate().is_err());
    }

    #[test]
    fn crossval_means_match_fold_values() {
        let cfg = tiny(Mode::DlomGf);
        let records = load_dataset(&cfg).unwrap();
        let out = run_crossval(&cfg, &records).unwrap();
        let r = &out.report;
        assert_eq!(r.folds.len(), 5);
        let macros: Vec<f64> = r.folds.iter().filter_map(|f| f.macro_avg).collect();
        assert_eq!(r.macro_mean, mean(&macros));
        for t in &r.traits {
            let v: Vec<f64> = r.folds.iter().filter_map(|f| f.per_trait[t]).collect();
            assert_eq!(r.per_trait_mean[t], mean(&v));
        }
        assert_eq!(r.strategies.len(), 3);
        let a = r.alpha.as_ref().unwrap();
        assert!(a.min > 0.0 && a.max < 1.0);
    }

    #[test]
    fn table_shapes() {
        let cfg = RunConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                n_instances: 25,
                k_max: 2,
                feature_dim: 3,
                ..Default::default()
            }),
            epochs: 1,
            hidden_dim: 2,
            ..Default::default()
        };
        let records = load_dataset(&cfg).unwrap();
        let report = run_crossval(&cfg, &records).unwrap().report;
        let t = build_table(&[("run".into(), report.clone())]);
        assert_eq!(t.columns, vec!["score".to_string()]);
        assert_eq!(t.rows.len(), 1);
        let tsv = table_tsv(&t);
        assert_eq!(tsv.lines().count(), 2);
        assert!(tsv.starts_with("model\tscore\tAvg\n"));
        assert_eq!(t.rows[0].avg, report.per_trait_mean["score"]);
    }
}
