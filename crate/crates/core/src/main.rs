use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dlom::dataset::SyntheticSpec;
use dlom::gradcheck::GradcheckOptions;
use dlom::harness::{self, DataSource, RunConfig, RunReport};
use dlom::model::{InferenceStrategy, LambdaSharing, Mode, MultimodalInput};
use dlom::{DlomError, Result};

#[derive(Parser)]
#[command(
    name = "dlom",
    version,
    about = "Ordinal scoring over score-token logits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the whole dataset and write a checkpoint plus a report.
    Train(RunArgs),
    /// Essay-level k-fold cross-validation.
    Crossval(RunArgs),
    /// Finite-difference check of every hand-written backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Corrupt one component's gradient on purpose; the check must then fail.
        #[arg(long)]
        perturb: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect run directories into a trait-by-model QWK table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Write a synthetic dataset as JSONL.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold_seed: Option<u64>,
    #[arg(long)]
    n_folds: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    vocab_multiplier: Option<usize>,
    #[arg(long, value_enum)]
    mm_input: Option<MultimodalInput>,
    #[arg(long, value_enum)]
    lambda_sharing: Option<LambdaSharing>,
    #[arg(long, allow_hyphen_values = true)]
    lambda_logit: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    smooth_l1_delta: Option<f64>,
    #[arg(long)]
    distance_aware: Option<bool>,
    #[arg(long = "strategy", value_enum)]
    inference_strategy: Option<InferenceStrategy>,
    /// Folds trained in parallel.
    #[arg(long)]
    threads: Option<usize>,
    /// JSONL dataset; replaces the configured data source.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Inclusive score range for records that carry none, e.g. `--score-range 1 6`.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true)]
    score_range: Option<Vec<i64>>,
    /// Use the synthetic generator; its flags below refine the configured spec.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Default)]
struct SynthArgs {
    #[arg(long)]
    n_instances: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    offset: Option<i64>,
    /// Comma-separated trait names.
    #[arg(long, value_delimiter = ',')]
    traits: Option<Vec<String>>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    text_noise: Option<f64>,
    #[arg(long)]
    visual_noise_low: Option<f64>,
    #[arg(long)]
    visual_noise_high: Option<f64>,
    #[arg(long)]
    visual_high_prob: Option<f64>,
    #[arg(long)]
    with_visual: Option<bool>,
    #[arg(long)]
    text_signal: Option<bool>,
    #[arg(long)]
    visual_signal: Option<bool>,
    #[arg(long)]
    synth_seed: Option<u64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl SynthArgs {
    fn is_empty(&self) -> bool {
        self.n_instances.is_none()
            && self.k_max.is_none()
            && self.offset.is_none()
            && self.traits.is_none()
            && self.feature_dim.is_none()
            && self.text_noise.is_none()
            && self.visual_noise_low.is_none()
            && self.visual_noise_high.is_none()
            && self.visual_high_prob.is_none()
            && self.with_visual.is_none()
            && self.text_signal.is_none()
            && self.visual_signal.is_none()
            && self.synth_seed.is_none()
    }

    fn apply(self, s: &mut SyntheticSpec) {
        set!(s.n_instances, self.n_instances);
        set!(s.k_max, self.k_max);
        set!(s.offset, self.offset);
        set!(s.traits, self.traits);
        set!(s.feature_dim, self.feature_dim);
        set!(s.text_noise, self.text_noise);
        set!(s.visual_noise_low, self.visual_noise_low);
        set!(s.visual_noise_high, self.visual_noise_high);
        set!(s.visual_high_prob, self.visual_high_prob);
        set!(s.with_visual, self.with_visual);
        set!(s.text_signal, self.text_signal);
        set!(s.visual_signal, self.visual_signal);
        set!(s.seed, self.synth_seed);
    }
}

impl RunArgs {
    fn into_config(self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        set!(cfg.mode, self.mode);
        set!(cfg.epochs, self.epochs);
        set!(cfg.learning_rate, self.learning_rate);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.seed, self.seed);
        if self.fold_seed.is_some() {
            cfg.fold_seed = self.fold_seed;
        }
        set!(cfg.n_folds, self.n_folds);
        set!(cfg.hidden_dim, self.hidden_dim);
        set!(cfg.vocab_multiplier, self.vocab_multiplier);
        set!(cfg.mm_input, self.mm_input);
        set!(cfg.lambda_sharing, self.lambda_sharing);
        set!(cfg.objective.lambda_logit, self.lambda_logit);
        set!(cfg.objective.beta, self.beta);
        set!(cfg.objective.smooth_l1_delta, self.smooth_l1_delta);
        set!(cfg.objective.distance_aware, self.distance_aware);
        set!(cfg.inference_strategy, self.inference_strategy);
        set!(cfg.threads, self.threads);

        let range = self.score_range.map(|v| [v[0], v[1]]);
        if let Some(path) = self.data {
            cfg.data = DataSource::File {
                path,
                score_range: range,
            };
        } else if self.synthetic || !self.synth.is_empty() {
            let mut spec = match cfg.data {
                DataSource::Synthetic(s) => s,
                DataSource::File { .. } if self.synthetic => SyntheticSpec::default(),
                DataSource::File { .. } => {
                    return Err(DlomError::Validation(
                        "synthetic flags need --synthetic when the config reads a file".into(),
                    ))
                }
            };
            self.synth.apply(&mut spec);
            cfg.data = DataSource::Synthetic(spec);
        } else if let Some(r) = range {
            match &mut cfg.data {
                DataSource::File { score_range, .. } => *score_range = Some(r),
                DataSource::Synthetic(_) => {
                    return Err(DlomError::Validation(
                        "--score-range applies to file datasets".into(),
                    ))
                }
            }
        }
        Ok((cfg, self.out))
    }
}

fn summarize(r: &RunReport) {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} mode={} strategy={} macro_qwk={} (sd {}) mae={:.4} far_rate={:.4}",
        r.command,
        r.config.mode.as_str(),
        r.strategy.as_str(),
        fmt(r.macro_mean),
        fmt(r.macro_std),
        r.mae_mean,
        r.far_error_rate_mean
    );
    for (name, s) in &r.strategies {
        if r.strategies.len() > 1 {
            println!("  {name}: macro_qwk={}", fmt(s.macro_mean));
        }
    }
    if let Some(a) = &r.alpha {
        println!("  alpha mean={:.4} sd={:.4}", a.mean, a.std);
    }
    info!("wall clock {:.2}s", r.wall_clock_secs);
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, out) = args.into_config()?;
            summarize(&harness::cmd_train(&cfg, &out)?);
        }
        Command::Crossval(args) => {
            let (cfg, out) = args.into_config()?;
            summarize(&harness::cmd_crossval(&cfg, &out)?);
        }
        Command::Gradcheck {
            seed,
            trials,
            perturb,
            out,
        } => {
            let report = harness::cmd_gradcheck(
                &GradcheckOptions {
                    seed,
                    trials,
                    perturb,
                },
                out.as_deref(),
            )?;
            for c in &report.components {
                println!(
                    "{:<20} {} max_rel_err={:.3e} partials={}",
                    c.component,
                    if c.passed { "ok" } else { "FAILED" },
                    c.max_relative_error,
                    c.partials_checked
                );
            }
            return Ok(report.passed);
        }
        Command::Report { out, runs } => {
            let table = harness::cmd_report(&runs, &out)?;
            print!("{}", harness::table_tsv(&table));
        }
        Command::Synth { out, synth } => {
            let mut spec = SyntheticSpec::default();
            synth.apply(&mut spec);
            let n = harness::cmd_synth(&spec, &out)?;
            println!("wrote {n} records to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
