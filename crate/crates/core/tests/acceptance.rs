//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line with the
//! measured values; the process exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dlom::checkpoint;
use dlom::dataset::{generate_synthetic, SyntheticSpec};
use dlom::gradcheck::{self, GradcheckOptions};
use dlom::harness::{self, run_crossval, DataSource, RunConfig, RunReport};
use dlom::metrics::{qwk, ConfusionMatrix, Qwk};
use dlom::model::{train, InferenceStrategy, Mode, TrainSettings};
use dlom::objectives::ObjectiveConfig;
use dlom::rng::SplitMix64;
use dlom::ScoreScale;

/// Criteria may leave lambda observations behind for later ones.
type Criterion = Box<dyn FnOnce(&mut Vec<[f64; 2]>) -> Outcome>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let report = gradcheck::run(&GradcheckOptions {
        seed: 0,
        trials: 200,
        perturb: None,
    })
    .unwrap();
    let elapsed = t.elapsed();
    let worst = report
        .components
        .iter()
        .map(|c| format!("{}={:.2e}", c.component, c.max_relative_error))
        .collect::<Vec<_>>()
        .join(" ");
    let all = report
        .components
        .iter()
        .all(|c| c.max_relative_error < 1e-5 && c.partials_checked > 0);
    outcome(
        all && report.passed && within(Duration::from_secs(60), elapsed),
        format!("{worst} in {:.1}s", elapsed.as_secs_f64()),
    )
}

/// Textbook kappa: observed and expected matrices built cell by cell, quadratic
/// weights normalised by the squared top level.
fn brute_force_qwk(preds: &[usize], golds: &[usize], k_max: usize) -> Option<f64> {
    let n_levels = k_max + 1;
    let n = preds.len() as f64;
    let mut observed = vec![vec![0.0; n_levels]; n_levels];
    for (&p, &g) in preds.iter().zip(golds) {
        observed[g][p] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n_levels {
        for j in 0..n_levels {
            let row: f64 = (0..n_levels).map(|c| observed[i][c]).sum();
            let col: f64 = (0..n_levels).map(|r| observed[r][j]).sum();
            let expected = row * col / n;
            let w = ((i as f64 - j as f64).powi(2)) / (k_max * k_max) as f64;
            num += w * observed[i][j];
            den += w * expected;
        }
    }
    (den != 0.0).then(|| 1.0 - num / den)
}

fn random_triple(rng: &mut SplitMix64) -> (Vec<usize>, Vec<usize>, usize) {
    let k_max = 2 + rng.below(11) as usize;
    let n = 1 + rng.below(200) as usize;
    let golds: Vec<usize> = (0..n)
        .map(|_| rng.below(k_max as u64 + 1) as usize)
        .collect();
    let preds: Vec<usize> = golds
        .iter()
        .map(|&g| {
            if rng.next_f64() < 0.5 {
                g
            } else {
                rng.below(k_max as u64 + 1) as usize
            }
        })
        .collect();
    (preds, golds, k_max)
}

fn qwk_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let mut max_delta: f64 = 0.0;
    let mut mismatched_flags = 0;
    for _ in 0..1000 {
        let (p, g, k) = random_triple(&mut rng);
        let scale = ScoreScale::new(k, 0).unwrap();
        let fast = qwk(&p, &g, &scale).unwrap();
        match (fast, brute_force_qwk(&p, &g, k)) {
            (Qwk::Value(a), Some(b)) => max_delta = max_delta.max((a - b).abs()),
            (Qwk::Degenerate, None) => {}
            _ => mismatched_flags += 1,
        }
    }
    let scale = ScoreScale::new(4, 0).unwrap();
    let x = vec![0, 1, 2, 3, 4, 2, 1];
    let self_agree = qwk(&x, &x, &scale).unwrap() == Qwk::Value(1.0);
    let constant = qwk(&[2; 9], &[2; 9], &scale).unwrap().is_degenerate();
    let elapsed = t.elapsed();
    outcome(
        max_delta < 1e-12 && mismatched_flags == 0 && self_agree && constant && within(Duration::from_secs(10), elapsed),
        format!(
            "max|delta|={max_delta:.2e} flag_mismatches={mismatched_flags} qwk(x,x)=1:{self_agree} constant_degenerate:{constant} in {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn weight_convention() -> Outcome {
    let mut rng = SplitMix64::new(77);
    let mut max_delta: f64 = 0.0;
    let mut flag_mismatch = 0;
    for _ in 0..500 {
        let (p, g, k) = random_triple(&mut rng);
        let scale = ScoreScale::new(k, 0).unwrap();
        let cm = ConfusionMatrix::from_pairs(&p, &g, &scale).unwrap();
        let reference = cm.qwk_weighted((k * k) as f64).unwrap();
        for c in [1.0, 0.37, 3.0, 1e3, 1e-3] {
            match (reference, cm.qwk_weighted(c).unwrap()) {
                (Qwk::Value(a), Qwk::Value(b)) => max_delta = max_delta.max((a - b).abs()),
                (Qwk::Degenerate, Qwk::Degenerate) => {}
                _ => flag_mismatch += 1,
            }
        }
    }
    outcome(
        max_delta < 1e-12 && flag_mismatch == 0,
        format!("max|delta| over 500 triples x 5 constants = {max_delta:.2e}, flag mismatches {flag_mismatch}"),
    )
}

fn synthetic(seed: u64, f: impl FnOnce(&mut SyntheticSpec)) -> SyntheticSpec {
    let mut spec = SyntheticSpec {
        seed,
        ..Default::default()
    };
    f(&mut spec);
    spec
}

fn crossval(cfg: &RunConfig) -> RunReport {
    let cfg = cfg.clone().resolved();
    let records = harness::load_dataset(&cfg).unwrap();
    run_crossval(&cfg, &records).unwrap().report
}

fn gated_config(seed: u64, f: impl FnOnce(&mut SyntheticSpec)) -> RunConfig {
    RunConfig {
        mode: Mode::DlomGf,
        seed,
        data: DataSource::Synthetic(synthetic(seed, f)),
        ..Default::default()
    }
}

fn avg(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fusion_dominance() -> Outcome {
    let t = Instant::now();
    let mut by_strategy: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS {
        let r = crossval(&gated_config(seed, |_| {}));
        for s in InferenceStrategy::ALL {
            let v = r.strategies[s.as_str()].macro_mean.unwrap_or(f64::NAN);
            by_strategy.entry(s.as_str()).or_default().push(v);
        }
    }
    let elapsed = t.elapsed();
    let fused = avg(&by_strategy["fused"]);
    let text = avg(&by_strategy["text_only"]);
    let mm = avg(&by_strategy["mm_only"]);
    let weaker = text.min(mm);
    outcome(
        fused >= text && fused >= mm && fused - weaker >= 0.02 && within(Duration::from_secs(300), elapsed),
        format!(
            "fused={fused:.4} text_only={text:.4} mm_only={mm:.4} margin_over_weaker={:.4} in {:.1}s",
            fused - weaker,
            elapsed.as_secs_f64()
        ),
    )
}

fn gate_adaptivity() -> Outcome {
    let mean_alpha = |f: fn(&mut SyntheticSpec)| -> f64 {
        let alphas: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                crossval(&gated_config(seed, f))
                    .alpha
                    .expect("gated run reports alpha")
                    .mean
            })
            .collect();
        avg(&alphas)
    };
    let visual_noise = mean_alpha(|s| s.visual_signal = false);
    let text_noise = mean_alpha(|s| s.text_signal = false);
    outcome(
        visual_noise < 0.4 && text_noise > 0.6,
        format!("alpha(visual=noise)={visual_noise:.4} (<0.4), alpha(text=noise)={text_noise:.4} (>0.6)"),
    )
}

fn noisy_text_config(seed: u64, mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        seed,
        data: DataSource::Synthetic(synthetic(seed, |s| {
            s.text_noise = 2.0;
            s.with_visual = false;
        })),
        ..Default::default()
    }
}

fn distance_aware_benefit(lambda_ranges: &mut Vec<[f64; 2]>) -> Outcome {
    let t = Instant::now();
    let mut mae = BTreeMap::new();
    let mut far = BTreeMap::new();
    for mode in [Mode::Dlom, Mode::DlomDa] {
        let reports: Vec<RunReport> = SEEDS
            .iter()
            .map(|&s| crossval(&noisy_text_config(s, mode)))
            .collect();
        if mode == Mode::DlomDa {
            lambda_ranges.extend(
                reports
                    .iter()
                    .flat_map(|r| r.folds.iter().map(|f| f.lambda_range)),
            );
        }
        mae.insert(
            mode,
            avg(&reports.iter().map(|r| r.mae_mean).collect::<Vec<_>>()),
        );
        far.insert(
            mode,
            avg(&reports
                .iter()
                .map(|r| r.far_error_rate_mean)
                .collect::<Vec<_>>()),
        );
    }
    let elapsed = t.elapsed();
    let (m0, m1) = (mae[&Mode::Dlom], mae[&Mode::DlomDa]);
    let (f0, f1) = (far[&Mode::Dlom], far[&Mode::DlomDa]);
    outcome(
        m1 <= m0 && f1 < f0 && within(Duration::from_secs(180), elapsed),
        format!(
            "mae dlom={m0:.4} dlom_da={m1:.4}; far(|err|>=2) dlom={f0:.4} dlom_da={f1:.4} in {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn objective_invariants(lambda_ranges: &[[f64; 2]]) -> Outcome {
    let records = generate_synthetic(&SyntheticSpec {
        n_instances: 120,
        traits: vec!["a".into(), "b".into()],
        ..Default::default()
    })
    .unwrap()
    .records;
    let base = TrainSettings {
        epochs: 15,
        ..Default::default()
    };

    let mut ranges = lambda_ranges.to_vec();
    for lambda_logit in [0.0, 6.0, -6.0] {
        let s = TrainSettings {
            mode: Mode::DlomDa,
            objective: ObjectiveConfig {
                distance_aware: true,
                lambda_logit,
                ..Default::default()
            },
            ..base.clone()
        };
        let (_, log) = train(&records, &s).unwrap();
        for e in &log.epochs {
            for &l in e.lambda.values() {
                ranges.push([l, l]);
            }
        }
    }
    let lo = ranges.iter().map(|r| r[0]).fold(f64::INFINITY, f64::min);
    let hi = ranges
        .iter()
        .map(|r| r[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let in_range = !ranges.is_empty() && lo > 0.0 && hi < 1.0;

    let plain = TrainSettings {
        mode: Mode::Dlom,
        ..base.clone()
    };
    let da_off = TrainSettings {
        mode: Mode::DlomDa,
        ..base
    };
    assert!(!da_off.objective.distance_aware);
    let a = checkpoint::to_text(&train(&records, &plain).unwrap().0);
    let b = checkpoint::to_text(&train(&records, &da_off).unwrap().0);
    let identical = a == b;

    let zero_reg = [0.0, 0.01, 1.0, 123.0].iter().all(|&beta| {
        ObjectiveConfig {
            lambda_logit: 0.0,
            beta,
            ..Default::default()
        }
        .regularizer()
            == 0.0
    });
    outcome(
        in_range && identical && zero_reg,
        format!(
            "lambda in [{lo:.4}, {hi:.4}] over {} observations; checkpoints identical: {identical}; regularizer at 0: {zero_reg}",
            ranges.len()
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = RunConfig {
        epochs: 20,
        data: DataSource::Synthetic(SyntheticSpec {
            n_instances: 150,
            traits: vec!["org".into(), "voc".into()],
            ..Default::default()
        }),
        ..Default::default()
    };
    let mut checks = Vec::new();
    for mode in [Mode::Dlom, Mode::DlomGf, Mode::DlomDa, Mode::BaselineCls] {
        let c = RunConfig {
            mode,
            ..cfg.clone()
        };
        let name = mode.as_str();
        let seq = RunConfig {
            threads: 1,
            ..c.clone()
        };
        let par = RunConfig {
            threads: 5,
            ..c.clone()
        };
        harness::cmd_crossval(&seq, &root.join(format!("cv_{name}_a"))).unwrap();
        harness::cmd_crossval(&par, &root.join(format!("cv_{name}_b"))).unwrap();
        checks.push((
            format!("crossval/{name}"),
            dir_bytes(&root.join(format!("cv_{name}_a")))
                == dir_bytes(&root.join(format!("cv_{name}_b"))),
        ));
        harness::cmd_train(&c, &root.join(format!("tr_{name}_a"))).unwrap();
        harness::cmd_train(&c, &root.join(format!("tr_{name}_b"))).unwrap();
        checks.push((
            format!("train/{name}"),
            dir_bytes(&root.join(format!("tr_{name}_a")))
                == dir_bytes(&root.join(format!("tr_{name}_b"))),
        ));
    }
    let runs: Vec<_> = ["cv_dlom_a", "cv_dlom_gf_a", "tr_dlom_da_a"]
        .iter()
        .map(|r| root.join(r))
        .collect();
    harness::cmd_report(&runs, &root.join("rep_a")).unwrap();
    harness::cmd_report(&runs, &root.join("rep_b")).unwrap();
    checks.push((
        "report".into(),
        dir_bytes(&root.join("rep_a")) == dir_bytes(&root.join("rep_b")),
    ));
    let opts = GradcheckOptions {
        seed: 3,
        trials: 5,
        perturb: None,
    };
    harness::cmd_gradcheck(&opts, Some(&root.join("gc_a"))).unwrap();
    harness::cmd_gradcheck(&opts, Some(&root.join("gc_b"))).unwrap();
    checks.push((
        "gradcheck".into(),
        dir_bytes(&root.join("gc_a")) == dir_bytes(&root.join("gc_b")),
    ));
    let spec = SyntheticSpec {
        n_instances: 40,
        ..Default::default()
    };
    harness::cmd_synth(&spec, &root.join("s_a.jsonl")).unwrap();
    harness::cmd_synth(&spec, &root.join("s_b.jsonl")).unwrap();
    checks.push((
        "synth".into(),
        fs::read(root.join("s_a.jsonl")).unwrap() == fs::read(root.join("s_b.jsonl")).unwrap(),
    ));
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n.as_str())
        .collect();
    outcome(
        failed.is_empty(),
        format!("{} byte comparisons, differing: {:?}", checks.len(), failed),
    )
}

fn separable_sanity() -> Outcome {
    let mut fold_qwks = Vec::new();
    for seed in SEEDS {
        let cfg = RunConfig {
            mode: Mode::Dlom,
            seed,
            data: DataSource::Synthetic(synthetic(seed, |s| {
                s.text_noise = 0.0;
                s.with_visual = false;
                s.k_max = 3;
            })),
            ..Default::default()
        };
        let r = crossval(&cfg);
        fold_qwks.extend(r.folds.iter().map(|f| f.macro_avg.unwrap_or(f64::NAN)));
    }
    let min = fold_qwks.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        fold_qwks.iter().all(|&q| q == 1.0),
        format!(
            "min held-out fold QWK over {} folds = {min:.6}",
            fold_qwks.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut lambda_ranges = Vec::new();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 gradient integrity", Box::new(|_| gradient_integrity())),
        ("2 qwk oracle equivalence", Box::new(|_| qwk_oracle())),
        (
            "3 weight-convention invariance",
            Box::new(|_| weight_convention()),
        ),
        ("4 fusion dominance", Box::new(|_| fusion_dominance())),
        ("5 gate adaptivity", Box::new(|_| gate_adaptivity())),
        ("6 distance-aware benefit", Box::new(distance_aware_benefit)),
        (
            "7 objective invariants",
            Box::new(|r| objective_invariants(r)),
        ),
        ("8 determinism", Box::new(|_| determinism())),
        ("9 separable sanity", Box::new(|_| separable_sanity())),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let o = check(&mut lambda_ranges);
        if !o.passed {
            failures += 1;
        }
        println!(
            "[{}] criterion {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
