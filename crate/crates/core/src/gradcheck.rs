//! Finite-difference verification of every analytic backward pass.
//!
//! Each trial draws a random configuration, evaluates the analytic gradient
//! and compares it with a central difference of the forward computation:
//! `(f(x + eps) - f(x - eps)) / (2 eps)`, `eps = 1e-5`. The error measure is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`; the floor keeps
//! near-zero partials from turning round-off into large relative errors.

use serde::{Deserialize, Serialize};

use crate::backbone::{BranchEncoder, PoolingHeadBaseline};
use crate::dataset::TraitRecord;
use crate::error::Result;
use crate::fusion::{fuse_backward, fuse_forward, GateParameters};
use crate::model::{Architecture, Mode, MultimodalInput, ScorerGrads, TraitModel};
use crate::objectives::{combined_loss, ObjectiveConfig};
use crate::rng::SplitMix64;
use crate::score_space::{ScoreLogits, ScoreScale};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

pub const COMPONENTS: [&str; 6] = [
    "fusion",
    "objective",
    "text_encoder",
    "multimodal_encoder",
    "baseline_head",
    "end_to_end_gated",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + EPS) - f(x - EPS)) / (2.0 * EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub trials: usize,
    pub partials_checked: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub epsilon: f64,
    pub components: Vec<ComponentReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<String> {
        self.components
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.component.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    /// Test hook: add a fixed offset to one analytic partial of the named
    /// component so the check must flag it.
    pub perturb: Option<String>,
}

struct Tracker {
    worst: f64,
    checked: usize,
    perturb: bool,
}

impl Tracker {
    fn check(&mut self, analytic: f64, numeric: f64) {
        let a = if self.perturb && self.checked == 0 {
            analytic + 1e-2
        } else {
            analytic
        };
        let e = relative_error(a, numeric);
        // NaN must count as a failure
        self.worst = if e.is_nan() {
            f64::INFINITY
        } else {
            self.worst.max(e)
        };
        self.checked += 1;
    }
}

fn normals(rng: &mut SplitMix64, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * s).collect()
}

fn levels(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn fusion_trial(rng: &mut SplitMix64, t: &mut Tracker) -> Result<()> {
    let n = levels(rng, 2, 13);
    let zm = normals(rng, n, 2.0);
    let zt = normals(rng, n, 2.0);
    let w = normals(rng, 2 * n, 1.0);
    let b = rng.normal();
    let up = normals(rng, n, 1.0);
    let loss = |zm: &[f64], zt: &[f64], w: &[f64], b: f64| -> f64 {
        let p = GateParameters { w: w.to_vec(), b };
        let (z, _) = fuse_forward(
            &ScoreLogits::new(zm.to_vec()).expect("finite"),
            &ScoreLogits::new(zt.to_vec()).expect("finite"),
            &p,
        )
        .expect("dims");
        z.as_slice().iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let p = GateParameters::new(w.clone(), b)?;
    let (_, tr) = fuse_forward(
        &ScoreLogits::new(zm.clone())?,
        &ScoreLogits::new(zt.clone())?,
        &p,
    )?;
    let g = fuse_backward(&tr, &p, &up)?;
    for k in 0..n {
        let num = central_difference(
            |v| {
                let mut x = zm.clone();
                x[k] = v;
                loss(&x, &zt, &w, b)
            },
            zm[k],
        );
        t.check(g.z_m[k], num);
        let num = central_difference(
            |v| {
                let mut x = zt.clone();
                x[k] = v;
                loss(&zm, &x, &w, b)
            },
            zt[k],
        );
        t.check(g.z_t[k], num);
    }
    for j in 0..2 * n {
        let num = central_difference(
            |v| {
                let mut x = w.clone();
                x[j] = v;
                loss(&zm, &zt, &x, b)
            },
            w[j],
        );
        t.check(g.gate.w[j], num);
    }
    t.check(g.gate.b, central_difference(|v| loss(&zm, &zt, &w, v), b));
    Ok(())
}

fn objective_trial(rng: &mut SplitMix64, t: &mut Tracker) -> Result<()> {
    let n = levels(rng, 3, 13);
    let z = normals(rng, n, 2.0);
    let y = rng.below(n as u64) as usize;
    let cfg = ObjectiveConfig {
        lambda_logit: rng.normal() * 2.0,
        beta: rng.uniform(0.0, 0.5),
        smooth_l1_delta: rng.uniform(0.25, 2.0),
        distance_aware: true,
    };
    let total = |z: &[f64], ll: f64| -> f64 {
        let c = ObjectiveConfig {
            lambda_logit: ll,
            ..cfg
        };
        combined_loss(&ScoreLogits::new(z.to_vec()).expect("finite"), y, &c)
            .expect("valid")
            .total
    };
    let b = combined_loss(&ScoreLogits::new(z.clone())?, y, &cfg)?;
    for j in 0..n {
        let num = central_difference(
            |v| {
                let mut x = z.clone();
                x[j] = v;
                total(&x, cfg.lambda_logit)
            },
            z[j],
        );
        t.check(b.grad_z[j], num);
    }
    t.check(
        b.grad_lambda_logit,
        central_difference(|v| total(&z, v), cfg.lambda_logit),
    );
    Ok(())
}

fn encoder_trial(rng: &mut SplitMix64, t: &mut Tracker, max_features: usize) -> Result<()> {
    let f = levels(rng, 1, max_features);
    let h = levels(rng, 1, 6);
    let v = levels(rng, 2, 12);
    let mut enc = BranchEncoder::init(f, h, v, rng);
    enc.w1.data.iter_mut().for_each(|w| *w *= 2.0);
    let x = normals(rng, f, 1.0);
    let up = normals(rng, v, 1.0);
    let loss = |e: &BranchEncoder, x: &[f64]| -> f64 {
        let (o, _) = e.encode(x).expect("dims");
        o.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = enc.encode(&x)?;
    let g = enc.encode_backward(&cache, &up)?;
    let mut e = enc.clone();
    for i in 0..enc.w1.data.len() {
        let num = central_difference(
            |v| {
                e.w1.data[i] = v;
                loss(&e, &x)
            },
            enc.w1.data[i],
        );
        e.w1.data[i] = enc.w1.data[i];
        t.check(g.w1.data[i], num);
    }
    for i in 0..enc.b1.len() {
        let num = central_difference(
            |v| {
                e.b1[i] = v;
                loss(&e, &x)
            },
            enc.b1[i],
        );
        e.b1[i] = enc.b1[i];
        t.check(g.b1[i], num);
    }
    for i in 0..enc.w2.data.len() {
        let num = central_difference(
            |v| {
                e.w2.data[i] = v;
                loss(&e, &x)
            },
            enc.w2.data[i],
        );
        e.w2.data[i] = enc.w2.data[i];
        t.check(g.w2.data[i], num);
    }
    for i in 0..enc.b2.len() {
        let num = central_difference(
            |v| {
                e.b2[i] = v;
                loss(&e, &x)
            },
            enc.b2[i],
        );
        e.b2[i] = enc.b2[i];
        t.check(g.b2[i], num);
    }
    for i in 0..f {
        let num = central_difference(
            |v| {
                let mut xx = x.clone();
                xx[i] = v;
                loss(&enc, &xx)
            },
            x[i],
        );
        t.check(g.x[i], num);
    }
    Ok(())
}

fn head_trial(rng: &mut SplitMix64, t: &mut Tracker) -> Result<()> {
    let scale = ScoreScale::new(levels(rng, 1, 12), 0)?;
    let f = levels(rng, 1, 8);
    let head = PoolingHeadBaseline::init(&scale, f, rng);
    let x = normals(rng, f, 1.0);
    let y = rng.below(scale.n_levels() as u64) as usize;
    // drive the head through the cross-entropy so the whole classifier path is covered
    let loss = |h: &PoolingHeadBaseline, x: &[f64]| -> f64 {
        let z = h.forward(x).expect("dims");
        combined_loss(&z, y, &ObjectiveConfig::default())
            .expect("valid")
            .total
    };
    let z = head.forward(&x)?;
    let up = combined_loss(&z, y, &ObjectiveConfig::default())?.grad_z;
    let g = head.backward(&x, &up)?;
    let mut h = head.clone();
    for i in 0..head.w.data.len() {
        let num = central_difference(
            |v| {
                h.w.data[i] = v;
                loss(&h, &x)
            },
            head.w.data[i],
        );
        h.w.data[i] = head.w.data[i];
        t.check(g.w.data[i], num);
    }
    for i in 0..head.b.len() {
        let num = central_difference(
            |v| {
                h.b[i] = v;
                loss(&h, &x)
            },
            head.b[i],
        );
        h.b[i] = head.b[i];
        t.check(g.b[i], num);
    }
    for i in 0..f {
        let num = central_difference(
            |v| {
                let mut xx = x.clone();
                xx[i] = v;
                loss(&head, &xx)
            },
            x[i],
        );
        t.check(g.x[i], num);
    }
    Ok(())
}

/// Whole chain: both encoders, score-token gather, fusion, combined loss with lambda.
fn end_to_end_trial(rng: &mut SplitMix64, t: &mut Tracker) -> Result<()> {
    let scale = ScoreScale::new(levels(rng, 1, 5), 0)?;
    let text_dim = levels(rng, 1, 4);
    let visual_dim = levels(rng, 1, 4);
    let arch = Architecture {
        hidden_dim: levels(rng, 1, 4),
        vocab_multiplier: levels(rng, 1, 3),
        mm_input: if rng.below(2) == 0 {
            MultimodalInput::Visual
        } else {
            MultimodalInput::Concat
        },
    };
    let objective = ObjectiveConfig {
        lambda_logit: rng.normal(),
        beta: rng.uniform(0.0, 0.5),
        smooth_l1_delta: rng.uniform(0.5, 1.5),
        distance_aware: true,
    };
    let mut model = TraitModel::new(
        "t",
        scale,
        Mode::DlomGf,
        &arch,
        text_dim,
        Some(visual_dim),
        objective,
        rng,
    )?;
    let mut params = model.parameters();
    // non-zero gate so the gate path carries gradient
    params.iter_mut().for_each(|p| *p += 0.3 * rng.normal());
    model.set_parameters(&params)?;
    let rec = TraitRecord {
        instance_id: "i".into(),
        trait_id: "t".into(),
        x_text: normals(rng, text_dim, 1.0),
        x_visual: Some(normals(rng, visual_dim, 1.0)),
        gold: rng.below(scale.n_levels() as u64) as i64,
        scale,
    };
    let mut grads = ScorerGrads::zeros_like(&model.scorer);
    let bundle = model.accumulate_gradients(&rec, &mut grads)?;
    let mut analytic = grads.flatten();
    analytic.push(bundle.grad_lambda_logit);
    let mut probe = model.clone();
    for (i, a) in analytic.iter().enumerate() {
        let num = central_difference(
            |v| {
                let mut p = params.clone();
                p[i] = v;
                probe.set_parameters(&p).expect("length");
                probe.loss(&rec).expect("forward")
            },
            params[i],
        );
        t.check(*a, num);
    }
    Ok(())
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let trials = opts.trials.max(1);
    let mut components = Vec::new();
    for (ci, name) in COMPONENTS.iter().enumerate() {
        let mut rng = SplitMix64::derive(opts.seed, ci as u64);
        let mut t = Tracker {
            worst: 0.0,
            checked: 0,
            perturb: opts.perturb.as_deref() == Some(*name),
        };
        for _ in 0..trials {
            match *name {
                "fusion" => fusion_trial(&mut rng, &mut t)?,
                "objective" => objective_trial(&mut rng, &mut t)?,
                "text_encoder" => encoder_trial(&mut rng, &mut t, 8)?,
                "multimodal_encoder" => encoder_trial(&mut rng, &mut t, 16)?,
                "baseline_head" => head_trial(&mut rng, &mut t)?,
                "end_to_end_gated" => end_to_end_trial(&mut rng, &mut t)?,
                _ => unreachable!(),
            }
        }
        components.push(ComponentReport {
            component: name.to_string(),
            trials,
            partials_checked: t.checked,
            max_relative_error: t.worst,
            passed: t.worst < TOLERANCE,
        });
    }
    let passed = components.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        seed: opts.seed,
        trials,
        tolerance: TOLERANCE,
        epsilon: EPS,
        components,
        passed,
    })
}
