//! Versioned plain-text checkpoints.
//!
//! ```text
//! DLOM-CHECKPOINT 1
//! lambda_sharing per_trait
//! traits <n>
//! trait "<json-escaped id>"
//! scale <k_max> <offset>
//! tokens <n> <id_0> ... <id_K>
//! objective <lambda_logit> <beta> <smooth_l1_delta> <distance_aware 0|1>
//! scorer decision | gated <visual|concat> | pooling
//! tensor <name> <rows> <cols>
//! <cols values>            (one line per row, row-major)
//! ...
//! end
//! ```
//! Tensor names per scorer: decision `text.{w1,b1,w2,b2}`; gated adds
//! `mm.{w1,b1,w2,b2}`, `gate.w`, `gate.b`; pooling `head.w`, `head.b`. Biases
//! are `1 x n`. Floats use Rust's shortest round-trip scientific notation, so a
//! checkpoint reloads bit-exactly and identical parameters give identical bytes.

use std::fmt::Write as _;

use crate::backbone::{BranchEncoder, Dense, PoolingHeadBaseline};
use crate::error::{DlomError, Result};
use crate::fusion::GateParameters;
use crate::model::{LambdaSharing, MultimodalInput, Scorer, TrainedModel, TraitModel};
use crate::objectives::ObjectiveConfig;
use crate::score_space::{ScoreScale, ScoreTokenSet};

pub const MAGIC: &str = "DLOM-CHECKPOINT";
pub const VERSION: u32 = 1;

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

fn write_encoder(out: &mut String, prefix: &str, e: &BranchEncoder) {
    write_tensor(
        out,
        &format!("{prefix}.w1"),
        e.w1.rows,
        e.w1.cols,
        &e.w1.data,
    );
    write_tensor(out, &format!("{prefix}.b1"), 1, e.b1.len(), &e.b1);
    write_tensor(
        out,
        &format!("{prefix}.w2"),
        e.w2.rows,
        e.w2.cols,
        &e.w2.data,
    );
    write_tensor(out, &format!("{prefix}.b2"), 1, e.b2.len(), &e.b2);
}

pub fn to_text(model: &TrainedModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let sharing = match model.lambda_sharing {
        LambdaSharing::PerTrait => "per_trait",
        LambdaSharing::Shared => "shared",
    };
    let _ = writeln!(out, "lambda_sharing {sharing}");
    let _ = writeln!(out, "traits {}", model.traits.len());
    for t in &model.traits {
        let _ = writeln!(
            out,
            "trait {}",
            serde_json::to_string(&t.trait_id).expect("string")
        );
        let _ = writeln!(out, "scale {} {}", t.scale.k_max(), t.scale.offset());
        let ids: Vec<String> = t.tokens.ids().iter().map(|i| i.to_string()).collect();
        let _ = writeln!(out, "tokens {} {}", ids.len(), ids.join(" "));
        let o = &t.objective;
        let _ = writeln!(
            out,
            "objective {:e} {:e} {:e} {}",
            o.lambda_logit, o.beta, o.smooth_l1_delta, o.distance_aware as u8
        );
        match &t.scorer {
            Scorer::Decision { text } => {
                let _ = writeln!(out, "scorer decision");
                write_encoder(&mut out, "text", text);
            }
            Scorer::Gated {
                text,
                multimodal,
                gate,
                mm_input,
            } => {
                let mi = match mm_input {
                    MultimodalInput::Visual => "visual",
                    MultimodalInput::Concat => "concat",
                };
                let _ = writeln!(out, "scorer gated {mi}");
                write_encoder(&mut out, "text", text);
                write_encoder(&mut out, "mm", multimodal);
                write_tensor(&mut out, "gate.w", 1, gate.w.len(), &gate.w);
                write_tensor(&mut out, "gate.b", 1, 1, &[gate.b]);
            }
            Scorer::Pooling { head } => {
                let _ = writeln!(out, "scorer pooling");
                write_tensor(&mut out, "head.w", head.w.rows, head.w.cols, &head.w.data);
                write_tensor(&mut out, "head.b", 1, head.b.len(), &head.b);
            }
        }
    }
    let _ = writeln!(out, "end");
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    source: &'a str,
    line: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(DlomError::Parse {
            path: self.source.to_string(),
            line: self.line,
            message: msg.into(),
        })
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                self.err("unexpected end of checkpoint")
            }
        }
    }

    /// Next line split on whitespace, checking the leading keyword.
    fn keyword(&mut self, kw: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(kw) {
            return self.err(format!("expected `{kw}`, found `{line}`"));
        }
        Ok(parts.collect())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        match s.parse() {
            Ok(v) => Ok(v),
            Err(_) => self.err(format!("cannot parse `{s}`")),
        }
    }

    fn tensor(&mut self, name: &str) -> Result<Dense> {
        let head = self.keyword("tensor")?;
        if head.len() != 3 || head[0] != name {
            return self.err(format!("expected tensor `{name}`"));
        }
        let rows: usize = self.parse(head[1])?;
        let cols: usize = self.parse(head[2])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.next_line()?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return self.err(format!(
                    "tensor `{name}` row has {} values, expected {cols}",
                    vals.len()
                ));
            }
            for v in vals {
                let x: f64 = self.parse(v)?;
                if !x.is_finite() {
                    return self.err(format!("tensor `{name}` holds a non-finite value"));
                }
                data.push(x);
            }
        }
        Dense::from_vec(rows, cols, data)
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let d = self.tensor(name)?;
        if d.rows != 1 {
            return self.err(format!("`{name}` must be a single row"));
        }
        Ok(d.data)
    }

    fn encoder(&mut self, prefix: &str) -> Result<BranchEncoder> {
        let w1 = self.tensor(&format!("{prefix}.w1"))?;
        let b1 = self.vector(&format!("{prefix}.b1"))?;
        let w2 = self.tensor(&format!("{prefix}.w2"))?;
        let b2 = self.vector(&format!("{prefix}.b2"))?;
        BranchEncoder::from_parts(w1, b1, w2, b2)
    }
}

pub fn from_text(text: &str, source: &str) -> Result<TrainedModel> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        source,
        line: 0,
    };
    let head = r.keyword(MAGIC)?;
    if head != [VERSION.to_string().as_str()] {
        return r.err(format!("unsupported checkpoint version {head:?}"));
    }
    let lambda_sharing = match r.keyword("lambda_sharing")?.as_slice() {
        ["per_trait"] => LambdaSharing::PerTrait,
        ["shared"] => LambdaSharing::Shared,
        other => return r.err(format!("unknown lambda_sharing {other:?}")),
    };
    let n = match r.keyword("traits")?.as_slice() {
        [n] => r.parse::<usize>(n)?,
        _ => return r.err("malformed `traits` line"),
    };
    let mut traits = Vec::with_capacity(n);
    for _ in 0..n {
        let line = r.next_line()?;
        let Some(raw_id) = line.strip_prefix("trait ") else {
            return r.err("expected `trait`");
        };
        let trait_id: String = match serde_json::from_str(raw_id) {
            Ok(s) => s,
            Err(e) => return r.err(e.to_string()),
        };
        let scale = match r.keyword("scale")?.as_slice() {
            [k, o] => ScoreScale::new(r.parse(k)?, r.parse(o)?)?,
            _ => return r.err("malformed `scale` line"),
        };
        let tok = r.keyword("tokens")?;
        let count: usize = r.parse(tok.first().copied().unwrap_or(""))?;
        if tok.len() != count + 1 {
            return r.err("token count does not match the listed ids");
        }
        let ids = tok[1..]
            .iter()
            .map(|s| r.parse(s))
            .collect::<Result<Vec<usize>>>()?;
        let tokens = ScoreTokenSet::new(ids, &scale)?;
        let objective = match r.keyword("objective")?.as_slice() {
            [l, b, d, da] => ObjectiveConfig {
                lambda_logit: r.parse(l)?,
                beta: r.parse(b)?,
                smooth_l1_delta: r.parse(d)?,
                distance_aware: match *da {
                    "0" => false,
                    "1" => true,
                    _ => return r.err("distance_aware must be 0 or 1"),
                },
            },
            _ => return r.err("malformed `objective` line"),
        };
        objective.validate()?;
        let scorer = match r.keyword("scorer")?.as_slice() {
            ["decision"] => Scorer::Decision {
                text: r.encoder("text")?,
            },
            ["gated", mi] => {
                let mm_input = match *mi {
                    "visual" => MultimodalInput::Visual,
                    "concat" => MultimodalInput::Concat,
                    _ => return r.err("unknown multimodal input"),
                };
                let text = r.encoder("text")?;
                let multimodal = r.encoder("mm")?;
                let w = r.vector("gate.w")?;
                let b = r.vector("gate.b")?;
                if b.len() != 1 {
                    return r.err("gate.b must hold one value");
                }
                Scorer::Gated {
                    text,
                    multimodal,
                    gate: GateParameters::new(w, b[0])?,
                    mm_input,
                }
            }
            ["pooling"] => {
                let w = r.tensor("head.w")?;
                let b = r.vector("head.b")?;
                Scorer::Pooling {
                    head: PoolingHeadBaseline::from_parts(w, b)?,
                }
            }
            other => return r.err(format!("unknown scorer {other:?}")),
        };
        check_shapes(&scorer, &scale, &tokens)?;
        traits.push(TraitModel {
            trait_id,
            scale,
            tokens,
            scorer,
            objective,
        });
    }
    r.keyword("end")?;
    Ok(TrainedModel {
        lambda_sharing,
        traits,
    })
}

fn check_shapes(scorer: &Scorer, scale: &ScoreScale, tokens: &ScoreTokenSet) -> Result<()> {
    let bad = |m: &str| {
        Err(DlomError::Validation(format!(
            "checkpoint shape mismatch: {m}"
        )))
    };
    match scorer {
        Scorer::Decision { text } => tokens.check_vocab(text.vocab_size()),
        Scorer::Gated {
            text,
            multimodal,
            gate,
            ..
        } => {
            tokens.check_vocab(text.vocab_size())?;
            tokens.check_vocab(multimodal.vocab_size())?;
            if gate.n_levels() != scale.n_levels() {
                return bad("gate width");
            }
            Ok(())
        }
        Scorer::Pooling { head } => {
            if head.b.len() != scale.n_levels() {
                return bad("head rows");
            }
            Ok(())
        }
    }
}

pub fn save(path: &std::path::Path, model: &TrainedModel) -> Result<()> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path)?;
    from_text(&text, &path.display().to_string())
}
