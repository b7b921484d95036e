//! Semantic-guided feature enhancement: low-rank bilinear attention
//! between patch features and class semantics.
//!
//! For each (patch p, class c) pair the attention logit is
//! `A[p,c] = <tanh((F_p U) o (S_c V)) * P_mat + b, w>` with `o` the
//! elementwise product; the pairwise combination over all (p, c) forms a
//! P x C x d_1 intermediate. Weights B are the per-patch softmax of A over
//! classes at temperature t, and the enhanced feature of patch p is
//! `E_p = [B_p * S || F_p]`.

use std::path::Path;

use crate::autodiff::{Tape, TensorId};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::param::Param;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SgfeParams {
    pub u: Param,
    pub v: Param,
    /// The learnable d_1 x d_2 projection of the joint embedding.
    pub p_mat: Param,
    pub b_attn: Param,
    /// Linear functional collapsing the d_2 vector to the scalar logit.
    pub w_out: Param,
    /// Softmax temperature of the attention distribution.
    pub t: f64,
}

impl SgfeParams {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        Self {
            u: Param::uniform_fan_in("sgfe.u", &[cfg.d_v, cfg.d_1], rng),
            v: Param::uniform_fan_in("sgfe.v", &[cfg.d_v, cfg.d_1], rng),
            p_mat: Param::uniform_fan_in("sgfe.p_mat", &[cfg.d_1, cfg.d_2], rng),
            b_attn: Param::zeros("sgfe.b_attn", &[cfg.d_2]),
            w_out: Param::uniform_fan_in("sgfe.w_out", &[cfg.d_2], rng),
            t: cfg.temperature,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<SgfeIds> {
        Ok(SgfeIds {
            u: self.u.bind(tape)?,
            v: self.v.bind(tape)?,
            p_mat: self.p_mat.bind(tape)?,
            b_attn: self.b_attn.bind(tape)?,
            w_out: self.w_out.bind(tape)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SgfeIds {
    pub u: TensorId,
    pub v: TensorId,
    pub p_mat: TensorId,
    pub b_attn: TensorId,
    pub w_out: TensorId,
}

/// Bilinear attention logits A: P x C.
pub fn attention_logits(
    tape: &mut Tape,
    features: TensorId,
    semantics: TensorId,
    ids: &SgfeIds,
) -> Result<TensorId> {
    let p = tape.shape(features)[0];
    let c = tape.shape(semantics)[0];
    let d_1 = tape.shape(ids.u)[1];
    let d_2 = tape.shape(ids.p_mat)[1];
    let fu = tape.matmul(features, ids.u)?;
    let sv = tape.matmul(semantics, ids.v)?;
    let fu3 = tape.reshape(fu, &[p, 1, d_1])?;
    let sv3 = tape.reshape(sv, &[1, c, d_1])?;
    let joint = tape.mul(fu3, sv3)?;
    let h = tape.tanh(joint);
    let h_flat = tape.reshape(h, &[p * c, d_1])?;
    let hp = tape.matmul(h_flat, ids.p_mat)?;
    let hpb = tape.add(hp, ids.b_attn)?;
    let w_col = tape.reshape(ids.w_out, &[d_2, 1])?;
    let logits = tape.matmul(hpb, w_col)?;
    tape.reshape(logits, &[p, c])
}

/// Per-patch softmax over classes at temperature `t`.
pub fn attention_weights(tape: &mut Tape, logits: TensorId, t: f64) -> Result<TensorId> {
    tape.softmax_axis(logits, 1, t)
}

/// Enhanced features E: P x 2 d_v, the attention-weighted semantic mixture
/// concatenated with the raw patch feature.
pub fn enhance(
    tape: &mut Tape,
    features: TensorId,
    semantics: TensorId,
    weights: TensorId,
) -> Result<TensorId> {
    let mixture = tape.matmul(weights, semantics)?;
    tape.concat(mixture, features, 1)
}

/// Extracted attention logits and weights for one image.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub patches: usize,
    pub classes: usize,
    /// Row-major P x C.
    pub logits: Vec<f64>,
    /// Row-major P x C; every row sums to 1.
    pub weights: Vec<f64>,
}

impl AttentionMaps {
    pub fn from_tape(tape: &Tape, logits: TensorId, weights: TensorId) -> Self {
        let shape = tape.shape(logits);
        Self {
            patches: shape[0],
            classes: shape[1],
            logits: tape.value(logits).to_vec(),
            weights: tape.value(weights).to_vec(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("patch,class,logit,weight\n");
        for p in 0..self.patches {
            for c in 0..self.classes {
                let i = p * self.classes + c;
                out.push_str(&format!("{p},{c},{},{}\n", self.logits[i], self.weights[i]));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::fsio::atomic_write(path, self.to_csv().as_bytes())
    }

    pub fn parse_csv(text: &str) -> Result<AttentionMaps> {
        let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "patch,class,logit,weight" {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unexpected header '{line}'"),
                    });
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|e| Error::Parse { line: i + 1, message: format!("{e}") })
            };
            rows.push((
                parts[0].parse().map_err(|e| Error::Parse { line: i + 1, message: format!("{e}") })?,
                parts[1].parse().map_err(|e| Error::Parse { line: i + 1, message: format!("{e}") })?,
                parse(parts[2])?,
                parse(parts[3])?,
            ));
        }
        let patches = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let classes = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut maps = AttentionMaps {
            patches,
            classes,
            logits: vec![0.0; patches * classes],
            weights: vec![0.0; patches * classes],
        };
        for (p, c, l, w) in rows {
            maps.logits[p * classes + c] = l;
            maps.weights[p * classes + c] = w;
        }
        Ok(maps)
    }
}
