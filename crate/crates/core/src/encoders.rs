//! Trainable stand-ins for pretrained backbones: a patch encoder with one
//! single-head self-attention layer, and a label embedding table.

use crate::autodiff::{Tape, TensorId};
use crate::config::RunConfig;
use crate::error::Result;
use crate::param::Param;
use crate::rng::SeededRng;

/// Input projection plus one self-attention layer with residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoderParams {
    pub w_in: Param,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v_attn: Param,
    pub w_o: Param,
}

impl PatchEncoderParams {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        let dv = cfg.d_v;
        Self {
            w_in: Param::uniform_fan_in("encoder.w_in", &[cfg.d_raw, dv], rng),
            w_q: Param::uniform_fan_in("encoder.w_q", &[dv, dv], rng),
            w_k: Param::uniform_fan_in("encoder.w_k", &[dv, dv], rng),
            w_v_attn: Param::uniform_fan_in("encoder.w_v_attn", &[dv, dv], rng),
            w_o: Param::uniform_fan_in("encoder.w_o", &[dv, dv], rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<PatchEncoderIds> {
        Ok(PatchEncoderIds {
            w_in: self.w_in.bind(tape)?,
            w_q: self.w_q.bind(tape)?,
            w_k: self.w_k.bind(tape)?,
            w_v_attn: self.w_v_attn.bind(tape)?,
            w_o: self.w_o.bind(tape)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatchEncoderIds {
    pub w_in: TensorId,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v_attn: TensorId,
    pub w_o: TensorId,
}

/// Projects raw patches into the visual feature space: `raw * W_in`.
pub fn project(tape: &mut Tape, raw: TensorId, ids: &PatchEncoderIds) -> Result<TensorId> {
    tape.matmul(raw, ids.w_in)
}

/// Single-head scaled dot-product self-attention over the projected
/// patches (softmax over keys at temperature sqrt(d_v)), followed by the
/// output projection and a residual add. There is no positional encoding,
/// so the block is equivariant under patch permutation.
pub fn self_attention(tape: &mut Tape, x: TensorId, ids: &PatchEncoderIds) -> Result<TensorId> {
    let d_v = tape.shape(x)[1] as f64;
    let q = tape.matmul(x, ids.w_q)?;
    let k = tape.matmul(x, ids.w_k)?;
    let v = tape.matmul(x, ids.w_v_attn)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let weights = tape.softmax_axis(scores, 1, d_v.sqrt())?;
    let ctx = tape.matmul(weights, v)?;
    let proj = tape.matmul(ctx, ids.w_o)?;
    tape.add(proj, x)
}

/// Full patch encoding: projection then self-attention.
pub fn encode_image(tape: &mut Tape, raw: TensorId, ids: &PatchEncoderIds) -> Result<TensorId> {
    let x = project(tape, raw, ids)?;
    self_attention(tape, x, ids)
}

/// Trainable per-class embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    pub table: Param,
}

impl LabelEmbeddingTable {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        Self {
            table: Param::uniform_fan_in("labels.table", &[cfg.num_classes, cfg.d_t], rng),
        }
    }

    /// Identity read of the table onto the tape; gradients flow back into
    /// the embeddings through the returned leaf.
    pub fn embed(&self, tape: &mut Tape) -> Result<TensorId> {
        self.table.bind(tape)
    }
}
