//! Semantic-related feature learning: fuse the globally pooled visual
//! feature with each label embedding into per-class semantic features.
//!
//! For each class c, `S_c = [g || l_c] * W_fuse + b_fuse` where g is the
//! mean-pooled patch feature replicated across rows; the result is a
//! C x d_v matrix that depends on the image only through its global mean.

use crate::autodiff::{Tape, TensorId};
use crate::config::RunConfig;
use crate::error::Result;
use crate::param::Param;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SrflParams {
    pub w_fuse: Param,
    pub b_fuse: Param,
}

impl SrflParams {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        Self {
            w_fuse: Param::uniform_fan_in("srfl.w_fuse", &[cfg.d_v + cfg.d_t, cfg.d_v], rng),
            b_fuse: Param::zeros("srfl.b_fuse", &[cfg.d_v]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<SrflIds> {
        Ok(SrflIds {
            w_fuse: self.w_fuse.bind(tape)?,
            b_fuse: self.b_fuse.bind(tape)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SrflIds {
    pub w_fuse: TensorId,
    pub b_fuse: TensorId,
}

/// Global spatial pooling: arithmetic mean over the patch axis.
pub fn global_pool(tape: &mut Tape, feature_map: TensorId) -> Result<TensorId> {
    tape.mean_axis(feature_map, 0)
}

/// Fuses the global feature with the label embeddings. `global` is a
/// d_v vector, `labels` a C x d_t matrix; the global feature is replicated
/// across the C rows before concatenation.
pub fn fuse(
    tape: &mut Tape,
    global: TensorId,
    labels: TensorId,
    ids: &SrflIds,
) -> Result<TensorId> {
    let c = tape.shape(labels)[0];
    let d_v = tape.value(global).len();
    let g_row = tape.reshape(global, &[1, d_v])?;
    let ones = tape.leaf(&[c, 1], vec![1.0; c])?;
    let replicated = tape.mul(ones, g_row)?;
    let joint = tape.concat(replicated, labels, 1)?;
    let projected = tape.matmul(joint, ids.w_fuse)?;
    tape.add(projected, ids.b_fuse)
}
