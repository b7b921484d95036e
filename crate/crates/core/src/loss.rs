//! Asymmetric binary loss with hard, soft, and masked targets, and the
//! two-term collaborative objective.
//!
//! Per class, with probabilities clamped to [eps, 1-eps]:
//! - positive target: `(1-p)^gamma_pos * (-ln p)`
//! - negative target: `pm^gamma_neg * (-ln(1-pm))` with `pm = max(p - c, 0)`
//!
//! A soft target y in [0,1] takes the convex combination
//! `y * L_pos + (1-y) * L_neg`, which reduces exactly to the hard loss at
//! the endpoints. Unknown classes of a masked target contribute zero loss
//! and exactly zero gradient. Losses are summed over classes; batches
//! average over images.

use crate::autodiff::{Tape, TensorId};
use crate::config::RunConfig;
use crate::data::{LABEL_NEGATIVE, LABEL_POSITIVE, LABEL_UNKNOWN};
use crate::error::{Error, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip_c: f64,
}

impl AslParams {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { gamma_pos: cfg.gamma_pos, gamma_neg: cfg.gamma_neg, clip_c: cfg.clip_c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { lambda1: cfg.lambda1, lambda2: cfg.lambda2 }
    }
}

/// Single-class asymmetric loss term; nonnegative, zero on the clip zone
/// for negative targets.
pub fn asl_term(p: f64, positive: bool, params: &AslParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        (1.0 - p).powf(params.gamma_pos) * -p.ln()
    } else {
        let pm = (p - params.clip_c).max(0.0);
        pm.powf(params.gamma_neg) * -(1.0 - pm).ln()
    }
}

/// Soft-target loss over a class vector: the per-class convex combination
/// of the positive and negative terms, summed.
pub fn asl_soft(probs: &[f64], ytilde: &[f64], params: &AslParams) -> f64 {
    debug_assert_eq!(probs.len(), ytilde.len());
    probs
        .iter()
        .zip(ytilde)
        .map(|(&p, &y)| y * asl_term(p, true, params) + (1.0 - y) * asl_term(p, false, params))
        .sum()
}

/// Hard loss over the known classes only; unknown entries contribute
/// nothing.
pub fn masked_asl(probs: &[f64], observed: &[i8], params: &AslParams) -> f64 {
    debug_assert_eq!(probs.len(), observed.len());
    probs
        .iter()
        .zip(observed)
        .map(|(&p, &y)| match y {
            LABEL_POSITIVE => asl_term(p, true, params),
            LABEL_NEGATIVE => asl_term(p, false, params),
            _ => 0.0,
        })
        .sum()
}

fn check_consistent(observed: &[i8], ytilde: &[f64]) -> Result<()> {
    for (c, (&y, &t)) in observed.iter().zip(ytilde).enumerate() {
        let ok = match y {
            LABEL_POSITIVE => t == 1.0,
            LABEL_NEGATIVE => t == 0.0,
            LABEL_UNKNOWN => (0.0..=1.0).contains(&t),
            _ => false,
        };
        if !ok {
            return Err(Error::Internal(format!(
                "pseudo-label {t} contradicts known label {y} at class {c}"
            )));
        }
    }
    Ok(())
}

/// Two-term objective: `lambda1 * masked(Y1, Y) + lambda2 * soft(Y0, Yt)`.
/// The pseudo-labels must agree with the known entries of `observed`.
pub fn total_loss(
    y1_probs: &[f64],
    y0_probs: &[f64],
    observed: &[i8],
    ytilde: &[f64],
    weights: &LossWeights,
    params: &AslParams,
) -> Result<f64> {
    check_consistent(observed, ytilde)?;
    Ok(weights.lambda1 * masked_asl(y1_probs, observed, params)
        + weights.lambda2 * asl_soft(y0_probs, ytilde, params))
}

/// Builds the per-class loss vector on the tape:
/// `pos_w[c] * L_pos(p_c) + neg_w[c] * L_neg(p_c)`.
///
/// With indicator weights this is the masked hard loss; with
/// `(ytilde, 1-ytilde)` it is the soft loss. The weights enter as
/// constants, so a zero weight yields exactly zero gradient for its class.
fn asl_vector_graph(
    tape: &mut Tape,
    probs: TensorId,
    pos_w: &[f64],
    neg_w: &[f64],
    params: &AslParams,
) -> Result<TensorId> {
    let c = tape.value(probs).len();
    if pos_w.len() != c || neg_w.len() != c {
        return Err(Error::Config(format!(
            "loss weight length {} / {} does not match class count {c}",
            pos_w.len(),
            neg_w.len()
        )));
    }
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);

    // Positive branch: (1-p)^g+ * (-ln p).
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let focus_pos = tape.powf(one_minus_p, params.gamma_pos)?;
    let log_p = tape.log(p)?;
    let nll_pos = tape.neg(log_p);
    let l_pos = tape.mul(focus_pos, nll_pos)?;

    // Negative branch: pm^g- * (-ln(1-pm)), pm = max(p - c, 0).
    let shifted = tape.add_scalar(p, -params.clip_c);
    let pm = tape.relu(shifted);
    let focus_neg = tape.powf(pm, params.gamma_neg)?;
    let neg_pm = tape.neg(pm);
    let one_minus_pm = tape.add_scalar(neg_pm, 1.0);
    let log_1mpm = tape.log(one_minus_pm)?;
    let nll_neg = tape.neg(log_1mpm);
    let l_neg = tape.mul(focus_neg, nll_neg)?;

    let wp = tape.leaf(&[c], pos_w.to_vec())?;
    let wn = tape.leaf(&[c], neg_w.to_vec())?;
    let weighted_pos = tape.mul(wp, l_pos)?;
    let weighted_neg = tape.mul(wn, l_neg)?;
    tape.add(weighted_pos, weighted_neg)
}

/// Masked hard loss on the tape, summed over known classes.
pub fn masked_asl_graph(
    tape: &mut Tape,
    probs: TensorId,
    observed: &[i8],
    params: &AslParams,
) -> Result<TensorId> {
    let pos_w: Vec<f64> = observed.iter().map(|&y| (y == LABEL_POSITIVE) as u8 as f64).collect();
    let neg_w: Vec<f64> = observed.iter().map(|&y| (y == LABEL_NEGATIVE) as u8 as f64).collect();
    let vec = asl_vector_graph(tape, probs, &pos_w, &neg_w, params)?;
    tape.sum_axis(vec, 0)
}

/// Soft-target loss on the tape, summed over classes. The targets enter as
/// constants: no gradient flows into their source.
pub fn asl_soft_graph(
    tape: &mut Tape,
    probs: TensorId,
    ytilde: &[f64],
    params: &AslParams,
) -> Result<TensorId> {
    let neg_w: Vec<f64> = ytilde.iter().map(|&y| 1.0 - y).collect();
    let vec = asl_vector_graph(tape, probs, ytilde, &neg_w, params)?;
    tape.sum_axis(vec, 0)
}

/// The collaborative objective on the tape. `ytilde` is detached: it is
/// plain values, typically from [`crate::recovery::fill_pseudo`] over the
/// refined probabilities of the same image.
pub fn total_loss_graph(
    tape: &mut Tape,
    y1_probs: TensorId,
    y0_probs: TensorId,
    observed: &[i8],
    ytilde: &[f64],
    weights: &LossWeights,
    params: &AslParams,
) -> Result<TensorId> {
    check_consistent(observed, ytilde)?;
    let refined = masked_asl_graph(tape, y1_probs, observed, params)?;
    let coarse = asl_soft_graph(tape, y0_probs, ytilde, params)?;
    let t1 = tape.scale(refined, weights.lambda1);
    let t2 = tape.scale(coarse, weights.lambda2);
    tape.add(t1, t2)
}
