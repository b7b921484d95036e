//! Label recovery head: per-location classification, region-score
//! aggregation into refined predictions, the coarse max-pool head, and the
//! pseudo-label fill.

use std::path::Path;

use crate::autodiff::{ReduceKind, Tape, TensorId};
use crate::config::RunConfig;
use crate::data::{LABEL_NEGATIVE, LABEL_POSITIVE, LABEL_UNKNOWN};
use crate::error::{Error, Result};
use crate::loss::PROB_EPS;
use crate::param::Param;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// Coarse head: d_v x C.
    pub cls0: Param,
    /// Per-location head over enhanced features: 2 d_v x C.
    pub cls1: Param,
}

impl ClassifierParams {
    pub fn init(cfg: &RunConfig, rng: &mut SeededRng) -> Self {
        Self {
            cls0: Param::uniform_fan_in("classifier.cls0", &[cfg.d_v, cfg.num_classes], rng),
            cls1: Param::uniform_fan_in("classifier.cls1", &[2 * cfg.d_v, cfg.num_classes], rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ClassifierIds> {
        Ok(ClassifierIds { cls0: self.cls0.bind(tape)?, cls1: self.cls1.bind(tape)? })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierIds {
    pub cls0: TensorId,
    pub cls1: TensorId,
}

/// Per-location class scores `M = E * CLS1` (no bias).
pub fn location_scores(tape: &mut Tape, enhanced: TensorId, cls1: TensorId) -> Result<TensorId> {
    tape.matmul(enhanced, cls1)
}

/// Region score aggregation: per class, the scores weighted by their own
/// softmax along the patch axis, `Y1_c = sum_p M[p,c] * softmax_p(M)[p,c]`.
pub fn aggregate(tape: &mut Tape, scores: TensorId) -> Result<TensorId> {
    let weights = tape.softmax_axis(scores, 0, 1.0)?;
    let weighted = tape.mul(scores, weights)?;
    tape.reduce(weighted, 0, ReduceKind::Sum)
}

/// Coarse scores: per-patch logits from raw features, max-pooled over
/// patches, `Y0_c = max_p (F * CLS0)[p,c]`.
pub fn coarse_scores(tape: &mut Tape, features: TensorId, cls0: TensorId) -> Result<TensorId> {
    let logits = tape.matmul(features, cls0)?;
    tape.reduce(logits, 0, ReduceKind::Max)
}

/// Per-class probabilities in [0,1]: known labels copied verbatim, unknown
/// entries filled from the refined predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelVector {
    values: Vec<f64>,
}

impl PseudoLabelVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Three-way substitution: known-positive stays 1, known-negative stays 0,
/// unknown entries take the refined probability (clamped strictly inside
/// (0,1) so downstream logs stay finite).
pub fn fill_pseudo(observed: &[i8], refined_probs: &[f64]) -> Result<PseudoLabelVector> {
    if observed.len() != refined_probs.len() {
        return Err(Error::Config(format!(
            "label vector length {} != probability vector length {}",
            observed.len(),
            refined_probs.len()
        )));
    }
    let mut values = Vec::with_capacity(observed.len());
    for (c, (&y, &p)) in observed.iter().zip(refined_probs).enumerate() {
        let v = match y {
            LABEL_POSITIVE => 1.0,
            LABEL_NEGATIVE => 0.0,
            LABEL_UNKNOWN => p.clamp(PROB_EPS, 1.0 - PROB_EPS),
            other => {
                return Err(Error::Data(format!(
                    "label value {other} outside {{-1,0,1}} at class {c}"
                )))
            }
        };
        values.push(v);
    }
    Ok(PseudoLabelVector { values })
}

/// Raw outputs of the two heads for one image.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// Location scores, row-major P x C.
    pub location: Vec<f64>,
    /// Refined logits Y1 (C).
    pub refined: Vec<f64>,
    /// Coarse logits Y0 (C).
    pub coarse: Vec<f64>,
    /// sigmoid(Y1).
    pub refined_probs: Vec<f64>,
}

/// One pseudo-label audit row per (image, class).
pub fn pseudo_csv(rows: &[(String, Vec<i8>, PseudoLabelVector)]) -> String {
    let mut out = String::from("image_id,class,known,ytilde\n");
    for (id, observed, filled) in rows {
        for (c, (&y, &v)) in observed.iter().zip(filled.values()).enumerate() {
            let known = if y == LABEL_UNKNOWN { 0 } else { 1 };
            out.push_str(&format!("{id},{c},{known},{v}\n"));
        }
    }
    out
}

pub fn write_pseudo_csv(
    rows: &[(String, Vec<i8>, PseudoLabelVector)],
    path: &Path,
) -> Result<()> {
    crate::fsio::atomic_write(path, pseudo_csv(rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradCheckInput};
    use crate::rng;
    use proptest::prelude::*;

    fn aggregate_values(m: &[f64], p: usize, c: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let mt = tape.leaf(&[p, c], m.to_vec()).unwrap();
        let y1 = aggregate(&mut tape, mt).unwrap();
        tape.value(y1).to_vec()
    }

    #[test]
    fn zero_classifier_gives_zero_scores() {
        let mut tape = Tape::new();
        let e = tape.leaf(&[3, 4], vec![1.0; 12]).unwrap();
        let cls1 = tape.leaf(&[4, 2], vec![0.0; 8]).unwrap();
        let m = location_scores(&mut tape, e, cls1).unwrap();
        assert!(tape.value(m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_row_selects_classifier_row() {
        let mut tape = Tape::new();
        let e = tape.leaf(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let cls1 = tape
            .leaf(&[4, 3], (0..12).map(|i| i as f64).collect())
            .unwrap();
        let m = location_scores(&mut tape, e, cls1).unwrap();
        assert_eq!(tape.value(m), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn location_scores_gradcheck() {
        let mut r = rng::seeded(71);
        let inputs = [
            GradCheckInput::new("e", &[3, 4], rng::fill_uniform(&mut r, 12, 1.0)),
            GradCheckInput::new("cls1", &[4, 2], rng::fill_uniform(&mut r, 8, 1.0)),
        ];
        let report = gradcheck(
            |tape, ids| {
                let m = location_scores(tape, ids[0], ids[1])?;
                let sq = tape.mul(m, m)?;
                let s = tape.sum_axis(sq, 0)?;
                tape.sum_axis(s, 0)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn aggregate_of_constant_column_is_that_constant() {
        let y1 = aggregate_values(&[2.5, 0.0, 2.5, 0.0, 2.5, 0.0], 3, 2);
        assert!((y1[0] - 2.5).abs() < 1e-12);
        assert!(y1[1].abs() < 1e-12);
    }

    #[test]
    fn aggregate_approaches_max_for_dominant_patch() {
        let y1 = aggregate_values(&[0.0, 10.0], 2, 1);
        let expected = 10.0 / (1.0 + (-10.0f64).exp());
        assert!((y1[0] - expected).abs() < 1e-12);
        assert!((y1[0] - 9.999_546).abs() < 1e-3);
    }

    #[test]
    fn aggregate_of_single_patch_is_identity() {
        let m = [1.5, -2.0, 0.25];
        let y1 = aggregate_values(&m, 1, 3);
        assert_eq!(y1, m.to_vec());
    }

    #[test]
    fn aggregate_stays_within_column_bounds_and_ignores_patch_order() {
        let mut r = rng::seeded(73);
        for _ in 0..20 {
            let m = rng::fill_uniform(&mut r, 12, 3.0);
            let y1 = aggregate_values(&m, 4, 3);
            for c in 0..3 {
                let col: Vec<f64> = (0..4).map(|p| m[p * 3 + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(y1[c] >= lo - 1e-12 && y1[c] <= hi + 1e-12);
            }
            // Patch permutation invariance.
            let mut permuted = vec![0.0; 12];
            for (dst, src) in [(0usize, 3usize), (1, 0), (2, 2), (3, 1)] {
                permuted[dst * 3..(dst + 1) * 3].copy_from_slice(&m[src * 3..(src + 1) * 3]);
            }
            let y1p = aggregate_values(&permuted, 4, 3);
            for c in 0..3 {
                assert!((y1[c] - y1p[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_is_shift_equivariant() {
        let mut r = rng::seeded(75);
        for _ in 0..20 {
            let m = rng::fill_uniform(&mut r, 12, 2.0);
            let k = rng::uniform(&mut r, -3.0, 3.0);
            let mut shifted = m.clone();
            for p in 0..4 {
                shifted[p * 3 + 1] += k;
            }
            let base = aggregate_values(&m, 4, 3);
            let moved = aggregate_values(&shifted, 4, 3);
            assert!((moved[1] - base[1] - k).abs() < 1e-12);
            assert!((moved[0] - base[0]).abs() < 1e-12);
            assert!((moved[2] - base[2]).abs() < 1e-12);
        }
    }

    fn coarse_values(f: &[f64], cls0: &[f64], p: usize, d_v: usize, c: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let ft = tape.leaf(&[p, d_v], f.to_vec()).unwrap();
        let ct = tape.leaf(&[d_v, c], cls0.to_vec()).unwrap();
        let y0 = coarse_scores(&mut tape, ft, ct).unwrap();
        tape.value(y0).to_vec()
    }

    #[test]
    fn coarse_single_patch_is_its_logit_row() {
        let f = [1.0, -1.0];
        let cls0 = [2.0, 0.0, 0.5, 1.0, 3.0, -1.0];
        let y0 = coarse_values(&f, &cls0, 1, 2, 3);
        assert_eq!(y0, vec![1.0, -3.0, 1.5]);
    }

    #[test]
    fn duplicating_the_best_patch_leaves_coarse_scores_unchanged() {
        let mut r = rng::seeded(77);
        let f = rng::fill_uniform(&mut r, 6, 1.0);
        let cls0 = rng::fill_uniform(&mut r, 9, 1.0);
        let base = coarse_values(&f, &cls0, 2, 3, 3);
        let doubled: Vec<f64> = [f.clone(), f[..3].to_vec()].concat();
        let with_dup = coarse_values(&doubled, &cls0, 3, 3, 3);
        // New patch duplicates patch 0; the per-class max cannot change.
        for c in 0..3 {
            assert!((with_dup[c] - base[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn coarse_scores_gradcheck_with_unique_maxima() {
        let mut r = rng::seeded(79);
        let inputs = [
            GradCheckInput::new("f", &[3, 4], rng::fill_uniform(&mut r, 12, 1.0)),
            GradCheckInput::new("cls0", &[4, 2], rng::fill_uniform(&mut r, 8, 1.0)),
        ];
        let report = gradcheck(
            |tape, ids| {
                let y0 = coarse_scores(tape, ids[0], ids[1])?;
                let sq = tape.mul(y0, y0)?;
                tape.sum_axis(sq, 0)
            },
            &inputs,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fill_pseudo_follows_the_three_way_rule() {
        let filled = fill_pseudo(&[1, -1, 0], &[0.9, 0.7, 0.4]).unwrap();
        assert_eq!(filled.values(), &[1.0, 0.7, 0.0]);
    }

    #[test]
    fn fill_pseudo_with_all_known_ignores_probabilities() {
        let filled = fill_pseudo(&[1, 0, 0, 1], &[0.1, 0.9, 0.8, 0.2]).unwrap();
        assert_eq!(filled.values(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn fill_pseudo_with_all_unknown_copies_probabilities() {
        let probs = [0.25, 0.5, 0.75];
        let filled = fill_pseudo(&[-1, -1, -1], &probs).unwrap();
        assert_eq!(filled.values(), &probs);
    }

    #[test]
    fn fill_pseudo_rejects_out_of_alphabet_labels() {
        let err = fill_pseudo(&[1, 2, 0], &[0.5, 0.5, 0.5]).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("class 1"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn fill_pseudo_never_modifies_known_entries(
            observed in proptest::collection::vec(-1i8..=1, 1..32),
            seed in 0u64..1000,
        ) {
            let mut r = rng::seeded(seed);
            let probs: Vec<f64> = (0..observed.len())
                .map(|_| rng::uniform(&mut r, 1e-6, 1.0 - 1e-6))
                .collect();
            let filled = fill_pseudo(&observed, &probs).unwrap();
            for ((&y, &v), &p) in observed.iter().zip(filled.values()).zip(&probs) {
                match y {
                    1 => prop_assert_eq!(v, 1.0),
                    0 => prop_assert_eq!(v, 0.0),
                    _ => {
                        prop_assert!(v > 0.0 && v < 1.0);
                        prop_assert!((v - p.clamp(PROB_EPS, 1.0 - PROB_EPS)).abs() == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pseudo_csv_lists_every_pair() {
        let filled = fill_pseudo(&[1, -1], &[0.9, 0.3]).unwrap();
        let csv = pseudo_csv(&[("img-7".to_string(), vec![1, -1], filled)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image_id,class,known,ytilde");
        assert_eq!(lines[1], "img-7,0,1,1");
        assert_eq!(lines[2], "img-7,1,0,0.3");
    }
}
