//! The assembled model: every trainable parameter, the full per-image
//! forward graph, and inference helpers.
//!
//! The forward pass follows the component toggles:
//! - self_attention off: features are the bare input projection.
//! - region_head off: the prediction head is the coarse max-pool head and
//!   nothing semantic is built (the baseline configuration).
//! - sgfe off: the semantic mixture block of the enhanced features is
//!   zero, so the refined head sees `[0 || F]`.
//! - srfl off: the global feature entering the fusion is zeroed, making
//!   class semantics a function of the label embeddings alone.
//! - collaborative off: no coarse head, no pseudo-labels, single-term loss.

use crate::autodiff::{Tape, TensorId};
use crate::config::RunConfig;
use crate::data::Sample;
use crate::encoders::{self, LabelEmbeddingTable, PatchEncoderIds, PatchEncoderParams};
use crate::error::{Error, Result};
use crate::param::Param;
use crate::recovery::{self, ClassifierIds, ClassifierParams, PredictionBundle};
use crate::rng::seeded;
use crate::sgfe::{self, AttentionMaps, SgfeIds, SgfeParams};
use crate::srfl::{self, SrflIds, SrflParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: PatchEncoderParams,
    pub labels: LabelEmbeddingTable,
    pub srfl: SrflParams,
    pub sgfe: SgfeParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    /// Seeded initialization; parameters are drawn in a fixed order so the
    /// same seed always yields bit-identical weights.
    pub fn init(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = seeded(seed);
        Self {
            encoder: PatchEncoderParams::init(cfg, &mut rng),
            labels: LabelEmbeddingTable::init(cfg, &mut rng),
            srfl: SrflParams::init(cfg, &mut rng),
            sgfe: SgfeParams::init(cfg, &mut rng),
            classifier: ClassifierParams::init(cfg, &mut rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.encoder.w_in,
            &self.encoder.w_q,
            &self.encoder.w_k,
            &self.encoder.w_v_attn,
            &self.encoder.w_o,
            &self.labels.table,
            &self.srfl.w_fuse,
            &self.srfl.b_fuse,
            &self.sgfe.u,
            &self.sgfe.v,
            &self.sgfe.p_mat,
            &self.sgfe.b_attn,
            &self.sgfe.w_out,
            &self.classifier.cls0,
            &self.classifier.cls1,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.encoder.w_in,
            &mut self.encoder.w_q,
            &mut self.encoder.w_k,
            &mut self.encoder.w_v_attn,
            &mut self.encoder.w_o,
            &mut self.labels.table,
            &mut self.srfl.w_fuse,
            &mut self.srfl.b_fuse,
            &mut self.sgfe.u,
            &mut self.sgfe.v,
            &mut self.sgfe.p_mat,
            &mut self.sgfe.b_attn,
            &mut self.sgfe.w_out,
            &mut self.classifier.cls0,
            &mut self.classifier.cls1,
        ]
    }

    /// Replaces every parameter buffer with the given flat values, in
    /// [`ModelParams::params`] order.
    pub fn load_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                params.len(),
                values.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.len() != v.len() {
                return Err(Error::Config(format!(
                    "parameter {} has {} entries, got {}",
                    p.name,
                    p.value.len(),
                    v.len()
                )));
            }
            p.value.copy_from_slice(v);
        }
        Ok(())
    }
}

/// Tape ids of every bound parameter, in [`ModelParams::params`] order,
/// plus the per-module views used by the graph builders.
pub struct BoundModel {
    pub encoder: PatchEncoderIds,
    pub label_table: TensorId,
    pub srfl: SrflIds,
    pub sgfe: SgfeIds,
    pub classifier: ClassifierIds,
    pub ordered: Vec<TensorId>,
}

pub fn bind_model(tape: &mut Tape, params: &ModelParams) -> Result<BoundModel> {
    let encoder = params.encoder.bind(tape)?;
    let label_table = params.labels.embed(tape)?;
    let srfl = params.srfl.bind(tape)?;
    let sgfe = params.sgfe.bind(tape)?;
    let classifier = params.classifier.bind(tape)?;
    let ordered = vec![
        encoder.w_in,
        encoder.w_q,
        encoder.w_k,
        encoder.w_v_attn,
        encoder.w_o,
        label_table,
        srfl.w_fuse,
        srfl.b_fuse,
        sgfe.u,
        sgfe.v,
        sgfe.p_mat,
        sgfe.b_attn,
        sgfe.w_out,
        classifier.cls0,
        classifier.cls1,
    ];
    Ok(BoundModel { encoder, label_table, srfl, sgfe, classifier, ordered })
}

/// The tensor ids of one image's forward graph.
pub struct ForwardGraph {
    pub feature_map: TensorId,
    pub semantic: Option<TensorId>,
    pub attn_logits: Option<TensorId>,
    pub attn_weights: Option<TensorId>,
    pub enhanced: Option<TensorId>,
    pub location: Option<TensorId>,
    /// Refined logits Y1 (present iff the region head is on).
    pub refined: Option<TensorId>,
    /// Coarse logits Y0 (max-pool head).
    pub coarse: Option<TensorId>,
    /// The head used for prediction: Y1 when the region head is on,
    /// otherwise Y0.
    pub main_logits: TensorId,
    /// sigmoid of `main_logits`.
    pub main_probs: TensorId,
}

/// Binds one image's raw patches as a leaf, rejecting non-finite values.
pub fn bind_patches(tape: &mut Tape, sample: &Sample, cfg: &RunConfig) -> Result<TensorId> {
    if sample.patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite patch value in image {}",
            sample.id
        )));
    }
    if sample.patches.len() != cfg.patches * cfg.d_raw {
        return Err(Error::Config(format!(
            "image {} has {} patch values, config expects {} x {}",
            sample.id,
            sample.patches.len(),
            cfg.patches,
            cfg.d_raw
        )));
    }
    tape.leaf_named(&format!("patches[{}]", sample.id), &[cfg.patches, cfg.d_raw], sample.patches.clone())
}

/// Builds the full forward graph for one image under the configured
/// toggles.
pub fn forward(
    tape: &mut Tape,
    bound: &BoundModel,
    raw: TensorId,
    cfg: &RunConfig,
) -> Result<ForwardGraph> {
    let projected = encoders::project(tape, raw, &bound.encoder)?;
    let feature_map = if cfg.self_attention {
        encoders::self_attention(tape, projected, &bound.encoder)?
    } else {
        projected
    };

    if !cfg.region_head {
        let coarse = recovery::coarse_scores(tape, feature_map, bound.classifier.cls0)?;
        let probs = tape.sigmoid(coarse);
        return Ok(ForwardGraph {
            feature_map,
            semantic: None,
            attn_logits: None,
            attn_weights: None,
            enhanced: None,
            location: None,
            refined: None,
            coarse: Some(coarse),
            main_logits: coarse,
            main_probs: probs,
        });
    }

    let (semantic, attn_logits, attn_weights, mixture) = if cfg.sgfe {
        let global = if cfg.srfl {
            srfl::global_pool(tape, feature_map)?
        } else {
            tape.leaf(&[cfg.d_v], vec![0.0; cfg.d_v])?
        };
        let semantic = srfl::fuse(tape, global, bound.label_table, &bound.srfl)?;
        let logits = sgfe::attention_logits(tape, feature_map, semantic, &bound.sgfe)?;
        let weights = sgfe::attention_weights(tape, logits, cfg.temperature)?;
        let mixture = tape.matmul(weights, semantic)?;
        (Some(semantic), Some(logits), Some(weights), mixture)
    } else {
        let zeros = tape.leaf(&[cfg.patches, cfg.d_v], vec![0.0; cfg.patches * cfg.d_v])?;
        (None, None, None, zeros)
    };

    let enhanced = tape.concat(mixture, feature_map, 1)?;
    let location = recovery::location_scores(tape, enhanced, bound.classifier.cls1)?;
    let refined = recovery::aggregate(tape, location)?;
    let main_probs = tape.sigmoid(refined);
    let coarse = if cfg.collaborative {
        Some(recovery::coarse_scores(tape, feature_map, bound.classifier.cls0)?)
    } else {
        None
    };

    Ok(ForwardGraph {
        feature_map,
        semantic,
        attn_logits,
        attn_weights,
        enhanced: Some(enhanced),
        location: Some(location),
        refined: Some(refined),
        coarse,
        main_logits: refined,
        main_probs,
    })
}

/// Reconstructs the parameter views from leaves bound in
/// [`ModelParams::params`] order; used by gradient checks that perturb
/// parameters as plain inputs.
pub fn bound_from_ids(ids: &[TensorId]) -> Result<BoundModel> {
    if ids.len() != 15 {
        return Err(Error::Config(format!(
            "expected 15 parameter tensors, got {}",
            ids.len()
        )));
    }
    Ok(BoundModel {
        encoder: PatchEncoderIds {
            w_in: ids[0],
            w_q: ids[1],
            w_k: ids[2],
            w_v_attn: ids[3],
            w_o: ids[4],
        },
        label_table: ids[5],
        srfl: SrflIds { w_fuse: ids[6], b_fuse: ids[7] },
        sgfe: SgfeIds { u: ids[8], v: ids[9], p_mat: ids[10], b_attn: ids[11], w_out: ids[12] },
        classifier: ClassifierIds { cls0: ids[13], cls1: ids[14] },
        ordered: ids.to_vec(),
    })
}

/// Finite-difference check of the complete loss graph on one seeded
/// instance: every parameter and the raw patches are perturbed. The
/// pseudo-label targets are computed once from the unperturbed refined
/// probabilities and held fixed, matching their role as detached
/// constants.
pub fn full_loss_gradcheck(
    cfg: &RunConfig,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<crate::gradcheck::GradCheckReport> {
    use crate::gradcheck::{gradcheck, GradCheckInput};
    use crate::loss::{self, AslParams, LossWeights};

    let params = ModelParams::init(cfg, seed);
    let mut r = seeded(crate::rng::derive_seed(seed, "gradcheck-sample"));
    let patches = crate::rng::fill_uniform(&mut r, cfg.patches * cfg.d_raw, 1.0);
    let observed: Vec<i8> = (0..cfg.num_classes)
        .map(|_| [-1i8, 0, 1][(crate::rng::uniform(&mut r, 0.0, 3.0)) as usize])
        .collect();
    let sample = Sample {
        id: format!("gradcheck-{seed}"),
        patches: patches.clone(),
        full_labels: None,
        observed: observed.clone(),
    };

    let refined_probs = infer(&params, cfg, &sample)?;
    let ytilde = crate::recovery::fill_pseudo(&observed, &refined_probs)?
        .into_values();

    let mut inputs: Vec<GradCheckInput> = params
        .params()
        .iter()
        .map(|p| GradCheckInput::new(p.name, &p.shape, p.value.clone()))
        .collect();
    inputs.push(GradCheckInput::new("patches", &[cfg.patches, cfg.d_raw], patches));

    let asl = AslParams::from_config(cfg);
    let weights = LossWeights::from_config(cfg);
    gradcheck(
        move |tape, ids| {
            let bound = bound_from_ids(&ids[..15])?;
            let graph = forward(tape, &bound, ids[15], cfg)?;
            if cfg.collaborative {
                let coarse = graph.coarse.ok_or_else(|| {
                    Error::Internal("collaborative loss without a coarse head".to_string())
                })?;
                let coarse_probs = tape.sigmoid(coarse);
                loss::total_loss_graph(
                    tape,
                    graph.main_probs,
                    coarse_probs,
                    &observed,
                    &ytilde,
                    &weights,
                    &asl,
                )
            } else {
                let masked = loss::masked_asl_graph(tape, graph.main_probs, &observed, &asl)?;
                Ok(tape.scale(masked, weights.lambda1))
            }
        },
        &inputs,
        h,
        tol,
    )
}

/// Runs inference on one sample: the per-class probabilities of the
/// prediction head (the refined head whenever the region head is on; the
/// coarse head is never consulted).
pub fn infer(params: &ModelParams, cfg: &RunConfig, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params)?;
    let raw = bind_patches(&mut tape, sample, cfg)?;
    let graph = forward(&mut tape, &bound, raw, cfg)?;
    tape.check_finite(graph.main_probs, "inference output")?;
    Ok(tape.value(graph.main_probs).to_vec())
}

/// Extracted per-image artifacts for dumps and audits.
pub struct ForwardArtifacts {
    pub attention: Option<AttentionMaps>,
    pub bundle: PredictionBundle,
}

pub fn forward_artifacts(
    params: &ModelParams,
    cfg: &RunConfig,
    sample: &Sample,
) -> Result<ForwardArtifacts> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params)?;
    let raw = bind_patches(&mut tape, sample, cfg)?;
    let graph = forward(&mut tape, &bound, raw, cfg)?;
    let attention = match (graph.attn_logits, graph.attn_weights) {
        (Some(l), Some(w)) => Some(AttentionMaps::from_tape(&tape, l, w)),
        _ => None,
    };
    // The audit bundle always reports the max-pool head, even when the
    // configured loss does not use it.
    let coarse_id = match graph.coarse {
        Some(id) => id,
        None => recovery::coarse_scores(&mut tape, graph.feature_map, bound.classifier.cls0)?,
    };
    let coarse = tape.value(coarse_id).to_vec();
    let refined = graph.refined.map(|id| tape.value(id).to_vec()).unwrap_or_default();
    let location = graph.location.map(|id| tape.value(id).to_vec()).unwrap_or_default();
    Ok(ForwardArtifacts {
        attention,
        bundle: PredictionBundle {
            location,
            refined: refined.clone(),
            coarse,
            refined_probs: tape.value(graph.main_probs).to_vec(),
        },
    })
}
