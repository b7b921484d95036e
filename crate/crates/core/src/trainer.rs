//! End-to-end training: per-batch graph construction, the optimizer and
//! EMA updates, experiment runs with per-epoch metrics, the known-ratio
//! sweep, and the component-ablation grid.
//!
//! Per image the graph is encode -> semantic fusion -> bilinear
//! enhancement -> heads -> loss. Pseudo-labels are recomputed every
//! forward pass from the refined probabilities and enter the loss as
//! constants: no gradient flows from the collaborative term back into the
//! refined head. Batch gradients are averaged in sample order, so runs are
//! bit-reproducible regardless of worker scheduling.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{Dataset, Sample, LABEL_UNKNOWN};
use crate::error::{Error, Result};
use crate::eval::{self, RecoveryQuality};
use crate::loss::{self, AslParams, LossWeights};
use crate::model::{self, ModelParams};
use crate::optim::{Ema, Optimizer};
use crate::recovery;
use crate::rng;

pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub ema: Ema,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(cfg, cfg.init_seed());
        let optimizer = Optimizer::new(&params, cfg);
        let ema = Ema::new(&params, cfg.ema_decay);
        Ok(Self { cfg: cfg.clone(), params, optimizer, ema, step: 0 })
    }

    /// Loss and gradients of one image under the current parameters.
    fn image_loss_and_grads(
        cfg: &RunConfig,
        params: &ModelParams,
        sample: &Sample,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let asl = AslParams::from_config(cfg);
        let weights = LossWeights::from_config(cfg);
        let mut tape = Tape::new();
        let bound = model::bind_model(&mut tape, params)?;
        let raw = model::bind_patches(&mut tape, sample, cfg)?;
        let graph = model::forward(&mut tape, &bound, raw, cfg)?;

        let loss_id = if cfg.collaborative {
            let refined_probs = tape.value(graph.main_probs).to_vec();
            let filled = recovery::fill_pseudo(&sample.observed, &refined_probs)?;
            let coarse = graph.coarse.ok_or_else(|| {
                Error::Internal("collaborative loss without a coarse head".to_string())
            })?;
            let coarse_probs = tape.sigmoid(coarse);
            loss::total_loss_graph(
                &mut tape,
                graph.main_probs,
                coarse_probs,
                &sample.observed,
                filled.values(),
                &weights,
                &asl,
            )?
        } else {
            let masked = loss::masked_asl_graph(&mut tape, graph.main_probs, &sample.observed, &asl)?;
            Ok::<_, Error>(tape.scale(masked, weights.lambda1))?
        };

        tape.check_finite(loss_id, &format!("loss of image {}", sample.id))?;
        tape.backward(loss_id)?;

        let mut grads = Vec::with_capacity(bound.ordered.len());
        for (&id, p) in bound.ordered.iter().zip(params.params()) {
            let g = tape.grad(id);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor '{}' (image {})",
                    p.name, sample.id
                )));
            }
            grads.push(g.to_vec());
        }
        Ok((tape.scalar_value(loss_id), grads))
    }

    /// One optimizer step over a batch: per-image losses and gradients are
    /// computed on independent tapes (in parallel), averaged in sample
    /// order, then applied, followed by the EMA update. Returns the mean
    /// loss.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".to_string()));
        }
        let cfg = &self.cfg;
        let params = &self.params;
        let per_image: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .map(|sample| Self::image_loss_and_grads(cfg, params, sample))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} at step {}", self.step)),
                other => other,
            })?;

        let scale = 1.0 / batch.len() as f64;
        let mut mean_loss = 0.0;
        let mut grads: Vec<Vec<f64>> =
            self.params.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        for (loss_value, image_grads) in &per_image {
            mean_loss += loss_value * scale;
            for (acc, g) in grads.iter_mut().zip(image_grads) {
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv * scale;
                }
            }
        }

        self.optimizer.apply(&mut self.params, &grads)?;
        self.ema.update(&self.params);
        self.step += 1;
        Ok(mean_loss)
    }

    /// The parameters used for evaluation: the EMA shadow when enabled,
    /// otherwise the raw training weights.
    pub fn eval_params(&self) -> Result<ModelParams> {
        if self.cfg.eval_with_ema {
            self.ema.snapshot(&self.params)
        } else {
            Ok(self.params.clone())
        }
    }
}

/// Per-class probabilities for a set of samples, evaluated in parallel.
pub fn predict(params: &ModelParams, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| model::infer(params, cfg, s))
        .collect()
}

fn full_truth(samples: &[Sample]) -> Result<Vec<Vec<u8>>> {
    samples
        .iter()
        .map(|s| {
            s.full_labels
                .clone()
                .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", s.id)))
        })
        .collect()
}

/// mAP of the model on fully labeled samples.
pub fn evaluate_map(
    params: &ModelParams,
    cfg: &RunConfig,
    samples: &[Sample],
) -> Result<(Vec<Option<f64>>, f64)> {
    let scores = predict(params, cfg, samples)?;
    let truth = full_truth(samples)?;
    let aps = eval::per_class_ap(&scores, &truth, cfg.num_classes);
    let map = eval::mean_average_precision(&aps)?;
    Ok((aps, map))
}

/// Recovery quality: refined probabilities at hidden entries scored
/// against the hidden ground truth. None when nothing is hidden or only
/// one class is present among hidden entries.
pub fn evaluate_recovery(
    params: &ModelParams,
    cfg: &RunConfig,
    samples: &[Sample],
    tau: f64,
) -> Result<Option<RecoveryQuality>> {
    let scores = predict(params, cfg, samples)?;
    let mut entries = Vec::new();
    for (s, probs) in samples.iter().zip(&scores) {
        let Some(full) = &s.full_labels else { continue };
        for (c, &obs) in s.observed.iter().enumerate() {
            if obs == LABEL_UNKNOWN {
                entries.push((probs[c], full[c] == 1));
            }
        }
    }
    if entries.is_empty() {
        return Ok(None);
    }
    Ok(eval::recovery_quality(&entries, tau))
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub map: Option<f64>,
    pub loss: Option<f64>,
    pub recovery_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    pub final_map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub recovery: Option<RecoveryQuality>,
    /// Chance-level mAP: mean positive prevalence over included classes.
    pub baseline_map: f64,
    pub test_truth: Vec<Vec<u8>>,
    pub eval_params: ModelParams,
}

impl ExperimentReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,map,loss,recovery_auc\n");
        let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.split,
                fmt(&r.map),
                fmt(&r.loss),
                fmt(&r.recovery_auc)
            ));
        }
        out
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        crate::fsio::atomic_write(path, self.metrics_csv().as_bytes())
    }

    pub fn first_train_loss(&self) -> Option<f64> {
        self.rows.iter().find_map(|r| if r.split == "train" { r.loss } else { None })
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| if r.split == "train" { r.loss } else { None })
    }
}

/// Trains on the first `num_train` samples and evaluates on the following
/// `num_test`. The dataset must already carry the observed labels to train
/// from (run the masker first). Test mAP uses the EMA weights per config;
/// recovery quality is measured on the training split's hidden entries
/// after the last epoch.
pub fn run_experiment(cfg: &RunConfig, dataset: &Dataset) -> Result<ExperimentReport> {
    cfg.validate()?;
    if dataset.len() < cfg.num_train + cfg.num_test {
        return Err(Error::Data(format!(
            "dataset has {} samples, need num_train + num_test = {}",
            dataset.len(),
            cfg.num_train + cfg.num_test
        )));
    }
    let train = &dataset.samples[..cfg.num_train];
    let test = &dataset.samples[cfg.num_train..cfg.num_train + cfg.num_test];

    let mut trainer = Trainer::new(cfg)?;
    let mut rows = Vec::new();

    let eval0 = trainer.eval_params()?;
    let (_, map0) = evaluate_map(&eval0, cfg, test)?;
    rows.push(MetricsRow { epoch: 0, split: "test", map: Some(map0), loss: None, recovery_auc: None });

    let mut shuffle_rng = rng::seeded(cfg.shuffle_seed());
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = trainer.train_step(&batch)?;
            loss_sum += loss * batch.len() as f64;
        }
        let epoch_loss = loss_sum / train.len() as f64;

        let eval_params = trainer.eval_params()?;
        let recovery_auc = if epoch == cfg.epochs {
            evaluate_recovery(&eval_params, cfg, train, 0.5)?.map(|q| q.auc)
        } else {
            None
        };
        rows.push(MetricsRow {
            epoch,
            split: "train",
            map: None,
            loss: Some(epoch_loss),
            recovery_auc,
        });
        let (_, test_map) = evaluate_map(&eval_params, cfg, test)?;
        rows.push(MetricsRow { epoch, split: "test", map: Some(test_map), loss: None, recovery_auc: None });
    }

    let eval_params = trainer.eval_params()?;
    let (per_class, final_map) = evaluate_map(&eval_params, cfg, test)?;
    let recovery = evaluate_recovery(&eval_params, cfg, train, 0.5)?;
    let test_truth = full_truth(test)?;
    let baseline_map = eval::prevalence_baseline(&test_truth, cfg.num_classes)?;

    Ok(ExperimentReport {
        rows,
        final_map,
        per_class_ap: per_class,
        recovery,
        baseline_map,
        test_truth,
        eval_params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub map: f64,
    pub recovery_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,map,recovery_auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.p,
                r.map,
                r.recovery_auc.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

/// Masks the dataset at each ratio (fresh seed per ratio derived from the
/// base seed), trains, evaluates; one table row per ratio, in input order.
pub fn sweep_p(cfg: &RunConfig, dataset: &Dataset, ratios: &[f64]) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(ratios.len());
    for &p in ratios {
        let mut run_cfg = cfg.clone();
        run_cfg.known_ratio = p;
        let mask_seed = rng::derive_seed_f(cfg.seed, "mask", p);
        let masked = crate::data::mask_labels(dataset, p, cfg.mask_strategy, mask_seed)?;
        let report = run_experiment(&run_cfg, &masked)?;
        rows.push(SweepRow {
            p,
            map: report.final_map,
            recovery_auc: report.recovery.map(|q| q.auc),
        });
    }
    Ok(SweepTable { rows })
}

/// The cumulative component grid: each row adds one component on top of
/// the previous row, ending at the full model.
pub const ABLATION_ROWS: [(&str, [bool; 5]); 6] = [
    // (label, [region, self_attention, sgfe, srfl, collaborative])
    ("baseline", [false, false, false, false, false]),
    ("+region", [true, false, false, false, false]),
    ("+sa", [true, true, false, false, false]),
    ("+sgfe", [true, true, true, false, false]),
    ("+srfl", [true, true, true, true, false]),
    ("+cl", [true, true, true, true, true]),
];

pub fn apply_toggles(cfg: &mut RunConfig, toggles: &[bool; 5]) {
    cfg.region_head = toggles[0];
    cfg.self_attention = toggles[1];
    cfg.sgfe = toggles[2];
    cfg.srfl = toggles[3];
    cfg.collaborative = toggles[4];
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub toggles: [bool; 5],
    /// mAP per swept ratio, in ratio order.
    pub maps: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub ratios: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,region,sa,sgfe,srfl,cl");
        for p in &self.ratios {
            out.push_str(&format!(",map_p{p}"));
        }
        out.push_str(",avg\n");
        for r in &self.rows {
            out.push_str(r.label);
            for t in r.toggles {
                out.push_str(if t { ",1" } else { ",0" });
            }
            for m in &r.maps {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.avg));
        }
        out
    }
}

/// Runs the six-row cumulative grid at each ratio. Every row at a given
/// ratio shares the same mask (seed derived from the base seed and the
/// ratio alone), so rows differ only in the enabled components.
pub fn ablate(cfg: &RunConfig, dataset: &Dataset, ratios: &[f64]) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, toggles) in ABLATION_ROWS {
        let mut maps = Vec::with_capacity(ratios.len());
        for &p in ratios {
            let mut run_cfg = cfg.clone();
            run_cfg.known_ratio = p;
            apply_toggles(&mut run_cfg, &toggles);
            let mask_seed = rng::derive_seed_f(cfg.seed, "mask", p);
            let masked = crate::data::mask_labels(dataset, p, cfg.mask_strategy, mask_seed)?;
            let report = run_experiment(&run_cfg, &masked)?;
            maps.push(report.final_map);
        }
        let avg = maps.iter().sum::<f64>() / maps.len().max(1) as f64;
        rows.push(AblationRow { label, toggles, maps, avg });
    }
    Ok(AblationTable { ratios: ratios.to_vec(), rows })
}
