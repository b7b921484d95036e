//! Batch driver: dataset generation, masking, training, evaluation,
//! known-ratio sweeps, component ablations, gradient checks, and
//! attention / pseudo-label dumps.
//!
//! Every run config field has a flag of the same name and a `COLABEL_*`
//! environment variable; flags and env vars override a `--config` JSON
//! file. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error,
//! 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use colabel::config::{Preset, RunConfig};
use colabel::data::{self, Dataset, Manifest, MaskRecord, SyntheticSpec};
use colabel::error::{Error, Result};
use colabel::model::{self, ModelParams};
use colabel::recovery;
use colabel::rng;
use colabel::trainer;
use colabel::{checkpoint, eval};

#[derive(Parser)]
#[command(
    name = "colabel",
    version,
    about = "Collaborative semantic feature learning and label recovery for \
             multi-label recognition with incomplete labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (num_train + num_test images).
    GenData(GenDataArgs),
    /// Hide labels of a dataset at a known-label ratio.
    Mask(MaskArgs),
    /// Train on a dataset and evaluate on its held-out tail.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate across a list of known-label ratios.
    SweepP(SweepArgs),
    /// Run the six-row cumulative component grid.
    Ablate(AblateArgs),
    /// Check tape gradients of the full loss graph against finite
    /// differences.
    Gradcheck(GradcheckArgs),
    /// Export per-image attention maps from a checkpoint.
    DumpAttn(DumpAttnArgs),
    /// Export pseudo-label fills from a checkpoint.
    DumpPseudo(DumpPseudoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

/// Run-config overrides. Every field mirrors its config name; unset flags
/// keep the config-file or built-in default.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file mirroring the run-config fields.
    #[arg(long, env = "COLABEL_CONFIG")]
    config: Option<PathBuf>,
    /// Named parameter preset: coco, voc, or nuswide.
    #[arg(long, env = "COLABEL_PRESET")]
    preset: Option<String>,

    /// Raw patch dimension. [default: 16]
    #[arg(long, env = "COLABEL_D_RAW")]
    d_raw: Option<usize>,
    /// Visual feature dimension. [default: 32]
    #[arg(long, env = "COLABEL_D_V")]
    d_v: Option<usize>,
    /// Label embedding dimension. [default: 16]
    #[arg(long, env = "COLABEL_D_T")]
    d_t: Option<usize>,
    /// Joint bilinear embedding dimension. [default: 32]
    #[arg(long = "d-1", env = "COLABEL_D_1")]
    d_1: Option<usize>,
    /// Bilinear output dimension. [default: 16]
    #[arg(long = "d-2", env = "COLABEL_D_2")]
    d_2: Option<usize>,
    /// Patches per image. [default: 16]
    #[arg(long, env = "COLABEL_PATCHES")]
    patches: Option<usize>,
    /// Number of classes. [default: 10]
    #[arg(long, env = "COLABEL_NUM_CLASSES")]
    num_classes: Option<usize>,
    /// Attention softmax temperature. [default: 1]
    #[arg(long, env = "COLABEL_TEMPERATURE")]
    temperature: Option<f64>,
    /// Positive-branch focusing exponent. [default: 0]
    #[arg(long, env = "COLABEL_GAMMA_POS")]
    gamma_pos: Option<f64>,
    /// Negative-branch focusing exponent. [default: 2]
    #[arg(long, env = "COLABEL_GAMMA_NEG")]
    gamma_neg: Option<f64>,
    /// Negative-probability shift. [default: 0.05]
    #[arg(long, env = "COLABEL_CLIP_C")]
    clip_c: Option<f64>,
    /// Weight of the known-label refined term. [default: 1]
    #[arg(long, env = "COLABEL_LAMBDA1")]
    lambda1: Option<f64>,
    /// Weight of the pseudo-label coarse term. [default: 0.8]
    #[arg(long, env = "COLABEL_LAMBDA2")]
    lambda2: Option<f64>,
    /// Known-label ratio. [default: 0.5]
    #[arg(long = "p", env = "COLABEL_P")]
    p: Option<f64>,
    /// Masking strategy: per_pair, per_image, or global. [default: per_pair]
    #[arg(long, env = "COLABEL_MASK_STRATEGY")]
    mask_strategy: Option<String>,
    /// Training batch size. [default: 8]
    #[arg(long, env = "COLABEL_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Training epochs. [default: 40]
    #[arg(long, env = "COLABEL_EPOCHS")]
    epochs: Option<usize>,
    /// Optimizer learning rate. [default: 0.005]
    #[arg(long, env = "COLABEL_LEARNING_RATE")]
    learning_rate: Option<f64>,
    /// Decoupled weight decay. [default: 0.0001]
    #[arg(long, env = "COLABEL_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    /// First-moment decay. [default: 0.9]
    #[arg(long, env = "COLABEL_BETA1")]
    beta1: Option<f64>,
    /// Second-moment decay. [default: 0.999]
    #[arg(long, env = "COLABEL_BETA2")]
    beta2: Option<f64>,
    /// Optimizer epsilon. [default: 1e-8]
    #[arg(long, env = "COLABEL_ADAM_EPS")]
    adam_eps: Option<f64>,
    /// Parameter EMA decay. [default: 0.9997]
    #[arg(long, env = "COLABEL_EMA_DECAY")]
    ema_decay: Option<f64>,
    /// Evaluate with EMA weights. [default: on]
    #[arg(long, env = "COLABEL_EVAL_WITH_EMA")]
    eval_with_ema: Option<OnOff>,
    /// Training images. [default: 2000]
    #[arg(long, env = "COLABEL_NUM_TRAIN")]
    num_train: Option<usize>,
    /// Held-out test images. [default: 500]
    #[arg(long, env = "COLABEL_NUM_TEST")]
    num_test: Option<usize>,
    /// Mean object count per image. [default: 2.9]
    #[arg(long, env = "COLABEL_OBJECTS_PER_IMAGE")]
    objects_per_image: Option<f64>,
    /// Patch noise level. [default: 0.35]
    #[arg(long, env = "COLABEL_NOISE_SIGMA")]
    noise_sigma: Option<f64>,
    /// Base seed; purpose-specific streams derive from it. [default: 17]
    #[arg(long, env = "COLABEL_SEED")]
    seed: Option<u64>,
    /// Explicit data-generation seed (otherwise derived).
    #[arg(long, env = "COLABEL_DATA_SEED")]
    data_seed: Option<u64>,
    /// Explicit masking seed (otherwise derived).
    #[arg(long, env = "COLABEL_MASK_SEED")]
    mask_seed: Option<u64>,
    /// Explicit init seed (otherwise derived).
    #[arg(long, env = "COLABEL_INIT_SEED")]
    init_seed: Option<u64>,
    /// Explicit shuffle seed (otherwise derived).
    #[arg(long, env = "COLABEL_SHUFFLE_SEED")]
    shuffle_seed: Option<u64>,
    /// Region score aggregation head. [default: on]
    #[arg(long = "toggle-region", env = "COLABEL_TOGGLE_REGION")]
    toggle_region: Option<OnOff>,
    /// Self-attention layer in the encoder. [default: on]
    #[arg(long = "toggle-sa", env = "COLABEL_TOGGLE_SA")]
    toggle_sa: Option<OnOff>,
    /// Semantic-guided feature enhancement. [default: on]
    #[arg(long = "toggle-sgfe", env = "COLABEL_TOGGLE_SGFE")]
    toggle_sgfe: Option<OnOff>,
    /// Semantic-related feature learning. [default: on]
    #[arg(long = "toggle-srfl", env = "COLABEL_TOGGLE_SRFL")]
    toggle_srfl: Option<OnOff>,
    /// Collaborative pseudo-label term. [default: on]
    #[arg(long = "toggle-cl", env = "COLABEL_TOGGLE_CL")]
    toggle_cl: Option<OnOff>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        self.resolve_from(RunConfig::default())
    }

    fn resolve_from(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => base,
        };
        if let Some(name) = &self.preset {
            let preset: Preset = name.parse()?;
            cfg.apply_preset(preset);
        }
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        overlay!(
            d_raw, d_v, d_t, d_1, d_2, patches, num_classes, temperature, gamma_pos,
            gamma_neg, clip_c, lambda1, lambda2, batch_size, epochs, learning_rate,
            weight_decay, beta1, beta2, adam_eps, ema_decay, num_train, num_test,
            objects_per_image, noise_sigma, seed,
        );
        if let Some(v) = self.p {
            cfg.known_ratio = v;
        }
        if let Some(s) = &self.mask_strategy {
            cfg.mask_strategy = s.parse()?;
        }
        if let Some(v) = self.eval_with_ema {
            cfg.eval_with_ema = v.as_bool();
        }
        if let Some(v) = self.data_seed {
            cfg.data_seed = Some(v);
        }
        if let Some(v) = self.mask_seed {
            cfg.mask_seed = Some(v);
        }
        if let Some(v) = self.init_seed {
            cfg.init_seed = Some(v);
        }
        if let Some(v) = self.shuffle_seed {
            cfg.shuffle_seed = Some(v);
        }
        if let Some(v) = self.toggle_region {
            cfg.region_head = v.as_bool();
        }
        if let Some(v) = self.toggle_sa {
            cfg.self_attention = v.as_bool();
        }
        if let Some(v) = self.toggle_sgfe {
            cfg.sgfe = v.as_bool();
        }
        if let Some(v) = self.toggle_srfl {
            cfg.srfl = v.as_bool();
        }
        if let Some(v) = self.toggle_cl {
            cfg.collaborative = v.as_bool();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Output dataset path (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Input dataset with full labels.
    #[arg(long)]
    data: PathBuf,
    /// Output dataset path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Training dataset (first num_train samples train, the next
    /// num_test evaluate).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the resolved config, metrics, per-class AP,
    /// and checkpoint.
    #[arg(long, default_value = "colabel-run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Dataset to evaluate on (all samples).
    #[arg(long)]
    data: PathBuf,
    /// Parameter checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for the per-class AP dump.
    #[arg(long, default_value = "colabel-eval")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Fully labeled dataset; each ratio is masked fresh from it.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "colabel-sweep")]
    out: PathBuf,
    /// Comma-separated known-label ratios.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", value_delimiter = ',')]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Fully labeled dataset; each ratio is masked fresh from it.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "colabel-ablation")]
    out: PathBuf,
    /// Comma-separated known-label ratios of the grid columns.
    #[arg(long, default_value = "0.1,0.5,0.9", value_delimiter = ',')]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Number of seeded instances to check.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum relative error accepted.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct DumpAttnArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Dataset with the samples to visualize.
    #[arg(long)]
    data: PathBuf,
    /// Parameter checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory; one attn_<image-id>.csv per sample.
    #[arg(long, default_value = "colabel-attn")]
    out: PathBuf,
    /// How many samples (from the front of the dataset).
    #[arg(long, default_value_t = 3)]
    count: usize,
}

#[derive(Args)]
struct DumpPseudoArgs {
    #[command(flatten)]
    overrides: ConfigArgs,
    /// Dataset with the samples to audit.
    #[arg(long)]
    data: PathBuf,
    /// Parameter checkpoint to load.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "pseudo_labels.csv")]
    out: PathBuf,
    /// How many samples (from the front of the dataset).
    #[arg(long, default_value_t = 16)]
    count: usize,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = data::read_dataset(path)?;
    if ds.is_empty() {
        return Err(Error::Data(format!("dataset {} is empty", path.display())));
    }
    Ok(ds)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<ModelParams> {
    let mut params = ModelParams::init(cfg, cfg.init_seed());
    checkpoint::load_into(&mut params, path)?;
    Ok(params)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let spec = SyntheticSpec::from_run_config(&cfg);
    let ds = data::generate(&spec)?;
    data::write_dataset(&ds, &args.out)?;
    data::write_manifest(&args.out, &Manifest { generator: Some(spec), masking: None })?;
    println!(
        "wrote {} images ({} classes, {} patches x {}) to {}",
        ds.len(),
        ds.num_classes,
        ds.patches_per_image,
        ds.raw_dim,
        args.out.display()
    );
    Ok(())
}

fn cmd_mask(args: MaskArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    let seed = cfg
        .mask_seed
        .unwrap_or_else(|| rng::derive_seed_f(cfg.seed, "mask", cfg.known_ratio));
    let masked = data::mask_labels(&ds, cfg.known_ratio, cfg.mask_strategy, seed)?;
    data::write_dataset(&masked, &args.out)?;
    let generator = data::read_manifest(&args.data)?.and_then(|m| m.generator);
    data::write_manifest(
        &args.out,
        &Manifest {
            generator,
            masking: Some(MaskRecord {
                known_ratio: cfg.known_ratio,
                strategy: cfg.mask_strategy,
                seed,
            }),
        },
    )?;
    let total = masked.len() * masked.num_classes;
    let known: usize = masked
        .samples
        .iter()
        .map(|s| s.observed.iter().filter(|&&o| o != data::LABEL_UNKNOWN).count())
        .sum();
    println!(
        "masked {} at p={} ({}): {known}/{total} labels known",
        args.out.display(),
        cfg.known_ratio,
        cfg.mask_strategy
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.to_json_file(&args.out.join("resolved_config.json"))?;
    let report = trainer::run_experiment(&cfg, &ds)?;
    report.write_metrics_csv(&args.out.join("metrics.csv"))?;
    eval::write_per_class_ap_csv(
        &report.per_class_ap,
        &report.test_truth,
        &args.out.join("per_class_ap.csv"),
    )?;
    checkpoint::save(&report.eval_params, &args.out.join("checkpoint.bin"))?;
    println!("final mAP: {}", report.final_map);
    println!("chance-level mAP: {}", report.baseline_map);
    match report.recovery {
        Some(q) => println!("recovery AUC on hidden train labels: {}", q.auc),
        None => println!("recovery AUC: undefined (no hidden labels)"),
    }
    println!("run artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    let params = load_checkpoint(&cfg, &args.checkpoint)?;
    let (aps, map) = trainer::evaluate_map(&params, &cfg, &ds.samples)?;
    std::fs::create_dir_all(&args.out)?;
    let truth: Vec<Vec<u8>> = ds
        .samples
        .iter()
        .map(|s| s.full_labels.clone().unwrap_or_default())
        .collect();
    eval::write_per_class_ap_csv(&aps, &truth, &args.out.join("per_class_ap.csv"))?;
    println!("mAP over {} images: {map}", ds.len());
    if let Some(q) = trainer::evaluate_recovery(&params, &cfg, &ds.samples, 0.5)? {
        println!("recovery AUC on hidden labels: {}", q.auc);
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    if args.ratios.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio".to_string()));
    }
    let ds = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.to_json_file(&args.out.join("resolved_config.json"))?;
    let table = trainer::sweep_p(&cfg, &ds, &args.ratios)?;
    colabel::fsio::atomic_write(&args.out.join("sweep.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    if args.ratios.is_empty() {
        return Err(Error::Config("ablation needs at least one ratio".to_string()));
    }
    let ds = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;
    cfg.to_json_file(&args.out.join("resolved_config.json"))?;
    let table = trainer::ablate(&cfg, &ds, &args.ratios)?;
    colabel::fsio::atomic_write(&args.out.join("ablation.csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    // Gradient checks default to a small instance; explicit flags still
    // override.
    let base = RunConfig {
        d_raw: 5,
        d_v: 8,
        d_t: 6,
        d_1: 7,
        d_2: 5,
        patches: 4,
        num_classes: 3,
        ..RunConfig::default()
    };
    let cfg = args.overrides.resolve_from(base)?;
    let mut worst = 0.0f64;
    let mut failed = 0usize;
    for i in 0..args.instances {
        let seed = rng::derive_seed(cfg.seed, &format!("gradcheck-{i}"));
        let report = model::full_loss_gradcheck(&cfg, seed, args.step, args.tolerance)?;
        let status = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "instance {i}: max rel err {:.3e} over {} entries ({status})",
            report.max_rel_err, report.entries_checked
        );
        worst = worst.max(report.max_rel_err);
        failed += usize::from(!report.passed());
    }
    println!(
        "gradcheck: {}/{} instances passed, worst rel err {worst:.3e} (tolerance {:.1e})",
        args.instances - failed,
        args.instances,
        args.tolerance
    );
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "gradient check failed on {failed} of {} instances",
            args.instances
        )));
    }
    Ok(())
}

fn cmd_dump_attn(args: DumpAttnArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    if !cfg.sgfe || !cfg.region_head {
        return Err(Error::Config(
            "attention maps require the region head and the enhancement stage".to_string(),
        ));
    }
    let ds = load_dataset(&args.data)?;
    let params = load_checkpoint(&cfg, &args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let n = args.count.min(ds.len());
    for sample in &ds.samples[..n] {
        let artifacts = model::forward_artifacts(&params, &cfg, sample)?;
        let maps = artifacts.attention.ok_or_else(|| {
            Error::Internal("enhancement stage produced no attention maps".to_string())
        })?;
        let path = args.out.join(format!("attn_{}.csv", sample.id));
        maps.write_csv(&path)?;
    }
    println!("wrote {n} attention maps to {}", args.out.display());
    Ok(())
}

fn cmd_dump_pseudo(args: DumpPseudoArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    let ds = load_dataset(&args.data)?;
    let params = load_checkpoint(&cfg, &args.checkpoint)?;
    let n = args.count.min(ds.len());
    let mut rows = Vec::with_capacity(n);
    for sample in &ds.samples[..n] {
        let artifacts = model::forward_artifacts(&params, &cfg, sample)?;
        let filled = recovery::fill_pseudo(&sample.observed, &artifacts.bundle.refined_probs)?;
        rows.push((sample.id.clone(), sample.observed.clone(), filled));
    }
    recovery::write_pseudo_csv(&rows, &args.out)?;
    println!("wrote pseudo-label audit for {n} images to {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Mask(args) => cmd_mask(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepP(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::DumpAttn(args) => cmd_dump_attn(args),
        Command::DumpPseudo(args) => cmd_dump_pseudo(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
