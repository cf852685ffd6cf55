//! `train`: fit a layer VAE to crops of an authored corpus.

use std::path::PathBuf;

use clap::Args;
use layerforge::authoring::{AugmentOptions, CropSource};
use layerforge::vae::{checkpoint, Domain, LayerModel, ModelMeta, TrainConfig, Trainer, VaeArch};
use layerforge::Real;
use serde::{Deserialize, Serialize};

use crate::author::load_layer_corpus;
use crate::runlog::{self, config_error, Context};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Layer the corpus holds: albedo, shading or detail.
    #[arg(long, value_parser = ["albedo", "shading", "detail"])]
    pub layer: String,

    /// Directory written by `author`.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Output directory for model.ckpt, loss.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,

    /// Selects the default architecture: paper (authored) or desk (authored-desk).
    #[arg(long, default_value = "desk")]
    pub preset: String,

    /// Architecture by name (vae-1, vae-2, cvae, lcvae, authored, authored-desk).
    #[arg(long)]
    pub arch: Option<String>,

    /// Passes over the corpus images [default: 25].
    #[arg(long)]
    pub epochs: Option<u64>,

    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    pub max_iterations: Option<u64>,

    /// Patches per step [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Initial Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,

    /// Seed for initialization, batch order, crops and noise [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,

    /// Training domain [default: log].
    #[arg(long, value_parser = ["log", "linear"])]
    pub domain: Option<String>,

    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    arch: &'a VaeArch,
    config: &'a TrainConfig,
    start_iteration: u64,
    end_iteration: u64,
    corpus_images: usize,
}

pub fn default_arch(preset: &str) -> anyhow::Result<VaeArch> {
    match preset {
        "paper" => Ok(VaeArch::authored()),
        "desk" => Ok(VaeArch::authored_desk()),
        other => Err(config_error(format!("unknown preset {other:?}")).into()),
    }
}

pub fn parse_domain(s: &str) -> anyhow::Result<Domain> {
    match s {
        "log" => Ok(Domain::default()),
        "linear" => Ok(Domain::Linear),
        other => Err(config_error(format!("unknown domain {other:?}")).into()),
    }
}

fn apply_overrides(config: &mut TrainConfig, args: &TrainArgs) -> anyhow::Result<()> {
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if args.max_iterations.is_some() {
        config.max_iterations = args.max_iterations;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.schedule.initial = lr as Real;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = &args.domain {
        config.domain = parse_domain(d)?;
    }
    config.validate()?;
    Ok(())
}

pub fn run(args: TrainArgs, ctx: &Context) -> anyhow::Result<()> {
    let (kind, _, _, images, masks) = load_layer_corpus(&args.corpus)?;
    if kind.name() != args.layer {
        return Err(config_error(format!("{} holds a {} corpus, not {}", args.corpus.display(), kind.name(), args.layer)).into());
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            let (optimizer, mut config) = ckpt
                .optimizer
                .ok_or_else(|| config_error(format!("{} has no optimizer state to resume from", path.display())))?;
            if ckpt.model.meta.layer != args.layer {
                return Err(config_error(format!("{} is a {} model", path.display(), ckpt.model.meta.layer)).into());
            }
            if args.arch.is_some() {
                return Err(config_error("--arch cannot change the architecture of a resumed run").into());
            }
            apply_overrides(&mut config, &args)?;
            if config.domain != ckpt.model.meta.domain {
                return Err(config_error("--domain cannot change the domain of a resumed run").into());
            }
            Trainer::resume(ckpt.model, optimizer, config)?
        }
        None => {
            let arch = match &args.arch {
                Some(name) => VaeArch::by_name(name)?,
                None => default_arch(&args.preset)?,
            };
            let mut config = TrainConfig::default();
            apply_overrides(&mut config, &args)?;
            let meta = ModelMeta {
                layer: args.layer.clone(),
                dataset: args.corpus.display().to_string(),
                seed: config.seed,
                iterations: 0,
                domain: config.domain,
            };
            Trainer::new(LayerModel::init(arch, meta)?, config)?
        }
    };

    let patch = trainer.model.arch.patch_size;
    let source = CropSource { images, masks, patch, options: AugmentOptions::default() };
    let start = trainer.iteration;
    let end = trainer.total_iterations(source.images.len());
    runlog::create_dir(&args.out)?;
    let resolved = Resolved {
        arch: &trainer.model.arch,
        config: &trainer.config,
        start_iteration: start,
        end_iteration: end,
        corpus_images: source.images.len(),
    };
    runlog::write(&args.out.join("run.json"), ctx, &resolved)?;
    log::info!("training {} from iteration {start} to {end}", trainer.model.arch.name);

    let mut csv = csv::Writer::from_path(args.out.join("loss.csv"))?;
    let mut last_log = start;
    let outcome = loop {
        if trainer.iteration >= end {
            break Ok(());
        }
        match trainer.step(&source) {
            Ok(r) => {
                csv.serialize(r)?;
                if r.iteration + 1 == end || r.iteration >= last_log + 50 {
                    last_log = r.iteration;
                    log::info!(
                        "iteration {} loss {:.4} (residual {:.4}, kl {:.4}, kl weight {:.3})",
                        r.iteration,
                        r.total,
                        r.residual,
                        r.kl,
                        r.kl_weight
                    );
                }
            }
            Err(e) => break Err(e),
        }
    };
    csv.flush()?;
    match outcome {
        Ok(()) => {
            checkpoint::save(&args.out.join("model.ckpt"), &trainer.model, Some((&trainer.optimizer, &trainer.config)))?;
            log::info!("wrote {}", args.out.join("model.ckpt").display());
            Ok(())
        }
        Err(e) => {
            let path = args.out.join("model.last-good.ckpt");
            checkpoint::save(&path, &trainer.model, Some((&trainer.optimizer, &trainer.config)))?;
            log::error!("training stopped at iteration {}; last good state saved to {}", trainer.iteration, path.display());
            Err(e.into())
        }
    }
}
