//! `fit-prior`: fit the spherical code prior of a trained model.

use std::path::PathBuf;

use clap::Args;
use layerforge::authoring::{author_corpus, crop_augment_with, AugmentOptions, CorpusPreset};
use layerforge::prior::{collect_codes, fit_prior, prior_check, GaussianCodePrior, PriorCheck};
use layerforge::vae::{checkpoint, derive_seed};
use layerforge::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::author::load_layer_corpus;
use crate::runlog::{self, config_error, Context};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FitPriorArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,

    /// Corpus the model was trained on.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Output directory for model.ckpt, prior_report.json and run.json.
    #[arg(long)]
    pub out: PathBuf,

    /// Crops encoded to fit the prior.
    #[arg(long, default_value_t = 500)]
    pub patches: usize,

    /// Held-out crops, cut from freshly authored images, for the sanity check.
    #[arg(long, default_value_t = 1000)]
    pub heldout: usize,

    /// Random code vectors for the sanity check.
    #[arg(long, default_value_t = 1000)]
    pub random: usize,

    /// Standard deviation of the random codes.
    #[arg(long, default_value_t = 3.0)]
    pub random_scale: f64,

    /// Seed for crop sampling and the random codes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct Report<'a> {
    prior: &'a GaussianCodePrior,
    check: PriorCheck,
    in_distribution_below_random: bool,
}

fn crops(images: &[Tensor], masks: &[Option<Tensor>], patch: usize, count: usize, seed: u64) -> anyhow::Result<Vec<Tensor>> {
    let opts = AugmentOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let k = i % images.len();
            Ok(crop_augment_with(&images[k], masks[k].as_ref(), patch, &opts, &mut rng)?)
        })
        .collect()
}

pub fn run(args: FitPriorArgs, ctx: &Context) -> anyhow::Result<()> {
    if args.patches < 1 || args.heldout < 2 || args.random < 2 {
        return Err(config_error("need at least 1 fitting patch and 2 held-out and random samples").into());
    }
    let mut ckpt = checkpoint::load(&args.model)?;
    let (kind, preset, corpus_seed, images, masks) = load_layer_corpus(&args.corpus)?;
    if kind.name() != ckpt.model.meta.layer {
        return Err(config_error(format!("corpus holds {} images but the model is a {} model", kind.name(), ckpt.model.meta.layer)).into());
    }
    runlog::create_dir(&args.out)?;
    runlog::write(&args.out.join("run.json"), ctx, &args)?;

    let patch = ckpt.model.arch.patch_size;
    let fit_set = crops(&images, &masks, patch, args.patches, derive_seed(&[args.seed, 1]))?;
    let samples = collect_codes(&ckpt.model, &fit_set)?;
    let prior = fit_prior(&samples)?;
    log::info!("prior: dimension {}, variance {:.6}, {} code pixels", prior.dim, prior.variance, prior.samples);

    // Fresh images from the same generator, never seen in training.
    let fresh_preset = CorpusPreset {
        albedo_count: preset.albedo_count.min(20),
        shading_count: preset.shading_count.min(20),
        detail_count: preset.detail_count.min(20),
        ..preset
    };
    let fresh = author_corpus(kind, &fresh_preset, derive_seed(&[corpus_seed, 0x401D]))?;
    let fresh_images: Vec<Tensor> = fresh.iter().map(|i| i.image.clone()).collect();
    let fresh_masks: Vec<Option<Tensor>> = fresh.iter().map(|i| i.mask.clone()).collect();
    let heldout = crops(&fresh_images, &fresh_masks, patch, args.heldout, derive_seed(&[args.seed, 2]))?;
    let check = prior_check(&ckpt.model, &prior, &heldout, args.random, args.random_scale as layerforge::Real, derive_seed(&[args.seed, 3]))?;
    log::info!(
        "held-out NLL {:.3} ± {:.3}, random NLL {:.3} ± {:.3}, margin {:.1} standard errors",
        check.in_distribution.mean,
        check.in_distribution.standard_error,
        check.random.mean,
        check.random.standard_error,
        check.margin_in_standard_errors
    );

    ckpt.model.prior = Some(prior);
    let report = Report {
        prior: ckpt.model.prior.as_ref().unwrap(),
        check,
        in_distribution_below_random: check.in_distribution.mean < check.random.mean,
    };
    runlog::write_json(&args.out.join("prior_report.json"), &report)?;
    let optimizer = ckpt.optimizer.as_ref().map(|(s, c)| (s.as_slice(), c));
    checkpoint::save(&args.out.join("model.ckpt"), &ckpt.model, optimizer)?;
    Ok(())
}
