//! `bench-vae`: held-out reconstruction error of the four VAE kinds.

use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use layerforge::bench::{bench_vae, box_downscale, dead_leaves_patches, most_textured, photo_patches, BenchReport};
use layerforge::imageio::read_png;
use layerforge::vae::{derive_seed, TrainConfig, VaeArch};
use layerforge::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::runlog::{self, config_error, Context};
use crate::train::parse_domain;

/// Expected ranking, best first.
pub const ORDER: [&str; 4] = ["lcvae", "cvae", "vae-2", "vae-1"];

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BenchArgs {
    /// Directory of photographs (PNG) to cut patches from.
    #[arg(long, conflicts_with = "dead_leaves", required_unless_present = "dead_leaves")]
    pub corpus: Option<PathBuf>,

    /// Use synthetic dead-leaves patches instead of photographs.
    #[arg(long)]
    pub dead_leaves: bool,

    /// Output directory for report.json and run.json.
    #[arg(long)]
    pub out: PathBuf,

    /// Architecture sizes: desk (32x32 patches) or paper (64x64).
    #[arg(long, default_value = "desk")]
    pub preset: String,

    /// Comma-separated subset of vae-1, vae-2, cvae, lcvae.
    #[arg(long, value_delimiter = ',', default_values_t = ORDER.map(String::from))]
    pub archs: Vec<String>,

    /// Training patches.
    #[arg(long, default_value_t = 2000)]
    pub patches: usize,

    /// Held-out patches.
    #[arg(long, default_value_t = 200)]
    pub heldout: usize,

    /// Right-hand share of each photograph reserved for held-out patches.
    #[arg(long, default_value_t = 0.25)]
    pub heldout_fraction: f64,

    /// Held-out candidates drawn per kept patch; the most textured are kept
    /// so flat background does not dominate the score.
    #[arg(long, default_value_t = 4)]
    pub heldout_candidates: usize,

    /// Block-average photographs by this factor before cutting patches.
    #[arg(long, default_value_t = 2)]
    pub downscale: usize,

    /// Passes over the training patches per model.
    #[arg(long, default_value_t = 10)]
    pub epochs: u64,

    /// Stop each model after this many optimizer steps.
    #[arg(long)]
    pub max_iterations: Option<u64>,

    /// Patches per step.
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,

    /// Initial Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Seed for patch sampling, initialization and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Domain the models are trained and scored in.
    #[arg(long, default_value = "linear", value_parser = ["log", "linear"])]
    pub domain: String,
}

#[derive(Serialize)]
struct Output<'a> {
    corpus: String,
    bench: &'a BenchReport,
    expected_order: [&'static str; 4],
    order_holds: Option<bool>,
}

fn load_photos(dir: &std::path::Path, factor: usize) -> anyhow::Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .and_then(|d| d.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>())
        .with_context(|| format!("listing {}", dir.display()))?;
    paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    paths.sort();
    if paths.is_empty() {
        return Err(config_error(format!("{} contains no PNG photographs", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            let img = read_png(p)?;
            Ok(if factor > 1 { box_downscale(&img, factor)? } else { img })
        })
        .collect()
}

pub fn run(args: BenchArgs, ctx: &Context) -> anyhow::Result<()> {
    let pool = match args.preset.as_str() {
        "desk" => VaeArch::bench_desk(),
        "paper" => VaeArch::bench_paper(),
        other => return Err(config_error(format!("unknown preset {other:?}")).into()),
    };
    let archs = args
        .archs
        .iter()
        .map(|n| pool.iter().find(|a| &a.name == n).cloned().ok_or_else(|| config_error(format!("unknown architecture {n:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let patch = archs.first().ok_or_else(|| config_error("no architectures selected"))?.patch_size;
    let mut config = TrainConfig {
        epochs: args.epochs,
        max_iterations: args.max_iterations,
        batch_size: args.batch_size,
        seed: args.seed,
        domain: parse_domain(&args.domain)?,
        ..TrainConfig::default()
    };
    config.schedule.initial = args.lr as Real;
    config.validate()?;
    runlog::create_dir(&args.out)?;
    runlog::write(&args.out.join("run.json"), ctx, &config)?;

    if args.heldout_candidates == 0 {
        return Err(config_error("heldout-candidates must be at least 1").into());
    }
    let candidates = args.heldout * args.heldout_candidates;
    let (train, candidates, corpus) = match &args.corpus {
        Some(dir) => {
            let photos = load_photos(dir, args.downscale)?;
            let (t, h) =
                photo_patches(&photos, patch, args.patches, candidates, args.heldout_fraction as Real, args.seed)?;
            (t, h, format!("{} photographs from {}", photos.len(), dir.display()))
        }
        None => (
            dead_leaves_patches(args.patches, patch, derive_seed(&[args.seed, 1])),
            dead_leaves_patches(candidates, patch, derive_seed(&[args.seed, 2])),
            "dead leaves".to_string(),
        ),
    };
    let heldout = most_textured(candidates, args.heldout)?;
    let report = bench_vae(&archs, &train, &heldout, &config)?;
    for e in &report.entries {
        log::info!("{:6} params {:8} code {:5} held-out L2 {:.6}", e.name, e.parameters, e.code_size, e.heldout_l2);
    }
    let all = ORDER.iter().all(|n| report.entry(n).is_some());
    let output = Output { corpus, bench: &report, expected_order: ORDER, order_holds: all.then(|| report.strictly_ordered(&ORDER)) };
    runlog::write_json(&args.out.join("report.json"), &output)?;
    Ok(())
}
