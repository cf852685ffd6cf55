//! `decompose`: explain an image as a product of layers.

use std::path::PathBuf;

use clap::Args;
use layerforge::decompose::{decompose, Breakdown, DecompositionSpec, InitMode, Layer, TraceEntry};
use layerforge::imageio::{exposure_normalize, read_image, write_png16, write_rawf};
use layerforge::vae::{checkpoint, LayerModel};
use layerforge::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::runlog::{self, config_error, Context};

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DecomposeArgs {
    /// Linear input image (.png or .rawf).
    #[arg(long)]
    pub image: PathBuf,

    /// Comma-separated checkpoints, one per layer of the preset, in order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,

    /// Layers and weights: as (albedo, shading), sd (shading, detail) or
    /// asd (albedo, shading, detail).
    #[arg(long, default_value = "as")]
    pub preset: String,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Optimizer steps [default: 2000].
    #[arg(long)]
    pub steps: Option<usize>,

    /// Code prior weight [default: 1e-4].
    #[arg(long)]
    pub lp: Option<f64>,

    /// Correlation weight [default: 1e4].
    #[arg(long)]
    pub lc: Option<f64>,

    /// Residual weight [default: 100, or 1e4 for asd].
    #[arg(long)]
    pub lres: Option<f64>,

    /// Adam learning rate on the codes [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,

    /// Side of the correlation tiles [default: 8].
    #[arg(long)]
    pub patch: Option<usize>,

    /// Weight of the low-frequency constancy penalty on the detail layer.
    #[arg(long)]
    pub detail_dc: Option<f64>,

    /// Spread the final residual over the layers so their product is the input.
    #[arg(long)]
    pub exact_sum: bool,

    /// Subtract the prior term, rewarding unlikely codes.
    #[arg(long)]
    pub paper_literal_sign: bool,

    /// Initialization [default: smoothed].
    #[arg(long, value_parser = ["smoothed", "shading-from-image"])]
    pub init: Option<String>,
}

#[derive(Serialize)]
struct Trace<'a> {
    preset: &'a str,
    layers: &'a [&'static str],
    spec: &'a DecompositionSpec,
    converged: bool,
    best_step: usize,
    initial: Breakdown,
    best: Breakdown,
    trace: &'a [TraceEntry],
}

pub fn resolve_spec(args: &DecomposeArgs) -> anyhow::Result<(DecompositionSpec, Vec<&'static str>)> {
    let (mut spec, names) = DecompositionSpec::preset(&args.preset)?;
    if let Some(s) = args.steps {
        spec.steps = s;
    }
    if let Some(v) = args.lp {
        spec.weights.prior = v as Real;
    }
    if let Some(v) = args.lc {
        spec.weights.correlation = v as Real;
    }
    if let Some(v) = args.lres {
        spec.weights.residual = v as Real;
    }
    if let Some(v) = args.lr {
        spec.lr = v as Real;
    }
    if let Some(p) = args.patch {
        spec.patch = p;
    }
    if let Some(v) = args.detail_dc {
        spec.weights.detail_dc = Some(v as Real);
    }
    spec.exact_sum = args.exact_sum;
    spec.paper_literal_sign = args.paper_literal_sign;
    if let Some(init) = &args.init {
        spec.init = match init.as_str() {
            "smoothed" => InitMode::Smoothed,
            "shading-from-image" => InitMode::ShadingFromImage,
            other => return Err(config_error(format!("unknown initialization {other:?}")).into()),
        };
    }
    spec.validate(names.len())?;
    Ok((spec, names))
}

pub fn run(args: DecomposeArgs, ctx: &Context) -> anyhow::Result<()> {
    let (spec, names) = resolve_spec(&args)?;
    if args.models.len() != names.len() {
        return Err(config_error(format!(
            "preset {} needs {} models ({}), got {}",
            args.preset,
            names.len(),
            names.join(", "),
            args.models.len()
        ))
        .into());
    }
    let image = read_image(&args.image)?;
    let (_, _, c) = image.hwc()?;
    if c != 3 {
        return Err(config_error(format!("input image must be RGB, got {c} channels")).into());
    }
    let models: Vec<LayerModel> = args.models.iter().map(|p| Ok(checkpoint::load(p)?.model)).collect::<anyhow::Result<_>>()?;
    for (name, (m, path)) in names.iter().zip(models.iter().zip(&args.models)) {
        if m.meta.layer != *name {
            log::warn!("{} was trained as a {} model but fills the {name} layer", path.display(), m.meta.layer);
        }
        if m.prior.is_none() && spec.weights.prior != 0.0 {
            return Err(config_error(format!("{} has no fitted prior; run fit-prior or pass --lp 0", path.display())).into());
        }
    }
    runlog::create_dir(&args.out)?;
    runlog::write(&args.out.join("run.json"), ctx, &spec)?;

    let layers: Vec<Layer<'_>> = names.iter().zip(&models).map(|(&name, model)| Layer { name, model }).collect();
    let result = decompose(&image, &layers, &spec)?;
    log::info!(
        "objective {:.5} -> {:.5} (best at step {}) in {:.1} s",
        result.initial.total,
        result.best.total,
        result.best_step,
        result.wall_clock_seconds
    );
    if !result.converged {
        log::warn!("optimization stopped early on a non-finite value; the best finite iterate was kept");
    }

    let mut product: Option<Tensor> = None;
    for layer in &result.layers {
        write_rawf(&args.out.join(format!("{}.rawf", layer.name)), &layer.image)?;
        write_png16(&args.out.join(format!("{}.png", layer.name)), &exposure_normalize(&layer.image))?;
        product = Some(match product {
            Some(p) => p.mul(&layer.image)?,
            None => layer.image.clone(),
        });
    }
    if let Some(p) = product {
        write_rawf(&args.out.join("reconstruction.rawf"), &p)?;
    }
    let trace = Trace {
        preset: &args.preset,
        layers: &names,
        spec: &spec,
        converged: result.converged,
        best_step: result.best_step,
        initial: result.initial,
        best: result.best,
        trace: &result.trace,
    };
    runlog::write_json(&args.out.join("trace.json"), &trace)?;
    Ok(())
}
