//! `eval`: scale-invariant errors and WHDR of predicted layers.
//!
//! A case directory holds `albedo.rawf`, `shading.rawf` and optionally
//! `detail.rawf`; shading is scored as the product of shading and detail.
//! `--pred` and `--gt` are either case directories themselves or parents of
//! case directories with matching names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::Args;
use layerforge::imageio::read_rawf;
use layerforge::metrics::{
    local_scaled_mse, naive_baseline, scaled_mse, whdr, JudgmentFile, BASELINE_FORMULA, LOCAL_STRIDE, LOCAL_WINDOW,
    RMSE_FORMULA, RSMSE_FORMULA, SMSE_FORMULA,
};
use layerforge::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::runlog::{self, config_error, Context};

pub const SCHEMA_VERSION: u32 = 1;
const METRICS: [&str; 4] = ["smse", "rmse", "rsmse", "whdr"];
const WHDR_FORMULA: &str = "sum of weights of judgments whose prediction (mean-RGB luminance ratio against 1 + delta) \
                            disagrees with the human label, over the total weight";

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Predicted layers: a case directory or a directory of case directories.
    #[arg(long)]
    pub pred: PathBuf,

    /// Ground-truth layers laid out like --pred.
    #[arg(long)]
    pub gt: PathBuf,

    /// Comma-separated subset of smse, rmse, rsmse, whdr.
    #[arg(long, value_delimiter = ',', default_values_t = ["smse", "rmse", "rsmse"].map(String::from))]
    pub metrics: Vec<String>,

    /// Judgment file for WHDR on a single case; with several cases each
    /// ground-truth case directory may hold its own judgments.json.
    #[arg(long)]
    pub judgments: Option<PathBuf>,

    /// WHDR equality threshold.
    #[arg(long, default_value_t = 0.25)]
    pub delta: f64,

    /// Apply the sRGB transfer curve before comparing luminances for WHDR.
    #[arg(long)]
    pub srgb: bool,

    /// Also score the naive baseline computed from each ground-truth image.rawf.
    #[arg(long)]
    pub baseline: bool,

    /// Report path; the run record is written next to it as <stem>.run.json.
    #[arg(long)]
    pub report: PathBuf,
}

/// Scores of one prediction; metrics that were not requested or lack inputs
/// are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smse: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rsmse: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub whdr: Option<Real>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub scores: Scores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Scores>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub formulas: BTreeMap<String, String>,
    pub metrics: Vec<String>,
    pub delta: f64,
    pub srgb: bool,
    pub cases: Vec<CaseReport>,
    pub mean: Scores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_mean: Option<Scores>,
}

struct Layers {
    albedo: Option<Tensor>,
    shading: Option<Tensor>,
}

fn read_optional(path: &Path) -> anyhow::Result<Option<Tensor>> {
    if path.exists() {
        Ok(Some(read_rawf(path)?))
    } else {
        Ok(None)
    }
}

fn read_layers(dir: &Path) -> anyhow::Result<Layers> {
    let albedo = read_optional(&dir.join("albedo.rawf"))?;
    let shading = read_optional(&dir.join("shading.rawf"))?;
    let detail = read_optional(&dir.join("detail.rawf"))?;
    let shading = match (shading, detail) {
        (Some(s), Some(d)) => Some(s.mul(&d)?),
        (s, _) => s,
    };
    Ok(Layers { albedo, shading })
}

fn is_case(dir: &Path) -> bool {
    ["albedo.rawf", "shading.rawf"].iter().any(|f| dir.join(f).exists())
}

fn score(pred: &Layers, gt: &Layers, metrics: &[String], judgments: Option<&JudgmentFile>, args: &EvalArgs) -> anyhow::Result<Scores> {
    let want = |m: &str| metrics.iter().any(|x| x == m);
    let mut s = Scores::default();
    let shading = pred.shading.as_ref().zip(gt.shading.as_ref());
    let albedo = pred.albedo.as_ref().zip(gt.albedo.as_ref());
    if want("smse") {
        s.smse = shading.map(|(p, g)| scaled_mse(p, g, None)).transpose()?;
    }
    if want("rmse") {
        s.rmse = albedo.map(|(p, g)| scaled_mse(p, g, None)).transpose()?;
    }
    if want("rsmse") {
        if let (Some((ps, gs)), Some((pa, ga))) = (shading, albedo) {
            let ls = local_scaled_mse(ps, gs, LOCAL_WINDOW, LOCAL_STRIDE, None)?;
            let la = local_scaled_mse(pa, ga, LOCAL_WINDOW, LOCAL_STRIDE, None)?;
            s.rsmse = Some((ls + la) / 2.0);
        }
    }
    if want("whdr") {
        if let (Some(a), Some(j)) = (&pred.albedo, judgments) {
            s.whdr = Some(whdr(a, j, args.delta as Real, args.srgb)?);
        }
    }
    Ok(s)
}

fn mean_scores(all: &[&Scores]) -> Scores {
    let avg = |f: &dyn Fn(&Scores) -> Option<Real>| {
        let v: Vec<Real> = all.iter().filter_map(|s| f(s)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<Real>() / v.len() as Real)
    };
    Scores { smse: avg(&|s| s.smse), rmse: avg(&|s| s.rmse), rsmse: avg(&|s| s.rsmse), whdr: avg(&|s| s.whdr) }
}

pub fn run(args: EvalArgs, ctx: &Context) -> anyhow::Result<()> {
    if let Some(m) = args.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
        return Err(config_error(format!("unknown metric {m:?}; choose from {}", METRICS.join(", "))).into());
    }
    if !(args.delta >= 0.0) {
        return Err(config_error("delta must be non-negative").into());
    }
    let stem = args.report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let parent = args.report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    runlog::create_dir(parent)?;
    runlog::write(&parent.join(format!("{stem}.run.json")), ctx, &args)?;

    let cases: Vec<(String, PathBuf, PathBuf)> = if is_case(&args.pred) {
        vec![(".".into(), args.pred.clone(), args.gt.clone())]
    } else {
        let mut names: Vec<String> = std::fs::read_dir(&args.pred)
            .with_context(|| format!("listing {}", args.pred.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir() && is_case(&e.path()))
            .filter_map(|e| e.file_name().to_str().map(String::from))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(config_error(format!("{} holds no predicted layers", args.pred.display())).into());
        }
        names.into_iter().map(|n| (n.clone(), args.pred.join(&n), args.gt.join(&n))).collect()
    };
    let shared: Option<JudgmentFile> = args.judgments.as_deref().map(runlog::read_json).transpose()?;
    if let Some(j) = &shared {
        j.validate()?;
    }

    let mut reports = Vec::with_capacity(cases.len());
    for (name, pred_dir, gt_dir) in &cases {
        let gt = read_layers(gt_dir)?;
        if gt.albedo.is_none() && gt.shading.is_none() {
            return Err(config_error(format!("{} holds no ground-truth layers", gt_dir.display())).into());
        }
        let own = gt_dir.join("judgments.json");
        let judgments: Option<JudgmentFile> = match &shared {
            Some(j) if cases.len() == 1 => Some(j.clone()),
            _ if own.exists() => Some(runlog::read_json(&own)?),
            _ => None,
        };
        let pred = read_layers(pred_dir)?;
        let scores = score(&pred, &gt, &args.metrics, judgments.as_ref(), &args)?;
        let baseline = if args.baseline {
            let image = read_rawf(&gt_dir.join("image.rawf"))?;
            let (a, s) = naive_baseline(&image)?;
            Some(score(&Layers { albedo: Some(a), shading: Some(s) }, &gt, &args.metrics, judgments.as_ref(), &args)?)
        } else {
            None
        };
        log::info!("{name}: {scores:?}");
        reports.push(CaseReport { name: name.clone(), scores, baseline });
    }

    let mean = mean_scores(&reports.iter().map(|c| &c.scores).collect::<Vec<_>>());
    let baseline_mean =
        args.baseline.then(|| mean_scores(&reports.iter().filter_map(|c| c.baseline.as_ref()).collect::<Vec<_>>()));
    let formulas = [
        ("smse", SMSE_FORMULA),
        ("rmse", RMSE_FORMULA),
        ("rsmse", RSMSE_FORMULA),
        ("whdr", WHDR_FORMULA),
        ("baseline", BASELINE_FORMULA),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let report = Report {
        schema_version: SCHEMA_VERSION,
        formulas,
        metrics: args.metrics.clone(),
        delta: args.delta,
        srgb: args.srgb,
        cases: reports,
        mean,
        baseline_mean,
    };
    runlog::write_json(&args.report, &report)?;
    Ok(())
}
