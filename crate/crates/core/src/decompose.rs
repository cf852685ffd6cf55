//! Decomposition of an image into layers by optimizing latent codes.
//!
//! Every layer has a trained [`LayerModel`]. Starting from codes obtained by
//! encoding heuristic initial layers, Adam adjusts the code means of all
//! layers jointly to minimize
//!
//! ```text
//! λ_r · mean((log I − Σ_k D_k(z_k))²)
//!   + λ_p · Σ_k NLL_k(z_k)
//!   + λ_c · Σ_{j<k} corr(D_j(z_j), D_k(z_k))
//!   [+ w_dc · var(low-pass of the detail layer)]
//! ```
//!
//! where `corr` is the mean Frobenius norm of patchwise channel
//! cross-covariances over the Laplacian levels of both layers. Log-variances
//! stay at their encoded values and decoding uses the means only.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::graph::{patch_cov_norm_value, Graph, Var};
use crate::prior::{field_nll_graph, stack_codes_graph};
use crate::pyramid::{build_pyramid_with, gaussian_blur, PyramidConfig};
use crate::tensor::{Real, Tensor};
use crate::vae::{BoundModel, CodeField, Domain, LayerModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub residual: Real,
    pub prior: Real,
    pub correlation: Real,
    /// Weight of the low-frequency constancy penalty on a layer named
    /// `detail`; off when `None`.
    pub detail_dc: Option<Real>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Shading starts as the blurred log luminance, albedo as the rest.
    Smoothed,
    /// Shading starts as the log image itself.
    ShadingFromImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSpec {
    pub weights: ObjectiveWeights,
    /// Side of the non-overlapping correlation tiles.
    pub patch: usize,
    /// Pyramid depth for the correlation term; defaults to the shallowest model.
    pub correlation_levels: Option<usize>,
    pub steps: usize,
    pub lr: Real,
    /// Spread the final residual evenly over the layers so they sum to log I.
    pub exact_sum: bool,
    /// Subtract the prior term instead of adding it.
    pub paper_literal_sign: bool,
    pub init: InitMode,
    /// Blur width for the smoothed initialization; defaults to `8 * size / 128`.
    pub smoothing_sigma: Option<Real>,
}

impl DecompositionSpec {
    fn with_weights(residual: Real) -> Self {
        DecompositionSpec {
            weights: ObjectiveWeights { residual, prior: 1e-4, correlation: 1e4, detail_dc: None },
            patch: 8,
            correlation_levels: None,
            steps: 2000,
            lr: 0.01,
            exact_sum: false,
            paper_literal_sign: false,
            init: InitMode::Smoothed,
            smoothing_sigma: None,
        }
    }

    /// Albedo and shading.
    pub fn albedo_shading() -> Self {
        Self::with_weights(100.0)
    }

    /// Shading and detail.
    pub fn shading_detail() -> Self {
        Self::with_weights(100.0)
    }

    /// Albedo, shading and detail, with a stronger residual weight.
    pub fn albedo_shading_detail() -> Self {
        Self::with_weights(1e4)
    }

    /// Preset spec and its layer names for `as`, `sd` or `asd`.
    pub fn preset(name: &str) -> Result<(Self, Vec<&'static str>)> {
        match name {
            "as" => Ok((Self::albedo_shading(), vec!["albedo", "shading"])),
            "sd" => Ok((Self::shading_detail(), vec!["shading", "detail"])),
            "asd" => Ok((Self::albedo_shading_detail(), vec!["albedo", "shading", "detail"])),
            other => Err(Error::config(format!("unknown decomposition preset {other:?}"))),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let w = &self.weights;
        if layers < 2 {
            return Err(Error::config("a decomposition needs at least two layers"));
        }
        if [w.residual, w.prior, w.correlation, w.detail_dc.unwrap_or(0.0)].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("objective weights must be non-negative"));
        }
        if self.patch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("patch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// A named layer and its model.
#[derive(Clone, Copy, Debug)]
pub struct Layer<'a> {
    pub name: &'a str,
    pub model: &'a LayerModel,
}

/// Weighted objective terms; `total` is their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: Real,
    pub residual: Real,
    pub prior: Real,
    pub correlation: Real,
    pub detail_dc: Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    #[serde(flatten)]
    pub terms: Breakdown,
    pub best_so_far: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput {
    pub name: String,
    pub log_image: Tensor,
    pub image: Tensor,
    pub codes: Vec<CodeField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    pub layers: Vec<LayerOutput>,
    pub trace: Vec<TraceEntry>,
    pub best_step: usize,
    pub initial: Breakdown,
    pub best: Breakdown,
    pub wall_clock_seconds: f64,
    /// False when a non-finite value stopped the optimization early.
    pub converged: bool,
}

impl DecompositionResult {
    pub fn layer(&self, name: &str) -> Option<&LayerOutput> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Clamped log of a linear image.
pub fn log_image(image: &Tensor) -> Tensor {
    image.map(|v| v.max(crate::authoring::LOG_EPSILON).ln())
}

fn check_models(layers: &[Layer<'_>]) -> Result<()> {
    for l in layers {
        if !matches!(l.model.meta.domain, Domain::Log { .. }) {
            return Err(Error::config(format!("layer {} uses a model trained outside the log domain", l.name)));
        }
    }
    Ok(())
}

/// Number of pyramid levels used by the correlation term.
fn correlation_levels(layers: &[Layer<'_>], spec: &DecompositionSpec) -> usize {
    spec.correlation_levels
        .unwrap_or_else(|| layers.iter().map(|l| l.model.arch.levels).min().unwrap_or(1))
        .max(1)
}

/// Laplacian levels of `x` recorded on the graph.
fn pyramid_graph(g: &mut Graph, x: Var, levels: usize, cfg: &PyramidConfig) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(levels);
    let mut cur = x;
    for _ in 1..levels {
        let down = g.pyr_down(cur, cfg)?;
        let up = g.pyr_up(down, cfg)?;
        out.push(g.sub(cur, up)?);
        cur = down;
    }
    out.push(cur);
    Ok(out)
}

fn tiles_fit(shape: &[usize], patch: usize) -> bool {
    shape.len() == 3 && shape[0] >= patch && shape[1] >= patch
}

/// Mean over levels (those holding at least one full tile) of the mean
/// patch cross-covariance norm between two layers.
pub fn correlation(a: &Tensor, b: &Tensor, levels: usize, patch: usize) -> Result<Real> {
    a.same_shape(b, "correlation")?;
    let cfg = PyramidConfig::default();
    let pa = build_pyramid_with(a, levels, &cfg)?;
    let pb = build_pyramid_with(b, levels, &cfg)?;
    let mut vals = Vec::new();
    for (la, lb) in pa.levels().iter().zip(pb.levels()) {
        if tiles_fit(la.shape(), patch) {
            vals.push(patch_cov_norm_value(la, lb, patch)?);
        }
    }
    if vals.is_empty() {
        return Err(Error::shape(format!("no pyramid level holds a full {patch}x{patch} tile")));
    }
    Ok(vals.iter().sum::<Real>() / vals.len() as Real)
}

fn correlation_graph(g: &mut Graph, a: &[Var], b: &[Var], patch: usize) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (&la, &lb) in a.iter().zip(b) {
        if !tiles_fit(g.value(la).shape(), patch) {
            continue;
        }
        let v = g.patch_cov_norm(la, lb, patch)?;
        acc = Some(match acc {
            None => v,
            Some(s) => g.add(s, v)?,
        });
        count += 1;
    }
    match acc {
        None => Ok(None),
        Some(s) => Ok(Some(g.scale(s, 1.0 / count as Real)?)),
    }
}

struct ObjectiveVars {
    total: Var,
    residual: Option<Var>,
    prior: Option<Var>,
    correlation: Option<Var>,
    detail_dc: Option<Var>,
}

/// Records the weighted objective on `g`. `codes[k]` holds one code-mean
/// handle per level of layer `k`.
fn record_objective(
    g: &mut Graph,
    layers: &[Layer<'_>],
    bound: &[BoundModel],
    codes: &[Vec<Var>],
    log_img: &Tensor,
    spec: &DecompositionSpec,
) -> Result<ObjectiveVars> {
    let w = &spec.weights;
    let mut decoded = Vec::with_capacity(layers.len());
    for ((l, b), c) in layers.iter().zip(bound).zip(codes) {
        decoded.push(l.model.decode_graph(g, b, c)?);
    }
    let target = g.constant(log_img.clone());
    let mut sum = decoded[0];
    for &d in &decoded[1..] {
        sum = g.add(sum, d)?;
    }
    if g.value(sum).shape() != log_img.shape() {
        return Err(Error::shape(format!(
            "decoded layers are {:?}, image is {:?}",
            g.value(sum).shape(),
            log_img.shape()
        )));
    }
    let diff = g.sub(target, sum)?;
    let sq = g.square(diff)?;
    let res = g.mean(sq)?;
    let mut terms: Vec<Var> = Vec::new();
    let residual = g.scale(res, w.residual)?;
    terms.push(residual);

    let prior = if w.prior > 0.0 {
        let mut acc: Option<Var> = None;
        for (l, c) in layers.iter().zip(codes) {
            let p = l.model.prior.as_ref().ok_or_else(|| {
                Error::config(format!("layer {} has no fitted code prior; run fit-prior or set the prior weight to 0", l.name))
            })?;
            let field = stack_codes_graph(g, c)?;
            let nll = field_nll_graph(g, p, field)?;
            acc = Some(match acc {
                None => nll,
                Some(s) => g.add(s, nll)?,
            });
        }
        let sign = if spec.paper_literal_sign { -1.0 } else { 1.0 };
        let t = g.scale(acc.unwrap(), sign * w.prior)?;
        terms.push(t);
        Some(t)
    } else {
        None
    };

    let levels = correlation_levels(layers, spec);
    let cfg = PyramidConfig::default();
    let correlation = if w.correlation > 0.0 {
        let pyrs = decoded.iter().map(|&d| pyramid_graph(g, d, levels, &cfg)).collect::<Result<Vec<_>>>()?;
        let mut acc: Option<Var> = None;
        for i in 0..pyrs.len() {
            for j in i + 1..pyrs.len() {
                if let Some(c) = correlation_graph(g, &pyrs[i], &pyrs[j], spec.patch)? {
                    acc = Some(match acc {
                        None => c,
                        Some(s) => g.add(s, c)?,
                    });
                }
            }
        }
        match acc {
            Some(c) => {
                let t = g.scale(c, w.correlation)?;
                terms.push(t);
                Some(t)
            }
            None => None,
        }
    } else {
        None
    };

    let detail_dc = match (w.detail_dc, layers.iter().position(|l| l.name == "detail")) {
        (Some(wd), Some(k)) if wd > 0.0 => {
            let low = *pyramid_graph(g, decoded[k], levels, &cfg)?.last().unwrap();
            let sq = g.square(low)?;
            let m2 = g.mean(sq)?;
            let m = g.mean(low)?;
            let m_sq = g.square(m)?;
            let var = g.sub(m2, m_sq)?;
            let t = g.scale(var, wd)?;
            terms.push(t);
            Some(t)
        }
        _ => None,
    };

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(ObjectiveVars { total, residual: Some(residual), prior, correlation, detail_dc })
}

fn breakdown(g: &Graph, v: &ObjectiveVars) -> Result<Breakdown> {
    let get = |x: Option<Var>| x.map_or(Ok(0.0), |x| g.value(x).item());
    Ok(Breakdown {
        total: g.value(v.total).item()?,
        residual: get(v.residual)?,
        prior: get(v.prior)?,
        correlation: get(v.correlation)?,
        detail_dc: get(v.detail_dc)?,
    })
}

/// Objective terms for fixed code means (one list of per-level means per
/// layer) and a linear-domain image.
pub fn objective(layers: &[Layer<'_>], codes: &[Vec<Tensor>], image: &Tensor, spec: &DecompositionSpec) -> Result<Breakdown> {
    spec.validate(layers.len())?;
    check_models(layers)?;
    let mut g = Graph::new();
    let bound: Vec<BoundModel> = layers.iter().map(|l| l.model.bind(&mut g, false)).collect();
    let vars: Vec<Vec<Var>> = codes.iter().map(|c| c.iter().map(|t| g.constant(t.clone())).collect()).collect();
    let v = record_objective(&mut g, layers, &bound, &vars, &log_image(image), spec)?;
    breakdown(&g, &v)
}

/// Gradient of the total objective with respect to every code mean.
pub fn objective_gradient(
    layers: &[Layer<'_>],
    codes: &[Vec<Tensor>],
    image: &Tensor,
    spec: &DecompositionSpec,
) -> Result<(Breakdown, Vec<Vec<Tensor>>)> {
    spec.validate(layers.len())?;
    check_models(layers)?;
    let mut g = Graph::new();
    let bound: Vec<BoundModel> = layers.iter().map(|l| l.model.bind(&mut g, false)).collect();
    let vars: Vec<Vec<Var>> = codes.iter().map(|c| c.iter().map(|t| g.param(t.clone())).collect()).collect();
    let v = record_objective(&mut g, layers, &bound, &vars, &log_image(image), spec)?;
    let terms = breakdown(&g, &v)?;
    let mut grads = g.backward(v.total)?;
    let out = vars.iter().map(|c| c.iter().map(|&x| grads.take(x)).collect()).collect();
    Ok((terms, out))
}

/// Mean squared error between the log image and the sum of decoded layers.
pub fn residual(layers: &[Layer<'_>], codes: &[Vec<Tensor>], image: &Tensor) -> Result<Real> {
    let log_img = log_image(image);
    let mut sum = Tensor::zeros(log_img.shape());
    for (l, c) in layers.iter().zip(codes) {
        sum.add_assign(&l.model.decode(c)?)?;
    }
    Ok(log_img.sub(&sum)?.map(|v| v * v).mean())
}

/// Initial log-domain layer images for `layers`, by name.
pub fn initial_layers(image: &Tensor, layers: &[Layer<'_>], spec: &DecompositionSpec) -> Result<Vec<Tensor>> {
    let log_img = log_image(image);
    let (h, w, c) = log_img.hwc()?;
    let shading = match spec.init {
        InitMode::ShadingFromImage => log_img.clone(),
        InitMode::Smoothed => {
            let sigma = spec.smoothing_sigma.unwrap_or(8.0 * h.min(w) as Real / 128.0);
            let lum = Tensor::from_hwc_fn(h, w, 1, |y, x, _| (0..c).map(|k| log_img.at(y, x, k)).sum::<Real>() / c as Real);
            let blurred = gaussian_blur(&lum, sigma)?;
            Tensor::from_hwc_fn(h, w, c, |y, x, _| blurred.at(y, x, 0))
        }
    };
    layers
        .iter()
        .map(|l| match l.name {
            "shading" => Ok(shading.clone()),
            "albedo" => log_img.sub(&shading),
            "detail" => Ok(Tensor::zeros(log_img.shape())),
            other => Err(Error::config(format!("no initialization rule for layer {other:?}"))),
        })
        .collect()
}

/// Codes of the initial layers, from each layer's encoder.
pub fn initialize(image: &Tensor, layers: &[Layer<'_>], spec: &DecompositionSpec) -> Result<Vec<Vec<CodeField>>> {
    check_models(layers)?;
    let inits = initial_layers(image, layers, spec)?;
    layers.iter().zip(&inits).map(|(l, img)| l.model.encode(img)).collect()
}

fn means(codes: &[Vec<CodeField>]) -> Vec<Vec<Tensor>> {
    codes.iter().map(|c| c.iter().map(|f| f.mean.clone()).collect()).collect()
}

/// Runs `spec.steps` Adam updates on the code means and returns the best
/// iterate seen (including the starting point).
pub fn optimize(
    image: &Tensor,
    layers: &[Layer<'_>],
    spec: &DecompositionSpec,
    init: Vec<Vec<CodeField>>,
) -> Result<DecompositionResult> {
    spec.validate(layers.len())?;
    check_models(layers)?;
    if init.len() != layers.len() {
        return Err(Error::shape("one set of initial codes per layer is required"));
    }
    let start = Instant::now();
    let log_img = log_image(image);
    let mut codes = means(&init);
    let mut states: Vec<Vec<AdamState>> = codes.iter().map(|c| c.iter().map(|t| AdamState::new(t.shape())).collect()).collect();
    let mut trace = Vec::with_capacity(spec.steps + 1);
    let mut best: Option<(Breakdown, usize, Vec<Vec<Tensor>>)> = None;
    let mut converged = true;

    for step in 0..=spec.steps {
        let mut g = Graph::new();
        let bound: Vec<BoundModel> = layers.iter().map(|l| l.model.bind(&mut g, false)).collect();
        let vars: Vec<Vec<Var>> = codes.iter().map(|c| c.iter().map(|t| g.param(t.clone())).collect()).collect();
        let recorded = record_objective(&mut g, layers, &bound, &vars, &log_img, spec).and_then(|v| Ok((breakdown(&g, &v)?, v)));
        let (terms, v) = match recorded {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                log::warn!("decomposition stopped at step {step}: {msg}");
                converged = false;
                break;
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| terms.total < b.0.total) {
            best = Some((terms, step, codes.clone()));
        }
        let best_so_far = best.as_ref().unwrap().0.total;
        trace.push(TraceEntry { step, terms, best_so_far });
        if step == spec.steps {
            break;
        }
        let grads = match g.backward(v.total) {
            Ok(mut gr) => vars.iter().map(|c| c.iter().map(|&x| gr.take(x)).collect::<Vec<_>>()).collect::<Vec<_>>(),
            Err(Error::Numeric(msg)) => {
                log::warn!("decomposition gradient failed at step {step}: {msg}");
                converged = false;
                break;
            }
            Err(e) => return Err(e),
        };
        if grads.iter().flatten().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            log::warn!("decomposition gradient became non-finite at step {step}");
            converged = false;
            break;
        }
        for ((c, gr), st) in codes.iter_mut().zip(&grads).zip(&mut states) {
            for ((t, gt), s) in c.iter_mut().zip(gr).zip(st) {
                adam_step(t, gt, s, spec.lr)?;
            }
        }
    }

    let (best_terms, best_step, best_codes) =
        best.ok_or_else(|| Error::numeric("objective was not finite at the initial codes"))?;
    let mut logs = layers
        .iter()
        .zip(&best_codes)
        .map(|(l, c)| l.model.decode(c))
        .collect::<Result<Vec<_>>>()?;
    if spec.exact_sum {
        let mut sum = Tensor::zeros(log_img.shape());
        for l in &logs {
            sum.add_assign(l)?;
        }
        let share = log_img.sub(&sum)?.scale(1.0 / logs.len() as Real);
        for l in &mut logs {
            l.add_assign(&share)?;
        }
    }
    let outputs = layers
        .iter()
        .zip(logs)
        .zip(best_codes)
        .zip(&init)
        .map(|(((l, log_image), codes), init)| LayerOutput {
            name: l.name.to_string(),
            image: log_image.map(Real::exp),
            log_image,
            codes: codes
                .into_iter()
                .zip(init)
                .map(|(mean, f)| CodeField { mean, log_variance: f.log_variance.clone() })
                .collect(),
        })
        .collect();
    Ok(DecompositionResult {
        layers: outputs,
        initial: trace[0].terms,
        best: best_terms,
        best_step,
        trace,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        converged,
    })
}

/// [`initialize`] followed by [`optimize`].
pub fn decompose(image: &Tensor, layers: &[Layer<'_>], spec: &DecompositionSpec) -> Result<DecompositionResult> {
    let init = initialize(image, layers, spec)?;
    optimize(image, layers, spec, init)
}
