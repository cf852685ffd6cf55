//! Evaluation measures for decompositions and layer models.
//!
//! The scale-invariant errors follow the usual intrinsic-image convention:
//! the prediction is rescaled by the least-squares optimal factor before the
//! squared error is taken, since albedo and shading are only recoverable up to
//! a global (or, for the local variant, per-window) scale.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::build_pyramid;
use crate::tensor::{Real, Tensor};
use crate::vae::LayerModel;

pub const LOCAL_WINDOW: usize = 20;
pub const LOCAL_STRIDE: usize = 10;
/// Windows with less mask coverage than this are skipped.
pub const MIN_WINDOW_COVERAGE: Real = 0.5;

/// Per-element mask from an `[H, W]`, `[H, W, 1]` or full-shape mask.
/// Any positive value selects the element.
fn expand_mask(mask: Option<&Tensor>, shape: &[usize]) -> Result<Vec<bool>> {
    let n: usize = shape.iter().product();
    let Some(m) = mask else {
        return Ok(vec![true; n]);
    };
    if m.shape() == shape {
        return Ok(m.data().iter().map(|&v| v > 0.0).collect());
    }
    let (h, w) = (shape[0], shape.get(1).copied().unwrap_or(1));
    let c = n / (h * w).max(1);
    if m.len() == h * w && m.shape()[0] == h {
        return Ok((0..n).map(|i| m.data()[i / c] > 0.0).collect());
    }
    Err(Error::shape(format!("mask {:?} does not fit image {shape:?}", m.shape())))
}

/// Optimal-scale squared error over the selected elements; `None` when the
/// selection is empty. A zero prediction scores `mean(gt^2)`.
fn scaled_error(pred: &[Real], gt: &[Real], sel: impl Fn(usize) -> bool) -> Option<(Real, Real)> {
    let (mut pg, mut pp, mut gg, mut n) = (0.0, 0.0, 0.0, 0usize);
    for i in (0..pred.len()).filter(|&i| sel(i)) {
        pg += pred[i] * gt[i];
        pp += pred[i] * pred[i];
        gg += gt[i] * gt[i];
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let alpha = if pp > 0.0 { pg / pp } else { 0.0 };
    let mut err = 0.0;
    for i in (0..pred.len()).filter(|&i| sel(i)) {
        let d = alpha * pred[i] - gt[i];
        err += d * d;
    }
    Some((err / n as Real, gg))
}

/// Mean squared error after rescaling `pred` by `<pred, gt> / <pred, pred>`.
pub fn scaled_mse(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<Real> {
    pred.same_shape(gt, "scaled_mse")?;
    let sel = expand_mask(mask, gt.shape())?;
    let (err, gg) = scaled_error(pred.data(), gt.data(), |i| sel[i]).ok_or_else(|| Error::Empty("mask selects no pixels".into()))?;
    if gg == 0.0 {
        return Err(Error::numeric("ground truth is identically zero inside the mask"));
    }
    Ok(err)
}

/// Mean of [`scaled_mse`] over `window x window` tiles placed every `stride`
/// pixels, skipping tiles that are less than half covered by the mask.
pub fn local_scaled_mse(pred: &Tensor, gt: &Tensor, window: usize, stride: usize, mask: Option<&Tensor>) -> Result<Real> {
    pred.same_shape(gt, "local_scaled_mse")?;
    let (h, w, c) = gt.hwc()?;
    if window == 0 || stride == 0 {
        return Err(Error::config("window and stride must be positive"));
    }
    if h < window || w < window {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the {window}x{window} window")));
    }
    let sel = expand_mask(mask, gt.shape())?;
    let (mut total, mut count) = (0.0, 0usize);
    for y0 in (0..=h - window).step_by(stride) {
        for x0 in (0..=w - window).step_by(stride) {
            let inside = |i: usize| {
                let (y, x) = (i / (w * c), (i / c) % w);
                y >= y0 && y < y0 + window && x >= x0 && x < x0 + window
            };
            let covered = (y0..y0 + window)
                .flat_map(|y| (x0..x0 + window).map(move |x| (y * w + x) * c))
                .filter(|&i| (0..c).any(|k| sel[i + k]))
                .count();
            if (covered as Real) < MIN_WINDOW_COVERAGE * (window * window) as Real {
                continue;
            }
            if let Some((err, _)) = scaled_error(pred.data(), gt.data(), |i| sel[i] && inside(i)) {
                total += err;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no window has enough mask coverage".into()));
    }
    Ok(total / count as Real)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicScores {
    pub smse: Real,
    pub rmse: Real,
    pub rsmse: Real,
}

/// Human-readable definitions embedded in reports next to the numbers.
pub const SMSE_FORMULA: &str = "scaled_mse(shading): mean masked (a*pred - gt)^2, a = <pred,gt>/<pred,pred>";
pub const RMSE_FORMULA: &str = "scaled_mse(albedo), same definition as S-MSE";
pub const RSMSE_FORMULA: &str =
    "(local_scaled_mse(shading) + local_scaled_mse(albedo)) / 2, window 20, stride 10, windows under 50% mask skipped";
pub const BASELINE_FORMULA: &str = "naive baseline: shading = constant mean RGB luminance, albedo = image / shading";

/// S-MSE on shading, R-MSE on albedo, and RS-MSE as the average of the two
/// local errors.
pub fn smse_rmse_rsmse(
    pred_albedo: &Tensor,
    pred_shading: &Tensor,
    gt_albedo: &Tensor,
    gt_shading: &Tensor,
    mask: Option<&Tensor>,
) -> Result<IntrinsicScores> {
    let smse = scaled_mse(pred_shading, gt_shading, mask)?;
    let rmse = scaled_mse(pred_albedo, gt_albedo, mask)?;
    let ls = local_scaled_mse(pred_shading, gt_shading, LOCAL_WINDOW, LOCAL_STRIDE, mask)?;
    let la = local_scaled_mse(pred_albedo, gt_albedo, LOCAL_WINDOW, LOCAL_STRIDE, mask)?;
    Ok(IntrinsicScores { smse, rmse, rsmse: (ls + la) / 2.0 })
}

/// Mean of the channels at every pixel.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let data = image.data().chunks_exact(c).map(|p| p.iter().sum::<Real>() / c as Real).collect();
    Tensor::new(vec![h, w, 1], data)
}

/// Constant shading at the mean luminance; albedo takes the rest.
pub fn naive_baseline(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = luminance(image)?.mean();
    if !(m > 0.0) {
        return Err(Error::numeric("naive baseline needs a positive mean intensity"));
    }
    let shading = Tensor::full(image.shape(), m);
    let albedo = image.map(|v| v / m);
    Ok((albedo, shading))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Darker {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "E")]
    Equal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    /// Pixel coordinates `(x, y)`.
    pub point1: (usize, usize),
    pub point2: (usize, usize),
    pub darker: Darker,
    pub weight: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentFile {
    pub width: usize,
    pub height: usize,
    pub judgments: Vec<Judgment>,
}

impl JudgmentFile {
    pub fn validate(&self) -> Result<()> {
        for (i, j) in self.judgments.iter().enumerate() {
            let inside = |(x, y): (usize, usize)| x < self.width && y < self.height;
            if !inside(j.point1) || !inside(j.point2) {
                return Err(Error::config(format!("judgment {i} has a point outside the image")));
            }
            if !(j.weight > 0.0) || !j.weight.is_finite() {
                return Err(Error::config(format!("judgment {i} has a non-positive weight")));
            }
        }
        Ok(())
    }
}

/// Standard sRGB encoding of a linear value in `[0, 1]`.
pub fn srgb_encode(v: Real) -> Real {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// Which point the albedo says is darker at threshold `delta`. A zero
/// luminance is darker than any positive one; two zeros are equal.
pub fn predict_darker(l1: Real, l2: Real, delta: Real) -> Darker {
    match (l1 > 0.0, l2 > 0.0) {
        (false, false) => Darker::Equal,
        (false, true) => Darker::First,
        (true, false) => Darker::Second,
        (true, true) => {
            if l2 / l1 > 1.0 + delta {
                Darker::First
            } else if l1 / l2 > 1.0 + delta {
                Darker::Second
            } else {
                Darker::Equal
            }
        }
    }
}

/// Weighted human disagreement rate of `albedo` against `judgments`.
pub fn whdr(albedo: &Tensor, judgments: &JudgmentFile, delta: Real, srgb: bool) -> Result<Real> {
    judgments.validate()?;
    let lum = luminance(albedo)?;
    let (h, w, _) = lum.hwc()?;
    if (h, w) != (judgments.height, judgments.width) {
        return Err(Error::shape(format!(
            "judgments are for {}x{}, albedo is {h}x{w}",
            judgments.height, judgments.width
        )));
    }
    if judgments.judgments.is_empty() {
        return Err(Error::Empty("no judgments".into()));
    }
    let at = |(x, y): (usize, usize)| {
        let v = lum.at(y, x, 0);
        if srgb {
            srgb_encode(v.max(0.0))
        } else {
            v
        }
    };
    let (mut wrong, mut total) = (0.0, 0.0);
    for j in &judgments.judgments {
        if predict_darker(at(j.point1), at(j.point2), delta) != j.darker {
            wrong += j.weight;
        }
        total += j.weight;
    }
    Ok(wrong / total)
}

/// Random judgments that agree with `albedo` at threshold `delta`.
pub fn synthetic_judgments(albedo: &Tensor, count: usize, delta: Real, seed: u64) -> Result<JudgmentFile> {
    let lum = luminance(albedo)?;
    let (h, w, _) = lum.hwc()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let judgments = (0..count)
        .map(|_| {
            let p1 = (rng.random_range(0..w), rng.random_range(0..h));
            let p2 = (rng.random_range(0..w), rng.random_range(0..h));
            let darker = predict_darker(lum.at(p1.1, p1.0, 0), lum.at(p2.1, p2.0, 0), delta);
            Judgment { point1: p1, point2: p2, darker, weight: rng.random_range(0.5..1.5) }
        })
        .collect();
    Ok(JudgmentFile { width: w, height: h, judgments })
}

/// Mean over linear-domain patches of the reconstruction MSE of
/// `D(E(I).mean)`, measured in the model's domain.
pub fn recon_l2(model: &LayerModel, corpus: &[Tensor]) -> Result<Real> {
    if corpus.is_empty() {
        return Err(Error::Empty("held-out corpus is empty".into()));
    }
    // Parallel per patch, summed in corpus order so the result is
    // independent of the thread count.
    let errors = corpus
        .par_iter()
        .map(|p| Ok(model.reconstruct_patch(&model.meta.domain.forward(p))?.1))
        .collect::<Result<Vec<Real>>>()?;
    Ok(errors.iter().sum::<Real>() / corpus.len() as Real)
}

/// Mean squared value of pyramid level `level` of an `levels`-deep pyramid.
pub fn band_energy(image: &Tensor, level: usize, levels: usize) -> Result<Real> {
    let pyr = build_pyramid(image, levels)?;
    let band = pyr
        .levels()
        .get(level)
        .ok_or_else(|| Error::config(format!("level {level} outside a {levels}-level pyramid")))?;
    Ok(band.map(|v| v * v).mean())
}
