//! Spherical Gaussian priors over code pixels, and the image-gradient prior.
//!
//! Every level's code-mean field is resized to the largest field with
//! nearest-neighbour sampling and the levels are stacked channelwise, so
//! one code "pixel" is a vector of `levels * c` values. Each such pixel is
//! treated as an independent draw from `N(mean, variance * I)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gradient_l1_value, Graph, Var};
use crate::pyramid::upsample_field;
use crate::tensor::{Real, Tensor};
use crate::vae::LayerModel;

pub const VARIANCE_FLOOR: Real = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCodePrior {
    pub mean: Vec<Real>,
    pub variance: Real,
    pub dim: usize,
    pub samples: usize,
}

impl GaussianCodePrior {
    /// `-d/2 * log(2 pi v)`, the log density at the mean.
    pub fn log_normalizer(&self) -> Real {
        -(self.dim as Real) / 2.0 * (2.0 * PI as Real * self.variance).ln()
    }

    pub fn log_pdf(&self, z: &[Real]) -> Result<Real> {
        if z.len() != self.dim {
            return Err(Error::shape(format!("code has {} values, prior expects {}", z.len(), self.dim)));
        }
        let d2: Real = z.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        Ok(self.log_normalizer() - d2 / (2.0 * self.variance))
    }

    pub fn nll(&self, z: &[Real]) -> Result<Real> {
        Ok(-self.log_pdf(z)?)
    }
}

/// Code vectors stored row-major, one row per code pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSamples {
    pub dim: usize,
    pub data: Vec<Real>,
}

impl CodeSamples {
    pub fn new(dim: usize) -> Self {
        CodeSamples { dim, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Real]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Appends every pixel of an `[h, w, dim]` field.
    pub fn extend_from_field(&mut self, field: &Tensor) -> Result<()> {
        if field.shape().last() != Some(&self.dim) {
            return Err(Error::shape(format!("field {:?} does not have {} channels", field.shape(), self.dim)));
        }
        self.data.extend_from_slice(field.data());
        Ok(())
    }
}

fn as_field(code: &Tensor) -> Result<Tensor> {
    match code.shape().len() {
        3 => Ok(code.clone()),
        1 => code.clone().reshape(&[1, 1, code.len()]),
        _ => Err(Error::shape(format!("code must be [h, w, c] or [c], got {:?}", code.shape()))),
    }
}

/// Stacks per-level codes into one `[H, W, levels * c]` field at the size of
/// the first (largest) level.
pub fn stack_codes(codes: &[Tensor]) -> Result<Tensor> {
    let fields = codes.iter().map(as_field).collect::<Result<Vec<_>>>()?;
    let first = fields.first().ok_or_else(|| Error::Empty("no code levels".into()))?;
    let (h, w, _) = first.hwc()?;
    let ups = fields.iter().map(|f| upsample_field(f, (h, w))).collect::<Result<Vec<_>>>()?;
    let dim: usize = ups.iter().map(|u| u.shape()[2]).sum();
    let mut data = Vec::with_capacity(h * w * dim);
    for p in 0..h * w {
        for u in &ups {
            let c = u.shape()[2];
            data.extend_from_slice(&u.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, dim], data)
}

/// [`stack_codes`] recorded on a graph.
pub fn stack_codes_graph(g: &mut Graph, codes: &[Var]) -> Result<Var> {
    let mut fields = Vec::with_capacity(codes.len());
    for &c in codes {
        let shape = g.value(c).shape().to_vec();
        fields.push(if shape.len() == 1 { g.reshape(c, &[1, 1, shape[0]])? } else { c });
    }
    let (h, w, _) = g.value(fields[0]).hwc()?;
    let mut ups = Vec::with_capacity(fields.len());
    for f in fields {
        ups.push(if g.value(f).shape()[..2] == [h, w] { f } else { g.upsample_nearest(f, (h, w))? });
    }
    if ups.len() == 1 {
        Ok(ups[0])
    } else {
        g.concat_last(&ups)
    }
}

/// Stacked code-mean pixels of every linear-domain patch in `corpus`.
pub fn collect_codes(model: &LayerModel, corpus: &[Tensor]) -> Result<CodeSamples> {
    if corpus.is_empty() {
        return Err(Error::Empty("no patches to encode".into()));
    }
    let fields = corpus
        .par_iter()
        .map(|patch| {
            let codes: Vec<Tensor> = model.encode(&model.meta.domain.forward(patch))?.into_iter().map(|c| c.mean).collect();
            stack_codes(&codes)
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let mut out = CodeSamples::new(fields[0].shape()[2]);
    for f in &fields {
        out.extend_from_field(f)?;
    }
    Ok(out)
}

/// Sample mean, and the mean over dimensions of the unbiased per-dimension
/// variances, floored at [`VARIANCE_FLOOR`].
pub fn fit_prior(samples: &CodeSamples) -> Result<GaussianCodePrior> {
    let (n, d) = (samples.len(), samples.dim);
    if n < 2 || d == 0 {
        return Err(Error::Empty(format!("fitting a prior needs at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as Real);
    let mut ss = vec![0.0; d];
    for row in samples.rows() {
        for ((s, v), m) in ss.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let variance = ss.iter().map(|s| s / (n - 1) as Real).sum::<Real>() / d as Real;
    if !variance.is_finite() || mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::numeric("code samples contain non-finite values"));
    }
    Ok(GaussianCodePrior { mean, variance: variance.max(VARIANCE_FLOOR), dim: d, samples: n })
}

/// Mean NLL over the pixels of one stacked field.
pub fn field_nll(prior: &GaussianCodePrior, field: &Tensor) -> Result<Real> {
    let field = as_field(field)?;
    if field.shape()[2] != prior.dim {
        return Err(Error::shape(format!("stacked code has {} channels, prior expects {}", field.shape()[2], prior.dim)));
    }
    let rows = field.data().chunks_exact(prior.dim);
    let n = rows.len();
    let mut acc = 0.0;
    for r in rows {
        acc += prior.nll(r)?;
    }
    Ok(acc / n as Real)
}

/// Sum over layers of the mean code-pixel NLL under that layer's prior.
/// `fields[k]` is the stacked code field of layer `k`.
pub fn code_nll(priors: &[&GaussianCodePrior], fields: &[Tensor]) -> Result<Real> {
    if priors.len() != fields.len() {
        return Err(Error::shape("one prior per code field is required"));
    }
    priors.iter().zip(fields).map(|(p, f)| field_nll(p, f)).sum()
}

/// [`field_nll`] recorded on a graph.
pub fn field_nll_graph(g: &mut Graph, prior: &GaussianCodePrior, field: Var) -> Result<Var> {
    let shape = g.value(field).shape().to_vec();
    if shape.last() != Some(&prior.dim) {
        return Err(Error::shape(format!("stacked code {shape:?} does not match prior dimension {}", prior.dim)));
    }
    let pixels = g.value(field).len() / prior.dim;
    let tiled: Vec<Real> = prior.mean.iter().copied().cycle().take(pixels * prior.dim).collect();
    let mu = g.constant(Tensor::new(shape, tiled)?);
    let diff = g.sub(field, mu)?;
    let sq = g.square(diff)?;
    let s = g.sum(sq)?;
    let q = g.scale(s, 1.0 / (2.0 * prior.variance * pixels as Real))?;
    g.add_scalar(q, -prior.log_normalizer())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub count: usize,
    pub mean: Real,
    pub standard_error: Real,
}

impl NllSummary {
    /// Mean and standard error of the mean (unbiased sample deviation over sqrt(n)).
    pub fn of(values: &[Real]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::Empty(format!("a standard error needs at least 2 values, got {n}")));
        }
        let mean = values.iter().sum::<Real>() / n as Real;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1) as Real;
        Ok(NllSummary { count: n, mean, standard_error: (var / n as Real).sqrt() })
    }
}

/// NLL of held-out in-distribution codes against codes drawn from
/// `N(0, scale^2 I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorCheck {
    pub in_distribution: NllSummary,
    pub random: NllSummary,
    pub random_scale: Real,
    /// `(random.mean - in_distribution.mean) / sqrt(se_in^2 + se_random^2)`.
    pub margin_in_standard_errors: Real,
}

/// One NLL per held-out patch (the mean over its code pixels) and one per
/// random code vector.
pub fn prior_check(
    model: &LayerModel,
    prior: &GaussianCodePrior,
    heldout: &[Tensor],
    random_count: usize,
    random_scale: Real,
    seed: u64,
) -> Result<PriorCheck> {
    let samples = collect_codes(model, heldout)?;
    if samples.dim != prior.dim {
        return Err(Error::shape(format!("codes have {} values, prior expects {}", samples.dim, prior.dim)));
    }
    let per_patch = samples.len() / heldout.len();
    let rows: Vec<&[Real]> = samples.rows().collect();
    let inside = rows
        .chunks(per_patch)
        .map(|patch| Ok(patch.iter().map(|r| prior.nll(r)).sum::<Result<Real>>()? / per_patch as Real))
        .collect::<Result<Vec<Real>>>()?;
    let normal = Normal::new(0.0, random_scale).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random = (0..random_count)
        .map(|_| {
            let z: Vec<Real> = (0..prior.dim).map(|_| normal.sample(&mut rng)).collect();
            prior.nll(&z)
        })
        .collect::<Result<Vec<Real>>>()?;
    let (a, b) = (NllSummary::of(&inside)?, NllSummary::of(&random)?);
    let se = (a.standard_error.powi(2) + b.standard_error.powi(2)).sqrt();
    Ok(PriorCheck { in_distribution: a, random: b, random_scale, margin_in_standard_errors: (b.mean - a.mean) / se })
}

/// Mean of `|dx| + |dy|` over the image, using forward differences.
pub fn image_l1_gradient(image: &Tensor) -> Result<Real> {
    gradient_l1_value(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_samples_hit_the_floor() {
        let s = CodeSamples { dim: 3, data: [1.0, 2.0, 3.0].repeat(5) };
        let p = fit_prior(&s).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0, 3.0]);
        assert_eq!(p.variance, VARIANCE_FLOOR);
    }

    #[test]
    fn two_sample_pooling() {
        let d = 5;
        let mut data = vec![0.0; 2 * d];
        data[d] = 2.0;
        let p = fit_prior(&CodeSamples { dim: d, data }).unwrap();
        assert_eq!(p.mean[0], 1.0);
        assert!(p.mean[1..].iter().all(|&m| m == 0.0));
        assert!((p.variance - 2.0 / d as Real).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        assert!(fit_prior(&CodeSamples { dim: 2, data: vec![1.0, 2.0] }).is_err());
    }

    #[test]
    fn nll_at_mode_and_quadratic_growth() {
        let p = GaussianCodePrior { mean: vec![1.0, -1.0], variance: 0.5, dim: 2, samples: 2 };
        let at_mode = p.nll(&[1.0, -1.0]).unwrap();
        assert!((at_mode - (2.0 * PI as Real * 0.5).ln()).abs() < 1e-12);
        let d1 = p.nll(&[2.0, -1.0]).unwrap() - at_mode;
        let d2 = p.nll(&[3.0, -1.0]).unwrap() - at_mode;
        assert!((d2 - 4.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn stacking_resizes_smaller_levels() {
        let a = Tensor::zeros(&[4, 4, 2]);
        let b = Tensor::full(&[1, 1, 2], 3.0);
        let s = stack_codes(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[4, 4, 4]);
        assert_eq!(s.at(3, 2, 2), 3.0);
        assert_eq!(s.at(3, 2, 1), 0.0);
    }

    #[test]
    fn graph_nll_matches_direct() {
        let p = GaussianCodePrior { mean: vec![0.5, 0.0, -0.5], variance: 0.3, dim: 3, samples: 9 };
        let f = Tensor::from_hwc_fn(2, 3, 3, |y, x, c| (y * 5 + x * 2 + c) as Real * 0.1);
        let mut g = Graph::new();
        let v = g.constant(f.clone());
        let n = field_nll_graph(&mut g, &p, v).unwrap();
        let direct = field_nll(&p, &f).unwrap();
        assert!((g.value(n).item().unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn standard_error_of_known_values() {
        let s = NllSummary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.standard_error - (5.0 / 12.0 as Real).sqrt()).abs() < 1e-12);
        assert!(NllSummary::of(&[1.0]).is_err());
    }

    #[test]
    fn step_edge_gradient() {
        let img = Tensor::from_hwc_fn(4, 4, 1, |_, x, _| if x >= 2 { 1.0 } else { 0.0 });
        assert!((image_l1_gradient(&img).unwrap() - 4.0 / 16.0).abs() < 1e-15);
    }
}
