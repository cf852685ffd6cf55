//! Conventional VAEs, conv-VAEs and Laplacian conv-VAEs.
//!
//! All three kinds share one code path: a stack of encoder layers per
//! pyramid level whose last layer emits mean and log-variance, and a
//! mirrored decoder. A conventional VAE is a single level ending in dense
//! layers; a conv-VAE is a single fully convolutional level; the Laplacian
//! kind runs one conv-VAE per pyramid level and sums the decoded levels back
//! up the pyramid.
//!
//! Images enter and leave the models in the model's [`Domain`] (log by
//! default); use [`Domain::forward`] and [`Domain::inverse`] at the edges.

mod arch;
pub mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use arch::{LayerSpec, LevelPlan, ParamShape, VaeArch, VaeKind};
pub use train::{derive_seed, train, FixedPatches, LossRecord, PatchSource, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::sigmoid_scalar;
use crate::prior::GaussianCodePrior;
use crate::pyramid::{self, PyramidConfig};
use crate::tensor::{Real, Tensor};

/// Slope of the leaky ReLU after every hidden layer.
pub const LEAKY_SLOPE: Real = 0.2;

/// Latent code field of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeField {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl CodeField {
    pub fn new(mean: Tensor, log_variance: Tensor) -> Result<Self> {
        mean.same_shape(&log_variance, "code field")?;
        Ok(CodeField { mean, log_variance })
    }

    /// `z = mean + exp(log_variance / 2) * eps` with `eps ~ N(0, 1)`.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let mut z = self.mean.clone();
        for (v, lv) in z.data_mut().iter_mut().zip(self.log_variance.data()) {
            let eps: Real = rng.sample(StandardNormal);
            *v += (lv / 2.0).exp() * eps;
        }
        z
    }
}

/// Pixel domain a model is trained in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    /// `x -> log(max(x, epsilon))`.
    Log { epsilon: Real },
    Linear,
}

impl Default for Domain {
    fn default() -> Self {
        Domain::Log { epsilon: 1e-3 }
    }
}

impl Domain {
    pub fn forward(&self, image: &Tensor) -> Tensor {
        match *self {
            Domain::Log { epsilon } => image.map(|v| v.max(epsilon).ln()),
            Domain::Linear => image.clone(),
        }
    }

    pub fn inverse(&self, image: &Tensor) -> Tensor {
        match *self {
            Domain::Log { .. } => image.map(Real::exp),
            Domain::Linear => image.clone(),
        }
    }
}

/// `max * sigmoid(slope * t - offset)`: the annealed KL weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSchedule {
    pub max: Real,
    pub slope: Real,
    pub offset: Real,
}

impl Default for KlSchedule {
    fn default() -> Self {
        KlSchedule { max: 20.0, slope: 0.02, offset: 0.5 }
    }
}

impl KlSchedule {
    pub fn at(&self, iteration: u64) -> Real {
        self.max * sigmoid_scalar(self.slope * iteration as Real - self.offset)
    }
}

/// How a loss term is averaged over the levels of a Laplacian model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One mean over the elements of every level, so an element costs the
    /// same wherever it sits.
    #[default]
    Joint,
    /// A mean per level, summed over levels. A coarse coefficient then
    /// weighs in proportion to the image area it covers.
    PerLevel,
    /// The sum over every level divided by the number of input image values,
    /// which is what summing the whole loss over a patch and dividing by
    /// the patch size gives. Used for the KL so its weight keeps its
    /// meaning relative to the residual weight when codes are much smaller
    /// than images.
    PerImageValue,
}

/// Weights of the three training terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub residual: Real,
    pub kl: KlSchedule,
    pub image_prior: Real,
    /// How the squared residual is averaged over pyramid coefficients.
    pub residual_mean: Normalization,
    /// How the KL divergence is averaged over code elements.
    pub kl_mean: Normalization,
}

/// `factor` times the sum of `parts` (each a sum over `count` elements),
/// normalized per `mode`; `image_values` is the size of the input image.
fn normalize(g: &mut Graph, parts: &[(Var, usize)], mode: Normalization, factor: Real, image_values: usize) -> Result<Var> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut acc: Option<Var> = None;
    for &(v, n) in parts {
        let scaled = match mode {
            Normalization::Joint => g.scale(v, factor / total as Real)?,
            Normalization::PerLevel => g.scale(v, factor / n as Real)?,
            Normalization::PerImageValue => g.scale(v, factor / image_values as Real)?,
        };
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    acc.ok_or_else(|| Error::Empty("no levels".into()))
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { residual: 1000.0, kl: KlSchedule::default(), image_prior: 0.1, residual_mean: Normalization::PerLevel, kl_mean: Normalization::PerImageValue }
    }
}

/// Provenance stored with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub layer: String,
    pub dataset: String,
    pub seed: u64,
    pub iterations: u64,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights of one pyramid level. `decoder[j]` is applied `j`-th when
/// decoding, so it mirrors `encoder[n - 1 - j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
}

/// A trained (or freshly initialized) model for one image layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerModel {
    pub arch: VaeArch,
    pub levels: Vec<LevelParams>,
    pub prior: Option<GaussianCodePrior>,
    pub meta: ModelMeta,
    pub pyramid: PyramidConfig,
}

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    levels: Vec<(Vec<(Var, Var)>, Vec<(Var, Var)>)>,
}

impl BoundModel {
    /// Handles in [`LayerModel::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.levels
            .iter()
            .flat_map(|(e, d)| e.iter().chain(d))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Forward values and graph handles of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub total: Var,
    pub residual: Var,
    pub kl: Var,
    pub image_prior: Var,
}

/// Scalar ELBO terms (weights already applied to `total` only).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub total: Real,
    pub residual: Real,
    pub kl: Real,
    pub image_prior: Real,
    pub kl_weight: Real,
}

impl LayerModel {
    /// Kaiming-uniform weights for the leaky ReLU, zero biases.
    pub fn init(arch: VaeArch, meta: ModelMeta) -> Result<Self> {
        let shapes = arch.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut make = |p: &ParamShape| {
            let bound = gain * (3.0 / p.fan_in.max(1) as Real).sqrt();
            let n: usize = p.weight.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            LayerParams { weight: Tensor::from_parts(p.weight.clone(), data), bias: Tensor::zeros(&p.bias) }
        };
        let levels = shapes
            .iter()
            .map(|(e, d)| LevelParams { encoder: e.iter().map(&mut make).collect(), decoder: d.iter().map(&mut make).collect() })
            .collect();
        Ok(LayerModel { arch, levels, prior: None, meta, pyramid: PyramidConfig::default() })
    }

    /// Every parameter tensor with its stable name.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            for (part, layers) in [("encoder", &level.encoder), ("decoder", &level.decoder)] {
                for (i, p) in layers.iter().enumerate() {
                    out.push((format!("level{l}.{part}{i}.weight"), &p.weight));
                    out.push((format!("level{l}.{part}{i}.bias"), &p.bias));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.levels
            .iter_mut()
            .flat_map(|l| l.encoder.iter_mut().chain(l.decoder.iter_mut()))
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let mut pair = |p: &LayerParams| (leaf(&p.weight), leaf(&p.bias));
        let levels = self
            .levels
            .iter()
            .map(|l| (l.encoder.iter().map(&mut pair).collect(), l.decoder.iter().map(&mut pair).collect()))
            .collect();
        BoundModel { levels }
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        self.arch.layers().cloned().collect()
    }

    /// Encoder of pyramid level `level` applied to `x`; returns (mean, log-variance).
    pub fn encode_level_graph(&self, g: &mut Graph, bound: &BoundModel, level: usize, x: Var) -> Result<(Var, Var)> {
        let specs = self.layer_specs();
        let n = specs.len();
        let mut h = x;
        for (i, (spec, &(w, b))) in specs.iter().zip(&bound.levels[level].0).enumerate() {
            h = match *spec {
                LayerSpec::Conv { stride, padding, .. } => g.conv2d(h, w, stride, padding)?,
                LayerSpec::Dense { .. } => g.dense(h, w)?,
            };
            h = g.add_bias(h, b)?;
            if i + 1 < n {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        let c = self.arch.code_width();
        Ok((g.slice_last(h, 0, c)?, g.slice_last(h, c, c)?))
    }

    /// Decoder of pyramid level `level` applied to the code `z`. `plan` is
    /// the encoder shape chain of that level, which fixes every output size.
    pub fn decode_level_graph(&self, g: &mut Graph, bound: &BoundModel, level: usize, z: Var, plan: &LevelPlan) -> Result<Var> {
        let specs = self.layer_specs();
        let n = specs.len();
        if g.value(z).shape() != plan.code_shape() {
            return Err(Error::shape(format!(
                "level {level} code is {:?}, decoder expects {:?}",
                g.value(z).shape(),
                plan.code_shape()
            )));
        }
        let mut h = z;
        for (j, &(w, b)) in bound.levels[level].1.iter().enumerate() {
            let i = n - 1 - j;
            let target = &plan.shapes[i];
            h = match specs[i] {
                LayerSpec::Conv { stride, padding, .. } => {
                    g.conv2d_transpose(h, w, stride, padding, Some((target[0], target[1])))?
                }
                LayerSpec::Dense { .. } => g.dense(h, w)?,
            };
            h = g.add_bias(h, b)?;
            if g.value(h).shape() != target.as_slice() {
                h = g.reshape(h, target)?;
            }
            if j + 1 < n {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Encoder shape plans for an image of the size implied by `codes`.
    pub fn plans_for_codes(&self, code_shapes: &[&[usize]]) -> Result<Vec<LevelPlan>> {
        if code_shapes.len() != self.arch.levels {
            return Err(Error::shape(format!(
                "{} code fields given, model has {} levels",
                code_shapes.len(),
                self.arch.levels
            )));
        }
        let first = code_shapes[0];
        let (h, w) = match first {
            [ch, cw, _] => self.arch.image_size_for_code(*ch, *cw),
            _ => (self.arch.patch_size, self.arch.patch_size),
        };
        let plans = self.arch.plan(h, w)?;
        for (l, (plan, shape)) in plans.iter().zip(code_shapes).enumerate() {
            if plan.code_shape() != *shape {
                return Err(Error::shape(format!(
                    "level {l} code is {shape:?}, expected {:?} for a {h}x{w} image",
                    plan.code_shape()
                )));
            }
        }
        Ok(plans)
    }

    /// Decodes every level and sums them back up the pyramid.
    pub fn decode_graph(&self, g: &mut Graph, bound: &BoundModel, codes: &[Var]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = codes.iter().map(|&z| g.value(z).shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let plans = self.plans_for_codes(&refs)?;
        let mut decoded = Vec::with_capacity(codes.len());
        for (l, (&z, plan)) in codes.iter().zip(&plans).enumerate() {
            decoded.push(self.decode_level_graph(g, bound, l, z, plan)?);
        }
        self.collapse_graph(g, &decoded)
    }

    fn collapse_graph(&self, g: &mut Graph, levels: &[Var]) -> Result<Var> {
        let mut x = *levels.last().unwrap();
        for &band in levels.iter().rev().skip(1) {
            let up = g.pyr_up(x, &self.pyramid)?;
            x = g.add(up, band)?;
        }
        Ok(x)
    }

    fn pyramid_of(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let (h, w, _) = image.hwc()?;
        self.arch.plan(h, w)?;
        Ok(pyramid::build_pyramid_with(image, self.arch.levels, &self.pyramid)?.into_levels())
    }

    /// Code fields of a model-domain image, one per pyramid level.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<CodeField>> {
        let levels = self.pyramid_of(image)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        levels
            .into_iter()
            .enumerate()
            .map(|(l, x)| {
                let x = g.constant(x);
                let (m, lv) = self.encode_level_graph(&mut g, &bound, l, x)?;
                CodeField::new(g.value(m).clone(), g.value(lv).clone())
            })
            .collect()
    }

    /// Model-domain image decoded from one code tensor per level.
    pub fn decode(&self, codes: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let vars: Vec<Var> = codes.iter().map(|c| g.constant(c.clone())).collect();
        let out = self.decode_graph(&mut g, &bound, &vars)?;
        Ok(g.value(out).clone())
    }

    /// `D(E(I).mean)` and its mean squared error against `image`, both in
    /// the model domain.
    pub fn reconstruct_patch(&self, image: &Tensor) -> Result<(Tensor, Real)> {
        let means: Vec<Tensor> = self.encode(image)?.into_iter().map(|c| c.mean).collect();
        let out = self.decode(&means)?;
        let err = out.sub(image)?.map(|v| v * v).mean();
        Ok((out, err))
    }

    /// Records the ELBO of one model-domain image on `g`. `noise` holds one
    /// standard-normal tensor per level, shaped like that level's code.
    pub fn elbo_graph(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        image: &Tensor,
        noise: &[Tensor],
        kl_weight: Real,
        weights: &LossWeights,
    ) -> Result<ElboVars> {
        let levels = self.pyramid_of(image)?;
        if noise.len() != levels.len() {
            return Err(Error::shape("one noise tensor per level is required"));
        }
        let (h, w, _) = image.hwc()?;
        let plans = self.arch.plan(h, w)?;
        let mut residual_parts = Vec::with_capacity(levels.len());
        let mut kl_parts = Vec::with_capacity(levels.len());
        let mut decoded = Vec::new();
        for (l, target) in levels.into_iter().enumerate() {
            let x = g.constant(target);
            let (mu, lv) = self.encode_level_graph(g, bound, l, x)?;
            let half = g.scale(lv, 0.5)?;
            let sd = g.exp(half)?;
            let eps = g.constant(noise[l].clone());
            let spread = g.mul(sd, eps)?;
            let z = g.add(mu, spread)?;
            let d = self.decode_level_graph(g, bound, l, z, &plans[l])?;
            decoded.push(d);

            let diff = g.sub(d, x)?;
            let sq = g.square(diff)?;
            residual_parts.push((g.sum(sq)?, g.value(sq).len()));
            // KL(N(mu, s^2) || N(0, 1)) per element: (s^2 + mu^2 - 1 - log s^2) / 2
            let var = g.exp(lv)?;
            let mu2 = g.square(mu)?;
            let t = g.add(var, mu2)?;
            let t = g.sub(t, lv)?;
            let t = g.add_scalar(t, -1.0)?;
            kl_parts.push((g.sum(t)?, g.value(t).len()));
        }
        let values = image.len();
        let residual = normalize(g, &residual_parts, weights.residual_mean, 1.0, values)?;
        let kl = normalize(g, &kl_parts, weights.kl_mean, 0.5, values)?;
        let image_out = self.collapse_graph(g, &decoded)?;
        let image_prior = g.gradient_l1(image_out)?;
        let a = g.scale(residual, weights.residual)?;
        let b = g.scale(kl, kl_weight)?;
        let c = g.scale(image_prior, weights.image_prior)?;
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        Ok(ElboVars { total, residual, kl, image_prior })
    }

    /// Noise tensors for one ELBO sample of an `h x w` image.
    pub fn sample_noise(&self, h: usize, w: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        Ok(self
            .arch
            .plan(h, w)?
            .iter()
            .map(|p| {
                let shape = p.code_shape().to_vec();
                let n = shape.iter().product();
                Tensor::from_parts(shape, (0..n).map(|_| rng.sample::<Real, _>(StandardNormal)).collect())
            })
            .collect())
    }

    /// ELBO of one model-domain image at iteration `t`, with reparameterization
    /// noise drawn from `seed`.
    pub fn elbo_loss(&self, image: &Tensor, t: u64, weights: &LossWeights, seed: u64) -> Result<ElboTerms> {
        let (h, w, _) = image.hwc()?;
        let noise = self.sample_noise(h, w, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let kl_weight = weights.kl.at(t);
        let v = self.elbo_graph(&mut g, &bound, image, &noise, kl_weight, weights)?;
        let item = |v: Var| g.value(v).item();
        Ok(ElboTerms {
            total: item(v.total)?,
            residual: item(v.residual)?,
            kl: item(v.kl)?,
            image_prior: item(v.image_prior)?,
            kl_weight,
        })
    }
}
