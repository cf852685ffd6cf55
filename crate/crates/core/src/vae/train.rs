use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, LayerModel, LossWeights, ModelMeta, VaeArch};
use crate::adam::{adam_step, AdamState, LrSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Real, Tensor};

/// Training patches, addressed by index.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear-domain patch for item `index`. Random crops and augmentation
    /// must draw only from `rng` so that runs are reproducible.
    fn patch(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

/// Pre-cut patches used as-is.
#[derive(Clone, Debug, Default)]
pub struct FixedPatches(pub Vec<Tensor>);

impl PatchSource for FixedPatches {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn patch(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::shape(format!("patch index {index} out of range")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub loss: LossWeights,
    pub epochs: u64,
    /// Stops early after this many iterations when set.
    pub max_iterations: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub domain: Domain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule::default(),
            loss: LossWeights::default(),
            epochs: 25,
            max_iterations: None,
            batch_size: 16,
            seed: 0,
            domain: Domain::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.loss.residual < 0.0 || self.loss.image_prior < 0.0 || self.loss.kl.max < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub lr: Real,
    pub kl_weight: Real,
    pub total: Real,
    pub residual: Real,
    pub kl: Real,
    pub image_prior: Real,
}

/// Mixes several integers into one seed (splitmix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Optimizer loop over a [`LayerModel`].
///
/// Batch composition, crops and reparameterization noise are pure functions
/// of `(seed, iteration)`, so a trainer rebuilt from a checkpoint continues
/// on exactly the trajectory the original run would have taken. A step that
/// produces a non-finite value fails before any parameter is touched, which
/// leaves `model` at the last good state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: LayerModel,
    pub optimizer: Vec<AdamState>,
    pub iteration: u64,
    pub config: TrainConfig,
    pub history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(mut model: LayerModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.meta.domain = config.domain;
        let optimizer = model.params().iter().map(|p| AdamState::new(p.shape())).collect();
        Ok(Trainer { model, optimizer, iteration: 0, config, history: Vec::new() })
    }

    /// Continues from saved optimizer state.
    pub fn resume(model: LayerModel, optimizer: Vec<AdamState>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = model.params();
        if params.len() != optimizer.len()
            || params.iter().zip(&optimizer).any(|(p, s)| p.shape() != s.first_moment.shape())
        {
            return Err(Error::shape("optimizer state does not match the model parameters"));
        }
        let iteration = model.meta.iterations;
        Ok(Trainer { model, optimizer, iteration, config, history: Vec::new() })
    }

    pub fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    pub fn total_iterations(&self, n: usize) -> u64 {
        let full = self.config.epochs * self.batches_per_epoch(n);
        self.config.max_iterations.map_or(full, |m| m.min(full))
    }

    /// Item indices of the batch at iteration `t`: consecutive slices of a
    /// per-epoch permutation.
    pub fn batch_indices(&self, n: usize, t: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch(n);
        let (epoch, pos) = (t / per_epoch, (t % per_epoch) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, 0x5EED, epoch])));
        let bs = self.config.batch_size;
        order[pos * bs..((pos + 1) * bs).min(n)].to_vec()
    }

    pub fn step(&mut self, source: &dyn PatchSource) -> Result<LossRecord> {
        let n = source.len();
        if n == 0 {
            return Err(Error::Empty("training corpus has no patches".into()));
        }
        let t = self.iteration;
        let cfg = self.config;
        let lr = cfg.schedule.at(t);
        let kl_weight = cfg.loss.kl.at(t);
        let indices = self.batch_indices(n, t);

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let mut parts = Vec::with_capacity(indices.len());
        for (slot, &idx) in indices.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, t, slot as u64]));
            let patch = source.patch(idx, &mut rng)?;
            let image = cfg.domain.forward(&patch);
            let (h, w, _) = image.hwc()?;
            let noise = self.model.sample_noise(h, w, &mut rng)?;
            parts.push(self.model.elbo_graph(&mut g, &bound, &image, &noise, kl_weight, &cfg.loss)?);
        }
        let mut total = parts[0].total;
        for p in &parts[1..] {
            total = g.add(total, p.total)?;
        }
        let loss = g.scale(total, 1.0 / parts.len() as Real)?;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
        for (i, gr) in grads.iter().enumerate() {
            gr.ensure_finite(&format!("gradient of parameter {i} at iteration {t}"))?;
        }
        for ((p, gr), s) in self.model.params_mut().into_iter().zip(&grads).zip(&mut self.optimizer) {
            adam_step(p, gr, s, lr)?;
        }

        let mean = |f: &dyn Fn(&super::ElboVars) -> crate::graph::Var| -> Result<Real> {
            let mut acc = 0.0;
            for p in &parts {
                acc += g.value(f(p)).item()?;
            }
            Ok(acc / parts.len() as Real)
        };
        let record = LossRecord {
            iteration: t,
            epoch: t / self.batches_per_epoch(n),
            lr,
            kl_weight,
            total: g.value(loss).item()?,
            residual: mean(&|p| p.residual)?,
            kl: mean(&|p| p.kl)?,
            image_prior: mean(&|p| p.image_prior)?,
        };
        self.iteration += 1;
        self.model.meta.iterations = self.iteration;
        self.history.push(record);
        Ok(record)
    }

    /// Steps until the configured epoch or iteration budget is reached.
    pub fn run(&mut self, source: &dyn PatchSource, mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        let end = self.total_iterations(source.len());
        while self.iteration < end {
            let r = self.step(source)?;
            on_step(&r);
        }
        Ok(())
    }
}

/// Initializes a model for `arch` and trains it on `source`.
pub fn train(arch: VaeArch, source: &dyn PatchSource, config: TrainConfig) -> Result<(LayerModel, Vec<LossRecord>)> {
    if source.is_empty() {
        return Err(Error::Empty("training corpus has no patches".into()));
    }
    let meta = ModelMeta {
        layer: String::new(),
        dataset: String::new(),
        seed: config.seed,
        iterations: 0,
        domain: config.domain,
    };
    let mut trainer = Trainer::new(LayerModel::init(arch, meta)?, config)?;
    trainer.run(source, |r| {
        log::debug!("iter {} loss {:.6} (residual {:.6}, kl {:.6})", r.iteration, r.total, r.residual, r.kl)
    })?;
    Ok((trainer.model, trainer.history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_per_part() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 0, 3]), derive_seed(&[7, 0, 3]));
    }

    #[test]
    fn epoch_covers_every_item_once() {
        let model = LayerModel::init(
            VaeArch::authored_desk(),
            ModelMeta { layer: "t".into(), dataset: "t".into(), seed: 0, iterations: 0, domain: Domain::default() },
        )
        .unwrap();
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let tr = Trainer::new(model, cfg).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|t| tr.batch_indices(10, t)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(tr.batches_per_epoch(10), 3);
    }
}
