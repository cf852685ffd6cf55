//! Representational comparison of the four VAE kinds: train each on the same
//! patches and measure reconstruction error on held-out patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::recon_l2;
use crate::prior::image_l1_gradient;
use crate::tensor::{Real, Tensor};
use crate::vae::{train, FixedPatches, TrainConfig, VaeArch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub kind: String,
    pub parameters: usize,
    pub code_size: usize,
    pub iterations: u64,
    pub final_train_loss: Real,
    pub untrained_heldout_l2: Real,
    pub heldout_l2: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub train_patches: usize,
    pub heldout_patches: usize,
    pub config: TrainConfig,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn entry(&self, name: &str) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// True when the held-out errors strictly increase along `names`.
    pub fn strictly_ordered(&self, names: &[&str]) -> bool {
        let errs: Option<Vec<Real>> = names.iter().map(|n| self.entry(n).map(|e| e.heldout_l2)).collect();
        errs.is_some_and(|e| e.windows(2).all(|w| w[0] < w[1]))
    }
}

/// Trains every architecture on `train_patches` and scores it on `heldout`.
pub fn bench_vae(archs: &[VaeArch], train_patches: &[Tensor], heldout: &[Tensor], config: &TrainConfig) -> Result<BenchReport> {
    if train_patches.is_empty() || heldout.is_empty() {
        return Err(Error::Empty("bench needs training and held-out patches".into()));
    }
    let source = FixedPatches(train_patches.to_vec());
    let mut entries = Vec::with_capacity(archs.len());
    for arch in archs {
        let untrained = crate::vae::LayerModel::init(
            arch.clone(),
            crate::vae::ModelMeta {
                layer: "bench".into(),
                dataset: "bench".into(),
                seed: config.seed,
                iterations: 0,
                domain: config.domain,
            },
        )?;
        let untrained_heldout_l2 = recon_l2(&untrained, heldout)?;
        log::info!("training {} ({} parameters)", arch.name, arch.parameter_count()?);
        let (model, history) = train(arch.clone(), &source, *config)?;
        let heldout_l2 = recon_l2(&model, heldout)?;
        log::info!("{}: held-out L2 {heldout_l2:.6}", arch.name);
        entries.push(BenchEntry {
            name: arch.name.clone(),
            kind: arch.kind.label().into(),
            parameters: arch.parameter_count()?,
            code_size: arch.code_size()?,
            iterations: model.meta.iterations,
            final_train_loss: history.last().map_or(Real::NAN, |r| r.total),
            untrained_heldout_l2,
            heldout_l2,
        });
    }
    Ok(BenchReport { train_patches: train_patches.len(), heldout_patches: heldout.len(), config: *config, entries })
}

/// Averages `factor x factor` blocks; trailing rows and columns that do not
/// fill a block are dropped.
pub fn box_downscale(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if factor == 0 || h < factor || w < factor {
        return Err(Error::config(format!("cannot downscale {h}x{w} by {factor}")));
    }
    let norm = 1.0 / (factor * factor) as Real;
    Ok(Tensor::from_hwc_fn(h / factor, w / factor, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += image.at(y * factor + dy, x * factor + dx, ch);
            }
        }
        acc * norm
    }))
}

/// Training and held-out crops from photographs. Each photo is split by
/// columns: the right `heldout_fraction` of it only feeds held-out crops and
/// the rest only training crops, so no held-out pixel is ever trained on.
/// Gray photos are replicated to three channels.
pub fn photo_patches(
    photos: &[Tensor],
    patch: usize,
    train_count: usize,
    heldout_count: usize,
    heldout_fraction: Real,
    seed: u64,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if photos.is_empty() {
        return Err(Error::Empty("no photographs".into()));
    }
    if !(0.0..1.0).contains(&heldout_fraction) || heldout_fraction == 0.0 {
        return Err(Error::config(format!("held-out fraction {heldout_fraction} must lie in (0, 1)")));
    }
    let mut parts = Vec::with_capacity(photos.len());
    for p in photos {
        let (h, w, c) = p.hwc()?;
        let rgb = match c {
            3 => p.clone(),
            1 => Tensor::from_hwc_fn(h, w, 3, |y, x, _| p.at(y, x, 0)),
            _ => return Err(Error::shape(format!("photo has {c} channels"))),
        };
        let split = ((w as Real) * (1.0 - heldout_fraction)).round() as usize;
        if h < patch || split < patch || w - split < patch {
            return Err(Error::shape(format!("a {h}x{w} photo cannot hold {patch}x{patch} crops on both sides of its split")));
        }
        parts.push((rgb.crop(0, 0, h, split)?, rgb.crop(0, split, h, w - split)?));
    }
    let draw = |count: usize, heldout: bool| -> Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::vae::derive_seed(&[seed, 0xF070, heldout as u64]));
        let opts = crate::authoring::AugmentOptions { rotate: false, flip: false, min_mask_fraction: 0.0 };
        (0..count)
            .map(|_| {
                let i = rng.random_range(0..parts.len());
                let src = if heldout { &parts[i].1 } else { &parts[i].0 };
                crate::authoring::crop_augment_with(src, None, patch, &opts, &mut rng)
            })
            .collect()
    };
    let train = draw(train_count, false)?;
    let heldout = draw(heldout_count, true)?;
    Ok((train, heldout))
}

/// The `keep` patches with the most texture (mean absolute gradient), in
/// their original order. Ties go to the earlier patch. Scoring on textured
/// patches keeps flat background out of the held-out set.
pub fn most_textured(patches: Vec<Tensor>, keep: usize) -> Result<Vec<Tensor>> {
    if keep >= patches.len() {
        return Ok(patches);
    }
    let scores = patches.iter().map(image_l1_gradient).collect::<Result<Vec<Real>>>()?;
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen = vec![false; patches.len()];
    for &i in &order[..keep] {
        chosen[i] = true;
    }
    Ok(patches.into_iter().zip(chosen).filter_map(|(p, c)| c.then_some(p)).collect())
}

/// Dead-leaves patches: occluding discs with power-law radii, each carrying
/// a colour, a linear shading ramp and fine value texture. Used as a
/// stand-in natural-image corpus when no photographs are supplied.
pub fn dead_leaves_patches(count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::vae::derive_seed(&[seed, 0xDEAD, i as u64]));
            dead_leaves(size, &mut rng)
        })
        .collect()
}

fn dead_leaves(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = size as Real;
    let mut img = vec![0.5; size * size * 3];
    let mut covered = vec![false; size * size];
    let mut remaining = size * size;
    // Front-to-back: each disc paints only pixels no earlier disc covered.
    for _ in 0..400 {
        if remaining == 0 {
            break;
        }
        let (rmin, rmax): (Real, Real) = (1.5, 0.6 * n);
        // Radius density proportional to r^-3 on [rmin, rmax].
        let u: Real = rng.random_range(0.0..1.0);
        let r = 1.0 / ((1.0 - u) / (rmin * rmin) + u / (rmax * rmax)).sqrt();
        let (cx, cy) = (rng.random_range(-0.2 * n..1.2 * n), rng.random_range(-0.2 * n..1.2 * n));
        let base: [Real; 3] = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let grey: Real = rng.random_range(0.0..1.0);
        let colour: Vec<Real> = base.iter().map(|c| 0.5 * c + 0.5 * grey).collect();
        let (gx, gy) = (rng.random_range(-0.4..0.4) / n, rng.random_range(-0.4..0.4) / n);
        let tex: Real = rng.random_range(0.0..0.06);
        for y in 0..size {
            for x in 0..size {
                let p = y * size + x;
                if covered[p] {
                    continue;
                }
                let (dx, dy) = (x as Real + 0.5 - cx, y as Real + 0.5 - cy);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                covered[p] = true;
                remaining -= 1;
                let shade = 1.0 + gx * dx + gy * dy + tex * rng.random_range(-1.0..1.0);
                for c in 0..3 {
                    img[p * 3 + c] = (colour[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(vec![size, size, 3], img).expect("finite by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dead_leaves_are_seeded_and_bounded() {
        let a = dead_leaves_patches(3, 32, 1);
        assert_eq!(a, dead_leaves_patches(3, 32, 1));
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|p| p.min_value() >= 0.0 && p.max_value() <= 1.0));
    }

    #[test]
    fn photo_split_keeps_heldout_pixels_apart() {
        // Column index encoded in the pixel value identifies where a crop came from.
        let photo = Tensor::from_hwc_fn(40, 100, 1, |_, x, _| x as Real);
        let (train, held) = photo_patches(&[photo], 8, 50, 20, 0.25, 3).unwrap();
        assert_eq!((train.len(), held.len()), (50, 20));
        assert!(train.iter().all(|p| p.max_value() < 75.0 && p.shape() == [8, 8, 3]));
        assert!(held.iter().all(|p| p.min_value() >= 75.0));
    }

    #[test]
    fn downscale_averages_blocks() {
        let img = Tensor::from_hwc_fn(5, 4, 1, |y, x, _| (y * 4 + x) as Real);
        let d = box_downscale(&img, 2).unwrap();
        assert_eq!(d.shape(), &[2, 2, 1]);
        assert_eq!(d.at(1, 1, 0), (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn most_textured_keeps_busy_patches_in_order() {
        let flat = Tensor::full(&[4, 4, 3], 0.5);
        let busy = |k: Real| Tensor::from_hwc_fn(4, 4, 3, |y, x, _| k * ((x + y) % 2) as Real);
        let patches = vec![flat.clone(), busy(0.2), flat.clone(), busy(0.9), busy(0.2)];
        let kept = most_textured(patches.clone(), 2).unwrap();
        assert_eq!(kept, vec![busy(0.2), busy(0.9)]);
        assert_eq!(most_textured(patches.clone(), 9).unwrap(), patches);
    }

    #[test]
    fn ordering_check() {
        let entry = |name: &str, e: Real| BenchEntry {
            name: name.into(),
            kind: String::new(),
            parameters: 0,
            code_size: 0,
            iterations: 0,
            final_train_loss: 0.0,
            untrained_heldout_l2: 1.0,
            heldout_l2: e,
        };
        let r = BenchReport {
            train_patches: 1,
            heldout_patches: 1,
            config: TrainConfig::default(),
            entries: vec![entry("a", 0.1), entry("b", 0.2), entry("c", 0.2)],
        };
        assert!(r.strictly_ordered(&["a", "b"]));
        assert!(!r.strictly_ordered(&["a", "b", "c"]));
        assert!(!r.strictly_ordered(&["a", "zzz"]));
    }
}
