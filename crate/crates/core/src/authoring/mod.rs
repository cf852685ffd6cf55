//! Generators for the three single-phenomenon training corpora and for
//! composite test images with known layers.
//!
//! * albedo: two-colour Mondrians ([`gen_mondrian`]);
//! * shading: Lambertian renders of untextured primitives ([`gen_shading`]);
//! * detail: shaded bump, ripple and crease swatches with the linear
//!   gradient removed ([`gen_detail`]).
//!
//! Everything is a pure function of its spec and seed.

mod detail;
mod mondrian;
mod shading;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use detail::{gen_detail, DetailKind, DetailSpec};
pub use mondrian::{gen_mondrian, point_in_polygon, MondrianSpec, DEFAULT_PALETTE};
pub use shading::{gen_shading, Primitive, Rendering, ShadingSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vae::{derive_seed, PatchSource};

/// Floor applied before taking logs of layer images.
pub const LOG_EPSILON: Real = 1e-3;

/// Least-squares plane `a + b x + c y` through one channel (pixel indices as
/// coordinates). Returns `[a, b, c]`.
pub fn fit_plane(image: &Tensor, channel: usize) -> Result<[Real; 3]> {
    let (h, w, _) = image.hwc()?;
    let (xm, ym) = ((w as Real - 1.0) / 2.0, (h as Real - 1.0) / 2.0);
    let (mut sf, mut sxf, mut syf, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let f = image.at(y, x, channel);
            let (dx, dy) = (x as Real - xm, y as Real - ym);
            sf += f;
            sxf += dx * f;
            syf += dy * f;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    // Centred coordinates on a full grid are orthogonal, so the normal
    // equations decouple.
    let b = if sxx > 0.0 { sxf / sxx } else { 0.0 };
    let c = if syy > 0.0 { syf / syy } else { 0.0 };
    let a = sf / (h * w) as Real - b * xm - c * ym;
    Ok([a, b, c])
}

/// Removes the best-fit plane of every channel, recentres at 0.5 and clips
/// to `[0, 1]`.
pub fn remove_gradient(image: &Tensor) -> Tensor {
    let (h, w, ch) = image.hwc().expect("remove_gradient needs an HWC image");
    let planes: Vec<[Real; 3]> = (0..ch).map(|c| fit_plane(image, c).unwrap()).collect();
    Tensor::from_hwc_fn(h, w, ch, |y, x, c| {
        let [a, b, cc] = planes[c];
        (image.at(y, x, c) - (a + b * x as Real + cc * y as Real) + 0.5).clamp(0.0, 1.0)
    })
}

/// `exp(log A + log S [+ log D])`, evaluated as a product. Values below
/// [`LOG_EPSILON`] are clamped with a warning.
pub fn compose(albedo: &Tensor, shading: &Tensor, detail: Option<&Tensor>) -> Result<Tensor> {
    albedo.same_shape(shading, "compose shading")?;
    if let Some(d) = detail {
        albedo.same_shape(d, "compose detail")?;
    }
    let mut clamped = 0usize;
    let mut clamp = |v: Real| {
        if v < LOG_EPSILON {
            clamped += 1;
            LOG_EPSILON
        } else {
            v
        }
    };
    let mut out = Vec::with_capacity(albedo.len());
    for i in 0..albedo.len() {
        let mut v = clamp(albedo.data()[i]) * clamp(shading.data()[i]);
        if let Some(d) = detail {
            v *= clamp(d.data()[i]);
        }
        out.push(v);
    }
    if clamped > 0 {
        log::warn!("compose: clamped {clamped} values below {LOG_EPSILON} before taking logs");
    }
    Tensor::new(albedo.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub rotate: bool,
    pub flip: bool,
    /// Least fraction of the crop that must lie inside the mask.
    pub min_mask_fraction: Real,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions { rotate: true, flip: true, min_mask_fraction: 0.8 }
    }
}

/// Rotates by `quarter_turns * 90` degrees counter-clockwise, then mirrors
/// horizontally when `flip` is set.
pub fn rot90_flip(image: &Tensor, quarter_turns: usize, flip: bool) -> Tensor {
    let (h, w, c) = image.hwc().expect("rot90_flip needs an HWC image");
    let k = quarter_turns % 4;
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    Tensor::from_hwc_fn(oh, ow, c, |y, x, ch| {
        let x = if flip { ow - 1 - x } else { x };
        let (sy, sx) = match k {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        image.at(sy, sx, ch)
    })
}

/// Uniform random square crop with optional rotation and flip. With a mask,
/// crops are redrawn until at least `min_mask_fraction` of the crop is inside
/// it; the best of 1000 draws is rejected with an error if it falls short.
pub fn crop_augment_with(
    image: &Tensor,
    mask: Option<&Tensor>,
    patch: usize,
    opts: &AugmentOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (h, w, _) = image.hwc()?;
    if h < patch || w < patch || patch == 0 {
        return Err(Error::shape(format!("cannot cut a {patch}x{patch} crop from a {h}x{w} image")));
    }
    let draw = |rng: &mut ChaCha8Rng| (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch));
    let (top, left) = match mask {
        None => draw(rng),
        Some(m) => {
            let mut best = ((0, 0), -1.0);
            for _ in 0..1000 {
                let (t, l) = draw(rng);
                let crop = m.crop(t, l, patch, patch)?;
                let frac = crop.data().iter().filter(|&&v| v > 0.0).count() as Real / crop.len() as Real;
                if frac > best.1 {
                    best = ((t, l), frac);
                }
                if frac >= opts.min_mask_fraction {
                    break;
                }
            }
            if best.1 < opts.min_mask_fraction {
                return Err(Error::Empty(format!(
                    "no crop reaches {:.0}% mask coverage (best {:.1}%)",
                    100.0 * opts.min_mask_fraction,
                    100.0 * best.1
                )));
            }
            best.0
        }
    };
    let crop = image.crop(top, left, patch, patch)?;
    let turns = if opts.rotate { rng.random_range(0..4) } else { 0 };
    let flip = opts.flip && rng.random_bool(0.5);
    Ok(rot90_flip(&crop, turns, flip))
}

/// Seeded crop of an unmasked image.
pub fn crop_augment(image: &Tensor, patch: usize, seed: u64) -> Result<Tensor> {
    crop_augment_with(image, None, patch, &AugmentOptions::default(), &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Albedo,
    Shading,
    Detail,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Albedo => "albedo",
            LayerKind::Shading => "shading",
            LayerKind::Detail => "detail",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "albedo" => Ok(LayerKind::Albedo),
            "shading" => Ok(LayerKind::Shading),
            "detail" => Ok(LayerKind::Detail),
            other => Err(Error::config(format!("unknown layer {other:?}"))),
        }
    }

    fn tag(self) -> u64 {
        match self {
            LayerKind::Albedo => 1,
            LayerKind::Shading => 2,
            LayerKind::Detail => 3,
        }
    }
}

/// Corpus sizes and image extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPreset {
    pub name: String,
    pub albedo_count: usize,
    pub shading_count: usize,
    pub detail_count: usize,
    /// Side of the Mondrian canvases.
    pub albedo_canvas: usize,
    /// Side of the shading renders; the object fills most of the frame, so
    /// crops well inside it exist.
    pub shading_canvas: usize,
    /// Side of the detail swatches.
    pub detail_canvas: usize,
    /// Training crop size.
    pub patch: usize,
    pub fill: Real,
}

impl CorpusPreset {
    pub fn paper() -> Self {
        CorpusPreset {
            name: "paper".into(),
            albedo_count: 500,
            shading_count: 70,
            detail_count: 45,
            albedo_canvas: 150,
            shading_canvas: 500,
            detail_canvas: 300,
            patch: 128,
            fill: 0.1,
        }
    }

    pub fn desk() -> Self {
        CorpusPreset {
            name: "desk".into(),
            albedo_count: 100,
            shading_count: 30,
            detail_count: 20,
            albedo_canvas: 80,
            shading_canvas: 256,
            detail_canvas: 160,
            patch: 64,
            fill: 0.1,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        match kind {
            LayerKind::Albedo => self.albedo_count,
            LayerKind::Shading => self.shading_count,
            LayerKind::Detail => self.detail_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum ItemSpec {
    Mondrian(MondrianSpec),
    Shading(ShadingSpec),
    Detail(DetailSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuthoredItem {
    pub spec: ItemSpec,
    pub image: Tensor,
    pub mask: Option<Tensor>,
}

/// Spec of item `index` of a corpus, derived from the corpus seed.
pub fn item_spec(kind: LayerKind, preset: &CorpusPreset, seed: u64, index: usize) -> ItemSpec {
    let s = derive_seed(&[seed, kind.tag(), index as u64]);
    match kind {
        LayerKind::Albedo => ItemSpec::Mondrian(MondrianSpec::new(preset.albedo_canvas, s)),
        LayerKind::Shading => ItemSpec::Shading(ShadingSpec::random(preset.shading_canvas, preset.fill, s)),
        LayerKind::Detail => ItemSpec::Detail(DetailSpec::random(preset.detail_canvas, s)),
    }
}

pub fn render_item(spec: &ItemSpec) -> Result<AuthoredItem> {
    let (image, mask) = match spec {
        ItemSpec::Mondrian(s) => (gen_mondrian(s)?, None),
        ItemSpec::Shading(s) => {
            let r = gen_shading(s)?;
            (r.image, Some(r.mask))
        }
        ItemSpec::Detail(s) => (gen_detail(s), None),
    };
    Ok(AuthoredItem { spec: spec.clone(), image, mask })
}

/// The full corpus of one layer kind.
pub fn author_corpus(kind: LayerKind, preset: &CorpusPreset, seed: u64) -> Result<Vec<AuthoredItem>> {
    (0..preset.count(kind)).into_par_iter().map(|i| render_item(&item_spec(kind, preset, seed, i))).collect()
}

/// Random augmented crops from authored images; masked images only yield
/// crops that lie mostly on the object.
#[derive(Clone, Debug)]
pub struct CropSource {
    pub images: Vec<Tensor>,
    pub masks: Vec<Option<Tensor>>,
    pub patch: usize,
    pub options: AugmentOptions,
}

impl CropSource {
    pub fn from_items(items: &[AuthoredItem], patch: usize) -> Self {
        CropSource {
            images: items.iter().map(|i| i.image.clone()).collect(),
            masks: items.iter().map(|i| i.mask.clone()).collect(),
            patch,
            options: AugmentOptions::default(),
        }
    }
}

impl PatchSource for CropSource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn patch(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let img = self.images.get(index).ok_or_else(|| Error::shape(format!("image index {index} out of range")))?;
        let mask = self.masks.get(index).and_then(Option::as_ref);
        crop_augment_with(img, mask, self.patch, &self.options, rng)
    }
}

/// A composite image together with the layers that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub image: Tensor,
    pub albedo: Tensor,
    pub shading: Tensor,
    pub detail: Option<Tensor>,
    pub albedo_spec: MondrianSpec,
    pub shading_spec: ShadingSpec,
    pub detail_spec: Option<DetailSpec>,
}

impl Composite {
    /// Shading times detail: the ground truth for a two-layer shading estimate.
    pub fn total_shading(&self) -> Tensor {
        match &self.detail {
            Some(d) => self.shading.mul(d).expect("layer shapes agree"),
            None => self.shading.clone(),
        }
    }
}

/// Mondrian times a rendered primitive (times a detail swatch when
/// `with_detail`), all `size x size`. The shading is cut from a render at
/// twice the size so the whole frame lies on the object. With detail the
/// primitive is a sphere, so the shading is smooth and the high band of
/// the shading product belongs to the swatch rather than to object edges.
pub fn make_composite(size: usize, seed: u64, fill: Real, with_detail: bool) -> Result<Composite> {
    let albedo_spec = MondrianSpec::new(size, derive_seed(&[seed, 11]));
    let albedo = gen_mondrian(&albedo_spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 12]));
    let full = AugmentOptions { rotate: true, flip: true, min_mask_fraction: 1.0 };
    let mut shading = None;
    for attempt in 0..8u64 {
        let mut spec = ShadingSpec::random(2 * size, fill, derive_seed(&[seed, 13, attempt]));
        spec.extent = 1.1;
        if with_detail {
            spec.primitive = Primitive::Sphere;
        }
        let r = gen_shading(&spec)?;
        if let Ok(crop) = crop_augment_with(&r.image, Some(&r.mask), size, &full, &mut rng) {
            shading = Some((crop, spec));
            break;
        }
    }
    let (shading, mut shading_spec) = match shading {
        Some(s) => s,
        None => {
            let mut spec = ShadingSpec::random(2 * size, fill, derive_seed(&[seed, 14]));
            spec.primitive = Primitive::Sphere;
            spec.extent = 1.1;
            let r = gen_shading(&spec)?;
            let c = size / 2;
            (r.image.crop(c, c, size, size)?, spec)
        }
    };
    shading_spec.size = 2 * size;
    let detail_spec = with_detail.then(|| DetailSpec::random(size, derive_seed(&[seed, 15])));
    let detail = detail_spec.as_ref().map(gen_detail);
    let image = compose(&albedo, &shading, detail.as_ref())?;
    Ok(Composite { image, albedo, shading, detail, albedo_spec, shading_spec, detail_spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn colours(img: &Tensor) -> BTreeSet<Vec<u64>> {
        img.data().chunks(3).map(|p| p.iter().map(|v| v.to_bits() as u64).collect()).collect()
    }

    #[test]
    fn mondrian_has_two_colours_and_is_seeded() {
        for seed in 0..10 {
            let spec = MondrianSpec::new(150, seed);
            let img = gen_mondrian(&spec).unwrap();
            assert_eq!(colours(&img).len(), 2);
            assert_eq!(img, gen_mondrian(&spec).unwrap());
        }
    }

    #[test]
    fn sphere_lit_from_the_viewer() {
        let spec = ShadingSpec { primitive: Primitive::Sphere, light: [0.0, 0.0, 1.0], fill: 0.1, size: 64, extent: 1.0, seed: 3 };
        let r = gen_shading(&spec).unwrap();
        assert!((r.image.max_value() - 1.0).abs() < 1e-3);
        let on: Vec<Real> = (0..64 * 64).filter(|&i| r.mask.data()[i] > 0.0).map(|i| r.image.data()[i * 3]).collect();
        assert!(on.iter().all(|&v| v >= 0.1 && v <= 1.0));
    }

    #[test]
    fn every_primitive_renders_something() {
        for p in Primitive::ALL {
            for seed in 0..4 {
                let spec = ShadingSpec { primitive: p, light: [0.0, 0.6, 0.8], fill: 0.01, size: 48, extent: 1.0, seed };
                let r = gen_shading(&spec).unwrap();
                let cov = r.mask.mean();
                assert!(cov > 0.1, "{p:?} seed {seed} covers {cov}");
                assert!(r.image.min_value() >= 0.01 - 1e-12);
            }
        }
    }

    #[test]
    fn fill_floor_on_object() {
        let spec = ShadingSpec { primitive: Primitive::Sphere, light: [0.0, 0.0, 1.0], fill: 0.1, size: 32, extent: 1.0, seed: 0 };
        assert!(gen_shading(&ShadingSpec { light: [0.0, 0.0, 2.0], ..spec.clone() }).is_err());
        let back = ShadingSpec { light: [0.0, 0.0, -1.0], ..spec };
        let r = gen_shading(&back).unwrap();
        assert!(r.image.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn zero_amplitude_detail_is_flat() {
        for kind in DetailKind::ALL {
            let d = gen_detail(&DetailSpec { kind, amplitude: 0.0, scale: 4.0, size: 32, seed: 1 });
            assert!(d.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn ramp_becomes_constant() {
        let ramp = Tensor::from_hwc_fn(9, 7, 1, |y, x, _| 0.2 + 0.03 * x as Real - 0.01 * y as Real);
        let flat = remove_gradient(&ramp);
        assert!(flat.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn compose_identities() {
        let a = gen_mondrian(&MondrianSpec::new(20, 1)).unwrap();
        let one = Tensor::full(a.shape(), 1.0);
        assert_eq!(compose(&a, &one, None).unwrap(), a);
    }

    #[test]
    fn rotations_compose() {
        let img = Tensor::from_hwc_fn(3, 5, 1, |y, x, _| (y * 5 + x) as Real);
        let four = (0..4).fold(img.clone(), |acc, _| rot90_flip(&acc, 1, false));
        assert_eq!(four, img);
        assert_eq!(rot90_flip(&img, 1, false).shape(), &[5, 3, 1]);
        assert_eq!(rot90_flip(&rot90_flip(&img, 0, true), 0, true), img);
    }

    #[test]
    fn every_desk_shading_admits_training_crops() {
        let preset = CorpusPreset::desk();
        let items = author_corpus(LayerKind::Shading, &preset, 5).unwrap();
        let source = CropSource::from_items(&items, preset.patch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..items.len() {
            source.patch(i, &mut rng).unwrap();
        }
    }

    #[test]
    fn masked_crops_stay_on_the_object() {
        let spec = ShadingSpec { primitive: Primitive::Sphere, light: [0.0, 0.0, 1.0], fill: 0.1, size: 80, extent: 1.0, seed: 2 };
        let r = gen_shading(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let opts = AugmentOptions { rotate: false, flip: false, min_mask_fraction: 0.8 };
        for _ in 0..20 {
            let c = crop_augment_with(&r.mask, Some(&r.mask), 40, &opts, &mut rng).unwrap();
            assert!(c.mean() >= 0.8);
        }
        assert_eq!(crop_augment(&r.image, 80, 5).unwrap().shape(), r.image.shape());
    }

    #[test]
    fn composites_are_log_additive() {
        let c = make_composite(64, 7, 0.1, true).unwrap();
        let d = c.detail.as_ref().unwrap();
        for i in 0..c.image.len() {
            let r = c.image.data()[i].ln() - c.albedo.data()[i].ln() - c.shading.data()[i].ln() - d.data()[i].max(LOG_EPSILON).ln();
            assert!(r.abs() < 1e-12);
        }
    }
}
