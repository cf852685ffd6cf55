//! Laplacian pyramids.
//!
//! `down` blurs with a separable kernel and keeps every second pixel starting
//! at index 0; `up` inserts zeros and blurs with gain 2 per axis. Level `l` of
//! the pyramid is `G_l - up(G_{l+1})` with `G_0` the image, and the last level
//! is the low-pass residual itself, so reconstruction is exact up to rounding.
//!
//! The adjoints of `down` and `up` are exposed for the autodiff graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// Mirror about the edge pixel without repeating it (`-1 -> 1`).
    Reflect,
    /// Repeat the edge pixel.
    Replicate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Odd-length blur taps; they should sum to one.
    pub taps: Vec<Real>,
    pub border: Border,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            taps: vec![1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0],
            border: Border::Reflect,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.len() % 2 == 0 {
            return Err(Error::config("blur kernel must have odd length"));
        }
        if self.taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("blur kernel has non-finite taps"));
        }
        Ok(())
    }
}

fn border_index(i: isize, n: usize, border: Border) -> usize {
    if n == 1 {
        return 0;
    }
    match border {
        Border::Replicate => i.clamp(0, n as isize - 1) as usize,
        Border::Reflect => {
            let period = 2 * (n as isize - 1);
            let m = i.rem_euclid(period);
            if m >= n as isize {
                (period - m) as usize
            } else {
                m as usize
            }
        }
    }
}

/// Separable blur along one spatial axis (0 = rows/y, 1 = columns/x).
/// With `adjoint` the transpose of the same linear operator is applied.
fn blur_axis(x: &Tensor, axis: usize, cfg: &PyramidConfig, gain: Real, adjoint: bool) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = if axis == 0 { h } else { w };
    let half = (cfg.taps.len() / 2) as isize;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let offset = |y: usize, xx: usize| (y * w + xx) * c;
    for y in 0..h {
        for xx in 0..w {
            let i = if axis == 0 { y } else { xx };
            let dst = offset(y, xx);
            for (t, &tap) in cfg.taps.iter().enumerate() {
                let j = border_index(i as isize + t as isize - half, n, cfg.border);
                let other = if axis == 0 { offset(j, xx) } else { offset(y, j) };
                let wgt = tap * gain;
                if adjoint {
                    for ch in 0..c {
                        out[other + ch] += wgt * src[dst + ch];
                    }
                } else {
                    for ch in 0..c {
                        out[dst + ch] += wgt * src[other + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn blur2d(x: &Tensor, cfg: &PyramidConfig, gain: Real, adjoint: bool) -> Tensor {
    let once = blur_axis(x, 0, cfg, gain, adjoint);
    blur_axis(&once, 1, cfg, gain, adjoint)
}

fn subsample(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut data = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xx in 0..ow {
            let s = ((2 * y) * w + 2 * xx) * c;
            data.extend_from_slice(&x.data()[s..s + c]);
        }
    }
    Tensor::from_parts(vec![oh, ow, c], data)
}

fn zero_insert(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (sh, sw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = vec![0.0; h * w * c];
    for y in 0..sh {
        for xx in 0..sw {
            let d = ((2 * y) * w + 2 * xx) * c;
            let s = (y * sw + xx) * c;
            data[d..d + c].copy_from_slice(&x.data()[s..s + c]);
        }
    }
    Tensor::from_parts(vec![h, w, c], data)
}

/// Blur and decimate by two.
pub fn down(x: &Tensor, cfg: &PyramidConfig) -> Tensor {
    subsample(&blur2d(x, cfg, 1.0, false))
}

/// Adjoint of [`down`]; `hw` is the extent of the original (fine) input.
pub fn down_adjoint(g: &Tensor, hw: (usize, usize), cfg: &PyramidConfig) -> Tensor {
    blur2d(&zero_insert(g, hw.0, hw.1), cfg, 1.0, true)
}

/// Zero-insert to twice the extent, then blur with total gain 4.
pub fn up(x: &Tensor, cfg: &PyramidConfig) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    blur2d(&zero_insert(x, 2 * h, 2 * w), cfg, 2.0, false)
}

/// Adjoint of [`up`].
pub fn up_adjoint(g: &Tensor, cfg: &PyramidConfig) -> Tensor {
    subsample(&blur2d(g, cfg, 2.0, true))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    levels: Vec<Tensor>,
}

impl LaplacianPyramid {
    /// Wraps existing levels after checking that each one is twice the next.
    pub fn from_levels(levels: Vec<Tensor>) -> Result<Self> {
        check_chain(&levels)?;
        Ok(LaplacianPyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Band-pass levels followed by the low-pass residual.
    pub fn low_pass(&self) -> &Tensor {
        self.levels.last().expect("pyramid has at least one level")
    }
}

fn check_chain(levels: &[Tensor]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::shape("pyramid needs at least one level"));
    }
    for pair in levels.windows(2) {
        let (h, w, c) = pair[0].hwc()?;
        let (h2, w2, c2) = pair[1].hwc()?;
        if h != 2 * h2 || w != 2 * w2 || c != c2 {
            return Err(Error::shape(format!(
                "pyramid level chain broken: {h}x{w}x{c} followed by {h2}x{w2}x{c2}"
            )));
        }
    }
    levels[0].hwc().map(|_| ())
}

/// Checks that an `h x w` image supports `levels` pyramid levels.
pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::config("pyramid depth must be at least 1"));
    }
    let m = 1usize << (levels - 1);
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is not divisible by 2^{} for a {levels}-level pyramid",
            levels - 1
        )));
    }
    Ok(())
}

pub fn build_pyramid(image: &Tensor, levels: usize) -> Result<LaplacianPyramid> {
    build_pyramid_with(image, levels, &PyramidConfig::default())
}

pub fn build_pyramid_with(image: &Tensor, levels: usize, cfg: &PyramidConfig) -> Result<LaplacianPyramid> {
    cfg.validate()?;
    let (h, w, _) = image.hwc()?;
    check_divisible(h, w, levels)?;
    let mut gauss = vec![image.clone()];
    for _ in 1..levels {
        let next = down(gauss.last().unwrap(), cfg);
        gauss.push(next);
    }
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels - 1 {
        let band = gauss[l].sub(&up(&gauss[l + 1], cfg))?;
        out.push(band);
    }
    out.push(gauss.pop().unwrap());
    Ok(LaplacianPyramid { levels: out })
}

pub fn reconstruct(pyr: &LaplacianPyramid) -> Result<Tensor> {
    reconstruct_with(pyr, &PyramidConfig::default())
}

pub fn reconstruct_with(pyr: &LaplacianPyramid, cfg: &PyramidConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_chain(&pyr.levels)?;
    let mut acc = pyr.levels.last().unwrap().clone();
    for band in pyr.levels.iter().rev().skip(1) {
        acc = band.add(&up(&acc, cfg))?;
    }
    Ok(acc)
}

/// Nearest-neighbour resize of a code field to a larger (or equal) extent.
pub fn upsample_field(field: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = field.hwc()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::shape(format!("cannot upsample {h}x{w} to smaller {th}x{tw}")));
    }
    Ok(Tensor::from_hwc_fn(th, tw, c, |y, x, ch| field.at(y * h / th, x * w / tw, ch)))
}

/// Adjoint of [`upsample_field`]: sums each target cell into its source cell.
pub fn upsample_field_adjoint(g: &Tensor, source: (usize, usize)) -> Tensor {
    let (th, tw, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (h, w) = source;
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..th {
        for x in 0..tw {
            let (sy, sx) = (y * h / th, x * w / tw);
            for ch in 0..c {
                let v = out.at(sy, sx, ch) + g.at(y, x, ch);
                out.set(sy, sx, ch, v);
            }
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders, radius `ceil(3 sigma)`.
pub fn gaussian_blur(image: &Tensor, sigma: Real) -> Result<Tensor> {
    image.hwc()?;
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<Real> = (-radius..=radius)
        .map(|i| (-(i * i) as Real / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: Real = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let cfg = PyramidConfig { taps, border: Border::Reflect };
    Ok(blur2d(image, &cfg, 1.0, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_hwc_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_level_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(5, 7, 3, &mut rng);
        let p = build_pyramid(&img, 1).unwrap();
        assert_eq!(p.levels(), &[img.clone()]);
        assert_eq!(reconstruct(&p).unwrap(), img);
    }

    #[test]
    fn constant_image_has_zero_bands() {
        let img = Tensor::full(&[32, 32, 3], 0.37);
        let p = build_pyramid(&img, 4).unwrap();
        for band in &p.levels()[..3] {
            assert!(band.data().iter().all(|v| v.abs() < 1e-15), "band not zero");
        }
        assert!(p.low_pass().data().iter().all(|v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn level_shapes() {
        let p = build_pyramid(&Tensor::zeros(&[128, 128, 3]), 4).unwrap();
        let sizes: Vec<_> = p.levels().iter().map(|l| l.shape()[0]).collect();
        assert_eq!(sizes, vec![128, 64, 32, 16]);
        assert!(build_pyramid(&Tensor::zeros(&[20, 20, 3]), 4).is_err());
        assert!(build_pyramid(&Tensor::zeros(&[20, 20, 3]), 0).is_err());
    }

    #[test]
    fn round_trip_and_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(24, 16, 3, &mut rng);
        let p = build_pyramid(&img, 3).unwrap();
        assert!(reconstruct(&p).unwrap().max_abs_diff(&img).unwrap() < 1e-6);
        let zeros = LaplacianPyramid::from_levels(vec![
            Tensor::zeros(&[8, 8, 2]),
            Tensor::zeros(&[4, 4, 2]),
        ])
        .unwrap();
        assert!(reconstruct(&zeros).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(LaplacianPyramid::from_levels(vec![Tensor::zeros(&[8, 8, 2]), Tensor::zeros(&[3, 4, 2])]).is_err());
    }

    #[test]
    fn down_and_up_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PyramidConfig::default();
        for border in [Border::Reflect, Border::Replicate] {
            let cfg = PyramidConfig { border, ..cfg.clone() };
            let x = random_image(8, 6, 2, &mut rng);
            let y = random_image(4, 3, 2, &mut rng);
            let lhs = down(&x, &cfg).dot(&y).unwrap();
            let rhs = x.dot(&down_adjoint(&y, (8, 6), &cfg)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
            let lhs = up(&y, &cfg).dot(&x).unwrap();
            let rhs = y.dot(&up_adjoint(&x, &cfg)).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_field_cases() {
        let one = Tensor::new(vec![1, 1, 2], vec![0.5, -1.0]).unwrap();
        let big = upsample_field(&one, (4, 4)).unwrap();
        assert_eq!(big.shape(), &[4, 4, 2]);
        assert!(big.data().chunks(2).all(|p| p == [0.5, -1.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_image(5, 5, 4, &mut rng);
        assert_eq!(upsample_field(&f, (5, 5)).unwrap(), f);
        let u = upsample_field(&f, (13, 13)).unwrap();
        assert_eq!(u.shape(), &[13, 13, 4]);
        assert_eq!(u.at(12, 12, 3), f.at(4, 4, 3));
        assert_eq!(u.at(0, 0, 0), f.at(0, 0, 0));
        assert!(upsample_field(&f, (4, 13)).is_err());
        // adjoint
        let g = random_image(13, 13, 4, &mut rng);
        let lhs = u.dot(&g).unwrap();
        let rhs = f.dot(&upsample_field_adjoint(&g, (5, 5))).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gaussian_blur_preserves_constants() {
        let img = Tensor::full(&[10, 12, 3], 2.5);
        let b = gaussian_blur(&img, 2.0).unwrap();
        assert!(b.max_abs_diff(&img).unwrap() < 1e-12);
    }
}
