use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailKind {
    /// Smooth value-noise bumps.
    BumpNoise,
    /// Sinusoidal ripples with a slowly wandering phase.
    Ripple,
    /// Folds: triangle waves along two directions.
    Crease,
}

impl DetailKind {
    pub const ALL: [DetailKind; 3] = [DetailKind::BumpNoise, DetailKind::Ripple, DetailKind::Crease];
}

/// A height field shaded by a fixed raking light.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailSpec {
    pub kind: DetailKind,
    /// Height-field slope scale; zero gives a flat swatch.
    pub amplitude: Real,
    /// Feature size in pixels.
    pub scale: Real,
    pub size: usize,
    pub seed: u64,
}

impl DetailSpec {
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDE7A_1100);
        let kind = DetailKind::ALL[rng.random_range(0..3)];
        DetailSpec { kind, amplitude: rng.random_range(0.25..0.45), scale: rng.random_range(2.5..5.0), size, seed }
    }
}

/// Light used to shade every swatch; flat ground reads exactly 0.5.
const DETAIL_LIGHT: [Real; 3] = [-0.485_071_250_072_665_9, 0.485_071_250_072_665_9, 0.727_606_875_108_998_9];

fn smooth(t: Real) -> Real {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise with smoothstep weights on a lattice of `cell` pixels.
fn value_noise(n: usize, cell: Real, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let m = (n as Real / cell).ceil() as usize + 2;
    let lattice: Vec<Real> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as Real / cell, x as Real / cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (smooth(fy - iy as Real), smooth(fx - ix as Real));
            let at = |a: usize, b: usize| lattice[a * m + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * n + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn height_field(spec: &DetailSpec) -> Vec<Real> {
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.scale.max(1.0);
    match spec.kind {
        DetailKind::BumpNoise => {
            let a = value_noise(n, s, &mut rng);
            let b = value_noise(n, s / 2.0, &mut rng);
            a.iter().zip(&b).map(|(a, b)| s * (a + 0.5 * b)).collect()
        }
        DetailKind::Ripple => {
            let angle: Real = rng.random_range(0.0..std::f64::consts::PI as Real);
            let wander = value_noise(n, 4.0 * s, &mut rng);
            let k = std::f64::consts::TAU as Real / (2.0 * s);
            let (c, sn) = (angle.cos(), angle.sin());
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as Real, (i % n) as Real);
                    (k * (x * c + y * sn) + 2.0 * wander[i]).sin() / k
                })
                .collect()
        }
        DetailKind::Crease => {
            let dirs: Vec<(Real, Real, Real)> = (0..2)
                .map(|_| {
                    let a: Real = rng.random_range(0.0..std::f64::consts::PI as Real);
                    (a.cos(), a.sin(), rng.random_range(0.0..1.0))
                })
                .collect();
            let period = 2.0 * s;
            (0..n * n)
                .map(|i| {
                    let (y, x) = ((i / n) as Real, (i % n) as Real);
                    dirs.iter()
                        .map(|&(c, sn, ph)| {
                            let u = (x * c + y * sn) / period + ph;
                            // Triangle wave with unit slope per pixel.
                            period * ((u - u.floor()) - 0.5).abs()
                        })
                        .sum()
                })
                .collect()
        }
    }
}

/// Shades the height field (central differences, fixed light) so a flat
/// area reads 0.5, then removes any linear gradient.
pub fn gen_detail(spec: &DetailSpec) -> Tensor {
    let n = spec.size;
    let h = height_field(spec);
    let at = |y: usize, x: usize| h[y.min(n - 1) * n + x.min(n - 1)];
    let raw = Tensor::from_hwc_fn(n, n, 1, |y, x, _| {
        let dx = (at(y, x + 1) - at(y, x.saturating_sub(1))) / 2.0;
        let dy = (at(y + 1, x) - at(y.saturating_sub(1), x)) / 2.0;
        let normal = [-spec.amplitude * dx, spec.amplitude * dy, 1.0];
        let len = (normal[0] * normal[0] + normal[1] * normal[1] + 1.0).sqrt();
        let shade = (normal[0] * DETAIL_LIGHT[0] + normal[1] * DETAIL_LIGHT[1] + normal[2] * DETAIL_LIGHT[2]) / len;
        0.5 * shade.max(0.0) / DETAIL_LIGHT[2]
    });
    let flat = super::remove_gradient(&raw);
    Tensor::from_hwc_fn(n, n, 3, |y, x, _| flat.at(y, x, 0))
}
