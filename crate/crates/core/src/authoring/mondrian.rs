use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sixteen albedos spread around the hue circle at two saturation/value
/// levels. All channels stay in `[0.1, 0.9]` so log images are well defined.
pub const DEFAULT_PALETTE: [[Real; 3]; 16] = [
    [0.9000, 0.4050, 0.4050],
    [0.5000, 0.1720, 0.1000],
    [0.9000, 0.7763, 0.4050],
    [0.5000, 0.4720, 0.1000],
    [0.6525, 0.9000, 0.4050],
    [0.2280, 0.5000, 0.1000],
    [0.4050, 0.9000, 0.5287],
    [0.1000, 0.5000, 0.2720],
    [0.4050, 0.9000, 0.9000],
    [0.1000, 0.4280, 0.5000],
    [0.4050, 0.5287, 0.9000],
    [0.1000, 0.1280, 0.5000],
    [0.6525, 0.4050, 0.9000],
    [0.3720, 0.1000, 0.5000],
    [0.9000, 0.4050, 0.7763],
    [0.5000, 0.1000, 0.3280],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MondrianSpec {
    pub size: usize,
    pub palette: Vec<[Real; 3]>,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub seed: u64,
}

impl MondrianSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        MondrianSpec { size, palette: DEFAULT_PALETTE.to_vec(), min_vertices: 3, max_vertices: 8, seed }
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: (Real, Real), poly: &[(Real, Real)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn polygon_area(poly: &[(Real, Real)]) -> Real {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<Real>()
        .abs()
        / 2.0
}

/// Star-shaped polygon around the canvas centre: sorted random angles with
/// random radii, kept at least one pixel from every border.
fn random_polygon(spec: &MondrianSpec, rng: &mut ChaCha8Rng) -> Vec<(Real, Real)> {
    let n = rng.random_range(spec.min_vertices..=spec.max_vertices);
    let s = spec.size as Real;
    let (cx, cy) = (s / 2.0 + rng.random_range(-0.05..0.05) * s, s / 2.0 + rng.random_range(-0.05..0.05) * s);
    let mut angles: Vec<Real> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU as Real)).collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    angles
        .into_iter()
        .map(|a| {
            let r = rng.random_range(0.12..0.38) * s;
            ((cx + r * a.cos()).clamp(1.0, s - 1.0), (cy + r * a.sin()).clamp(1.0, s - 1.0))
        })
        .collect()
}

/// Two-colour image: a background and one polygon near the centre.
pub fn gen_mondrian(spec: &MondrianSpec) -> Result<Tensor> {
    if spec.palette.len() < 2 {
        return Err(Error::config("palette needs at least two colours"));
    }
    if spec.min_vertices < 3 || spec.max_vertices < spec.min_vertices {
        return Err(Error::config("polygon vertex range must start at 3 or more"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg = rng.random_range(0..spec.palette.len());
    let fg = (bg + rng.random_range(1..spec.palette.len())) % spec.palette.len();
    for _ in 0..100 {
        let poly = random_polygon(spec, &mut rng);
        if polygon_area(&poly) < 1.0 {
            continue;
        }
        let mut covered = 0usize;
        let img = Tensor::from_hwc_fn(spec.size, spec.size, 3, |y, x, c| {
            let inside = point_in_polygon((x as Real + 0.5, y as Real + 0.5), &poly);
            if inside && c == 0 {
                covered += 1;
            }
            spec.palette[if inside { fg } else { bg }][c]
        });
        if covered > 0 && covered < spec.size * spec.size {
            return Ok(img);
        }
    }
    Err(Error::numeric("failed to draw a non-degenerate polygon in 100 attempts"))
}
