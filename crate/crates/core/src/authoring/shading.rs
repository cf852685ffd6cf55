use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

type V3 = [Real; 3];

fn dot(a: V3, b: V3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: Real) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Cylinder,
    Box,
    /// Union of a sphere, a cylinder and a box.
    Blend,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Sphere, Primitive::Cylinder, Primitive::Box, Primitive::Blend];
}

/// Orthographic render of untextured primitives under one directional light.
/// Scene coordinates span `[-1, 1]` across the image with `+z` towards the
/// viewer; `seed` places and orients the shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadingSpec {
    pub primitive: Primitive,
    pub light: [Real; 3],
    /// Ambient floor as a fraction of full intensity.
    pub fill: Real,
    pub size: usize,
    /// Overall scale of the shapes; 1 fills most of the frame.
    pub extent: Real,
    pub seed: u64,
}

impl ShadingSpec {
    /// Random primitive and a light within 60 degrees of the view axis.
    pub fn random(size: usize, fill: Real, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5AD1_0000);
        let primitive = Primitive::ALL[rng.random_range(0..4)];
        ShadingSpec { primitive, light: random_light(&mut rng, 60.0), fill, size, extent: 1.0, seed }
    }
}

fn random_light(rng: &mut ChaCha8Rng, max_deg: Real) -> V3 {
    let theta = rng.random_range(0.0..max_deg).to_radians();
    let phi = rng.random_range(0.0..std::f64::consts::TAU as Real);
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

#[derive(Clone, Debug)]
enum Shape {
    Sphere { c: V3, r: Real },
    Cylinder { c: V3, axis: V3, r: Real, half: Real },
    Box { c: V3, frame: [V3; 3], half: V3 },
}

/// Nearest hit of the ray `o + t d` with `t > 0`: (t, unit normal).
type Hit = Option<(Real, V3)>;

fn nearer(a: Hit, b: Hit) -> Hit {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.0 < x.0 { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

impl Shape {
    fn hit(&self, o: V3, d: V3) -> Hit {
        match *self {
            Shape::Sphere { c, r } => {
                let oc = sub(o, c);
                let b = dot(oc, d);
                let disc = b * b - (dot(oc, oc) - r * r);
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then(|| {
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    (t, scale(sub(p, c), 1.0 / r))
                })
            }
            Shape::Cylinder { c, axis, r, half } => {
                let oc = sub(o, c);
                // Side: components perpendicular to the axis.
                let dp = sub(d, scale(axis, dot(d, axis)));
                let op = sub(oc, scale(axis, dot(oc, axis)));
                let a = dot(dp, dp);
                let mut best: Hit = None;
                if a > 1e-12 {
                    let b = dot(op, dp);
                    let disc = b * b - a * (dot(op, op) - r * r);
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let along = dot(oc, axis) + t * dot(d, axis);
                        if t > 0.0 && along.abs() <= half {
                            let n = normalize([op[0] + t * dp[0], op[1] + t * dp[1], op[2] + t * dp[2]]);
                            best = Some((t, n));
                        }
                    }
                }
                let dn = dot(d, axis);
                if dn.abs() > 1e-12 {
                    for s in [-1.0, 1.0] {
                        let t = (s * half - dot(oc, axis)) / dn;
                        let q = [oc[0] + t * d[0], oc[1] + t * d[1], oc[2] + t * d[2]];
                        let radial = sub(q, scale(axis, dot(q, axis)));
                        if t > 0.0 && dot(radial, radial) <= r * r {
                            best = nearer(best, Some((t, scale(axis, s))));
                        }
                    }
                }
                best
            }
            Shape::Box { c, frame, half } => {
                let oc = sub(o, c);
                let (mut t0, mut t1, mut n0) = (Real::NEG_INFINITY, Real::INFINITY, [0.0; 3]);
                for k in 0..3 {
                    let (ol, dl) = (dot(oc, frame[k]), dot(d, frame[k]));
                    if dl.abs() < 1e-12 {
                        if ol.abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-half[k] - ol) / dl, (half[k] - ol) / dl);
                    let mut n = scale(frame[k], -1.0);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                        n = frame[k];
                    }
                    if a > t0 {
                        t0 = a;
                        n0 = n;
                    }
                    t1 = t1.min(b);
                }
                (t0 <= t1 && t0 > 0.0).then_some((t0, n0))
            }
        }
    }
}

fn random_frame(rng: &mut ChaCha8Rng) -> [V3; 3] {
    let a = normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let b = normalize(cross(a, helper));
    [a, b, cross(a, b)]
}

fn build_scene(spec: &ShadingSpec) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let jitter = |rng: &mut ChaCha8Rng, s: Real| [rng.random_range(-s..s), rng.random_range(-s..s), 0.0];
    let sphere = |rng: &mut ChaCha8Rng| Shape::Sphere { c: jitter(rng, 0.1 * e), r: e * rng.random_range(0.7..0.9) };
    let cylinder = |rng: &mut ChaCha8Rng| Shape::Cylinder {
        c: jitter(rng, 0.1 * e),
        axis: random_frame(rng)[0],
        r: e * rng.random_range(0.45..0.6),
        half: e * rng.random_range(0.5..0.8),
    };
    let cube = |rng: &mut ChaCha8Rng| Shape::Box {
        c: jitter(rng, 0.1 * e),
        frame: random_frame(rng),
        half: [e * rng.random_range(0.4..0.6), e * rng.random_range(0.4..0.6), e * rng.random_range(0.4..0.6)],
    };
    match spec.primitive {
        Primitive::Sphere => vec![sphere(&mut rng)],
        Primitive::Cylinder => vec![cylinder(&mut rng)],
        Primitive::Box => vec![cube(&mut rng)],
        Primitive::Blend => {
            let mut shapes = vec![sphere(&mut rng), cylinder(&mut rng), cube(&mut rng)];
            let offsets = [[-0.35, -0.2], [0.35, -0.15], [0.0, 0.35]];
            for (s, off) in shapes.iter_mut().zip(offsets) {
                let (c, shrink) = match s {
                    Shape::Sphere { c, r } => (c, r),
                    Shape::Cylinder { c, r, .. } => (c, r),
                    Shape::Box { c, half, .. } => (c, &mut half[0]),
                };
                c[0] += off[0] * e;
                c[1] += off[1] * e;
                *shrink *= 0.7;
            }
            shapes
        }
    }
}

/// Rendered shading with its object mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    /// Grayscale intensity replicated over three channels.
    pub image: Tensor,
    /// One where a primitive covers the pixel centre, zero elsewhere.
    pub mask: Tensor,
}

/// `max(n . l, 0) * (1 - fill) + fill` on the objects; the background is set
/// to the fill level and excluded by the mask.
pub fn gen_shading(spec: &ShadingSpec) -> Result<Rendering> {
    let norm = dot(spec.light, spec.light).sqrt();
    if !((norm - 1.0).abs() < 1e-6) {
        return Err(Error::config(format!("light direction must be a unit vector, got norm {norm}")));
    }
    if !(spec.fill > 0.0 && spec.fill <= 1.0) {
        return Err(Error::config("fill must lie in (0, 1]"));
    }
    let shapes = build_scene(spec);
    let n = spec.size;
    let mut img = Tensor::full(&[n, n, 3], spec.fill);
    let mut mask = Tensor::zeros(&[n, n, 1]);
    let d = [0.0, 0.0, -1.0];
    for y in 0..n {
        for x in 0..n {
            let u = 2.0 * (x as Real + 0.5) / n as Real - 1.0;
            let v = 1.0 - 2.0 * (y as Real + 0.5) / n as Real;
            let hit = shapes.iter().fold(None, |acc, s| nearer(acc, s.hit([u, v, 10.0], d)));
            if let Some((_, normal)) = hit {
                let i = dot(normal, spec.light).max(0.0) * (1.0 - spec.fill) + spec.fill;
                for c in 0..3 {
                    img.set(y, x, c, i);
                }
                mask.set(y, x, 0, 1.0);
            }
        }
    }
    Ok(Rendering { image: img, mask })
}
