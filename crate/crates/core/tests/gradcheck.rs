//! Central-difference checks of every reverse-mode rule, the ELBO, and the
//! decomposition objective.

use layerforge::decompose::{objective, objective_gradient, DecompositionSpec, Layer};
use layerforge::ops::Padding;
use layerforge::prior::{field_nll, field_nll_graph, GaussianCodePrior};
use layerforge::pyramid::PyramidConfig;
use layerforge::vae::{Domain, LayerModel, LayerSpec, LossWeights, ModelMeta, Normalization, VaeArch, VaeKind};
use layerforge::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: Real = 1e-6;
const TOL: Real = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `max |analytic - numeric| / max(1, |numeric|)` over every element of
/// `inputs`, with `numeric` from central differences of `eval`.
fn compare(analytic: &[Tensor], inputs: &[Tensor], eval: impl Fn(&[Tensor]) -> Real) -> Real {
    let mut worst: Real = 0.0;
    for i in 0..inputs.len() {
        assert_eq!(analytic[i].shape(), inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient error of a scalar graph function of `inputs`.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> Real {
    let run = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = run(inputs);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    compare(&analytic, inputs, |ins| {
        let (g, _, out) = run(ins);
        g.value(out).item().unwrap()
    })
}

/// Reduces a tensor-valued node to a scalar with fixed random weights, so
/// every output element contributes a distinct gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn assert_small(name: &str, err: Real) {
    assert!(err <= TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn elementwise_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4, 2], &mut rng, -1.0, 1.0);
    let b = random(&[3, 4, 2], &mut rng, -1.0, 1.0);
    let pos = random(&[3, 4, 2], &mut rng, 0.5, 2.0);
    assert_small("add", check(&[a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1]).unwrap(); project(g, y, 2) }));
    assert_small("sub", check(&[a.clone(), b.clone()], |g, v| { let y = g.sub(v[0], v[1]).unwrap(); project(g, y, 3) }));
    assert_small("mul", check(&[a.clone(), b.clone()], |g, v| { let y = g.mul(v[0], v[1]).unwrap(); project(g, y, 4) }));
    assert_small("scale", check(&[a.clone()], |g, v| { let y = g.scale(v[0], -2.5).unwrap(); project(g, y, 5) }));
    assert_small("add_scalar", check(&[a.clone()], |g, v| { let y = g.add_scalar(v[0], 0.7).unwrap(); project(g, y, 6) }));
    assert_small("leaky_relu", check(&[a.clone()], |g, v| { let y = g.leaky_relu(v[0], 0.2).unwrap(); project(g, y, 7) }));
    assert_small("sigmoid", check(&[a.clone()], |g, v| { let y = g.sigmoid(v[0]).unwrap(); project(g, y, 8) }));
    assert_small("exp", check(&[a.clone()], |g, v| { let y = g.exp(v[0]).unwrap(); project(g, y, 9) }));
    assert_small("log", check(&[pos], |g, v| { let y = g.log(v[0]).unwrap(); project(g, y, 10) }));
    assert_small("square", check(&[a.clone()], |g, v| { let y = g.square(v[0]).unwrap(); project(g, y, 11) }));
    assert_small("sum", check(&[a.clone()], |g, v| g.sum(v[0]).unwrap()));
    assert_small("mean", check(&[a], |g, v| g.mean(v[0]).unwrap()));
}

#[test]
fn shape_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random(&[2, 3, 2], &mut rng, -1.0, 1.0);
    let small = random(&[2, 3, 3], &mut rng, -1.0, 1.0);
    let bias = random(&[4], &mut rng, -1.0, 1.0);
    assert_small("reshape", check(&[a.clone()], |g, v| { let y = g.reshape(v[0], &[6, 4]).unwrap(); project(g, y, 13) }));
    assert_small("slice_last", check(&[a.clone()], |g, v| { let y = g.slice_last(v[0], 1, 2).unwrap(); project(g, y, 14) }));
    assert_small("concat_last", check(&[a.clone(), b], |g, v| { let y = g.concat_last(&[v[0], v[1]]).unwrap(); project(g, y, 15) }));
    assert_small("add_bias", check(&[a, bias], |g, v| { let y = g.add_bias(v[0], v[1]).unwrap(); project(g, y, 16) }));
    assert_small(
        "upsample_nearest",
        check(&[small], |g, v| { let y = g.upsample_nearest(v[0], (5, 7)).unwrap(); project(g, y, 17) }),
    );
}

#[test]
fn linear_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&[7, 6, 2], &mut rng, -1.0, 1.0);
    let k = random(&[3, 3, 2, 3], &mut rng, -1.0, 1.0);
    for (stride, padding) in [(1, Padding::Valid), (2, Padding::Same), (2, Padding::Valid), (1, Padding::Same)] {
        let err = check(&[x.clone(), k.clone()], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, padding).unwrap();
            project(g, y, 19)
        });
        assert_small(&format!("conv2d stride {stride} {padding:?}"), err);
    }
    let code = random(&[3, 4, 3], &mut rng, -1.0, 1.0);
    let kt = random(&[3, 3, 2, 3], &mut rng, -1.0, 1.0);
    for (stride, padding, out) in [(2, Padding::Same, Some((6, 8))), (1, Padding::Valid, None), (2, Padding::Same, Some((5, 7)))] {
        let err = check(&[code.clone(), kt.clone()], |g, v| {
            let y = g.conv2d_transpose(v[0], v[1], stride, padding, out).unwrap();
            project(g, y, 20)
        });
        assert_small(&format!("conv2d_transpose stride {stride} {padding:?} {out:?}"), err);
    }
    let flat = random(&[5], &mut rng, -1.0, 1.0);
    let w = random(&[5, 3], &mut rng, -1.0, 1.0);
    assert_small("dense", check(&[flat, w], |g, v| { let y = g.dense(v[0], v[1]).unwrap(); project(g, y, 21) }));
}

#[test]
fn pyramid_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(&[8, 6, 2], &mut rng, -1.0, 1.0);
    let cfg = PyramidConfig::default();
    assert_small("pyr_down", check(&[x.clone()], |g, v| { let y = g.pyr_down(v[0], &cfg).unwrap(); project(g, y, 23) }));
    assert_small("pyr_up", check(&[x], |g, v| { let y = g.pyr_up(v[0], &cfg).unwrap(); project(g, y, 24) }));
}

#[test]
fn nonsmooth_reductions_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    // A steep ramp keeps every forward difference well away from zero.
    let ramp = Tensor::from_hwc_fn(6, 5, 2, |y, x, c| 0.3 * y as Real + 0.5 * x as Real + 0.1 * c as Real);
    let jitter = random(&[6, 5, 2], &mut rng, -0.01, 0.01);
    let x = ramp.add(&jitter).unwrap();
    assert_small("gradient_l1", check(&[x], |g, v| g.gradient_l1(v[0]).unwrap()));
    let a = random(&[8, 8, 3], &mut rng, -1.0, 1.0);
    let b = random(&[8, 8, 3], &mut rng, -1.0, 1.0);
    for patch in [4, 8, 3] {
        let err = check(&[a.clone(), b.clone()], |g, v| g.patch_cov_norm(v[0], v[1], patch).unwrap());
        assert_small(&format!("patch_cov_norm {patch}"), err);
    }
}

fn tiny_model(kind: VaeKind, levels: usize, seed: u64) -> LayerModel {
    let arch = VaeArch {
        name: "tiny".into(),
        kind,
        input_channels: 3,
        patch_size: 8,
        levels,
        body: vec![LayerSpec::conv(3, 2, Padding::Same, 3)],
        code: LayerSpec::conv(1, 1, Padding::Valid, 2),
    };
    let meta = ModelMeta {
        layer: "shading".into(),
        dataset: "test".into(),
        seed,
        iterations: 0,
        domain: Domain::Log { epsilon: 1e-3 },
    };
    LayerModel::init(arch, meta).unwrap()
}

fn with_params(model: &LayerModel, params: &[Tensor]) -> LayerModel {
    let mut m = model.clone();
    for (dst, src) in m.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    m
}

#[test]
fn elbo_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for (kind, levels) in [(VaeKind::LaplacianConvVae, 2), (VaeKind::ConvVae, 1)] {
        let modes = [Normalization::Joint, Normalization::PerLevel, Normalization::PerImageValue];
        for (i, normalization) in modes.into_iter().enumerate() {
            let model = tiny_model(kind, levels, 27);
            let image = random(&[8, 8, 3], &mut rng, -1.0, 1.0);
            let noise = model.sample_noise(8, 8, &mut rng).unwrap();
            let other = modes[(i + 1) % modes.len()];
            let weights = LossWeights { residual_mean: normalization, kl_mean: other, ..LossWeights::default() };
            let loss = |m: &LayerModel| {
                let mut g = Graph::new();
                let bound = m.bind(&mut g, true);
                let e = m.elbo_graph(&mut g, &bound, &image, &noise, 0.37, &weights).unwrap();
                (g, bound, e.total)
            };
            let (g, bound, total) = loss(&model);
            let grads = g.backward(total).unwrap();
            let analytic: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
            let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
            let err = compare(&analytic, &params, |p| {
                let (g, _, total) = loss(&with_params(&model, p));
                g.value(total).item().unwrap()
            });
            assert_small(&format!("elbo {kind:?} {normalization:?}"), err);
        }
    }
}

fn prior_for(width: usize, rng: &mut ChaCha8Rng) -> GaussianCodePrior {
    GaussianCodePrior {
        mean: (0..width).map(|_| rng.random_range(-0.5..0.5)).collect(),
        variance: 0.7,
        dim: width,
        samples: 100,
    }
}

#[test]
fn field_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let prior = prior_for(4, &mut rng);
    let field = random(&[3, 5, 4], &mut rng, -2.0, 2.0);
    let mut g = Graph::new();
    let v = g.param(field.clone());
    let nll = field_nll_graph(&mut g, &prior, v).unwrap();
    assert!((g.value(nll).item().unwrap() - field_nll(&prior, &field).unwrap()).abs() < 1e-9);
    let analytic = vec![g.backward(nll).unwrap().wrt(v)];
    let err = compare(&analytic, &[field], |f| field_nll(&prior, &f[0]).unwrap());
    assert_small("field_nll", err);
}

#[test]
fn decomposition_objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut albedo = tiny_model(VaeKind::LaplacianConvVae, 2, 30);
    albedo.meta.layer = "albedo".into();
    albedo.prior = Some(prior_for(4, &mut rng));
    let mut shading = tiny_model(VaeKind::LaplacianConvVae, 2, 31);
    shading.prior = Some(prior_for(4, &mut rng));
    let layers = [Layer { name: "albedo", model: &albedo }, Layer { name: "shading", model: &shading }];
    let image = random(&[8, 8, 3], &mut rng, 0.05, 1.0);
    let mut spec = DecompositionSpec::albedo_shading();
    spec.weights.prior = 0.3;
    spec.weights.correlation = 5.0;
    spec.patch = 4;
    let shapes: Vec<Vec<usize>> =
        albedo.arch.plan(8, 8).unwrap().iter().map(|p| p.code_shape().to_vec()).collect();
    let codes: Vec<Vec<Tensor>> =
        (0..2).map(|_| shapes.iter().map(|s| random(s, &mut rng, -1.0, 1.0)).collect()).collect();
    let (terms, grads) = objective_gradient(&layers, &codes, &image, &spec).unwrap();
    assert!(terms.prior > 0.0 && terms.correlation > 0.0 && terms.residual > 0.0);
    let flat = |c: &[Vec<Tensor>]| c.iter().flatten().cloned().collect::<Vec<Tensor>>();
    let err = compare(&flat(&grads), &flat(&codes), |x| {
        let nested: Vec<Vec<Tensor>> = x.chunks(shapes.len()).map(|c| c.to_vec()).collect();
        objective(&layers, &nested, &image, &spec).unwrap().total
    });
    assert_small("decomposition objective", err);
}
