//! Acceptance run: one PASS or FAIL line per criterion.
//!
//! Criteria that need trained models share one set of desk-scale albedo,
//! shading and detail models built through the command-line tool.
//!
//! Environment:
//! * `LAYERFORGE_ACCEPTANCE=1,2,7` runs only the listed criteria.
//! * `LAYERFORGE_ACCEPTANCE_ITERS` sets training iterations per layer model
//!   (default 1200).
//! * `LAYERFORGE_ACCEPTANCE_STEPS` sets decomposition steps (default 2000).
//! * `LAYERFORGE_ACCEPTANCE_DIR` keeps the working files there.

use std::collections::BTreeMap;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context as _};
use layerforge::decompose::{objective, objective_gradient, DecompositionSpec, Layer};
use layerforge::imageio::read_rawf;
use layerforge::metrics::{band_energy, scaled_mse, synthetic_judgments, whdr, Darker};
use layerforge::ops::Padding;
use layerforge::prior::GaussianCodePrior;
use layerforge::pyramid::{build_pyramid, reconstruct};
use layerforge::vae::{
    Domain, KlSchedule, LayerModel, LayerSpec, LossWeights, ModelMeta, VaeArch, VaeKind,
};
use layerforge::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = anyhow::Result<(bool, String)>;

fn env_number(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(default)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- tool runs

struct Workspace {
    root: PathBuf,
    iterations: usize,
    steps: usize,
    models: Option<BTreeMap<&'static str, PathBuf>>,
}

fn tool(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_layerforge"))
        .arg("-q")
        .args(args)
        .output()
        .context("launching layerforge")?;
    if !out.status.success() {
        bail!("layerforge {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    }
    Ok(())
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn number(v: &Value, pointer: &str) -> anyhow::Result<f64> {
    v.pointer(pointer).and_then(Value::as_f64).with_context(|| format!("missing number at {pointer}"))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

impl Workspace {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Authored corpora, trained models and fitted priors for the three layers.
    fn models(&mut self) -> anyhow::Result<BTreeMap<&'static str, PathBuf>> {
        if let Some(m) = &self.models {
            return Ok(m.clone());
        }
        let iterations = self.iterations.to_string();
        let mut out = BTreeMap::new();
        for (i, layer) in ["albedo", "shading", "detail"].into_iter().enumerate() {
            let corpus = self.dir(&format!("corpus_{layer}"));
            let trained = self.dir(&format!("train_{layer}"));
            let fitted = self.dir(&format!("prior_{layer}"));
            let seed = (i + 1).to_string();
            if !fitted.join("model.ckpt").exists() {
                tool(&["author", "--kind", layer, "--out", s(&corpus), "--seed", &seed])?;
                tool(&[
                    "train", "--layer", layer, "--corpus", s(&corpus), "--out", s(&trained), "--epochs", "100000",
                    "--max-iterations", &iterations, "--seed", &seed,
                ])?;
                tool(&[
                    "fit-prior", "--model", s(&trained.join("model.ckpt")), "--corpus", s(&corpus), "--out", s(&fitted),
                    "--seed", &seed,
                ])?;
            }
            out.insert(layer, fitted.join("model.ckpt"));
        }
        self.models = Some(out.clone());
        Ok(out)
    }

    /// Decomposes every composite under `corpus` with `preset`, then scores
    /// the results with the naive baseline alongside.
    fn decompose_all(&mut self, corpus: &Path, preset: &str, tag: &str) -> anyhow::Result<(PathBuf, Value)> {
        let models = self.models()?;
        let names: &[&str] = match preset {
            "as" => &["albedo", "shading"],
            "asd" => &["albedo", "shading", "detail"],
            other => bail!("no model list for preset {other}"),
        };
        let list = names.iter().map(|n| s(&models[n]).to_string()).collect::<Vec<_>>().join(",");
        let pred = self.dir(&format!("pred_{tag}"));
        let steps = self.steps.to_string();
        let mut cases: Vec<PathBuf> =
            std::fs::read_dir(corpus)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        cases.retain(|p| p.is_dir());
        cases.sort();
        for case in &cases {
            let out = pred.join(case.file_name().unwrap());
            if !out.join("trace.json").exists() {
                tool(&[
                    "decompose", "--image", s(&case.join("image.rawf")), "--models", &list, "--preset", preset, "--out",
                    s(&out), "--steps", &steps,
                ])?;
            }
        }
        let report = self.dir(&format!("eval_{tag}.json"));
        tool(&["eval", "--pred", s(&pred), "--gt", s(corpus), "--baseline", "--report", s(&report)])?;
        Ok((pred, read_json(&report)?))
    }
}

// ------------------------------------------------------------ criterion 1

fn pyramid_round_trip(_: &mut Workspace) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Real = 0.0;
    let start = Instant::now();
    for _ in 0..100 {
        let levels = rng.random_range(1..=4);
        let unit = 1usize << (levels - 1);
        let pick = |rng: &mut ChaCha8Rng| unit * rng.random_range(16usize.div_ceil(unit)..=128 / unit);
        let (h, w) = (pick(&mut rng), pick(&mut rng));
        let image = random(&[h, w, 3], &mut rng, 0.0, 1.0);
        let back = reconstruct(&build_pyramid(&image, levels)?)?;
        worst = worst.max(back.max_abs_diff(&image)?);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((worst <= 1e-6 && secs < 10.0, format!("max error {worst:.2e} over 100 images in {secs:.2} s")))
}

// ------------------------------------------------------------ criterion 2

const FD_STEP: Real = 1e-6;

fn fd_error(analytic: &[Tensor], inputs: &[Tensor], eval: impl Fn(&[Tensor]) -> Real) -> Real {
    let mut worst: Real = 0.0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max((analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

fn graph_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> Real {
    let run = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = run(inputs);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    fd_error(&analytic, inputs, |ins| {
        let (g, _, out) = run(ins);
        g.value(out).item().unwrap()
    })
}

/// Weighted sum of a tensor node so every element gets its own gradient.
fn project(g: &mut Graph, x: Var) -> Var {
    let w = random(g.value(x).shape(), &mut ChaCha8Rng::seed_from_u64(99), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

fn tiny_model(layer: &str, seed: u64) -> anyhow::Result<LayerModel> {
    let arch = VaeArch {
        name: "tiny".into(),
        kind: VaeKind::LaplacianConvVae,
        input_channels: 3,
        patch_size: 8,
        levels: 2,
        body: vec![LayerSpec::conv(3, 2, Padding::Same, 3)],
        code: LayerSpec::conv(1, 1, Padding::Valid, 2),
    };
    let meta = ModelMeta { layer: layer.into(), dataset: "toy".into(), seed, iterations: 0, domain: Domain::default() };
    Ok(LayerModel::init(arch, meta)?)
}

fn autodiff(_: &mut Workspace) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errors: Vec<(&str, Real)> = Vec::new();
    let x = random(&[7, 6, 2], &mut rng, -1.0, 1.0);
    let k = random(&[3, 3, 2, 3], &mut rng, -1.0, 1.0);
    errors.push(("conv", graph_error(&[x.clone(), k.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, Padding::Same).unwrap();
        project(g, y)
    })));
    let code = random(&[3, 4, 3], &mut rng, -1.0, 1.0);
    errors.push(("transpose-conv", graph_error(&[code, k], |g, v| {
        let y = g.conv2d_transpose(v[0], v[1], 2, Padding::Same, Some((5, 7))).unwrap();
        project(g, y)
    })));
    let flat = random(&[5], &mut rng, -1.0, 1.0);
    let w = random(&[5, 4], &mut rng, -1.0, 1.0);
    errors.push(("dense", graph_error(&[flat, w], |g, v| {
        let y = g.dense(v[0], v[1]).unwrap();
        project(g, y)
    })));
    let pos = random(&[4, 4, 2], &mut rng, 0.5, 2.0);
    errors.push(("activations", graph_error(&[x, pos], |g, v| {
        let a = g.leaky_relu(v[0], 0.2).unwrap();
        let b = g.sigmoid(v[0]).unwrap();
        let c = g.exp(v[0]).unwrap();
        let d = g.log(v[1]).unwrap();
        let s = [a, b, c].map(|t| project(g, t));
        let ds = project(g, d);
        let ab = g.add(s[0], s[1]).unwrap();
        let abc = g.add(ab, s[2]).unwrap();
        g.add(abc, ds).unwrap()
    })));

    let model = tiny_model("shading", 3)?;
    let image = random(&[8, 8, 3], &mut rng, -1.0, 1.0);
    let noise = model.sample_noise(8, 8, &mut rng)?;
    let weights = LossWeights::default();
    let loss = |m: &LayerModel| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let e = m.elbo_graph(&mut g, &bound, &image, &noise, 0.37, &weights).unwrap();
        (g, bound, e.total)
    };
    let (g, bound, total) = loss(&model);
    let grads = g.backward(total)?;
    let analytic: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    let params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    errors.push(("elbo_loss", fd_error(&analytic, &params, |p| {
        let mut m = model.clone();
        for (dst, src) in m.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        let (g, _, total) = loss(&m);
        g.value(total).item().unwrap()
    })));

    let prior = |rng: &mut ChaCha8Rng| GaussianCodePrior {
        mean: (0..4).map(|_| rng.random_range(-0.5..0.5)).collect(),
        variance: 0.7,
        dim: 4,
        samples: 100,
    };
    let mut albedo = tiny_model("albedo", 4)?;
    albedo.prior = Some(prior(&mut rng));
    let mut shading = tiny_model("shading", 5)?;
    shading.prior = Some(prior(&mut rng));
    let layers = [Layer { name: "albedo", model: &albedo }, Layer { name: "shading", model: &shading }];
    let composite = random(&[8, 8, 3], &mut rng, 0.05, 1.0);
    let mut spec = DecompositionSpec::albedo_shading();
    spec.weights.prior = 0.3;
    spec.weights.correlation = 5.0;
    spec.patch = 4;
    let shapes: Vec<Vec<usize>> = albedo.arch.plan(8, 8)?.iter().map(|p| p.code_shape().to_vec()).collect();
    let codes: Vec<Vec<Tensor>> =
        (0..2).map(|_| shapes.iter().map(|sh| random(sh, &mut rng, -1.0, 1.0)).collect()).collect();
    let (_, grads) = objective_gradient(&layers, &codes, &composite, &spec)?;
    let flat = |c: &[Vec<Tensor>]| c.iter().flatten().cloned().collect::<Vec<Tensor>>();
    errors.push(("decomposition objective", fd_error(&flat(&grads), &flat(&codes), |x| {
        let nested: Vec<Vec<Tensor>> = x.chunks(shapes.len()).map(|c| c.to_vec()).collect();
        objective(&layers, &nested, &composite, &spec).unwrap().total
    })));

    let worst = errors.iter().map(|e| e.1).fold(0.0, Real::max);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst <= 1e-4, format!("relative errors: {detail}")))
}

// ------------------------------------------------------------ criterion 3

fn rows(arch: &VaeArch, size: usize) -> anyhow::Result<Vec<Vec<Vec<usize>>>> {
    Ok(arch.plan(size, size)?.into_iter().map(|p| p.shapes).collect())
}

fn architecture_tables(_: &mut Workspace) -> Outcome {
    let trunk = |c1: usize, c2: usize, s: usize| vec![vec![s, s, 3], vec![s / 2, s / 2, c1], vec![s / 4, s / 4, c2], vec![s / 4, s / 4, c2]];
    let with = |mut t: Vec<Vec<usize>>, tail: &[Vec<usize>]| {
        t.extend_from_slice(tail);
        t
    };
    let expected: Vec<(VaeArch, usize, Vec<Vec<Vec<usize>>>)> = vec![
        (VaeArch::vae1(), 64, vec![with(trunk(64, 128, 64), &[vec![128], vec![32]])]),
        (VaeArch::vae2(), 64, vec![with(trunk(64, 128, 64), &[vec![4096], vec![832]])]),
        (VaeArch::conv_vae(), 64, vec![with(trunk(64, 128, 64), &[vec![13, 13, 20], vec![13, 13, 8]])]),
        (
            VaeArch::laplacian_conv_vae(),
            64,
            vec![
                with(trunk(64, 64, 64), &[vec![13, 13, 16], vec![13, 13, 4]]),
                with(trunk(64, 64, 32), &[vec![5, 5, 16], vec![5, 5, 4]]),
                with(trunk(64, 64, 16), &[vec![1, 1, 16], vec![1, 1, 4]]),
            ],
        ),
        (
            VaeArch::authored(),
            128,
            vec![
                with(trunk(64, 64, 128), &[vec![29, 29, 64], vec![29, 29, 4]]),
                with(trunk(64, 64, 64), &[vec![13, 13, 64], vec![13, 13, 4]]),
                with(trunk(64, 64, 32), &[vec![5, 5, 64], vec![5, 5, 4]]),
                with(trunk(64, 64, 16), &[vec![1, 1, 64], vec![1, 1, 4]]),
            ],
        ),
    ];
    let mut checked = 0;
    for (arch, size, want) in &expected {
        let got = rows(arch, *size)?;
        if &got != want {
            return Ok((false, format!("{} differs: got {got:?}", arch.name)));
        }
        checked += want.iter().map(Vec::len).sum::<usize>();
    }
    Ok((true, format!("{checked} shape rows of {} architectures match", expected.len())))
}

// ------------------------------------------------------------ criterion 4

fn bench_ordering(ws: &mut Workspace) -> Outcome {
    let photos = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural");
    let out = ws.dir("bench");
    if !out.join("report.json").exists() {
        tool(&["bench-vae", "--corpus", s(&photos), "--out", s(&out), "--patches", "2000", "--epochs", "10", "--seed", "1"])?;
    }
    let report = read_json(&out.join("report.json"))?;
    let mut errs = Vec::new();
    for name in ["lcvae", "cvae", "vae-2", "vae-1"] {
        let entry = report["bench"]["entries"]
            .as_array()
            .and_then(|a| a.iter().find(|e| e["name"] == name))
            .with_context(|| format!("no entry for {name}"))?;
        errs.push(format!("{name} {:.5}", number(entry, "/heldout_l2")?));
    }
    let holds = report["order_holds"].as_bool() == Some(true);
    Ok((holds, format!("held-out L2 {} (expected increasing)", errs.join(", "))))
}

// ------------------------------------------------------------ criterion 5

fn beats_baseline(ws: &mut Workspace) -> Outcome {
    let corpus = ws.dir("composites");
    if !corpus.join("corpus.json").exists() {
        tool(&["author", "--kind", "composite", "--n", "20", "--out", s(&corpus), "--seed", "5"])?;
    }
    let (_, report) = ws.decompose_all(&corpus, "as", "as")?;
    let ours = (number(&report, "/mean/smse")?, number(&report, "/mean/rmse")?);
    let base = (number(&report, "/baseline_mean/smse")?, number(&report, "/baseline_mean/rmse")?);
    let pass = ours.0 < base.0 && ours.1 < base.1;
    let target = if ours.0 <= 0.5 * base.0 { "met" } else { "missed" };
    Ok((
        pass,
        format!(
            "S-MSE {:.4} vs baseline {:.4} ({:.2}x, 0.5x target {target}); R-MSE {:.4} vs baseline {:.4}",
            ours.0,
            base.0,
            ours.0 / base.0,
            ours.1,
            base.1
        ),
    ))
}

// ------------------------------------------------------------ criterion 6

fn log_layer(path: &Path) -> anyhow::Result<Tensor> {
    Ok(read_rawf(path)?.map(|v| v.max(1e-3).ln()))
}

fn three_layers(ws: &mut Workspace) -> Outcome {
    let corpus = ws.dir("bump_composites");
    if !corpus.join("corpus.json").exists() {
        tool(&["author", "--kind", "composite", "--with-detail", "--n", "10", "--out", s(&corpus), "--seed", "6"])?;
    }
    let (_, two) = ws.decompose_all(&corpus, "as", "bump_as")?;
    let (pred, three) = ws.decompose_all(&corpus, "asd", "bump_asd")?;
    // Summed top-band energies: [predicted detail, predicted shading, true detail, true shading].
    let mut energy = [0.0; 4];
    for case in three["cases"].as_array().context("no cases")? {
        let name = case["name"].as_str().context("case name")?;
        let files = [pred.join(name).join("detail.rawf"), pred.join(name).join("shading.rawf"), corpus.join(name).join("detail.rawf"), corpus.join(name).join("shading.rawf")];
        for (e, f) in energy.iter_mut().zip(&files) {
            *e += band_energy(&log_layer(f)?, 0, 3)?;
        }
    }
    let ratio = energy[0] / energy[1];
    let (s2, s3) = (number(&two, "/mean/smse")?, number(&three, "/mean/smse")?);
    Ok((
        ratio >= 2.0 && s3 <= s2,
        format!(
            "detail/shading top-band energy {ratio:.2} (need >= 2, ground truth {:.1}); S-MSE 3-layer {s3:.4} vs 2-layer {s2:.4}",
            energy[2] / energy[3]
        ),
    ))
}

// ------------------------------------------------------------ criterion 7

fn metric_invariants(_: &mut Workspace) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_scale: Real = 0.0;
    for _ in 0..50 {
        let pred = random(&[12, 10, 3], &mut rng, 0.05, 1.0);
        let gt = random(&[12, 10, 3], &mut rng, 0.05, 1.0);
        let c: Real = rng.random_range(1e-3..1e3);
        worst_scale = worst_scale.max((scaled_mse(&pred, &gt, None)? - scaled_mse(&pred.scale(c), &gt, None)?).abs());
    }

    let mut whdr_ok = true;
    for trial in 0..50 {
        let albedo = random(&[9, 9, 3], &mut rng, 0.05, 1.0);
        let truth = synthetic_judgments(&albedo, 30, 0.1, trial)?;
        whdr_ok &= whdr(&albedo, &truth, 0.1, false)? == 0.0;
        let mut j = truth.clone();
        let mut last = 0.0;
        // Flipping labels one at a time can only add disagreement.
        for i in 0..j.judgments.len() {
            j.judgments[i].darker = match j.judgments[i].darker {
                Darker::First => Darker::Second,
                _ => Darker::First,
            };
            let v = whdr(&albedo, &j, 0.1, false)?;
            whdr_ok &= (0.0..=1.0).contains(&v) && v >= last;
            last = v;
        }
        whdr_ok &= (last - 1.0).abs() < 1e-12;
    }

    let kl = KlSchedule::default();
    let at25 = kl.at(25);
    let at0 = kl.at(0);
    let expect0 = 20.0 / (1.0 + (0.5 as Real).exp());
    let kl_ok = at25 == 10.0 && (at0 - expect0).abs() <= 1e-9;
    Ok((
        worst_scale <= 1e-12 && whdr_ok && kl_ok,
        format!(
            "scale invariance error {worst_scale:.1e}; WHDR bounds/monotonicity/zero {}; kl_weight(25) = {at25}, kl_weight(0) = {at0:.12}",
            if whdr_ok { "hold" } else { "violated" }
        ),
    ))
}

// ------------------------------------------------------------ criterion 8

fn prior_discrimination(ws: &mut Workspace) -> Outcome {
    ws.models()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for layer in ["albedo", "shading", "detail"] {
        let report = read_json(&ws.dir(&format!("prior_{layer}")).join("prior_report.json"))?;
        let margin = number(&report, "/check/margin_in_standard_errors")?;
        let n_in = number(&report, "/check/in_distribution/count")?;
        let n_r = number(&report, "/check/random/count")?;
        pass &= margin >= 3.0 && n_in >= 1000.0 && n_r >= 1000.0;
        parts.push(format!(
            "{layer} NLL {:.2} vs random {:.2} ({margin:.1} SE)",
            number(&report, "/check/in_distribution/mean")?,
            number(&report, "/check/random/mean")?
        ));
    }
    Ok((pass, parts.join("; ")))
}

// ------------------------------------------------------------ criterion 9

/// Every file under `dir` except run records, by relative path.
fn outputs(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.file_name().unwrap().to_string_lossy().ends_with("run.json") {
                found.insert(p.strip_prefix(dir)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(found)
}

fn determinism(ws: &mut Workspace) -> Outcome {
    let base = ws.dir("replay");
    let d = |n: &str| base.join(n);
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("author", vec!["author", "--kind", "composite", "--n", "2", "--size", "64", "--seed", "9"]),
        ("corpus", vec!["author", "--kind", "shading", "--n", "4", "--seed", "9"]),
        ("train", vec!["train", "--layer", "shading", "--corpus", s(&d("corpus")), "--max-iterations", "3", "--batch-size", "2"]),
        ("prior", vec![
            "fit-prior", "--model", s(&d("train").join("model.ckpt")), "--corpus", s(&d("corpus")), "--patches", "8",
            "--heldout", "8", "--random", "8",
        ]),
        ("decompose", vec![
            "decompose", "--image", s(&d("author").join("comp_0000/image.rawf")), "--models",
            &format!("{0},{0}", s(&d("prior").join("model.ckpt"))), "--steps", "5",
        ]),
        ("eval", vec!["eval", "--pred", s(&d("decompose")), "--gt", s(&d("author").join("comp_0000")), "--baseline", "--report"]),
        ("bench", vec![
            "bench-vae", "--dead-leaves", "--patches", "16", "--heldout", "4", "--epochs", "1", "--archs", "cvae,lcvae",
            "--batch-size", "4",
        ]),
    ]
    .into_iter()
    .map(|(n, a)| (n, a.into_iter().map(String::from).collect()))
    .collect();
    let mut compared = 0;
    for (name, mut args) in runs {
        let first = d(name);
        if args[0] == "eval" {
            args.push(s(&first.join("report.json")).into());
        } else {
            args.extend(["--out".into(), s(&first).into()]);
        }
        let mut full = vec!["--deterministic".to_string()];
        full.extend(args);
        tool(&full.iter().map(String::as_str).collect::<Vec<_>>())?;
        let record = if name == "eval" { first.join("report.run.json") } else { first.join("run.json") };
        let second = base.join(format!("{name}_replay"));
        tool(&["replay", s(&record), "--out", s(&second)])?;
        let (a, b) = (outputs(&first)?, outputs(&second)?);
        ensure!(!a.is_empty(), "{name} wrote no outputs");
        if a != b {
            let differing: Vec<String> = a
                .keys()
                .chain(b.keys())
                .filter(|k| a.get(*k) != b.get(*k))
                .map(|k| k.display().to_string())
                .collect();
            return Ok((false, format!("{name} replay differs in {}", differing.join(", "))));
        }
        compared += a.len();
    }
    Ok((true, format!("7 runs over 6 subcommands replayed; {compared} output files byte-identical")))
}

// --------------------------------------------------------------------- main

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("LAYERFORGE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let kept = std::env::var("LAYERFORGE_ACCEPTANCE_DIR").ok().map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temporary directory");
    let root = kept.unwrap_or_else(|| temp.path().to_path_buf());
    std::fs::create_dir_all(&root).expect("working directory");
    let mut ws = Workspace {
        root,
        iterations: env_number("LAYERFORGE_ACCEPTANCE_ITERS", 1200),
        steps: env_number("LAYERFORGE_ACCEPTANCE_STEPS", 2000),
        models: None,
    };

    let criteria: [(usize, &str, fn(&mut Workspace) -> Outcome); 9] = [
        (1, "pyramid round trip", pyramid_round_trip),
        (2, "autodiff soundness", autodiff),
        (3, "architecture fidelity", architecture_tables),
        (4, "VAE ordering on natural patches", bench_ordering),
        (5, "decomposition beats baseline", beats_baseline),
        (6, "three-layer attribution", three_layers),
        (7, "metric invariants", metric_invariants),
        (8, "prior discrimination", prior_discrimination),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(AssertUnwindSafe(|| check(&mut ws))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".into()),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n} {} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    drop(temp);
    if failed > 0 {
        std::process::exit(1);
    }
}
