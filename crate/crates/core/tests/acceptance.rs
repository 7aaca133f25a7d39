//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p dajat --test acceptance` runs everything (the desk-scale
//! training runs take about an hour and a half on one core). Set
//! `DAJAT_ACCEPTANCE_ONLY=1,2,3` to run a subset, and `DAJAT_CIFAR10_DIR` to
//! train the desk-scale criteria on a CIFAR-10 binary directory instead of
//! the synthetic stand-in.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dajat::attacks::AttackSpec;
use dajat::config::{epsilon_at, lr_at};
use dajat::data::{augmentation_distances, synth_dataset, SynthOptions};
use dajat::eval::{attack_accuracy, clean_accuracy, transfer_accuracy};
use dajat::losses::{cross_entropy, dajat_loss, jsd, jsd_logits, kl_div, kl_logits, trades_loss, ProbVector};
use dajat::nn::LayerSpec;
use dajat::training::{load_dataset, load_policy, train, train_acat, train_dajat, Dataset, TrainOptions, TrainState};
use dajat::weight_space::awp_perturb;
use dajat::{BnMode, BnVariant, Config, Method, Model, ModelSpec, Tensor, ViewTag};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- schedules

fn schedules() -> Outcome {
    let (epochs, eps, lr) = (110, 8.0 / 255.0, 0.2);
    // High-precision reference values computed independently.
    let frozen: [(usize, f64, f64); 7] = [
        (1, 0.000_285_204_991_087_344_03, 0.2),
        (2, 0.000_570_409_982_174_688_06, 0.199_959_219_282_818_92),
        (37, 0.010_552_584_670_231_729, 0.151_639_746_163_896_19),
        (55, 0.015_686_274_509_803_922, 0.102_855_605_079_369_63),
        (56, 0.015_971_479_500_891_266, 0.1),
        (109, 0.031_087_344_028_520_499, 0.000_163_089_607_386_432_09),
        (110, 0.031_372_549_019_607_843, 0.000_040_780_717_181_077_037),
    ];
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let mut worst = 0.0f64;
    for e in 1..=epochs {
        let want_eps = e as f64 * eps / epochs as f64;
        let want_lr = 0.5 * lr * (1.0 + (std::f64::consts::PI * (e - 1) as f64 / epochs as f64).cos());
        worst = worst.max(rel(epsilon_at(e, epochs, eps).map_err(err)?, want_eps));
        worst = worst.max(rel(lr_at(e, epochs, lr).map_err(err)?, want_lr));
    }
    for (e, want_eps, want_lr) in frozen {
        worst = worst.max(rel(epsilon_at(e, epochs, eps).map_err(err)?, want_eps));
        worst = worst.max(rel(lr_at(e, epochs, lr).map_err(err)?, want_lr));
    }
    check(worst <= 1e-12, format!("max relative error {worst:.2e} over epochs 1..=110"))
}

// ------------------------------------------------------------ loss gradients

fn grad_spec() -> ModelSpec {
    ModelSpec {
        input: [2, 4, 4],
        layers: vec![
            LayerSpec::Conv { out: 4, kernel: 3, stride: 1, pad: None, bias: false },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out: 5 },
            LayerSpec::Bn,
            LayerSpec::Relu,
        ],
        classes: 3,
    }
}

fn unit_images(n: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = n * dims.iter().product::<usize>();
    Tensor::from_vec(&[n, dims[0], dims[1], dims[2]], (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn nudge(x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let noise: Vec<f64> = (0..x.len()).map(|_| 0.05 * (rng.random::<f64>() - 0.5)).collect();
    Tensor::from_vec(x.shape(), x.data().iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect()).unwrap()
}

type LossFn<'a> = Box<dyn Fn(&Model<f64>, Option<&mut [Tensor<f64>]>) -> dajat::Result<f64> + 'a>;

/// Largest |analytic − numeric| over all coordinates, relative to the largest |numeric|.
fn gradient_error(model: &mut Model<f64>, f: &LossFn) -> dajat::Result<f64> {
    let mut grads = model.zero_grads();
    f(model, Some(&mut grads))?;
    let h = 1e-5;
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for pi in 0..model.params().len() {
        for k in 0..model.params()[pi].len() {
            let orig = model.params()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + h;
            let up = f(model, None)?;
            model.params_mut()[pi].data_mut()[k] = orig - h;
            let down = f(model, None)?;
            model.params_mut()[pi].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            diff = diff.max((fd - grads[pi].data()[k]).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}

fn loss_gradients() -> Outcome {
    let mut model = Model::<f64>::new(&grad_spec(), BnVariant::SplitBoth, 11).map_err(err)?;
    let count: usize = model.params().iter().map(|p| p.len()).sum();
    if count > 200 {
        return Err(format!("oracle model has {count} parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (p, info) in model.params_mut().iter_mut().zip(grad_spec_info(&grad_spec())) {
        if info {
            p.data_mut().iter_mut().for_each(|v| *v = 0.5 + rng.random::<f64>());
        }
    }
    let x = unit_images(6, [2, 4, 4], &mut rng);
    let xa = nudge(&x, &mut rng);
    let c1 = nudge(&x, &mut rng);
    let c2 = nudge(&x, &mut rng);
    let a1 = nudge(&c1, &mut rng);
    let a2 = nudge(&c2, &mut rng);
    let y: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let mode = BnMode::Train;

    let mut losses: Vec<(String, LossFn)> = vec![
        (
            "ce".into(),
            Box::new(|m: &Model<f64>, g: Option<&mut [Tensor<f64>]>| {
                let fwd = m.forward(&x, ViewTag::Base, mode)?;
                let (v, gl) = cross_entropy(&fwd.logits, &y)?;
                if let Some(g) = g {
                    m.backward(&fwd, &gl, Some(g), false)?;
                }
                Ok(v)
            }),
        ),
        (
            "kl".into(),
            Box::new(|m: &Model<f64>, g: Option<&mut [Tensor<f64>]>| {
                let fc = m.forward(&x, ViewTag::Base, mode)?;
                let fa = m.forward(&xa, ViewTag::Complex, mode)?;
                let (v, gc, ga) = kl_logits(&fc.logits, &fa.logits)?;
                if let Some(g) = g {
                    m.backward(&fc, &gc, Some(&mut *g), false)?;
                    m.backward(&fa, &ga, Some(g), false)?;
                }
                Ok(v)
            }),
        ),
        (
            "jsd".into(),
            Box::new(|m: &Model<f64>, g: Option<&mut [Tensor<f64>]>| {
                let fs = [
                    m.forward(&x, ViewTag::Base, mode)?,
                    m.forward(&c1, ViewTag::Complex, mode)?,
                    m.forward(&c2, ViewTag::Complex, mode)?,
                ];
                let (v, gs) = jsd_logits(&fs.iter().map(|f| &f.logits).collect::<Vec<_>>())?;
                if let Some(g) = g {
                    for (f, gl) in fs.iter().zip(&gs) {
                        m.backward(f, gl, Some(&mut *g), false)?;
                    }
                }
                Ok(v)
            }),
        ),
        (
            "dajat(beta=9,lambda=2)".into(),
            Box::new(|m: &Model<f64>, g: Option<&mut [Tensor<f64>]>| {
                let clean = [(&x, ViewTag::Base), (&c1, ViewTag::Complex), (&c2, ViewTag::Complex)];
                let adv = [(&xa, ViewTag::Base), (&a1, ViewTag::Complex), (&a2, ViewTag::Complex)];
                Ok(dajat_loss(m, &clean, &adv, &y, 9.0, 2.0, None, mode, g)?.breakdown.total)
            }),
        ),
    ];
    for beta in [0.0, 6.0, 9.0] {
        let (x, xa, y) = (&x, &xa, &y);
        losses.push((
            format!("trades(beta={beta})"),
            Box::new(move |m: &Model<f64>, g: Option<&mut [Tensor<f64>]>| {
                Ok(trades_loss(m, x, xa, y, beta, ViewTag::Base, mode, g)?.breakdown.total)
            }),
        ));
    }
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in &losses {
        let e = gradient_error(&mut model, f).map_err(err)?;
        ok &= e <= 1e-4;
        parts.push(format!("{name} {e:.1e}"));
    }
    check(ok, format!("{count} parameters; {}", parts.join(", ")))
}

/// True for BN affine tensors, which start at (1, 0) and would hide bugs.
fn grad_spec_info(spec: &ModelSpec) -> Vec<bool> {
    let m = Model::<f64>::new(spec, BnVariant::SplitBoth, 0).unwrap();
    m.param_info().iter().map(|i| i.kind.is_bn()).collect()
}

// --------------------------------------------------------------- divergences

fn divergences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draw = |k: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = v.iter().sum();
        ProbVector::new(v.into_iter().map(|x| x / s).collect()).unwrap()
    };
    let (mut min_kl, mut max_over, mut max_perm) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let p = draw(k, &mut rng);
        let q = draw(k, &mut rng);
        min_kl = min_kl.min(kl_div(&p, &q));
        let n = rng.random_range(2..=5);
        let mut ps: Vec<ProbVector> = (0..n).map(|_| draw(k, &mut rng)).collect();
        let j = jsd(&ps).map_err(err)?;
        max_over = max_over.max((-j).max(j - (k as f64).ln()));
        ps.shuffle(&mut rng);
        max_perm = max_perm.max((jsd(&ps).map_err(err)? - j).abs());
    }
    let one_hot = |k: usize, i: usize| ProbVector::new((0..k).map(|j| if j == i { 1.0 } else { 0.0 }).collect()).unwrap();
    let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let hand = [
        jsd(&[one_hot(2, 0), one_hot(2, 1)]).map_err(err)?,
        jsd(&[one_hot(4, 1), one_hot(4, 3)]).map_err(err)?,
        kl_div(&one_hot(2, 0), &half),
    ];
    let hand_err = hand.iter().map(|v| (v - ln2).abs()).fold(0.0, f64::max);
    check(
        min_kl >= 0.0 && max_over <= 0.0 && max_perm <= 1e-12 && hand_err <= 1e-10,
        format!("min KL {min_kl:.2e}, worst bound excess {max_over:.2e}, permutation drift {max_perm:.1e}, log 2 cases off by {hand_err:.1e}"),
    )
}

// -------------------------------------------------------------------- AWP

fn awp_feasibility() -> Outcome {
    let spec = ModelSpec {
        input: [3, 6, 6],
        layers: vec![
            LayerSpec::Conv { out: 4, kernel: 3, stride: 1, pad: None, bias: true },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::Conv { out: 6, kernel: 3, stride: 2, pad: None, bias: false },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
        ],
        classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let variant = [BnVariant::SplitBoth, BnVariant::Single, BnVariant::SplitStatsOnly, BnVariant::SplitAffineOnly][trial as usize % 4];
        let model = Model::<f64>::new(&spec, variant, trial).map_err(err)?;
        let x = unit_images(8, [3, 6, 6], &mut rng);
        let xa = nudge(&x, &mut rng);
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let beta = rng.random_range(0.0..10.0);
        let gamma = rng.random_range(1e-4..0.2);
        let steps = rng.random_range(1..=3);
        let tag = if trial % 2 == 0 { ViewTag::Base } else { ViewTag::Complex };
        let p = awp_perturb(
            &model,
            |m, g| Ok(trades_loss(m, &x, &xa, &y, beta, tag, BnMode::Train, Some(g))?.breakdown.total),
            gamma,
            steps,
        )
        .map_err(err)?;
        for (d, th) in p.deltas.iter().zip(model.params()) {
            let bound = gamma * th.norm();
            if bound > 0.0 {
                worst = worst.max(d.norm() / bound);
            } else if d.norm() > 0.0 {
                return Err(format!("trial {trial}: nonzero delta on a zero-norm tensor"));
            }
        }
    }
    let mut model = Model::<f64>::new(&spec, BnVariant::SplitBoth, 1).map_err(err)?;
    let x = unit_images(8, [3, 6, 6], &mut rng);
    let xa = nudge(&x, &mut rng);
    let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let loss = |m: &Model<f64>| trades_loss(m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, None).map(|l| l.breakdown.total);
    let before = loss(&model).map_err(err)?;
    let mut p = awp_perturb(&model, |m, g| Ok(trades_loss(m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, Some(g))?.breakdown.total), 0.0, 1)
        .map_err(err)?;
    p.apply(&mut model).map_err(err)?;
    let after = loss(&model).map_err(err)?;
    check(
        worst <= 1.0 + 1e-6 && before.to_bits() == after.to_bits(),
        format!("worst ‖delta‖/(gamma‖theta‖) = {worst:.9} over 100 models; zero budget loss {before} vs {after}"),
    )
}

// --------------------------------------------------------- BN isolation

fn bn_spec() -> ModelSpec {
    ModelSpec {
        input: [3, 6, 6],
        layers: vec![
            LayerSpec::Conv { out: 4, kernel: 3, stride: 2, pad: None, bias: false },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::Conv { out: 5, kernel: 3, stride: 1, pad: None, bias: true },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
        ],
        classes: 3,
    }
}

fn randomize(model: &mut Model<f64>, rng: &mut ChaCha8Rng, only_complex: bool) {
    let pick = |name: &str| !only_complex || name.ends_with(".1");
    let info: Vec<_> = model.param_info().to_vec();
    for (p, i) in model.params_mut().iter_mut().zip(&info) {
        if i.kind.is_bn() && pick(&i.name) {
            p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5));
        }
    }
    let info: Vec<_> = model.buffer_info().to_vec();
    for (b, i) in model.buffers_mut().iter_mut().zip(&info) {
        if pick(&i.name) {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.2..1.8));
        }
    }
}

/// Plain conv (zero padding k/2) over one CHW image.
fn conv(x: &[f64], dims: [usize; 3], w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize) -> (Vec<f64>, [usize; 3]) {
    let [cin, h, wd] = dims;
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (yy, xx) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                s += w.data()[((o * cin + c) * k + di) * k + dj] * x[(c * h + yy as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    (out, [cout, oh, ow])
}

fn bn_relu(x: &mut [f64], dims: [usize; 3], scale: &[f64], shift: &[f64], mean: &[f64], var: &[f64]) {
    let plane = dims[1] * dims[2];
    for c in 0..dims[0] {
        let inv = 1.0 / (var[c] + 1e-5).sqrt();
        for v in &mut x[c * plane..(c + 1) * plane] {
            *v = ((*v - mean[c]) * inv * scale[c] + shift[c]).max(0.0);
        }
    }
}

fn plain_bn_oracle(model: &Model<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let p: BTreeMap<&str, &Tensor<f64>> = model.param_info().iter().map(|i| i.name.as_str()).zip(model.params()).collect();
    let b: BTreeMap<&str, &Tensor<f64>> = model.buffer_info().iter().map(|i| i.name.as_str()).zip(model.buffers()).collect();
    let mut out = Vec::new();
    for n in 0..x.batch() {
        let (mut h, d) = conv(x.row(n), [3, 6, 6], p["layers.0.weight"], None, 2);
        bn_relu(&mut h, d, p["layers.1.bn.scale.0"].data(), p["layers.1.bn.shift.0"].data(), b["layers.1.bn.mean.0"].data(), b["layers.1.bn.var.0"].data());
        let (mut h, d) = conv(&h, d, p["layers.3.weight"], Some(p["layers.3.bias"]), 1);
        bn_relu(&mut h, d, p["layers.4.bn.scale.0"].data(), p["layers.4.bn.shift.0"].data(), b["layers.4.bn.mean.0"].data(), b["layers.4.bn.var.0"].data());
        let plane = d[1] * d[2];
        let pooled: Vec<f64> = (0..d[0]).map(|c| h[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        let (w, bias) = (p["head.weight"], p["head.bias"]);
        for k in 0..w.shape()[0] {
            out.push(bias.data()[k] + (0..d[0]).map(|c| w.data()[k * d[0] + c] * pooled[c]).sum::<f64>());
        }
    }
    out
}

fn bn_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = unit_images(5, [3, 6, 6], &mut rng);
    for variant in [BnVariant::SplitBoth, BnVariant::SplitStatsOnly, BnVariant::SplitAffineOnly, BnVariant::Single] {
        let mut model = Model::<f64>::new(&bn_spec(), variant, 3).map_err(err)?;
        randomize(&mut model, &mut rng, false);
        let before = model.inference_forward(&x).map_err(err)?;
        for _ in 0..5 {
            randomize(&mut model, &mut rng, true);
            let after = model.inference_forward(&x).map_err(err)?;
            if before.data().iter().zip(after.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("{variant:?}: complex-set values changed an inference logit"));
            }
        }
    }
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut model = Model::<f64>::new(&bn_spec(), BnVariant::Single, seed).map_err(err)?;
        randomize(&mut model, &mut rng, false);
        let got = model.inference_forward(&x).map_err(err)?;
        let want = plain_bn_oracle(&model, &x);
        worst = worst.max(got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    check(worst <= 1e-6, format!("complex sets leave base logits bit-identical for all 4 variants; single vs plain-BN oracle max diff {worst:.1e}"))
}

// --------------------------------------------------------- reduction

fn reduction() -> Outcome {
    let mut acat = Config::default();
    acat.data.n_train = 256;
    acat.data.n_test = 32;
    acat.train.epochs = 3;
    acat.train.batch_size = 64;
    acat.train.method = Method::Acat;
    acat.train.beta = Some(8.0);
    acat.train.seed = 21;
    let mut dajat = acat.clone();
    dajat.train.method = Method::Dajat;
    dajat.train.views = 0;
    dajat.train.lambda_js = 0.0;
    dajat.train.bn_variant = Some(BnVariant::Single);
    let data = load_dataset(&acat).map_err(err)?;
    let opts = TrainOptions { skip_eval: true, ..TrainOptions::default() };
    let a = train_acat(&acat, &data, &opts).map_err(err)?;
    let d = train_dajat(&dajat, &data, &opts).map_err(err)?;
    let diff = |x: &[Tensor<f32>], y: &[Tensor<f32>]| {
        x.iter().zip(y).flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs() as f64)).fold(0.0, f64::max)
    };
    let pd = diff(a.model.params(), d.model.params());
    let bd = diff(a.model.buffers(), d.model.buffers());
    check(pd <= 1e-6 && bd <= 1e-6, format!("3 epochs on 256 samples: max parameter diff {pd:.1e}, running-stat diff {bd:.1e}"))
}

// ------------------------------------------------------ desk-scale runs

struct Desk {
    cfg: Config,
    data: Dataset,
    acat: Vec<TrainState>,
    acat_seconds: Vec<f64>,
}

fn desk_config() -> Result<Config, String> {
    let mut overrides = vec!["train.epochs=30".to_string()];
    if let Ok(dir) = std::env::var("DAJAT_CIFAR10_DIR") {
        overrides.push("data.source=\"cifar10\"".into());
        overrides.push(format!("data.path={}", toml_string(&dir)));
    }
    let cfg = Config::from_toml_with_overrides(&Config::default().to_toml().map_err(err)?, &overrides).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn with_seed(cfg: &Config, method: Method, seed: u64, variant: Option<BnVariant>) -> Config {
    let mut c = cfg.clone();
    c.train.method = method;
    c.train.seed = seed;
    c.train.views = 2;
    c.train.bn_variant = variant;
    c
}

fn timed_train(cfg: &Config, data: &Dataset) -> Result<(TrainState, f64), String> {
    timed_train_with(cfg, data, &TrainOptions::default())
}

// Runs scored only on their final averaged weights skip per-epoch monitoring.
fn timed_train_final(cfg: &Config, data: &Dataset) -> Result<(TrainState, f64), String> {
    timed_train_with(cfg, data, &TrainOptions { skip_eval: true, ..TrainOptions::default() })
}

fn timed_train_with(cfg: &Config, data: &Dataset, opts: &TrainOptions) -> Result<(TrainState, f64), String> {
    let t = Instant::now();
    let s = train(TrainState::new(cfg).map_err(err)?, data, opts).map_err(err)?;
    Ok((s, t.elapsed().as_secs_f64()))
}

fn pgd(cfg: &Config, steps: usize) -> AttackSpec {
    AttackSpec::pgd(cfg.threat.epsilon_max, steps).with_seed(cfg.eval.seed)
}

fn acat_stability(desk: &mut Option<Desk>) -> Outcome {
    let cfg = desk_config()?;
    let data = load_dataset(&cfg).map_err(err)?;
    let (state, secs) = timed_train(&with_seed(&cfg, Method::Acat, 0, None), &data)?;
    let b = cfg.eval.batch_size;
    let last = attack_accuracy(&state.ema.shadow, &data.test, &pgd(&cfg, 20), b).map_err(err)?.0;
    let best = attack_accuracy(&state.best_model, &data.test, &pgd(&cfg, 20), b).map_err(err)?.0;
    let grid = [0.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
    let sweep_data = data.test.head(500);
    let mut sweep = Vec::new();
    for e in grid {
        let spec = AttackSpec::pgd(e / 255.0, 7).with_seed(cfg.eval.seed);
        sweep.push(attack_accuracy(&state.ema.shadow, &sweep_data, &spec, b).map_err(err)?.0);
    }
    let monotone = sweep.windows(2).all(|w| w[1] <= w[0]);
    let detail = format!(
        "PGD-20 last {last:.1}% vs best (epoch {}) {best:.1}%; PGD-7 sweep {:?} over eps {:?}/255",
        state.best_epoch,
        sweep.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
        grid
    );
    let ok = (last - best).abs() <= 2.0 && last > 0.0 && monotone && *sweep.last().unwrap() == 0.0;
    *desk = Some(Desk {
        cfg,
        data,
        acat: vec![state],
        acat_seconds: vec![secs],
    });
    check(ok, detail)
}

fn ensure_desk(desk: &mut Option<Desk>) -> Result<&mut Desk, String> {
    if desk.is_none() {
        let cfg = desk_config()?;
        let data = load_dataset(&cfg).map_err(err)?;
        let (s, secs) = timed_train(&with_seed(&cfg, Method::Acat, 0, None), &data)?;
        *desk = Some(Desk {
            cfg,
            data,
            acat: vec![s],
            acat_seconds: vec![secs],
        });
    }
    Ok(desk.as_mut().unwrap())
}

fn dajat_direction(desk: &mut Option<Desk>) -> Outcome {
    let desk = ensure_desk(desk)?;
    let b = desk.cfg.eval.batch_size;
    let score = |m: &Model, cfg: &Config, data: &Dataset| -> Result<(f64, f64), String> {
        Ok((
            clean_accuracy(m, &data.test, b).map_err(err)?.0,
            attack_accuracy(m, &data.test, &pgd(cfg, 20), b).map_err(err)?.0,
        ))
    };
    let mut rows: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for seed in 0..3u64 {
        if desk.acat.len() <= seed as usize {
            let (s, secs) = timed_train_final(&with_seed(&desk.cfg, Method::Acat, seed, None), &desk.data)?;
            desk.acat.push(s);
            desk.acat_seconds.push(secs);
        }
        rows.entry("acat").or_default().push(score(&desk.acat[seed as usize].ema.shadow, &desk.cfg, &desk.data)?);
        for (name, variant) in [("split", BnVariant::SplitBoth), ("single", BnVariant::Single)] {
            let (s, _) = timed_train_final(&with_seed(&desk.cfg, Method::Dajat, seed, Some(variant)), &desk.data)?;
            rows.entry(name).or_default().push(score(&s.ema.shadow, &desk.cfg, &desk.data)?);
        }
    }
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (ac, sc) = (mean(&rows["acat"], |r| r.0), mean(&rows["split"], |r| r.0));
    let (sr, gr) = (mean(&rows["split"], |r| r.1), mean(&rows["single"], |r| r.1));
    let detail = format!(
        "clean: dajat(Base,2*AA) {sc:.2}% vs acat {ac:.2}%; PGD-20: split BN {sr:.2}% vs single BN {gr:.2}% (per-seed clean/robust {:?})",
        rows.iter().map(|(k, v)| format!("{k} {v:.1?}")).collect::<Vec<_>>()
    );
    check(sc >= ac - 0.5 && sr >= gr, detail)
}

fn attack_ordering(desk: &mut Option<Desk>) -> Outcome {
    let desk = ensure_desk(desk)?;
    let (cfg, data) = (&desk.cfg, &desk.data);
    let b = cfg.eval.batch_size;
    let model = &desk.acat[0].ema.shadow;
    let eps = cfg.threat.epsilon_max;
    let clean = clean_accuracy(model, &data.test, b).map_err(err)?.0;
    let fgsm = attack_accuracy(model, &data.test, &AttackSpec::fgsm(eps).with_seed(cfg.eval.seed), b).map_err(err)?.0;
    let p20 = attack_accuracy(model, &data.test, &pgd(cfg, 20), b).map_err(err)?.0;
    let p100 = attack_accuracy(model, &data.test, &pgd(cfg, 100), b).map_err(err)?.0;
    let source = match desk.acat.get(1) {
        Some(s) => s.ema.shadow.clone(),
        None => {
            let (s, _) = timed_train_final(&with_seed(cfg, Method::Acat, 1, None), data)?;
            s.ema.shadow
        }
    };
    let bb = transfer_accuracy(&source, model, &data.test, &AttackSpec::fgsm(eps).with_seed(cfg.eval.seed), b).map_err(err)?;
    let restart_data = data.test.head(500);
    let mut restarts = Vec::new();
    for r in [1, 2, 5] {
        restarts.push(attack_accuracy(model, &restart_data, &pgd(cfg, 20).with_restarts(r), b).map_err(err)?.0);
    }
    let ok = p100 <= p20 && p20 <= fgsm && fgsm <= clean && bb >= fgsm && restarts.windows(2).all(|w| w[1] <= w[0]);
    check(
        ok,
        format!("clean {clean:.1} >= FGSM {fgsm:.1} >= PGD-20 {p20:.1} >= PGD-100 {p100:.1}; black-box FGSM {bb:.1}; PGD-20 with 1/2/5 restarts {restarts:.1?}"),
    )
}

// ---------------------------------------------------- augmentation distance

fn augmentation_ordering() -> Outcome {
    let cfg = Config::default();
    let images = match std::env::var("DAJAT_CIFAR10_DIR") {
        Ok(_) => load_dataset(&desk_config()?).map_err(err)?.train.head(500),
        Err(_) => synth_dataset(&SynthOptions { n: 500, seed: cfg.data.seed, noise: cfg.data.noise, ..SynthOptions::default() }).map_err(err)?,
    };
    let policy = load_policy(&cfg).map_err(err)?;
    let rows = augmentation_distances(&images, &policy, cfg.train.pad, 5).map_err(err)?;
    let get = |pair: &str, metric: &str| rows.iter().find(|r| r.pair == pair && r.metric == metric).map(|r| r.mean);
    let (Some(id_h), Some(id_p), Some(base), Some(pol)) = (
        get("identical", "histogram_mse"),
        get("identical", "patch_mse"),
        get("base", "histogram_mse"),
        get("policy", "histogram_mse"),
    ) else {
        return Err("distance table is missing rows".into());
    };
    check(
        pol > base && id_h == 0.0 && id_p == 0.0,
        format!("{} images: histogram_mse policy {pol:.2} > base {base:.2}; identical controls {id_h} / {id_p}", images.len()),
    )
}

// ------------------------------------------------------------- persistence

fn persistence() -> Outcome {
    let mut cfg = Config::default();
    cfg.model = ModelSpec {
        input: [3, 32, 32],
        layers: vec![
            LayerSpec::Conv { out: 8, kernel: 3, stride: 2, pad: None, bias: false },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::Conv { out: 8, kernel: 3, stride: 2, pad: None, bias: false },
            LayerSpec::Bn,
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
        ],
        classes: 10,
    };
    cfg.data.n_train = 256;
    cfg.data.n_test = 64;
    cfg.train.method = Method::Dajat;
    cfg.train.views = 1;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 64;
    cfg.eval.quick_samples = 32;
    cfg.eval.quick_steps = 2;
    cfg.eval.select_steps = 2;
    let data: Dataset = load_dataset(&cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let k = 2;
    let partial = train(TrainState::new(&cfg).map_err(err)?, &data, &TrainOptions { stop_after: Some(k), ..TrainOptions::default() }).map_err(err)?;
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    partial.save(&p1).map_err(err)?;
    let loaded = TrainState::load(&p1).map_err(err)?;
    loaded.save(&p2).map_err(err)?;
    let bytes_equal = std::fs::read(&p1).map_err(err)? == std::fs::read(&p2).map_err(err)?;
    let bitwise = |a: &Model, b: &Model| {
        a.params().iter().chain(a.buffers()).zip(b.params().iter().chain(b.buffers())).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
    };
    let round_trip = bitwise(&partial.model, &loaded.model) && bitwise(&partial.ema.shadow, &loaded.ema.shadow) && bitwise(&partial.best_model, &loaded.best_model);
    let opts = TrainOptions { stop_after: Some(k + 1), ..TrainOptions::default() };
    let resumed = train(loaded, &data, &opts).map_err(err)?;
    let straight = train(TrainState::new(&cfg).map_err(err)?, &data, &opts).map_err(err)?;
    let diff = resumed
        .model
        .params()
        .iter()
        .chain(resumed.model.buffers())
        .zip(straight.model.params().iter().chain(straight.model.buffers()))
        .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs() as f64))
        .fold(0.0, f64::max);
    check(
        bytes_equal && round_trip && diff <= 1e-6,
        format!("save/load/save bytes equal: {bytes_equal}; tensors bitwise equal: {round_trip}; resume at epoch {k} vs straight run at epoch {}: max diff {diff:.1e}", k + 1),
    )
}

// ------------------------------------------------------------------ driver

fn selected() -> Option<Vec<usize>> {
    std::env::var("DAJAT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture may be passed through; none apply here.
    let only = selected();
    let wanted = |id: usize| only.as_ref().is_none_or(|v| v.contains(&id));
    let mut desk: Option<Desk> = None;
    let mut failures = 0;
    let mut ran = 0;
    let mut report = |id: usize, name: &str, budget: Duration, outcome: Outcome, elapsed: Duration| {
        ran += 1;
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        if !ok {
            failures += 1;
        }
        println!("criterion {id:>2} {name}: {} ({detail}; {:.1} s)", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    };
    let simple: [(usize, &str, u64, fn() -> Outcome); 6] = [
        (1, "schedule exactness", 1, schedules),
        (2, "loss-gradient oracle", 60, loss_gradients),
        (3, "divergence algebra", 10, divergences),
        (4, "weight-perturbation feasibility", 60, awp_feasibility),
        (5, "split-BN isolation", 60, bn_isolation),
        (6, "reduction to the baseline", 300, reduction),
    ];
    for (id, name, secs, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            let o = f();
            report(id, name, Duration::from_secs(secs), o, t.elapsed());
        }
    }
    if wanted(7) {
        let t = Instant::now();
        let o = acat_stability(&mut desk);
        report(7, "desk-scale ACAT stability", Duration::from_secs(30 * 60), o, t.elapsed());
    }
    if wanted(8) {
        let t = Instant::now();
        let reused = desk.as_ref().map_or(0.0, |d| d.acat_seconds[0]);
        // The seed-0 baseline trained for criterion 7 counts against this budget too.
        let o = dajat_direction(&mut desk);
        let elapsed = t.elapsed() + Duration::from_secs_f64(reused);
        report(8, "desk-scale DAJAT direction", Duration::from_secs(2 * 3600), o, elapsed);
    }
    if wanted(9) {
        let t = Instant::now();
        let o = attack_ordering(&mut desk);
        report(9, "attack ordering", Duration::from_secs(15 * 60), o, t.elapsed());
    }
    if wanted(10) {
        let t = Instant::now();
        let o = augmentation_ordering();
        report(10, "augmentation-distance ordering", Duration::from_secs(300), o, t.elapsed());
    }
    if wanted(11) {
        let t = Instant::now();
        let o = persistence();
        report(11, "persistence", Duration::from_secs(300), o, t.elapsed());
    }
    println!("{} of {ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
