//! The two training loops, their state, metrics stream and persistence.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, iteration)`,
//! so the state saved at an epoch boundary is all a resumed run needs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{kl_attack, AttackSpec};
use crate::checkpoint::Archive;
use crate::config::{attack_steps_at, epsilon_at, lr_at, Config, DataSource, Method};
use crate::data::{base_augment, load_cifar10_dir, make_views, synth_dataset, AugmentPolicy, ImageBatch, SynthOptions};
use crate::error::{Error, Result};
use crate::eval::{attack_accuracy, clean_accuracy};
use crate::losses::{dajat_loss, trades_loss, LossEval};
use crate::nn::{BnMode, Model, ViewTag};
use crate::optim::Sgd;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;
use crate::weight_space::{awp_perturb, AveragedModel};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: ImageBatch,
    pub val: ImageBatch,
    pub test: ImageBatch,
}

/// Builds the train/validation/test splits described by the config.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let d = &cfg.data;
    let [c, h, w] = cfg.model.input;
    let (pool, test) = match d.source {
        DataSource::Synthetic => {
            if c != 3 || h != w {
                return Err(Error::Config(format!("synthetic data is 3×S×S, model expects {:?}", cfg.model.input)));
            }
            let all = synth_dataset(&SynthOptions {
                n: d.n_train + d.n_test,
                classes: d.classes,
                seed: d.seed,
                noise: d.noise,
                size: h,
                ..SynthOptions::default()
            })?;
            let idx: Vec<usize> = (0..all.len()).collect();
            (all.subset(&idx[..d.n_train]), all.subset(&idx[d.n_train..]))
        }
        DataSource::Cifar10 => {
            let dir = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("data.source = cifar10 needs data.path".into()))?;
            let (train, test) = load_cifar10_dir(dir)?;
            if train.dims() != cfg.model.input {
                return Err(Error::Config(format!("dataset images {:?} do not fit model input {:?}", train.dims(), cfg.model.input)));
            }
            (train.head(d.n_train), test.head(d.n_test))
        }
    };
    let (train, val) = pool.split_validation(d.resolved_val_size(pool.len()), d.seed)?;
    Ok(Dataset { train, val, test })
}

pub fn load_policy(cfg: &Config) -> Result<AugmentPolicy> {
    match &cfg.data.policy {
        Some(p) => AugmentPolicy::load(p),
        None => Ok(AugmentPolicy::cifar10()),
    }
}

/// One object per epoch in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub method: String,
    pub epsilon: f64,
    pub lr: f64,
    pub attack_steps: usize,
    pub train_loss: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub jsd_term: f64,
    pub iterations: usize,
    /// Attacks launched per iteration, one per view.
    pub attacks_per_iteration: usize,
    /// Attack steps on the base view and on all complex views, e.g. `2+4`.
    pub step_structure: String,
    /// Quick metric on the test subset, live weights.
    pub clean_acc: f64,
    pub robust_acc: f64,
    /// Same, averaged weights.
    pub ema_clean_acc: f64,
    pub ema_robust_acc: f64,
    /// Selection metric: averaged weights on the validation split.
    pub val_robust_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub crate_version: String,
    pub seed: u64,
    pub method: String,
    /// How the weight perturbation scales its step.
    pub awp_step: String,
    pub config: Config,
}

impl Provenance {
    pub fn new(cfg: &Config) -> Self {
        Provenance {
            kind: "provenance".into(),
            crate_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.train.seed,
            method: cfg.train.method_label(),
            awp_step: "normalized gradient scaled to gamma·‖θ_l‖ per tensor".into(),
            config: cfg.clone(),
        }
    }
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: Config,
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub ema: AveragedModel,
    pub optimizer: Sgd,
    pub epsilon: f64,
    pub lr: f64,
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_robust: f64,
    /// Averaged weights of the best epoch so far.
    pub best_model: Model,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let model = Model::new(&config.model, t.bn_variant(), t.seed)?;
        Ok(TrainState {
            config: config.clone(),
            epoch: 0,
            ema: AveragedModel::new(&model, t.ema_decay)?,
            optimizer: Sgd::new(&model, t.momentum, t.weight_decay, t.decay_bn),
            epsilon: 0.0,
            lr: 0.0,
            history: Vec::new(),
            best_epoch: 0,
            best_val_robust: f64::NEG_INFINITY,
            best_model: model.clone(),
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "epoch": self.epoch,
            "epsilon": self.epsilon,
            "lr": self.lr,
            "history": self.history,
            "best_epoch": self.best_epoch,
            "best_val_robust": if self.best_val_robust.is_finite() { Some(self.best_val_robust) } else { None },
            "ema_updates": self.ema.updates,
            "rng": "streams keyed by (seed, epoch, iteration, purpose, view); no carried state",
        });
        let mut a = Archive::new(meta);
        a.put_model("model", &self.model);
        a.put_model("ema", &self.ema.shadow);
        a.put_model("best", &self.best_model);
        for (v, info) in self.optimizer.velocity.iter().zip(self.model.param_info()) {
            a.insert(format!("optim.velocity.{}", info.name), v.clone());
        }
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut a = Archive::load(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let meta = a.meta.take();
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("manifest lacks {k}")));
        let config: Config = serde_json::from_value(field("config")?).map_err(|e| bad(e.to_string()))?;
        let mut s = TrainState::new(&config)?;
        s.epoch = serde_json::from_value(field("epoch")?)?;
        s.epsilon = serde_json::from_value(field("epsilon")?)?;
        s.lr = serde_json::from_value(field("lr")?)?;
        s.history = serde_json::from_value(field("history")?)?;
        s.best_epoch = serde_json::from_value(field("best_epoch")?)?;
        s.best_val_robust = serde_json::from_value::<Option<f64>>(field("best_val_robust")?)?.unwrap_or(f64::NEG_INFINITY);
        s.ema.updates = serde_json::from_value(field("ema_updates")?)?;
        a.take_model("model", &mut s.model, path)?;
        a.take_model("ema", &mut s.ema.shadow, path)?;
        a.take_model("best", &mut s.best_model, path)?;
        let names: Vec<String> = s.model.param_info().iter().map(|i| i.name.clone()).collect();
        for (v, name) in s.optimizer.velocity.iter_mut().zip(&names) {
            let t = a.take(&format!("optim.velocity.{name}"), path)?;
            if t.shape() != v.shape() {
                return Err(bad(format!("velocity {name} has shape {:?}", t.shape())));
            }
            *v = t;
        }
        if !a.tensors.is_empty() {
            return Err(bad(format!("{} unexpected tensors", a.tensors.len())));
        }
        Ok(s)
    }
}

/// Loads the model stored in a checkpoint: `which` is `model`, `ema` or `best`.
pub fn load_model(path: &Path, which: &str) -> Result<Model> {
    let s = TrainState::load(path)?;
    match which {
        "model" | "live" => Ok(s.model),
        "ema" => Ok(s.ema.shadow),
        "best" => Ok(s.best_model),
        other => Err(Error::Argument(format!("unknown checkpoint model {other:?}; use model, ema or best"))),
    }
}

/// Per-iteration bookkeeping, exposed for tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Instrumentation {
    pub attacks: Vec<usize>,
    pub base_attack_steps: Vec<usize>,
    pub complex_attack_steps: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Writes metrics, config snapshot and checkpoints here when set.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs instead of `train.epochs`.
    pub stop_after: Option<usize>,
    /// Skip the per-epoch quick evaluation (metrics then hold NaN).
    pub skip_eval: bool,
}

struct Step<'a> {
    epoch: usize,
    iteration: usize,
    epsilon: f64,
    steps: usize,
    lr: f64,
    batch: &'a ImageBatch,
}

fn attack_spec(cfg: &Config, epsilon: f64, steps: usize, seed: u64) -> AttackSpec {
    let t = &cfg.train;
    AttackSpec {
        reinit_per_step: t.reinit_per_step,
        ..AttackSpec::kl(epsilon, steps, t.attack_step_factor * epsilon, t.init_noise_sigma).with_seed(seed)
    }
}

fn check_finite(eval: &LossEval<f32>, grads: &[Tensor<f32>], epoch: usize, iteration: usize) -> Result<()> {
    if !eval.breakdown.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite {
            epoch,
            iteration,
            detail: format!(
                "total {} (ce {}, kl {}, jsd {})",
                eval.breakdown.total, eval.breakdown.ce_term, eval.breakdown.kl_term, eval.breakdown.jsd_term
            ),
        });
    }
    Ok(())
}

/// Attack under the base tag, weight-perturb on the base TRADES loss, step at
/// the perturbed weights, restore, average.
fn acat_step(state: &mut TrainState, s: &Step, instr: &mut Instrumentation) -> Result<LossEval<f32>> {
    let cfg = state.config.clone();
    let t = &cfg.train;
    let seed = t.seed;
    let (e, it) = (s.epoch as u64, s.iteration as u64);
    let mut aug = stream(seed, e, it, Purpose::Augment, 0);
    let mut view_rng = ChaCha8Rng::seed_from_u64(aug.random());
    let x = base_augment(&s.batch.images, t.pad, &mut view_rng);
    let y = &s.batch.labels;
    let spec = attack_spec(&cfg, s.epsilon, s.steps, seed);
    let adv = kl_attack(&state.model, &x, ViewTag::Base, &spec, &mut stream(seed, e, it, Purpose::Attack, 0))?.adversarial;
    instr.attacks.push(1);
    instr.base_attack_steps.push(s.steps);
    instr.complex_attack_steps.push(0);
    let beta = t.beta();
    let mut pert = awp_perturb(
        &state.model,
        |m, g| Ok(trades_loss(m, &x, &adv, y, beta, ViewTag::Base, BnMode::Train, Some(g))?.breakdown.total),
        t.gamma_awp,
        t.awp_steps,
    )?;
    pert.apply(&mut state.model)?;
    let mut grads = state.model.zero_grads();
    let ev = trades_loss(&state.model, &x, &adv, y, beta, ViewTag::Base, BnMode::Train, Some(&mut grads))?;
    finish_step(state, pert, ev, grads, s)
}

/// One base and T complex views, each attacked under its own tag; the weight
/// perturbation sees only the base view.
fn dajat_step(state: &mut TrainState, s: &Step, policy: &AugmentPolicy, instr: &mut Instrumentation) -> Result<LossEval<f32>> {
    let cfg = state.config.clone();
    let t = &cfg.train;
    let seed = t.seed;
    let (e, it) = (s.epoch as u64, s.iteration as u64);
    let views = make_views(s.batch, t.views, policy, t.pad, &mut stream(seed, e, it, Purpose::Augment, 0))?;
    views.validate()?;
    let y = &views.labels;
    let spec = attack_spec(&cfg, s.epsilon, s.steps, seed);
    let mut adv = Vec::with_capacity(views.views.len());
    for (v, view) in views.views.iter().enumerate() {
        let mut rng = stream(seed, e, it, Purpose::Attack, v as u32);
        adv.push(kl_attack(&state.model, &view.images, view.tag, &spec, &mut rng)?.adversarial);
    }
    instr.attacks.push(adv.len());
    instr.base_attack_steps.push(s.steps);
    instr.complex_attack_steps.push(s.steps * views.complex_count());
    let beta = t.beta();
    let base = &views.views[0].images;
    let mut pert = awp_perturb(
        &state.model,
        |m, g| Ok(trades_loss(m, base, &adv[0], y, beta, ViewTag::Base, BnMode::Train, Some(g))?.breakdown.total),
        t.gamma_awp,
        t.awp_steps,
    )?;
    pert.apply(&mut state.model)?;
    let clean: Vec<(&Tensor<f32>, ViewTag)> = views.views.iter().map(|v| (&v.images, v.tag)).collect();
    let advs: Vec<(&Tensor<f32>, ViewTag)> = adv.iter().zip(&views.views).map(|(a, v)| (a, v.tag)).collect();
    let mut grads = state.model.zero_grads();
    let ev = dajat_loss(
        &state.model,
        &clean,
        &advs,
        y,
        beta,
        t.lambda_js,
        t.base_view_weight,
        BnMode::Train,
        Some(&mut grads),
    )?;
    finish_step(state, pert, ev, grads, s)
}

fn finish_step(
    state: &mut TrainState,
    mut pert: crate::weight_space::WeightPerturbation,
    ev: LossEval<f32>,
    grads: Vec<Tensor<f32>>,
    s: &Step,
) -> Result<LossEval<f32>> {
    if let Err(e) = check_finite(&ev, &grads, s.epoch, s.iteration) {
        pert.remove(&mut state.model)?;
        return Err(e);
    }
    for (c, a) in ev.clean.iter().zip(&ev.adv) {
        state.model.commit_batch_stats(c);
        state.model.commit_batch_stats(a);
    }
    pert.remove(&mut state.model)?;
    state.optimizer.step(&mut state.model, &grads, s.lr)?;
    state.ema.update(&state.model)?;
    Ok(ev)
}

/// Runs epoch `state.epoch + 1` over `train`.
pub fn train_epoch(state: &mut TrainState, train: &ImageBatch, policy: &AugmentPolicy, instr: &mut Instrumentation) -> Result<MetricsRecord> {
    let start = Instant::now();
    let t = state.config.train.clone();
    let epoch = state.epoch + 1;
    let epsilon = epsilon_at(epoch, t.epochs, state.config.threat.epsilon_max)?;
    let lr = lr_at(epoch, t.epochs, t.lr_max)?;
    let steps = attack_steps_at(epoch, &t.attack_steps)?;
    state.epsilon = epsilon;
    state.lr = lr;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(t.seed, epoch as u64, 0, Purpose::Shuffle, 0));
    let (mut total, mut ce, mut kl, mut jsd, mut iters) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (iteration, idx) in order.chunks(t.batch_size).enumerate() {
        if idx.len() < 2 {
            continue;
        }
        let batch = train.subset(idx);
        let s = Step {
            epoch,
            iteration,
            epsilon,
            steps,
            lr,
            batch: &batch,
        };
        let ev = match t.method {
            Method::Acat => acat_step(state, &s, instr)?,
            Method::Dajat => dajat_step(state, &s, policy, instr)?,
        };
        total += ev.breakdown.total;
        ce += ev.breakdown.ce_term;
        kl += ev.breakdown.kl_term;
        jsd += ev.breakdown.jsd_term;
        iters += 1;
    }
    state.epoch = epoch;
    let n = iters.max(1) as f64;
    let views = t.effective_views();
    Ok(MetricsRecord {
        epoch,
        method: t.method_label(),
        epsilon,
        lr,
        attack_steps: steps,
        train_loss: total / n,
        ce_term: ce / n,
        kl_term: kl / n,
        jsd_term: jsd / n,
        iterations: iters,
        attacks_per_iteration: views + 1,
        step_structure: if views == 0 { format!("{steps}") } else { format!("{steps}+{}", steps * views) },
        clean_acc: f64::NAN,
        robust_acc: f64::NAN,
        ema_clean_acc: f64::NAN,
        ema_robust_acc: f64::NAN,
        val_robust_acc: f64::NAN,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Quick per-epoch metrics and best-epoch selection.
fn score_epoch(state: &mut TrainState, data: &Dataset, rec: &mut MetricsRecord) -> Result<()> {
    let ev = &state.config.eval;
    let eps = state.config.threat.epsilon_max;
    let quick = data.test.head(ev.quick_samples);
    let quick_spec = AttackSpec::pgd(eps, ev.quick_steps).with_seed(ev.seed);
    rec.clean_acc = clean_accuracy(&state.model, &quick, ev.batch_size)?.0;
    rec.robust_acc = attack_accuracy(&state.model, &quick, &quick_spec, ev.batch_size)?.0;
    rec.ema_clean_acc = clean_accuracy(&state.ema.shadow, &quick, ev.batch_size)?.0;
    rec.ema_robust_acc = attack_accuracy(&state.ema.shadow, &quick, &quick_spec, ev.batch_size)?.0;
    let select = AttackSpec::pgd(eps, ev.select_steps).with_seed(ev.seed);
    rec.val_robust_acc = attack_accuracy(&state.ema.shadow, &data.val, &select, ev.batch_size)?.0;
    if rec.val_robust_acc > state.best_val_robust {
        state.best_val_robust = rec.val_robust_acc;
        state.best_epoch = rec.epoch;
        state.best_model = state.ema.shadow.clone();
    }
    Ok(())
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

/// Trains until `train.epochs` (or `stop_after`) completed epochs, starting
/// from `state`, which may come from a checkpoint.
pub fn train(mut state: TrainState, data: &Dataset, opts: &TrainOptions) -> Result<TrainState> {
    let policy = load_policy(&state.config)?;
    let metrics = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join(CONFIG_SNAPSHOT);
        if !snap.exists() {
            fs::write(&snap, state.config.to_toml()?).map_err(|e| Error::io(&snap, e))?;
        }
        let m = metrics.as_ref().expect("set with out_dir");
        if !m.exists() {
            append_line(m, &Provenance::new(&state.config))?;
        }
    }
    let end = opts.stop_after.unwrap_or(state.config.train.epochs).min(state.config.train.epochs);
    let mut instr = Instrumentation::default();
    while state.epoch < end {
        let mut rec = match train_epoch(&mut state, &data.train, &policy, &mut instr) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(m), Error::NonFinite { epoch, iteration, detail }) = (&metrics, &e) {
                    append_line(
                        m,
                        &serde_json::json!({"kind": "abort", "epoch": epoch, "iteration": iteration, "detail": detail}),
                    )?;
                }
                return Err(e);
            }
        };
        if !opts.skip_eval {
            score_epoch(&mut state, data, &mut rec)?;
        }
        state.history.push(rec.clone());
        if let Some(dir) = &opts.out_dir {
            append_line(metrics.as_ref().expect("set with out_dir"), &rec)?;
            state.save(&dir.join(LAST_CHECKPOINT))?;
            if state.best_epoch == rec.epoch {
                state.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
    }
    Ok(state)
}

fn require(cfg: &Config, method: Method) -> Result<()> {
    if cfg.train.method != method {
        return Err(Error::Config(format!(
            "config selects {:?} but this entry point trains {method:?}",
            cfg.train.method
        )));
    }
    Ok(())
}

pub fn train_acat(cfg: &Config, data: &Dataset, opts: &TrainOptions) -> Result<TrainState> {
    require(cfg, Method::Acat)?;
    train(TrainState::new(cfg)?, data, opts)
}

pub fn train_dajat(cfg: &Config, data: &Dataset, opts: &TrainOptions) -> Result<TrainState> {
    require(cfg, Method::Dajat)?;
    train(TrainState::new(cfg)?, data, opts)
}

/// Reads a metrics stream back: the provenance header and the epoch records.
pub fn read_metrics(path: &Path) -> Result<(Option<Provenance>, Vec<MetricsRecord>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("provenance") => header = Some(serde_json::from_value(v)?),
            Some(_) => {}
            None => records.push(
                serde_json::from_value(v).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
            ),
        }
    }
    Ok((header, records))
}
