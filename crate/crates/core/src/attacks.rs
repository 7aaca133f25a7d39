//! Input-space attacks under an ℓ∞ budget. Every attack runs the model with
//! running BN statistics and never mutates it.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{cross_entropy_per_sample, kl_per_sample, softmax_rows};
use crate::nn::{BnMode, Model, ViewTag};
use crate::rng::{stream, Purpose};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Untargeted,
    /// Target the class with the smallest clean logit.
    LeastLikely,
    /// Target a uniformly drawn wrong class.
    RandomClass,
}

impl TargetMode {
    pub fn name(self) -> &'static str {
        match self {
            TargetMode::Untargeted => "untargeted",
            TargetMode::LeastLikely => "least_likely",
            TargetMode::RandomClass => "random_class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    /// `None` means `2.5·ε/steps` for cross-entropy attacks and `ε` for the KL attack.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub loss_kind: LossKind,
    pub target_mode: TargetMode,
    /// Standard deviation of the KL attack's Gaussian start.
    pub init_noise_sigma: f64,
    /// Uniform start in the ε-ball for cross-entropy attacks; zero start otherwise.
    pub random_init: bool,
    /// Redraw the KL attack's noise before every step instead of once.
    pub reinit_per_step: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            epsilon,
            steps,
            step_size: None,
            restarts: 1,
            loss_kind: LossKind::Ce,
            target_mode: TargetMode::Untargeted,
            init_noise_sigma: 0.0,
            random_init: true,
            reinit_per_step: false,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            step_size: Some(epsilon),
            random_init: false,
            ..Self::pgd(epsilon, 1)
        }
    }

    /// The training-time attack: Gaussian start, `steps` sign steps of size `step_size`.
    pub fn kl(epsilon: f64, steps: usize, step_size: f64, sigma: f64) -> Self {
        AttackSpec {
            step_size: Some(step_size),
            loss_kind: LossKind::Kl,
            init_noise_sigma: sigma,
            random_init: false,
            ..Self::pgd(epsilon, steps)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_target(mut self, mode: TargetMode) -> Self {
        self.target_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::AttackSpec(format!("epsilon must be ≥ 0, got {}", self.epsilon)));
        }
        if self.restarts == 0 {
            return Err(Error::AttackSpec("restarts must be ≥ 1".into()));
        }
        if let Some(s) = self.step_size {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::AttackSpec(format!("step size must be ≥ 0, got {s}")));
            }
        }
        if !(self.init_noise_sigma >= 0.0 && self.init_noise_sigma.is_finite()) {
            return Err(Error::AttackSpec("noise sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn resolved_step_size(&self) -> f64 {
        match (self.step_size, self.loss_kind) {
            (Some(s), _) => s,
            (None, LossKind::Kl) => self.epsilon,
            (None, LossKind::Ce) if self.steps > 0 => 2.5 * self.epsilon / self.steps as f64,
            (None, LossKind::Ce) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult<T = f32> {
    pub adversarial: Tensor<T>,
    /// Achieved ℓ∞ distance per sample.
    pub radius: Vec<f64>,
    /// Attack loss per sample at the returned point.
    pub loss: Vec<f64>,
    /// Batch-mean loss at each gradient evaluation (first restart).
    pub trace: Vec<f64>,
    /// Whether the model still predicts the true label (cross-entropy attacks only).
    pub correct: Vec<bool>,
}

impl<T: Real> AttackResult<T> {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        100.0 * self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss.iter().sum::<f64>() / self.loss.len().max(1) as f64
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `x̃ ← clamp(clamp(x̃ + α·sign(g) − x, −ε, ε) + x, 0, 1)`
fn ascend<T: Real>(x: &Tensor<T>, x_adv: &mut Tensor<T>, grad: &Tensor<T>, alpha: T, eps: T) {
    for ((a, &x0), &g) in x_adv.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
        let delta = (*a - x0 + alpha * sign(g)).max(-eps).min(eps);
        *a = (x0 + delta).max(T::zero()).min(T::one());
    }
}

fn radii<T: Real>(x: &Tensor<T>, x_adv: &Tensor<T>) -> Vec<f64> {
    (0..x.batch())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x_adv.row(i))
                .map(|(a, b)| (a.f64() - b.f64()).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

fn gaussian_start<T: Real>(x: &Tensor<T>, sigma: f64, eps: T, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = x.clone();
    for (a, &x0) in out.data_mut().iter_mut().zip(x.data()) {
        let n: f64 = StandardNormal.sample(rng);
        let delta = T::of(sigma * n).max(-eps).min(eps);
        *a = (x0 + delta).max(T::zero()).min(T::one());
    }
    out
}

fn check_input<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: Option<&[usize]>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != model.spec().input[..] {
        return Err(Error::Dimension(format!("batch {s:?} does not fit model input {:?}", model.spec().input)));
    }
    if let Some(l) = labels {
        if l.len() != x.batch() {
            return Err(Error::Dimension(format!("{} labels for {} images", l.len(), x.batch())));
        }
    }
    Ok(())
}

/// Maximizes `KL(f(x) ‖ f(x̃))` with the clean prediction held constant.
pub fn kl_attack<T: Real>(model: &Model<T>, x: &Tensor<T>, tag: ViewTag, spec: &AttackSpec, rng: &mut impl Rng) -> Result<AttackResult<T>> {
    spec.validate()?;
    check_input(model, x, None)?;
    let eps = T::of(spec.epsilon);
    let alpha = T::of(spec.resolved_step_size());
    let clean = model.logits(x, tag, BnMode::Eval)?;
    let p = softmax_rows(&clean);
    let mut x_adv = gaussian_start(x, spec.init_noise_sigma, eps, rng);
    let mut trace = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        if spec.reinit_per_step && step > 0 {
            x_adv = gaussian_start(x, spec.init_noise_sigma, eps, rng);
        }
        let fwd = model.forward(&x_adv, tag, BnMode::Eval)?;
        let q = softmax_rows(&fwd.logits);
        let mut g = Tensor::zeros(fwd.logits.shape());
        let mut total = 0.0;
        for i in 0..q.len() {
            for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                *o = T::of(q[i][j] - p[i][j]);
            }
            total += q[i]
                .iter()
                .zip(&p[i])
                .map(|(&b, &a)| if a > 0.0 { a * (a.max(1e-12).ln() - b.max(1e-12).ln()) } else { 0.0 })
                .sum::<f64>();
        }
        trace.push(total / q.len() as f64);
        let dx = model.backward(&fwd, &g, None, true)?.expect("input gradient");
        ascend(x, &mut x_adv, &dx, alpha, eps);
    }
    let loss = kl_per_sample(&clean, &model.logits(&x_adv, tag, BnMode::Eval)?)?;
    Ok(AttackResult {
        radius: radii(x, &x_adv),
        adversarial: x_adv,
        loss,
        trace,
        correct: Vec::new(),
    })
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn argmin(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predicted labels on the deployment path.
pub fn predict<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    let z = model.inference_forward(x)?;
    Ok((0..z.batch())
        .map(|i| argmax(&z.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>()))
        .collect())
}

fn targets<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Option<Vec<usize>>> {
    let k = model.spec().classes;
    match spec.target_mode {
        TargetMode::Untargeted => Ok(None),
        TargetMode::LeastLikely => {
            let z = model.inference_forward(x)?;
            Ok(Some(
                (0..z.batch())
                    .map(|i| argmin(&z.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>()))
                    .collect(),
            ))
        }
        TargetMode::RandomClass => {
            let mut rng = stream(spec.seed, 0, 0, Purpose::Attack, u32::MAX);
            Ok(Some(
                labels
                    .iter()
                    .map(|&y| {
                        let t = rng.random_range(0..k - 1);
                        if t >= y {
                            t + 1
                        } else {
                            t
                        }
                    })
                    .collect(),
            ))
        }
    }
}

/// Sign-gradient cross-entropy attack with restarts; per sample the worst
/// restart is kept (misclassified first, then highest true-label loss).
pub fn pgd_attack<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<AttackResult<T>> {
    spec.validate()?;
    check_input(model, x, Some(labels))?;
    if spec.loss_kind != LossKind::Ce {
        return Err(Error::AttackSpec("PGD maximizes cross-entropy; use kl_attack for the KL loss".into()));
    }
    let n = x.batch();
    let eps = T::of(spec.epsilon);
    let alpha = T::of(spec.resolved_step_size());
    let target = targets(model, x, labels, spec)?;
    let nf = n as f64;
    let mut best: Option<AttackResult<T>> = None;
    for r in 0..spec.restarts {
        let mut rng = stream(spec.seed, 0, r as u64, Purpose::Restart, 0);
        let mut x_adv = x.clone();
        if spec.random_init && spec.epsilon > 0.0 {
            for (a, &x0) in x_adv.data_mut().iter_mut().zip(x.data()) {
                let d = T::of(rng.random_range(-spec.epsilon..=spec.epsilon));
                *a = (x0 + d).max(T::zero()).min(T::one());
            }
        }
        let mut trace = Vec::with_capacity(spec.steps);
        for _ in 0..spec.steps {
            let fwd = model.forward(&x_adv, ViewTag::Base, BnMode::Eval)?;
            let p = softmax_rows(&fwd.logits);
            let mut g = Tensor::zeros(fwd.logits.shape());
            let mut total = 0.0;
            for i in 0..n {
                let (cls, dir) = match &target {
                    None => (labels[i], 1.0),
                    Some(t) => (t[i], -1.0),
                };
                total += -p[i][cls].max(1e-12).ln();
                for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                    let d = p[i][j] - if j == cls { 1.0 } else { 0.0 };
                    *o = T::of(dir * d / nf);
                }
            }
            trace.push(total / nf);
            let dx = model.backward(&fwd, &g, None, true)?.expect("input gradient");
            ascend(x, &mut x_adv, &dx, alpha, eps);
        }
        let z = model.inference_forward(&x_adv)?;
        let loss = cross_entropy_per_sample(&z, labels)?;
        let correct: Vec<bool> = (0..n)
            .map(|i| argmax(&z.row(i).iter().map(|v| v.f64()).collect::<Vec<_>>()) == labels[i])
            .collect();
        let current = AttackResult {
            radius: radii(x, &x_adv),
            adversarial: x_adv,
            loss,
            trace,
            correct,
        };
        best = Some(match best {
            None => current,
            Some(mut b) => {
                for i in 0..n {
                    let worse = (b.correct[i] && !current.correct[i])
                        || (b.correct[i] == current.correct[i] && current.loss[i] > b.loss[i]);
                    if worse {
                        b.adversarial.row_mut(i).copy_from_slice(current.adversarial.row(i));
                        b.radius[i] = current.radius[i];
                        b.loss[i] = current.loss[i];
                        b.correct[i] = current.correct[i];
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("at least one restart"))
}

/// `x̃ = clamp(x + ε·sign(∇_x CE), 0, 1)`.
pub fn fgsm_attack<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], epsilon: f64) -> Result<AttackResult<T>> {
    pgd_attack(model, x, labels, &AttackSpec::fgsm(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferResult {
    pub black_box_accuracy: f64,
    pub white_box_accuracy: f64,
}

/// Crafts examples on `source` and scores them on `target`, next to the target's own white-box accuracy.
pub fn transfer_attack<T: Real>(
    source: &Model<T>,
    target: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<TransferResult> {
    if source.spec().input != target.spec().input || source.spec().classes != target.spec().classes {
        return Err(Error::Model("source and target models disagree in input shape or classes".into()));
    }
    let crafted = pgd_attack(source, x, labels, spec)?;
    let pred = predict(target, &crafted.adversarial)?;
    let bb = pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len().max(1) as f64;
    let wb = pgd_attack(target, x, labels, spec)?;
    Ok(TransferResult {
        black_box_accuracy: 100.0 * bb,
        white_box_accuracy: wb.accuracy(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub mode: String,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// PGD accuracy over a grid of budgets, one row per `(ε, steps)` pair.
pub fn attack_sweep<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilons: &[f64],
    steps: &[usize],
    base: &AttackSpec,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &eps in epsilons {
        for &s in steps {
            let spec = AttackSpec {
                epsilon: eps,
                steps: s,
                ..base.clone()
            };
            let r = pgd_attack(model, x, labels, &spec)?;
            rows.push(SweepRow {
                epsilon: eps,
                steps: s,
                restarts: spec.restarts,
                mode: spec.target_mode.name().into(),
                accuracy: r.accuracy(),
                mean_loss: r.mean_loss(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
