//! Evaluation suites: accuracy tables, ε-sweeps, loss curves, loss surfaces
//! and the gradient-masking checklist. Nothing here mutates a model.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{argmax, fgsm_attack, pgd_attack, AttackSpec, SweepRow, TargetMode};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, cross_entropy_per_sample};
use crate::nn::{BnMode, Model, ViewTag};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

fn chunks(n: usize, batch: usize) -> impl Iterator<Item = Vec<usize>> {
    let batch = batch.max(1);
    (0..n.div_ceil(batch)).map(move |b| (b * batch..((b + 1) * batch).min(n)).collect())
}

fn non_empty(data: &ImageBatch) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation needs at least one sample".into()));
    }
    Ok(())
}

/// Clean accuracy (%) and mean cross-entropy on the deployment path.
pub fn clean_accuracy(model: &Model, data: &ImageBatch, batch: usize) -> Result<(f64, f64)> {
    non_empty(data)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    for idx in chunks(data.len(), batch) {
        let b = data.subset(&idx);
        let z = model.inference_forward(&b.images)?;
        loss += cross_entropy_per_sample(&z, &b.labels)?.iter().sum::<f64>();
        correct += (0..z.batch())
            .filter(|&i| argmax(&z.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>()) == b.labels[i])
            .count();
    }
    Ok((100.0 * correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Robust accuracy (%) and mean true-label cross-entropy under a PGD-family
/// attack. Chunk `c` uses seed `spec.seed + c` so results depend only on the
/// fixed chunk order.
pub fn attack_accuracy(model: &Model, data: &ImageBatch, spec: &AttackSpec, batch: usize) -> Result<(f64, f64)> {
    non_empty(data)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    for (c, idx) in chunks(data.len(), batch).enumerate() {
        let b = data.subset(&idx);
        let s = spec.clone().with_seed(spec.seed.wrapping_add(c as u64));
        let r = pgd_attack(model, &b.images, &b.labels, &s)?;
        correct += r.correct.iter().filter(|&&c| c).count();
        loss += r.loss.iter().sum::<f64>();
    }
    Ok((100.0 * correct as f64 / data.len() as f64, loss / data.len() as f64))
}

/// Crafts on `source` chunk by chunk and scores on `target`.
pub fn transfer_accuracy(source: &Model, target: &Model, data: &ImageBatch, spec: &AttackSpec, batch: usize) -> Result<f64> {
    non_empty(data)?;
    if source.spec().input != target.spec().input || source.spec().classes != target.spec().classes {
        return Err(Error::Model("source and target models disagree in input shape or classes".into()));
    }
    let mut correct = 0usize;
    for (c, idx) in chunks(data.len(), batch).enumerate() {
        let b = data.subset(&idx);
        let s = spec.clone().with_seed(spec.seed.wrapping_add(c as u64));
        let adv = pgd_attack(source, &b.images, &b.labels, &s)?.adversarial;
        let z = target.inference_forward(&adv)?;
        correct += (0..z.batch())
            .filter(|&i| argmax(&z.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>()) == b.labels[i])
            .count();
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSuite {
    pub epsilon: f64,
    pub fgsm: bool,
    /// PGD step counts, each run untargeted with one restart.
    pub pgd_steps: Vec<usize>,
    /// Restart counts for a PGD run of `restart_steps` steps.
    pub restarts: Vec<usize>,
    pub restart_steps: usize,
    /// Least-likely and random-class targeted PGD at the first step count.
    pub targeted: bool,
    /// FGSM and PGD crafted on the reference model (needs one).
    pub black_box: bool,
    pub sweep_epsilons: Vec<f64>,
    pub sweep_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalSuite {
    fn default() -> Self {
        EvalSuite {
            epsilon: 8.0 / 255.0,
            fgsm: true,
            pgd_steps: vec![20, 100],
            restarts: Vec::new(),
            restart_steps: 50,
            targeted: true,
            black_box: true,
            sweep_epsilons: Vec::new(),
            sweep_steps: 7,
            batch_size: 256,
            seed: 1234,
        }
    }
}

impl EvalSuite {
    pub fn clean_only() -> Self {
        EvalSuite {
            fgsm: false,
            pgd_steps: Vec::new(),
            targeted: false,
            black_box: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub name: String,
    pub accuracy: f64,
    /// Not recorded for transfer attacks.
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub clean_accuracy: f64,
    pub clean_loss: f64,
    pub attacks: Vec<AttackEntry>,
    pub sweep: Vec<SweepRow>,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.name == name).map(|a| a.accuracy)
    }

    /// Fixed-width text table.
    pub fn render(&self) -> String {
        let mut out = format!("{:<28} {:>9} {:>10}\n", "attack", "acc (%)", "mean loss");
        out += &format!("{:<28} {:>9.2} {:>10.4}\n", "clean", self.clean_accuracy, self.clean_loss);
        for a in &self.attacks {
            let loss = a.mean_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            out += &format!("{:<28} {:>9.2} {:>10}\n", a.name, a.accuracy, loss);
        }
        for v in &self.verdicts {
            out += &format!("check {}: {:<7} {}\n", v.id, v.status.name(), v.detail);
        }
        out
    }
}

/// Runs the suite on the base tag with running statistics.
pub fn evaluate(model: &Model, data: &ImageBatch, suite: &EvalSuite, reference: Option<&Model>) -> Result<EvalReport> {
    non_empty(data)?;
    let bs = suite.batch_size;
    let (clean_accuracy, clean_loss) = clean_accuracy(model, data, bs)?;
    let mut attacks = Vec::new();
    let mut push = |name: String, (accuracy, mean_loss): (f64, Option<f64>)| attacks.push(AttackEntry { name, accuracy, mean_loss });
    let with_loss = |r: (f64, f64)| (r.0, Some(r.1));
    let fgsm = AttackSpec::fgsm(suite.epsilon).with_seed(suite.seed);
    if suite.fgsm {
        push("fgsm".into(), with_loss(attack_accuracy(model, data, &fgsm, bs)?));
    }
    for &s in &suite.pgd_steps {
        let spec = AttackSpec::pgd(suite.epsilon, s).with_seed(suite.seed);
        push(format!("pgd-{s}"), with_loss(attack_accuracy(model, data, &spec, bs)?));
    }
    for &r in &suite.restarts {
        let spec = AttackSpec::pgd(suite.epsilon, suite.restart_steps).with_restarts(r).with_seed(suite.seed);
        push(format!("pgd-{}-r{r}", suite.restart_steps), with_loss(attack_accuracy(model, data, &spec, bs)?));
    }
    if suite.targeted {
        let s = suite.pgd_steps.first().copied().unwrap_or(20);
        for mode in [TargetMode::LeastLikely, TargetMode::RandomClass] {
            let spec = AttackSpec::pgd(suite.epsilon, s).with_target(mode).with_seed(suite.seed);
            push(format!("pgd-{s}-{}", mode.name()), with_loss(attack_accuracy(model, data, &spec, bs)?));
        }
    }
    if suite.black_box {
        let reference = reference.ok_or_else(|| Error::Argument("black-box attacks need a reference model".into()))?;
        push("bb-fgsm".into(), (transfer_accuracy(reference, model, data, &fgsm, bs)?, None));
        let s = suite.pgd_steps.first().copied().unwrap_or(20);
        let spec = AttackSpec::pgd(suite.epsilon, s).with_seed(suite.seed);
        push(format!("bb-pgd-{s}"), (transfer_accuracy(reference, model, data, &spec, bs)?, None));
    }
    let mut sweep = Vec::new();
    for &eps in &suite.sweep_epsilons {
        let spec = AttackSpec::pgd(eps, suite.sweep_steps).with_seed(suite.seed);
        let (accuracy, mean_loss) = attack_accuracy(model, data, &spec, bs)?;
        sweep.push(SweepRow {
            epsilon: eps,
            steps: suite.sweep_steps,
            restarts: 1,
            mode: TargetMode::Untargeted.name().into(),
            accuracy,
            mean_loss,
        });
    }
    Ok(EvalReport {
        samples: data.len(),
        clean_accuracy,
        clean_loss,
        attacks,
        sweep,
        verdicts: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epsilon: f64,
    /// Mean cross-entropy at the FGSM point.
    pub fgsm_loss: f64,
    pub pgd7_accuracy: f64,
}

/// Mean FGSM loss and PGD-7 accuracy at every radius of an ascending grid starting at 0.
pub fn loss_vs_epsilon_curve(model: &Model, data: &ImageBatch, grid: &[f64], seed: u64, batch: usize) -> Result<Vec<CurveRow>> {
    non_empty(data)?;
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument("the ε grid must start at 0 and ascend strictly".into()));
    }
    grid.iter()
        .map(|&eps| {
            let mut loss = 0.0;
            for idx in chunks(data.len(), batch) {
                let b = data.subset(&idx);
                loss += fgsm_attack(model, &b.images, &b.labels, eps)?.loss.iter().sum::<f64>();
            }
            let (acc, _) = attack_accuracy(model, data, &AttackSpec::pgd(eps, 7).with_seed(seed), batch)?;
            Ok(CurveRow {
                epsilon: eps,
                fgsm_loss: loss / data.len() as f64,
                pgd7_accuracy: acc,
            })
        })
        .collect()
}

/// Number of places where a sequence moves against the expected direction.
pub fn inversions(values: &[f64], non_decreasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| if non_decreasing { w[1] < w[0] } else { w[1] > w[0] })
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    /// Offsets along both directions, `−r..=r`.
    pub offsets: Vec<f64>,
    /// `values[i][j]` = loss at `x + offsets[i]·d1 + offsets[j]·d2`.
    pub values: Vec<Vec<f64>>,
    pub d1: Vec<f32>,
    pub d2: Vec<f32>,
    /// The input gradient vanished and `d1` is random too.
    pub random_fallback: bool,
}

impl SurfaceGrid {
    pub fn centre(&self) -> f64 {
        let c = self.offsets.len() / 2;
        self.values[c][c]
    }
}

fn unit_random(len: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// Cross-entropy over a plane through one image spanned by the normalized
/// input gradient and a random orthogonal direction. Points are not clipped
/// to the pixel range so the plane stays flat.
pub fn loss_surface_grid(
    model: &Model,
    image: &Tensor<f32>,
    label: usize,
    radius: f64,
    resolution: usize,
    seed: u64,
) -> Result<SurfaceGrid> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::Argument(format!("resolution must be odd and ≥ 3, got {resolution}")));
    }
    let [c, h, w] = model.spec().input;
    let x = image.clone().reshape(&[1, c, h, w])?;
    let fwd = model.forward(&x, ViewTag::Base, BnMode::Eval)?;
    let (_, g) = cross_entropy(&fwd.logits, &[label])?;
    let grad = model.backward(&fwd, &g, None, true)?.expect("input gradient");
    let mut rng = stream(seed, 0, 0, Purpose::Surface, 0);
    let gn = grad.norm();
    let random_fallback = gn == 0.0 || !gn.is_finite();
    let d1: Vec<f64> = if random_fallback {
        unit_random(x.len(), &mut rng)
    } else {
        grad.data().iter().map(|&v| v as f64 / gn).collect()
    };
    let mut d2 = unit_random(x.len(), &mut rng);
    let proj: f64 = d1.iter().zip(&d2).map(|(a, b)| a * b).sum();
    d2.iter_mut().zip(&d1).for_each(|(b, a)| *b -= proj * a);
    let n2 = d2.iter().map(|a| a * a).sum::<f64>().sqrt();
    d2.iter_mut().for_each(|b| *b /= n2);
    let offsets: Vec<f64> = (0..resolution)
        .map(|i| radius * (2.0 * i as f64 / (resolution - 1) as f64 - 1.0))
        .collect();
    let (d1f, d2f): (Vec<f32>, Vec<f32>) = (d1.iter().map(|&v| v as f32).collect(), d2.iter().map(|&v| v as f32).collect());
    let mut values = vec![vec![0.0; resolution]; resolution];
    for (i, &a) in offsets.iter().enumerate() {
        for (j, &b) in offsets.iter().enumerate() {
            let (a, b) = (a as f32, b as f32);
            let mut p = x.clone();
            for ((v, u1), u2) in p.data_mut().iter_mut().zip(&d1f).zip(&d2f) {
                *v += a * u1 + b * u2;
            }
            let z = model.inference_forward(&p)?;
            values[i][j] = cross_entropy_per_sample(&z, &[label])?[0];
        }
    }
    Ok(SurfaceGrid {
        offsets,
        values,
        d1: d1f,
        d2: d2f,
        random_fallback,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Skipped => "skipped",
        }
    }

    fn of(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: usize,
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SanityOptions {
    pub epsilon: f64,
    /// Step counts that must weaken accuracy monotonically.
    pub step_ladder: Vec<usize>,
    /// The two long runs compared for saturation.
    pub saturation_steps: (usize, usize),
    pub saturation_tolerance: f64,
    /// Ascending from 0; the last entry is the "large" radius.
    pub epsilon_grid: Vec<f64>,
    /// Tolerated inversions of the FGSM loss along the grid.
    pub allowed_inversions: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SanityOptions {
    fn default() -> Self {
        SanityOptions {
            epsilon: 8.0 / 255.0,
            step_ladder: vec![7, 20, 100],
            saturation_steps: (500, 1000),
            saturation_tolerance: 0.3,
            epsilon_grid: vec![0.0, 2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0, 64.0 / 255.0, 0.5],
            allowed_inversions: 1,
            batch_size: 256,
            seed: 4321,
        }
    }
}

/// The six gradient-masking checks, always in the same order.
pub fn masking_sanity_checks(model: &Model, reference: Option<&Model>, data: &ImageBatch, opts: &SanityOptions) -> Result<Vec<Verdict>> {
    non_empty(data)?;
    let bs = opts.batch_size;
    let eps = opts.epsilon;
    let pgd = |steps: usize| attack_accuracy(model, data, &AttackSpec::pgd(eps, steps).with_seed(opts.seed), bs).map(|r| r.0);
    let fgsm_spec = AttackSpec::fgsm(eps).with_seed(opts.seed);
    let (fgsm_acc, _) = attack_accuracy(model, data, &fgsm_spec, bs)?;
    let mut out = Vec::with_capacity(6);
    let mut verdict = |name: &str, status: Status, detail: String| {
        out.push(Verdict {
            id: out.len() + 1,
            name: name.into(),
            status,
            detail,
        })
    };

    match reference {
        Some(r) => {
            let bb = transfer_accuracy(r, model, data, &fgsm_spec, bs)?;
            verdict(
                "black-box weaker than white-box",
                Status::of(bb >= fgsm_acc),
                format!("transfer FGSM {bb:.2}% vs white-box FGSM {fgsm_acc:.2}%"),
            );
        }
        None => verdict("black-box weaker than white-box", Status::Skipped, "no reference model".into()),
    }

    let ladder: Vec<f64> = opts.step_ladder.iter().map(|&s| pgd(s)).collect::<Result<_>>()?;
    verdict(
        "more steps are stronger",
        Status::of(inversions(&ladder, false) == 0),
        format!("PGD {:?} steps → {:?}%", opts.step_ladder, ladder.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>()),
    );

    let strongest = ladder.iter().copied().fold(f64::INFINITY, f64::min);
    let pgd_acc = if ladder.is_empty() { pgd(20)? } else { strongest };
    verdict(
        "iterative attack beats single step",
        Status::of(pgd_acc <= fgsm_acc),
        format!("PGD {pgd_acc:.2}% vs FGSM {fgsm_acc:.2}%"),
    );

    let (lo, hi) = opts.saturation_steps;
    let (a, b) = (pgd(lo)?, pgd(hi)?);
    verdict(
        "step saturation",
        Status::of((a - b).abs() <= opts.saturation_tolerance),
        format!("PGD-{lo} {a:.2}% vs PGD-{hi} {b:.2}% (tolerance {} points)", opts.saturation_tolerance),
    );

    let curve = loss_vs_epsilon_curve(model, data, &opts.epsilon_grid, opts.seed, bs)?;
    let losses: Vec<f64> = curve.iter().map(|r| r.fgsm_loss).collect();
    let inv = inversions(&losses, true);
    verdict(
        "loss grows with radius",
        Status::of(inv <= opts.allowed_inversions),
        format!("{inv} inversion(s) of the FGSM loss over {} radii", losses.len()),
    );

    let last = curve.last().expect("grid holds 0");
    verdict(
        "large radius breaks the model",
        Status::of(last.pgd7_accuracy == 0.0),
        format!("PGD-7 accuracy {:.2}% at ε = {:.4}", last.pgd7_accuracy, last.epsilon),
    );
    Ok(out)
}
