//! Adversarial weight perturbation and weight averaging.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Real, Tensor};

/// Per-tensor weight deltas aligned with `Model::params`, each kept within
/// `gamma` times the norm of its tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPerturbation<T = f32> {
    pub deltas: Vec<Tensor<T>>,
    pub gamma: f64,
    /// Parameter snapshots taken by `apply`, restored by `remove` (last in, first out).
    applied: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> WeightPerturbation<T> {
    pub fn zeros(model: &Model<T>, gamma: f64) -> Self {
        WeightPerturbation {
            deltas: model.zero_grads(),
            gamma,
            applied: Vec::new(),
        }
    }

    fn check(&self, model: &Model<T>) -> Result<()> {
        let p = model.params();
        if p.len() != self.deltas.len() || p.iter().zip(&self.deltas).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Model("perturbation does not match the model's parameters".into()));
        }
        Ok(())
    }

    /// Radially shrinks every delta whose norm exceeds `gamma·‖θ_l‖`; feasible deltas are left untouched.
    /// A rescaled delta can land a rounding error above its bound, so the test
    /// carries a 1e-12 relative slack that keeps projection idempotent.
    pub fn project(&mut self, model: &Model<T>) -> Result<()> {
        self.check(model)?;
        for (d, p) in self.deltas.iter_mut().zip(model.params()) {
            let bound = self.gamma * p.norm();
            let n = d.norm();
            if n > bound * (1.0 + 1e-12) || (bound == 0.0 && n > 0.0) {
                if bound > 0.0 {
                    d.scale(T::of(bound / n));
                } else {
                    d.fill(T::zero());
                }
            }
        }
        Ok(())
    }

    /// Largest `‖θ̂_l‖ / ‖θ_l‖` over tensors with a non-zero norm.
    pub fn max_relative_norm(&self, model: &Model<T>) -> f64 {
        self.deltas
            .iter()
            .zip(model.params())
            .filter(|(_, p)| p.norm() > 0.0)
            .map(|(d, p)| d.norm() / p.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_feasible(&self, model: &Model<T>, slack: f64) -> bool {
        self.deltas
            .iter()
            .zip(model.params())
            .all(|(d, p)| d.norm() <= self.gamma * p.norm() * (1.0 + slack))
    }

    /// `θ ← θ + θ̂`, remembering the previous parameters.
    pub fn apply(&mut self, model: &mut Model<T>) -> Result<()> {
        self.check(model)?;
        self.applied.push(model.params().to_vec());
        for (p, d) in model.params_mut().iter_mut().zip(&self.deltas) {
            p.axpy(T::one(), d);
        }
        Ok(())
    }

    /// Restores the parameters saved by the matching `apply` bit for bit.
    pub fn remove(&mut self, model: &mut Model<T>) -> Result<()> {
        self.check(model)?;
        let saved = self
            .applied
            .pop()
            .ok_or_else(|| Error::Model("removing a perturbation that is not applied".into()))?;
        model.params_mut().clone_from_slice(&saved);
        Ok(())
    }

    pub fn applied_depth(&self) -> usize {
        self.applied.len()
    }
}

/// Free-function spellings of the perturbation plumbing.
pub fn apply_perturbation<T: Real>(model: &mut Model<T>, pert: &mut WeightPerturbation<T>) -> Result<()> {
    pert.apply(model)
}

pub fn remove_perturbation<T: Real>(model: &mut Model<T>, pert: &mut WeightPerturbation<T>) -> Result<()> {
    pert.remove(model)
}

/// Ascent on the weights: each step moves every tensor by `γ‖θ_l‖` along its
/// normalized gradient, then projects back into the per-tensor ball.
/// `loss` evaluates the objective at the given weights and accumulates its
/// gradient into the buffer. Running statistics are never perturbed and the
/// input model is left as is.
pub fn awp_perturb<T: Real, F>(model: &Model<T>, mut loss: F, gamma: f64, steps: usize) -> Result<WeightPerturbation<T>>
where
    F: FnMut(&Model<T>, &mut [Tensor<T>]) -> Result<f64>,
{
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Argument(format!("AWP budget must be ≥ 0, got {gamma}")));
    }
    let mut pert = WeightPerturbation::zeros(model, gamma);
    if gamma == 0.0 {
        return Ok(pert);
    }
    let mut probe = model.clone();
    for _ in 0..steps {
        for (q, (p, d)) in probe.params_mut().iter_mut().zip(model.params().iter().zip(&pert.deltas)) {
            q.clone_from(p);
            q.axpy(T::one(), d);
        }
        let mut grads = probe.zero_grads();
        loss(&probe, &mut grads)?;
        for ((d, g), p) in pert.deltas.iter_mut().zip(&grads).zip(model.params()) {
            let gn = g.norm();
            if gn > 0.0 {
                d.axpy(T::of(gamma * p.norm() / gn), g);
            }
        }
        pert.project(model)?;
    }
    Ok(pert)
}

/// Exponential moving average of a model's parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedModel<T = f32> {
    pub shadow: Model<T>,
    pub decay: f64,
    pub updates: u64,
}

impl<T: Real> AveragedModel<T> {
    pub fn new(model: &Model<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Argument(format!("averaging decay {decay} outside [0, 1]")));
        }
        Ok(AveragedModel {
            shadow: model.clone(),
            decay,
            updates: 0,
        })
    }

    pub fn update(&mut self, model: &Model<T>) -> Result<()> {
        let decay = self.decay;
        ema_update(self, model, decay)
    }
}

/// `shadow ← decay·shadow + (1 − decay)·live` for every parameter and buffer.
pub fn ema_update<T: Real>(avg: &mut AveragedModel<T>, model: &Model<T>, decay: f64) -> Result<()> {
    avg.shadow.check_layout(model.params(), model.buffers())?;
    let (a, b) = (T::of(decay), T::of(1.0 - decay));
    let blend = |s: &mut [Tensor<T>], l: &[Tensor<T>]| {
        for (s, l) in s.iter_mut().zip(l) {
            for (x, &y) in s.data_mut().iter_mut().zip(l.data()) {
                *x = a * *x + b * y;
            }
        }
    };
    blend(avg.shadow.params_mut(), model.params());
    blend(avg.shadow.buffers_mut(), model.buffers());
    avg.updates += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BnVariant;
    use crate::losses::trades_loss;
    use crate::nn::{BnMode, LayerSpec, ModelSpec, ViewTag};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Model<f64> {
        let spec = ModelSpec {
            input: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv { out: 3, kernel: 3, stride: 1, pad: None, bias: false },
                LayerSpec::Bn,
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
            ],
            classes: 3,
        };
        Model::new(&spec, BnVariant::SplitBoth, seed).unwrap()
    }

    fn batch(seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(&[6, 1, 4, 4], (0..96).map(|_| rng.random::<f64>()).collect()).unwrap();
        let noise: Vec<f64> = (0..96).map(|_| 0.05 * (rng.random::<f64>() - 0.5)).collect();
        let xa = Tensor::from_vec(&[6, 1, 4, 4], x.data().iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect()).unwrap();
        (x, xa, vec![0, 1, 2, 0, 1, 2])
    }

    fn trades(x: &Tensor<f64>, xa: &Tensor<f64>, y: &[usize]) -> impl FnMut(&Model<f64>, &mut [Tensor<f64>]) -> Result<f64> {
        let (x, xa, y) = (x.clone(), xa.clone(), y.to_vec());
        move |m, g| Ok(trades_loss(m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, Some(g))?.breakdown.total)
    }

    #[test]
    fn zero_budget_is_zero_and_loss_identical() {
        let mut m = tiny(1);
        let (x, xa, y) = batch(2);
        let mut p = awp_perturb(&m, trades(&x, &xa, &y), 0.0, 1).unwrap();
        assert!(p.deltas.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
        let before = trades_loss(&m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, None).unwrap().breakdown.total;
        p.apply(&mut m).unwrap();
        let after = trades_loss(&m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, None).unwrap().breakdown.total;
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn constraint_holds_and_loss_rises() {
        let mut m = tiny(3);
        let (x, xa, y) = batch(4);
        let p0 = m.params().to_vec();
        let mut p = awp_perturb(&m, trades(&x, &xa, &y), 0.02, 2).unwrap();
        assert_eq!(m.params(), &p0[..]);
        assert!(p.is_feasible(&m, 1e-6));
        let before = trades_loss(&m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, None).unwrap().breakdown.total;
        p.apply(&mut m).unwrap();
        let after = trades_loss(&m, &x, &xa, &y, 6.0, ViewTag::Base, BnMode::Train, None).unwrap().breakdown.total;
        assert!(after > before, "{after} <= {before}");
        p.remove(&mut m).unwrap();
        assert_eq!(m.params(), &p0[..]);
    }

    #[test]
    fn projection_is_radial_and_idempotent() {
        let m = tiny(5);
        let mut p = WeightPerturbation::zeros(&m, 0.1);
        for (d, w) in p.deltas.iter_mut().zip(m.params()) {
            d.clone_from(w);
            d.scale(0.2);
        }
        p.project(&m).unwrap();
        for (d, w) in p.deltas.iter().zip(m.params()) {
            if w.norm() > 0.0 {
                assert!((d.norm() - 0.1 * w.norm()).abs() <= 1e-12 * w.norm());
            }
        }
        let once = p.clone();
        p.project(&m).unwrap();
        assert_eq!(p, once);
    }

    #[test]
    fn apply_twice_adds_twice() {
        let mut m = tiny(6);
        let (x, xa, y) = batch(7);
        let mut p = awp_perturb(&m, trades(&x, &xa, &y), 0.05, 1).unwrap();
        let mut twice = m.clone();
        p.apply(&mut twice).unwrap();
        p.apply(&mut twice).unwrap();
        let mut doubled = p.clone();
        doubled.deltas.iter_mut().for_each(|d| d.scale(2.0));
        doubled.apply(&mut m).unwrap();
        for (a, b) in twice.params().iter().zip(m.params()) {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        p.remove(&mut twice).unwrap();
        p.remove(&mut twice).unwrap();
        assert!(p.remove(&mut twice).is_err());
    }

    #[test]
    fn negative_budget_is_rejected() {
        let m = tiny(1);
        assert!(matches!(awp_perturb(&m, |_, _| Ok(0.0), -0.1, 1), Err(Error::Argument(_))));
    }

    /// `L(θ) = ½‖θ − c‖²` has gradient `θ − c`; one normalized ascent step
    /// lands on the boundary along that direction and raises the loss by a
    /// closed-form amount.
    #[test]
    fn quadratic_oracle() {
        let m = tiny(8);
        let centre: Vec<Tensor<f64>> = m.params().iter().map(|p| p.map(|v| 0.5 * v + 0.01)).collect();
        let quad = |model: &Model<f64>, c: &[Tensor<f64>]| -> f64 {
            model
                .params()
                .iter()
                .zip(c)
                .flat_map(|(p, c)| p.data().iter().zip(c.data()).map(|(a, b)| 0.5 * (a - b) * (a - b)))
                .sum()
        };
        let gamma = 0.03;
        let c2 = centre.clone();
        let mut p = awp_perturb(
            &m,
            move |model, g| {
                for ((g, w), c) in g.iter_mut().zip(model.params()).zip(&c2) {
                    for ((o, a), b) in g.data_mut().iter_mut().zip(w.data()).zip(c.data()) {
                        *o += a - b;
                    }
                }
                Ok(0.0)
            },
            gamma,
            1,
        )
        .unwrap();
        let mut expected_gain = 0.0;
        for (w, c) in m.params().iter().zip(&centre) {
            let r: Vec<f64> = w.data().iter().zip(c.data()).map(|(a, b)| a - b).collect();
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn > 0.0 {
                let s = gamma * w.norm();
                expected_gain += s * rn + 0.5 * s * s;
            }
        }
        let base = quad(&m, &centre);
        let mut moved = m.clone();
        p.apply(&mut moved).unwrap();
        let gained = quad(&moved, &centre) - base;
        assert!(gained >= 0.0);
        assert!((gained - expected_gain).abs() < 1e-10, "{gained} vs {expected_gain}");
    }

    #[test]
    fn ema_endpoints_and_geometric_gap() {
        let live = tiny(1);
        let start = tiny(2);
        let mut avg = AveragedModel::new(&start, 0.0).unwrap();
        ema_update(&mut avg, &live, 1.0).unwrap();
        assert_eq!(avg.shadow, start);
        ema_update(&mut avg, &live, 0.0).unwrap();
        assert_eq!(avg.shadow, live);

        let mut avg = AveragedModel::new(&start, 0.9).unwrap();
        let gap0: Vec<f64> = start.params()[0].data().iter().zip(live.params()[0].data()).map(|(a, b)| a - b).collect();
        for _ in 0..7 {
            avg.update(&live).unwrap();
        }
        for ((s, l), g0) in avg.shadow.params()[0].data().iter().zip(live.params()[0].data()).zip(&gap0) {
            assert!((s - l - 0.9f64.powi(7) * g0).abs() < 1e-12);
        }
        assert_eq!(avg.updates, 7);
    }
}
