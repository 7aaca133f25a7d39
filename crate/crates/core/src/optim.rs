//! SGD with heavy-ball momentum and decoupled-from-BN weight decay.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Decay batch-norm scale and shift as well.
    pub decay_bn: bool,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64, weight_decay: f64, decay_bn: bool) -> Self {
        Sgd {
            momentum,
            weight_decay,
            decay_bn,
            velocity: model.zero_grads(),
        }
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        model.check_layout(grads, model.buffers())?;
        if self.velocity.len() != grads.len() {
            return Err(Error::Model("optimizer state does not match the model".into()));
        }
        let decays: Vec<bool> = model
            .param_info()
            .iter()
            .map(|i| self.weight_decay > 0.0 && (self.decay_bn || !i.kind.is_bn()))
            .collect();
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for (((p, g), v), decay) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity).zip(decays) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let d = if decay { g + wd * *w } else { g };
                *v = mu * *v + d;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}
