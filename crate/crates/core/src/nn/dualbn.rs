//! Split batch normalization.
//!
//! Every BN site owns two sets of running statistics and two sets of affine
//! parameters. The view tag picks a set; under the partially shared variants
//! the shared field always resolves to set 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::BnVariant;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Base,
    Complex,
}

impl ViewTag {
    pub fn index(self) -> usize {
        match self {
            ViewTag::Base => 0,
            ViewTag::Complex => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewTag::Base => "base",
            ViewTag::Complex => "complex",
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(ViewTag::Base),
            "complex" => Ok(ViewTag::Complex),
            other => Err(Error::Routing(format!("unknown view tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the selected running statistics.
    Eval,
}

/// `(statistics set, affine set)` used for `tag` under `variant`.
pub fn route(variant: BnVariant, tag: ViewTag) -> (usize, usize) {
    let t = tag.index();
    (
        if variant.splits_stats() { t } else { 0 },
        if variant.splits_affine() { t } else { 0 },
    )
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: BnMode,
    /// Per-channel batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Eight-lane sums so the reductions are not bound by add latency.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    let mut total = chunks.remainder().iter().fold(T::zero(), |a, &v| a + f(v));
    for a in acc {
        total += a;
    }
    total
}

fn lane_dot<T: Real>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut cx = xs.chunks_exact(8);
    let mut cy = ys.chunks_exact(8);
    for (a8, b8) in (&mut cx).zip(&mut cy) {
        for ((a, &u), &v) in acc.iter_mut().zip(a8).zip(b8) {
            *a += u * v;
        }
    }
    let mut total = cx
        .remainder()
        .iter()
        .zip(cy.remainder())
        .fold(T::zero(), |a, (&u, &v)| a + u * v);
    for a in acc {
        total += a;
    }
    total
}

fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let spatial = shape[2..].iter().product::<usize>().max(1);
    (n, c, spatial)
}

/// Normalizes with batch statistics: `(g − μ)/√(σ² + eps) · scale + shift`.
pub fn bn_train_forward<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, sp) = layout(x.shape());
    let m = n * sp;
    if m < 2 {
        return Err(Error::Dimension(
            "batch statistics need at least two values per channel".into(),
        ));
    }
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(c);
    let mut batch_mean = Vec::with_capacity(c);
    let mut batch_var = Vec::with_capacity(c);
    let data = x.data();
    let mf = T::of(m as f64);
    for ch in 0..c {
        let mut sum = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * sp;
            sum += lane_sum(&data[off..off + sp], |v| v);
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * sp;
            sq += lane_sum(&data[off..off + sp], |v| (v - mean) * (v - mean));
        }
        let var = sq / mf;
        let istd = T::one() / (var + T::of(eps)).sqrt();
        for s in 0..n {
            let off = (s * c + ch) * sp;
            let (a, b) = (scale[ch], shift[ch]);
            for ((h, o), &v) in xhat[off..off + sp].iter_mut().zip(&mut y[off..off + sp]).zip(&data[off..off + sp]) {
                *h = (v - mean) * istd;
                *o = *h * a + b;
            }
        }
        inv_std.push(istd);
        batch_mean.push(mean);
        batch_var.push(sq / T::of((m - 1) as f64));
    }
    let y = Tensor::from_vec(x.shape(), y)?;
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mode: BnMode::Train,
            batch_mean,
            batch_var,
        },
    ))
}

pub fn bn_eval_forward<T: Real>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
    keep_cache: bool,
) -> (Tensor<T>, Option<BnCache<T>>) {
    let (n, c, sp) = layout(x.shape());
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = if keep_cache { vec![T::zero(); x.len()] } else { Vec::new() };
    let data = x.data();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * sp;
            for i in off..off + sp {
                let h = (data[i] - mean[ch]) * inv_std[ch];
                if keep_cache {
                    xhat[i] = h;
                }
                y[i] = h * scale[ch] + shift[ch];
            }
        }
    }
    let y = Tensor::from_vec(x.shape(), y).expect("bn shape");
    let cache = keep_cache.then(|| BnCache {
        xhat,
        inv_std,
        mode: BnMode::Eval,
        batch_mean: Vec::new(),
        batch_var: Vec::new(),
    });
    (y, cache)
}

/// Returns `(dx, dscale, dshift)`.
pub fn bn_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    scale: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, sp) = layout(dy.shape());
    let m = T::of((n * sp) as f64);
    let g = dy.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for s in 0..n {
            let off = (s * c + ch) * sp;
            sg += lane_sum(&g[off..off + sp], |v| v);
            sgx += lane_dot(&g[off..off + sp], &cache.xhat[off..off + sp]);
        }
        dscale[ch] = sgx;
        dshift[ch] = sg;
        let istd = cache.inv_std[ch];
        let gamma = scale[ch];
        match cache.mode {
            BnMode::Train => {
                let k = gamma * istd / m;
                for s in 0..n {
                    let off = (s * c + ch) * sp;
                    let xh = &cache.xhat[off..off + sp];
                    for ((d, &gi), &h) in dx[off..off + sp].iter_mut().zip(&g[off..off + sp]).zip(xh) {
                        *d = k * (m * gi - sg - h * sgx);
                    }
                }
            }
            BnMode::Eval => {
                let k = gamma * istd;
                for s in 0..n {
                    let off = (s * c + ch) * sp;
                    for i in off..off + sp {
                        dx[i] = k * g[i];
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(dy.shape(), dx).expect("bn shape"),
        dscale,
        dshift,
    )
}

/// Exponential running-statistics update `r ← (1−m)·r + m·batch`.
pub fn update_running<T: Real>(running: &mut [T], batch: &[T], momentum: f64) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    for (r, &b) in running.iter_mut().zip(batch) {
        *r = keep * *r + m * b;
    }
}

/// A free-standing split BN layer owning both parameter sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatchNorm<T> {
    pub variant: BnVariant,
    pub momentum: f64,
    pub eps: f64,
    pub running_mean: [Vec<T>; 2],
    pub running_var: [Vec<T>; 2],
    pub scale: [Vec<T>; 2],
    pub shift: [Vec<T>; 2],
}

impl<T: Real> DualBatchNorm<T> {
    pub fn new(channels: usize, variant: BnVariant) -> Self {
        let zeros = vec![T::zero(); channels];
        let ones = vec![T::one(); channels];
        DualBatchNorm {
            variant,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            running_mean: [zeros.clone(), zeros.clone()],
            running_var: [ones.clone(), ones.clone()],
            scale: [ones.clone(), ones],
            shift: [zeros.clone(), zeros],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale[0].len()
    }

    /// Train mode normalizes with batch statistics and updates only the
    /// routed running set; eval mode reads the routed running set.
    pub fn forward(&mut self, x: &Tensor<T>, tag: ViewTag, mode: BnMode) -> Result<Tensor<T>> {
        if x.shape().len() < 2 || x.shape()[1] != self.channels() {
            return Err(Error::Dimension(format!(
                "expected {} channels, got shape {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let (st, af) = route(self.variant, tag);
        match mode {
            BnMode::Train => {
                let (y, cache) = bn_train_forward(x, &self.scale[af], &self.shift[af], self.eps)?;
                update_running(&mut self.running_mean[st], &cache.batch_mean, self.momentum);
                update_running(&mut self.running_var[st], &cache.batch_var, self.momentum);
                Ok(y)
            }
            BnMode::Eval => Ok(bn_eval_forward(
                x,
                &self.scale[af],
                &self.shift[af],
                &self.running_mean[st],
                &self.running_var[st],
                self.eps,
                false,
            )
            .0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features() -> Tensor<f64> {
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        Tensor::from_vec(&[2, 3, 2, 2], data).unwrap()
    }

    fn channel_moments(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, sp) = layout(y.shape());
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| y.data()[(s * c + ch) * sp..(s * c + ch + 1) * sp].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_standardizes_every_tag() {
        for variant in BnVariant::ALL {
            for tag in [ViewTag::Base, ViewTag::Complex] {
                let mut bn = DualBatchNorm::<f64>::new(3, variant);
                bn.eps = 0.0;
                let y = bn.forward(&features(), tag, BnMode::Train).unwrap();
                for ch in 0..3 {
                    let (m, v) = channel_moments(&y, ch);
                    assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "{variant:?} {tag}");
                }
            }
        }
    }

    #[test]
    fn eval_with_matching_running_stats_standardizes() {
        let x = features();
        let mut bn = DualBatchNorm::<f64>::new(3, BnVariant::SplitBoth);
        bn.eps = 0.0;
        let (_, cache) = bn_train_forward(&x, &bn.scale[0], &bn.shift[0], 0.0).unwrap();
        let m = x.shape()[0] * 4;
        bn.running_mean[0] = cache.batch_mean.clone();
        // running variance is unbiased; standardization uses the biased one
        bn.running_var[0] = cache.batch_var.iter().map(|v| v * (m - 1) as f64 / m as f64).collect();
        let y = bn.forward(&x, ViewTag::Base, BnMode::Eval).unwrap();
        for ch in 0..3 {
            let (mean, var) = channel_moments(&y, ch);
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn complex_forward_leaves_base_statistics_untouched() {
        let mut bn = DualBatchNorm::<f64>::new(3, BnVariant::SplitBoth);
        bn.running_mean[0] = vec![0.25, -0.5, 1.5];
        let before = bn.clone();
        bn.forward(&features(), ViewTag::Complex, BnMode::Train).unwrap();
        assert_eq!(bn.running_mean[0], before.running_mean[0]);
        assert_eq!(bn.running_var[0], before.running_var[0]);
        assert_ne!(bn.running_mean[1], before.running_mean[1]);
    }

    #[test]
    fn shared_fields_resolve_to_set_zero() {
        assert_eq!(route(BnVariant::SplitBoth, ViewTag::Complex), (1, 1));
        assert_eq!(route(BnVariant::SplitStatsOnly, ViewTag::Complex), (1, 0));
        assert_eq!(route(BnVariant::SplitAffineOnly, ViewTag::Complex), (0, 1));
        assert_eq!(route(BnVariant::Single, ViewTag::Complex), (0, 0));
        assert_eq!(route(BnVariant::SplitBoth, ViewTag::Base), (0, 0));
    }

    #[test]
    fn unknown_tag_is_a_routing_error() {
        assert!(matches!("auto".parse::<ViewTag>(), Err(Error::Routing(_))));
        assert_eq!("complex".parse::<ViewTag>().unwrap(), ViewTag::Complex);
    }
}
