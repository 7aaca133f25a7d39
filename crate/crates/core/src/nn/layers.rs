//! Forward and backward kernels for the stateless layer types.
//!
//! Activations are NCHW. Convolutions lower the whole batch to one
//! `[C·k·k, N·Ho·Wo]` column matrix so each pass is a single gemm.

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
}

fn im2col<T: Real>(x: &[T], n: usize, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let total = n * hw;
    let mut cols = vec![T::zero(); g.patch() * total];
    let k = g.kernel;
    for s in 0..n {
        let xs = &x[s * g.in_c * g.in_h * g.in_w..(s + 1) * g.in_c * g.in_h * g.in_w];
        for c in 0..g.in_c {
            let plane = &xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * total + s * hw..row * total + (s + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let total = n * hw;
    let k = g.kernel;
    let sample = g.in_c * g.in_h * g.in_w;
    let mut x = vec![T::zero(); n * sample];
    for s in 0..n {
        let xs = &mut x[s * sample..(s + 1) * sample];
        for c in 0..g.in_c {
            let plane = &mut xs[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * total + s * hw..row * total + (s + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                plane[iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
    keep_cache: bool,
) -> (Tensor<T>, Option<ConvCache<T>>) {
    let n = x.batch();
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let total = n * hw;
    let patch = g.patch();
    let cols = im2col(x.data(), n, g);
    // out_cm is [O, N·HW]
    let mut out_cm = vec![T::zero(); g.out_c * total];
    T::gemm(
        g.out_c,
        patch,
        total,
        T::one(),
        weight.data(),
        (patch as isize, 1),
        &cols,
        (total as isize, 1),
        T::zero(),
        &mut out_cm,
        (total as isize, 1),
    );
    let mut out = vec![T::zero(); n * g.out_c * hw];
    for o in 0..g.out_c {
        let b = bias.map_or(T::zero(), |b| b.data()[o]);
        for s in 0..n {
            let src = &out_cm[o * total + s * hw..o * total + (s + 1) * hw];
            let dst = &mut out[(s * g.out_c + o) * hw..(s * g.out_c + o + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b;
            }
        }
    }
    let y = Tensor::from_vec(&[n, g.out_c, oh, ow], out).expect("conv output shape");
    let cache = keep_cache.then_some(ConvCache { cols, batch: n });
    (y, cache)
}

/// Returns the input gradient when requested; accumulates into `grad_w` / `grad_b`.
pub fn conv_backward<T: Real>(
    dy: &Tensor<T>,
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
    grad_w: Option<&mut Tensor<T>>,
    grad_b: Option<&mut Tensor<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let n = cache.batch;
    let hw = g.out_h() * g.out_w();
    let total = n * hw;
    let patch = g.patch();
    let mut dy_cm = vec![T::zero(); g.out_c * total];
    for s in 0..n {
        for o in 0..g.out_c {
            let src = &dy.data()[(s * g.out_c + o) * hw..(s * g.out_c + o + 1) * hw];
            dy_cm[o * total + s * hw..o * total + (s + 1) * hw].copy_from_slice(src);
        }
    }
    if let Some(gw) = grad_w {
        T::gemm(
            g.out_c,
            total,
            patch,
            T::one(),
            &dy_cm,
            (total as isize, 1),
            &cache.cols,
            (1, total as isize),
            T::one(),
            gw.data_mut(),
            (patch as isize, 1),
        );
    }
    if let Some(gb) = grad_b {
        for o in 0..g.out_c {
            let s: T = dy_cm[o * total..(o + 1) * total].iter().copied().sum();
            gb.data_mut()[o] += s;
        }
    }
    if !need_input {
        return None;
    }
    let mut dcols = vec![T::zero(); patch * total];
    T::gemm(
        patch,
        g.out_c,
        total,
        T::one(),
        weight.data(),
        (1, patch as isize),
        &dy_cm,
        (total as isize, 1),
        T::zero(),
        &mut dcols,
        (total as isize, 1),
    );
    let dx = col2im(&dcols, n, g);
    Some(Tensor::from_vec(&[n, g.in_c, g.in_h, g.in_w], dx).expect("conv input shape"))
}

/// `y = x · Wᵀ + b` with `W` stored as `[out, in]`.
pub fn dense_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n = x.batch();
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let mut y = vec![T::zero(); n * out_f];
    for s in 0..n {
        y[s * out_f..(s + 1) * out_f].copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        in_f,
        out_f,
        T::one(),
        x.data(),
        (in_f as isize, 1),
        weight.data(),
        (1, in_f as isize),
        T::one(),
        &mut y,
        (out_f as isize, 1),
    );
    Tensor::from_vec(&[n, out_f], y).expect("dense output shape")
}

pub fn dense_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_w: Option<&mut Tensor<T>>,
    grad_b: Option<&mut Tensor<T>>,
    need_input: bool,
) -> Option<Tensor<T>> {
    let n = x.batch();
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if let Some(gw) = grad_w {
        T::gemm(
            out_f,
            n,
            in_f,
            T::one(),
            dy.data(),
            (1, out_f as isize),
            x.data(),
            (in_f as isize, 1),
            T::one(),
            gw.data_mut(),
            (in_f as isize, 1),
        );
    }
    if let Some(gb) = grad_b {
        for s in 0..n {
            for (g, &d) in gb.data_mut().iter_mut().zip(dy.row(s)) {
                *g += d;
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut dx = vec![T::zero(); n * in_f];
    T::gemm(
        n,
        out_f,
        in_f,
        T::one(),
        dy.data(),
        (out_f as isize, 1),
        weight.data(),
        (in_f as isize, 1),
        T::zero(),
        &mut dx,
        (in_f as isize, 1),
    );
    Some(Tensor::from_vec(x.shape(), dx).expect("dense input shape"))
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Real>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("relu shape")
}

/// Non-overlapping average pooling with window `k` (trailing rows/cols dropped).
pub fn avg_pool_forward<T: Real>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).expect("pool shape")
}

pub fn avg_pool_backward<T: Real>(dy: &Tensor<T>, input_shape: &[usize], k: usize) -> Tensor<T> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * norm;
                for ddy in 0..k {
                    for ddx in 0..k {
                        dst[(oy * k + ddy) * w + ox * k + ddx] = g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, dx).expect("pool input shape")
}

pub fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let norm = T::one() / T::of(hw as f64);
    let data = (0..n * c)
        .map(|p| x.data()[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * norm)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("gap shape")
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let hw: usize = input_shape[2..].iter().product();
    let norm = T::one() / T::of(hw as f64);
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * norm, hw));
    }
    Tensor::from_vec(input_shape, dx).expect("gap input shape")
}
