//! Configurable classifier built from conv / split-BN / dense blocks.
//!
//! Parameters and buffers live in flat lists so optimizers, weight
//! perturbations, averaging and checkpoints can treat them uniformly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::dualbn::{
    bn_backward, bn_eval_forward, bn_train_forward, route, update_running, BnCache, BnMode,
    ViewTag, BN_EPS, BN_MOMENTUM,
};
use super::layers::{
    avg_pool_backward, avg_pool_forward, conv_backward, conv_forward, dense_backward,
    dense_forward, global_avg_pool_backward, global_avg_pool_forward, relu_backward,
    relu_forward, ConvCache, ConvGeometry,
};
use crate::config::BnVariant;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        /// Defaults to `kernel / 2`.
        #[serde(default)]
        pad: Option<usize>,
        #[serde(default)]
        bias: bool,
    },
    Bn,
    Relu,
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Fully connected; flattens its input implicitly.
    Dense {
        out: usize,
    },
    /// conv3×3 → BN → ReLU → conv3×3 → BN, plus identity or 1×1-conv → BN shortcut, then ReLU.
    Residual {
        out: usize,
        #[serde(default = "one")]
        stride: usize,
    },
}

/// Layer stack plus class count. A `Dense(classes)` head is always appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::toy_cnn(10)
    }
}

fn block(out: usize, stride: usize) -> [LayerSpec; 3] {
    [
        LayerSpec::Conv {
            out,
            kernel: 3,
            stride,
            pad: None,
            bias: false,
        },
        LayerSpec::Bn,
        LayerSpec::Relu,
    ]
}

impl ModelSpec {
    /// Four conv → BN → ReLU blocks, global pooling and the dense head, on 32×32 RGB.
    pub fn toy_cnn(classes: usize) -> Self {
        let mut layers = Vec::new();
        for (out, stride) in [(16, 2), (32, 2), (32, 2), (64, 1)] {
            layers.extend(block(out, stride));
        }
        layers.push(LayerSpec::GlobalAvgPool);
        ModelSpec {
            input: [3, 32, 32],
            layers,
            classes,
        }
    }

    pub fn resnet_tiny(classes: usize) -> Self {
        let mut layers = block(16, 1).to_vec();
        layers.push(LayerSpec::Residual { out: 16, stride: 1 });
        layers.push(LayerSpec::Residual { out: 32, stride: 2 });
        layers.push(LayerSpec::Residual { out: 64, stride: 2 });
        layers.push(LayerSpec::GlobalAvgPool);
        ModelSpec {
            input: [3, 32, 32],
            layers,
            classes,
        }
    }

    /// Just the dense head.
    pub fn linear(input: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            input,
            layers: Vec::new(),
            classes,
        }
    }

    pub fn preset(name: &str, classes: usize) -> Result<Self> {
        match name {
            "toy_cnn" => Ok(Self::toy_cnn(classes)),
            "resnet_tiny" => Ok(Self::resnet_tiny(classes)),
            "linear" => Ok(Self::linear([3, 32, 32], classes)),
            other => Err(Error::Model(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Model("need at least two classes".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Model(format!("degenerate input shape {:?}", self.input)));
        }
        let mut builder = Builder::<f64>::new(BnVariant::Single, None);
        builder.compile(self).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn is_bn(self) -> bool {
        matches!(
            self,
            ParamKind::BnScale | ParamKind::BnShift | ParamKind::BnMean | ParamKind::BnVar
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    /// False for a second BN set the variant never routes to.
    pub active: bool,
}

/// Indices of one BN site's tensors; `[set 0, set 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnSite {
    pub name: String,
    pub channels: usize,
    pub scale: [usize; 2],
    pub shift: [usize; 2],
    pub mean: [usize; 2],
    pub var: [usize; 2],
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        geom: ConvGeometry,
        weight: usize,
        bias: Option<usize>,
    },
    Bn {
        site: usize,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        weight: usize,
        bias: usize,
    },
    Residual {
        body: Vec<Op>,
        shortcut: Vec<Op>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn numel(self) -> usize {
        match self {
            Shape::Map(c, h, w) => c * h * w,
            Shape::Flat(f) => f,
        }
    }
}

struct Builder<T> {
    variant: BnVariant,
    rng: Option<ChaCha8Rng>,
    params: Vec<Tensor<T>>,
    param_info: Vec<ParamInfo>,
    buffers: Vec<Tensor<T>>,
    buffer_info: Vec<ParamInfo>,
    sites: Vec<BnSite>,
}

impl<T: Real> Builder<T> {
    fn new(variant: BnVariant, seed: Option<u64>) -> Self {
        Builder {
            variant,
            rng: seed.map(ChaCha8Rng::seed_from_u64),
            params: Vec::new(),
            param_info: Vec::new(),
            buffers: Vec::new(),
            buffer_info: Vec::new(),
            sites: Vec::new(),
        }
    }

    fn param(&mut self, name: String, kind: ParamKind, shape: &[usize], init: Init, active: bool) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match (init, self.rng.as_mut()) {
            (Init::Const(v), _) => vec![T::of(v); n],
            (_, None) => vec![T::zero(); n],
            (Init::Normal(std), Some(rng)) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            (Init::Uniform(b), Some(rng)) => {
                let d = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
        };
        let t = Tensor::from_vec(shape, data).expect("param shape");
        let info = ParamInfo { name, kind, active };
        if matches!(kind, ParamKind::BnMean | ParamKind::BnVar) {
            self.buffers.push(t);
            self.buffer_info.push(info);
            self.buffers.len() - 1
        } else {
            self.params.push(t);
            self.param_info.push(info);
            self.params.len() - 1
        }
    }

    fn compile(&mut self, spec: &ModelSpec) -> Result<Vec<Op>> {
        let [c, h, w] = spec.input;
        let mut shape = Shape::Map(c, h, w);
        let mut ops = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let prefix = format!("layers.{i}");
            shape = self.layer(layer, shape, &prefix, &mut ops)?;
        }
        let head = LayerSpec::Dense { out: spec.classes };
        self.layer(&head, shape, "head", &mut ops)?;
        Ok(ops)
    }

    fn bn_site(&mut self, prefix: &str, channels: usize) -> usize {
        let split_affine = self.variant.splits_affine();
        let split_stats = self.variant.splits_stats();
        let mut ids = [[0usize; 2]; 4];
        for set in 0..2 {
            let aff = set == 0 || split_affine;
            let st = set == 0 || split_stats;
            ids[0][set] = self.param(format!("{prefix}.scale.{set}"), ParamKind::BnScale, &[channels], Init::Const(1.0), aff);
            ids[1][set] = self.param(format!("{prefix}.shift.{set}"), ParamKind::BnShift, &[channels], Init::Const(0.0), aff);
            ids[2][set] = self.param(format!("{prefix}.mean.{set}"), ParamKind::BnMean, &[channels], Init::Const(0.0), st);
            ids[3][set] = self.param(format!("{prefix}.var.{set}"), ParamKind::BnVar, &[channels], Init::Const(1.0), st);
        }
        self.sites.push(BnSite {
            name: prefix.to_string(),
            channels,
            scale: ids[0],
            shift: ids[1],
            mean: ids[2],
            var: ids[3],
        });
        self.sites.len() - 1
    }

    fn layer(&mut self, layer: &LayerSpec, shape: Shape, prefix: &str, ops: &mut Vec<Op>) -> Result<Shape> {
        let need_map = |what: &str| match shape {
            Shape::Map(c, h, w) => Ok((c, h, w)),
            Shape::Flat(_) => Err(Error::Model(format!("{prefix}: {what} needs a spatial input"))),
        };
        match *layer {
            LayerSpec::Conv {
                out,
                kernel,
                stride,
                pad,
                bias,
            } => {
                let (c, h, w) = need_map("conv")?;
                let pad = pad.unwrap_or(kernel / 2);
                if out == 0 || kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(Error::Model(format!("{prefix}: invalid conv geometry")));
                }
                let geom = ConvGeometry {
                    in_c: c,
                    out_c: out,
                    kernel,
                    stride,
                    pad,
                    in_h: h,
                    in_w: w,
                };
                let fan_in = (c * kernel * kernel) as f64;
                let weight = self.param(
                    format!("{prefix}.weight"),
                    ParamKind::Weight,
                    &[out, c, kernel, kernel],
                    Init::Normal((2.0 / fan_in).sqrt()),
                    true,
                );
                let bias = bias.then(|| {
                    self.param(format!("{prefix}.bias"), ParamKind::Bias, &[out], Init::Const(0.0), true)
                });
                ops.push(Op::Conv { geom, weight, bias });
                Ok(Shape::Map(out, geom.out_h(), geom.out_w()))
            }
            LayerSpec::Bn => {
                let channels = match shape {
                    Shape::Map(c, _, _) => c,
                    Shape::Flat(f) => f,
                };
                let site = self.bn_site(&format!("{prefix}.bn"), channels);
                ops.push(Op::Bn { site });
                Ok(shape)
            }
            LayerSpec::Relu => {
                ops.push(Op::Relu);
                Ok(shape)
            }
            LayerSpec::AvgPool { size } => {
                let (c, h, w) = need_map("avg_pool")?;
                if size == 0 || h % size != 0 || w % size != 0 {
                    return Err(Error::Model(format!("{prefix}: pool size {size} does not tile {h}×{w}")));
                }
                ops.push(Op::AvgPool { size });
                Ok(Shape::Map(c, h / size, w / size))
            }
            LayerSpec::GlobalAvgPool => {
                let (c, _, _) = need_map("global_avg_pool")?;
                ops.push(Op::GlobalAvgPool);
                Ok(Shape::Flat(c))
            }
            LayerSpec::Flatten => {
                ops.push(Op::Flatten);
                Ok(Shape::Flat(shape.numel()))
            }
            LayerSpec::Dense { out } => {
                if out == 0 {
                    return Err(Error::Model(format!("{prefix}: zero-width dense layer")));
                }
                let fan_in = shape.numel();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = self.param(format!("{prefix}.weight"), ParamKind::Weight, &[out, fan_in], Init::Uniform(bound), true);
                let bias = self.param(format!("{prefix}.bias"), ParamKind::Bias, &[out], Init::Uniform(bound), true);
                ops.push(Op::Dense { weight, bias });
                Ok(Shape::Flat(out))
            }
            LayerSpec::Residual { out, stride } => {
                let (c, _, _) = need_map("residual")?;
                let mut body = Vec::new();
                let conv = |stride| LayerSpec::Conv {
                    out,
                    kernel: 3,
                    stride,
                    pad: Some(1),
                    bias: false,
                };
                let mut s = self.layer(&conv(stride), shape, &format!("{prefix}.conv1"), &mut body)?;
                s = self.layer(&LayerSpec::Bn, s, &format!("{prefix}.bn1"), &mut body)?;
                body.push(Op::Relu);
                s = self.layer(&conv(1), s, &format!("{prefix}.conv2"), &mut body)?;
                s = self.layer(&LayerSpec::Bn, s, &format!("{prefix}.bn2"), &mut body)?;
                let mut shortcut = Vec::new();
                if stride != 1 || c != out {
                    let proj = LayerSpec::Conv {
                        out,
                        kernel: 1,
                        stride,
                        pad: Some(0),
                        bias: false,
                    };
                    let p = self.layer(&proj, shape, &format!("{prefix}.proj"), &mut shortcut)?;
                    let p = self.layer(&LayerSpec::Bn, p, &format!("{prefix}.proj_bn"), &mut shortcut)?;
                    if p != s {
                        return Err(Error::Model(format!("{prefix}: shortcut shape mismatch")));
                    }
                }
                ops.push(Op::Residual { body, shortcut });
                Ok(s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Const(f64),
    Normal(f64),
    Uniform(f64),
}

#[derive(Debug, Clone)]
enum TapeEntry<T> {
    Conv(Option<ConvCache<T>>),
    Bn {
        site: usize,
        stats_set: usize,
        affine_set: usize,
        cache: Option<BnCache<T>>,
    },
    Relu(Tensor<T>),
    AvgPool(Vec<usize>),
    GlobalAvgPool(Vec<usize>),
    Flatten(Vec<usize>),
    Dense {
        input: Tensor<T>,
        in_shape: Vec<usize>,
    },
    Residual {
        body: Vec<TapeEntry<T>>,
        shortcut: Vec<TapeEntry<T>>,
        output: Tensor<T>,
    },
}

/// Logits plus everything the backward pass and the running-statistics commit need.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub tag: ViewTag,
    pub mode: BnMode,
    tape: Vec<TapeEntry<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    variant: BnVariant,
    params: Vec<Tensor<T>>,
    param_info: Vec<ParamInfo>,
    buffers: Vec<Tensor<T>>,
    buffer_info: Vec<ParamInfo>,
    sites: Vec<BnSite>,
    plan: PlanHandle,
}

/// The compiled op list; kept out of `PartialEq` since it is rebuilt from the layer list.
#[derive(Debug, Clone)]
struct PlanHandle(Vec<Op>);

impl PartialEq for PlanHandle {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T: Real> Model<T> {
    pub fn new(spec: &ModelSpec, variant: BnVariant, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder::<T>::new(variant, Some(seed));
        let ops = b.compile(spec)?;
        Ok(Model {
            spec: spec.clone(),
            variant,
                    params: b.params,
            param_info: b.param_info,
            buffers: b.buffers,
            buffer_info: b.buffer_info,
            sites: b.sites,
            plan: PlanHandle(ops),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn variant(&self) -> BnVariant {
        self.variant
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.param_info
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn buffer_info(&self) -> &[ParamInfo] {
        &self.buffer_info
    }

    pub fn bn_sites(&self) -> &[BnSite] {
        &self.sites
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_info.iter().position(|p| p.name == name)
    }

    pub fn buffer_index(&self, name: &str) -> Option<usize> {
        self.buffer_info.iter().position(|p| p.name == name)
    }

    /// Zero tensors shaped like the parameter list.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    /// Active parameters plus active running-statistics entries.
    pub fn parameter_count(&self) -> usize {
        let count = |ts: &[Tensor<T>], info: &[ParamInfo]| -> usize {
            ts.iter().zip(info).filter(|(_, i)| i.active).map(|(t, _)| t.len()).sum()
        };
        count(&self.params, &self.param_info) + count(&self.buffers, &self.buffer_info)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            variant: self.variant,
                    params: self.params.iter().map(Tensor::cast).collect(),
            param_info: self.param_info.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            buffer_info: self.buffer_info.clone(),
            sites: self.sites.clone(),
            plan: self.plan.clone(),
        }
    }

    /// Overwrites parameters and buffers from `other`, which must share the layout.
    pub fn copy_state_from(&mut self, other: &Model<T>) -> Result<()> {
        self.check_layout(&other.params, &other.buffers)?;
        self.params.clone_from_slice(&other.params);
        self.buffers.clone_from_slice(&other.buffers);
        Ok(())
    }

    pub fn check_layout(&self, params: &[Tensor<T>], buffers: &[Tensor<T>]) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&self.params, params) || !same(&self.buffers, buffers) {
            return Err(Error::Model("parameter layout mismatch".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input[..] || s[0] == 0 {
            return Err(Error::Dimension(format!(
                "model expects [n, {}, {}, {}], got {s:?}",
                self.spec.input[0], self.spec.input[1], self.spec.input[2]
            )));
        }
        Ok(())
    }

    /// Forward pass that records a tape for `backward`. Running statistics are
    /// not touched; call `commit_batch_stats` to fold in a train-mode pass.
    pub fn forward(&self, x: &Tensor<T>, tag: ViewTag, mode: BnMode) -> Result<Forward<T>> {
        self.check_input(x)?;
        let mut tape = Vec::with_capacity(self.plan.0.len());
        let logits = self.run(&self.plan.0, x.clone(), tag, mode, Some(&mut tape))?;
        Ok(Forward {
            logits,
            tag,
            mode,
            tape,
        })
    }

    /// Logits without a tape.
    pub fn logits(&self, x: &Tensor<T>, tag: ViewTag, mode: BnMode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.run(&self.plan.0, x.clone(), tag, mode, None)
    }

    /// Deployment path: base tag, running statistics.
    pub fn inference_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x, ViewTag::Base, BnMode::Eval)
    }

    fn run(
        &self,
        ops: &[Op],
        mut h: Tensor<T>,
        tag: ViewTag,
        mode: BnMode,
        mut tape: Option<&mut Vec<TapeEntry<T>>>,
    ) -> Result<Tensor<T>> {
        let keep = tape.is_some();
        for op in ops {
            let (next, entry) = match op {
                Op::Conv { geom, weight, bias } => {
                    let (y, cache) = conv_forward(&h, &self.params[*weight], bias.map(|b| &self.params[b]), geom, keep);
                    (y, TapeEntry::Conv(cache))
                }
                Op::Bn { site } => {
                    let s = &self.sites[*site];
                    let (st, af) = route(self.variant, tag);
                    let scale = self.params[s.scale[af]].data();
                    let shift = self.params[s.shift[af]].data();
                    let (y, cache) = match mode {
                        BnMode::Train => {
                            let (y, c) = bn_train_forward(&h, scale, shift, BN_EPS)?;
                            (y, Some(c))
                        }
                        BnMode::Eval => bn_eval_forward(
                            &h,
                            scale,
                            shift,
                            self.buffers[s.mean[st]].data(),
                            self.buffers[s.var[st]].data(),
                            BN_EPS,
                            keep,
                        ),
                    };
                    (
                        y,
                        TapeEntry::Bn {
                            site: *site,
                            stats_set: st,
                            affine_set: af,
                            cache,
                        },
                    )
                }
                Op::Relu => {
                    let y = relu_forward(&h);
                    let entry = TapeEntry::Relu(if keep { y.clone() } else { Tensor::zeros(&[0]) });
                    (y, entry)
                }
                Op::AvgPool { size } => (avg_pool_forward(&h, *size), TapeEntry::AvgPool(h.shape().to_vec())),
                Op::GlobalAvgPool => (global_avg_pool_forward(&h), TapeEntry::GlobalAvgPool(h.shape().to_vec())),
                Op::Flatten => {
                    let shape = h.shape().to_vec();
                    let flat = [h.batch(), h.row_len()];
                    (h.reshape(&flat)?, TapeEntry::Flatten(shape))
                }
                Op::Dense { weight, bias } => {
                    let in_shape = h.shape().to_vec();
                    let flat = [h.batch(), h.row_len()];
                    let x = h.reshape(&flat)?;
                    let y = dense_forward(&x, &self.params[*weight], &self.params[*bias]);
                    let input = if keep { x } else { Tensor::zeros(&[0]) };
                    (y, TapeEntry::Dense { input, in_shape })
                }
                Op::Residual { body, shortcut } => {
                    let mut body_tape = Vec::new();
                    let mut short_tape = Vec::new();
                    let b = self.run(body, h.clone(), tag, mode, keep.then_some(&mut body_tape))?;
                    let s = self.run(shortcut, h, tag, mode, keep.then_some(&mut short_tape))?;
                    let mut sum = b;
                    sum.axpy(T::one(), &s);
                    let y = relu_forward(&sum);
                    let output = if keep { y.clone() } else { Tensor::zeros(&[0]) };
                    (
                        y,
                        TapeEntry::Residual {
                            body: body_tape,
                            shortcut: short_tape,
                            output,
                        },
                    )
                }
            };
            h = next;
            if let Some(t) = tape.as_deref_mut() {
                t.push(entry);
            }
        }
        Ok(h)
    }

    /// Backpropagates `grad_logits` through a recorded forward. Parameter
    /// gradients are accumulated into `grads` when given; the input gradient
    /// is returned when `need_input` is set.
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        grad_logits: &Tensor<T>,
        mut grads: Option<&mut [Tensor<T>]>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grad_logits.shape() != fwd.logits.shape() {
            return Err(Error::Dimension(format!(
                "logit gradient {:?} does not match logits {:?}",
                grad_logits.shape(),
                fwd.logits.shape()
            )));
        }
        if let Some(g) = grads.as_deref() {
            self.check_layout(g, &self.buffers)?;
        }
        Ok(self.back(&self.plan.0, &fwd.tape, grad_logits.clone(), &mut grads, need_input))
    }

    fn back(
        &self,
        ops: &[Op],
        tape: &[TapeEntry<T>],
        mut dy: Tensor<T>,
        grads: &mut Option<&mut [Tensor<T>]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        for (idx, (op, entry)) in ops.iter().zip(tape).enumerate().rev() {
            // the first op only needs an input gradient if the caller asked
            let want_dx = need_input || idx > 0;
            dy = match (op, entry) {
                (Op::Conv { geom, weight, bias }, TapeEntry::Conv(Some(cache))) => {
                    let (gw, gb) = match grads.as_deref_mut() {
                        Some(g) => {
                            let (gw, gb) = two_mut(g, *weight, *bias);
                            (Some(gw), gb)
                        }
                        None => (None, None),
                    };
                    match conv_backward(&dy, cache, &self.params[*weight], geom, gw, gb, want_dx) {
                        Some(dx) => dx,
                        None => return None,
                    }
                }
                (Op::Bn { site }, TapeEntry::Bn { affine_set, cache: Some(cache), .. }) => {
                    let s = &self.sites[*site];
                    let scale_idx = s.scale[*affine_set];
                    let shift_idx = s.shift[*affine_set];
                    let (dx, dscale, dshift) = bn_backward(&dy, cache, self.params[scale_idx].data());
                    if let Some(g) = grads.as_deref_mut() {
                        for (a, b) in g[scale_idx].data_mut().iter_mut().zip(&dscale) {
                            *a += *b;
                        }
                        for (a, b) in g[shift_idx].data_mut().iter_mut().zip(&dshift) {
                            *a += *b;
                        }
                    }
                    dx
                }
                (Op::Relu, TapeEntry::Relu(y)) => relu_backward(&dy, y),
                (Op::AvgPool { size }, TapeEntry::AvgPool(shape)) => avg_pool_backward(&dy, shape, *size),
                (Op::GlobalAvgPool, TapeEntry::GlobalAvgPool(shape)) => global_avg_pool_backward(&dy, shape),
                (Op::Flatten, TapeEntry::Flatten(shape)) => dy.reshape(shape).expect("flatten shape"),
                (Op::Dense { weight, bias }, TapeEntry::Dense { input, in_shape }) => {
                    let (gw, gb) = match grads.as_deref_mut() {
                        Some(g) => {
                            let (gw, gb) = two_mut(g, *weight, Some(*bias));
                            (Some(gw), gb)
                        }
                        None => (None, None),
                    };
                    match dense_backward(&dy, input, &self.params[*weight], gw, gb, want_dx) {
                        Some(dx) => dx.reshape(in_shape).expect("dense input shape"),
                        None => return None,
                    }
                }
                (Op::Residual { body, shortcut }, TapeEntry::Residual { body: bt, shortcut: st, output }) => {
                    let dsum = relu_backward(&dy, output);
                    let db = self.back(body, bt, dsum.clone(), grads, want_dx);
                    let ds = if shortcut.is_empty() {
                        Some(dsum)
                    } else {
                        self.back(shortcut, st, dsum, grads, want_dx)
                    };
                    match (db, ds) {
                        (Some(mut a), Some(b)) => {
                            a.axpy(T::one(), &b);
                            a
                        }
                        _ => return None,
                    }
                }
                _ => unreachable!("tape does not match the compiled plan"),
            };
        }
        need_input.then_some(dy)
    }

    /// Folds the batch statistics of a train-mode forward into the routed running sets.
    pub fn commit_batch_stats(&mut self, fwd: &Forward<T>) {
        if fwd.mode != BnMode::Train {
            return;
        }
        fn walk<T: Real>(tape: &[TapeEntry<T>], sites: &[BnSite], buffers: &mut [Tensor<T>]) {
            for entry in tape {
                match entry {
                    TapeEntry::Bn {
                        site,
                        stats_set,
                        cache: Some(cache),
                        ..
                    } => {
                        let s = &sites[*site];
                        update_running(buffers[s.mean[*stats_set]].data_mut(), &cache.batch_mean, BN_MOMENTUM);
                        update_running(buffers[s.var[*stats_set]].data_mut(), &cache.batch_var, BN_MOMENTUM);
                    }
                    TapeEntry::Residual { body, shortcut, .. } => {
                        walk(body, sites, buffers);
                        walk(shortcut, sites, buffers);
                    }
                    _ => {}
                }
            }
        }
        walk(&fwd.tape, &self.sites, &mut self.buffers);
    }
}

fn two_mut<T>(g: &mut [Tensor<T>], a: usize, b: Option<usize>) -> (&mut Tensor<T>, Option<&mut Tensor<T>>) {
    match b {
        None => (&mut g[a], None),
        Some(b) => {
            assert!(a < b, "bias follows its weight");
            let (lo, hi) = g.split_at_mut(b);
            (&mut lo[a], Some(&mut hi[0]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: [2, 4, 4],
            layers: vec![
                LayerSpec::Conv {
                    out: 3,
                    kernel: 3,
                    stride: 1,
                    pad: None,
                    bias: true,
                },
                LayerSpec::Bn,
                LayerSpec::Relu,
                LayerSpec::Residual { out: 4, stride: 2 },
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 5 },
                LayerSpec::Bn,
                LayerSpec::Relu,
            ],
            classes: 3,
        }
    }

    fn input(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(0.0, 1.0).unwrap();
        Tensor::from_vec(&[n, 2, 4, 4], (0..n * 32).map(|_| d.sample(&mut rng)).collect()).unwrap()
    }

    /// Scalar objective Σ w·logits with fixed pseudo-random weights.
    fn objective(logits: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let w: Vec<f64> = (0..logits.len()).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let w = Tensor::from_vec(logits.shape(), w).unwrap();
        (logits.dot(&w), w)
    }

    fn randomize_bn(model: &mut Model<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(0.5, 1.5).unwrap();
        for (p, info) in model.params.iter_mut().zip(&model.param_info) {
            if info.kind.is_bn() {
                p.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut rng) - 0.5);
            }
        }
        for b in model.buffers.iter_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = d.sample(&mut rng));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for (mode, tag) in [(BnMode::Train, ViewTag::Base), (BnMode::Eval, ViewTag::Complex)] {
            let mut model = Model::<f64>::new(&tiny_spec(), BnVariant::SplitBoth, 3).unwrap();
            randomize_bn(&mut model, 9);
            let x = input(4, 1);
            let fwd = model.forward(&x, tag, mode).unwrap();
            let (_, w) = objective(&fwd.logits);
            let mut grads = model.zero_grads();
            let dx = model.backward(&fwd, &w, Some(&mut grads), true).unwrap().unwrap();
            let h = 1e-5;
            for pi in 0..model.params.len() {
                for k in 0..model.params[pi].len() {
                    let orig = model.params[pi].data()[k];
                    model.params[pi].data_mut()[k] = orig + h;
                    let up = objective(&model.logits(&x, tag, mode).unwrap()).0;
                    model.params[pi].data_mut()[k] = orig - h;
                    let down = objective(&model.logits(&x, tag, mode).unwrap()).0;
                    model.params[pi].data_mut()[k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads[pi].data()[k];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                        "{} [{k}] {mode:?}: fd {fd} vs {an}",
                        model.param_info[pi].name
                    );
                }
            }
            let mut xp = x.clone();
            for k in 0..x.len() {
                let orig = x.data()[k];
                xp.data_mut()[k] = orig + h;
                let up = objective(&model.logits(&xp, tag, mode).unwrap()).0;
                xp.data_mut()[k] = orig - h;
                let down = objective(&model.logits(&xp, tag, mode).unwrap()).0;
                xp.data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - dx.data()[k]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn base_gradients_never_reach_complex_parameters() {
        let model = Model::<f64>::new(&tiny_spec(), BnVariant::SplitBoth, 5).unwrap();
        let x = input(4, 2);
        for (tag, untouched) in [(ViewTag::Base, ".1"), (ViewTag::Complex, ".0")] {
            let fwd = model.forward(&x, tag, BnMode::Train).unwrap();
            let (_, w) = objective(&fwd.logits);
            let mut grads = model.zero_grads();
            model.backward(&fwd, &w, Some(&mut grads), false).unwrap();
            for (g, info) in grads.iter().zip(model.param_info()) {
                if info.kind.is_bn() && info.name.ends_with(untouched) {
                    assert!(g.data().iter().all(|&v| v == 0.0), "{}", info.name);
                }
            }
        }
    }

    #[test]
    fn split_count_exceeds_single_by_one_tuple_per_channel() {
        let spec = ModelSpec::toy_cnn(10);
        let single = Model::<f32>::new(&spec, BnVariant::Single, 0).unwrap().parameter_count();
        let split = Model::<f32>::new(&spec, BnVariant::SplitBoth, 0).unwrap().parameter_count();
        let channels: usize = Model::<f32>::new(&spec, BnVariant::Single, 0)
            .unwrap()
            .bn_sites()
            .iter()
            .map(|s| s.channels)
            .sum();
        assert_eq!(split - single, 4 * channels);
        let stats = Model::<f32>::new(&spec, BnVariant::SplitStatsOnly, 0).unwrap().parameter_count();
        assert_eq!(stats - single, 2 * channels);
    }

    #[test]
    fn commit_updates_only_the_routed_set() {
        let mut model = Model::<f64>::new(&tiny_spec(), BnVariant::SplitBoth, 1).unwrap();
        let before = model.buffers.clone();
        let fwd = model.forward(&input(4, 3), ViewTag::Complex, BnMode::Train).unwrap();
        assert_eq!(model.buffers, before, "forward alone is pure");
        model.commit_batch_stats(&fwd);
        for ((b, a), info) in before.iter().zip(&model.buffers).zip(&model.buffer_info) {
            if info.name.ends_with(".0") {
                assert_eq!(a, b);
            } else {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn residual_model_runs_and_presets_validate() {
        for spec in [ModelSpec::toy_cnn(10), ModelSpec::resnet_tiny(10), ModelSpec::linear([3, 32, 32], 10)] {
            spec.validate().unwrap();
        }
        let bad = ModelSpec {
            input: [3, 8, 8],
            layers: vec![LayerSpec::GlobalAvgPool, LayerSpec::Conv { out: 2, kernel: 3, stride: 1, pad: None, bias: false }],
            classes: 2,
        };
        assert!(matches!(bad.validate(), Err(Error::Model(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        #[derive(Serialize, Deserialize)]
        struct Wrap {
            model: ModelSpec,
        }
        let text = toml::to_string(&Wrap { model: ModelSpec::resnet_tiny(10) }).unwrap();
        let back: Wrap = toml::from_str(&text).unwrap();
        assert_eq!(back.model, ModelSpec::resnet_tiny(10));
    }
}
