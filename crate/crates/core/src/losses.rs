//! Training objectives and their logit gradients.
//!
//! All reductions run in f64. Batch losses are means over samples, so the
//! KL term matches `KLDivLoss(reduction="batchmean")`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{BnMode, Forward, Model, ViewTag};
use crate::tensor::{Real, Tensor};

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("not a probability vector (sum {sum})")));
        }
        Ok(ProbVector(p))
    }

    pub fn from_logits(z: &[f64]) -> Self {
        ProbVector(softmax(z))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn row_f64<T: Real>(t: &Tensor<T>, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|v| v.f64()).collect()
}

/// Row-wise softmax of a `[n, K]` logit tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.batch()).map(|i| softmax(&row_f64(logits, i))).collect()
}

/// `Σ p_i·(log p_i − log q_i)`, natural log, with the probability floor.
pub fn kl_div(p: &ProbVector, q: &ProbVector) -> f64 {
    kl_raw(&p.0, &q.0)
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (ln(a) - ln(b)) } else { 0.0 })
        .sum()
}

fn mixture(ps: &[&[f64]]) -> Vec<f64> {
    let k = ps[0].len();
    let v = ps.len() as f64;
    (0..k).map(|i| ps.iter().map(|p| p[i]).sum::<f64>() / v).collect()
}

/// Mean KL of each distribution against their mixture.
pub fn jsd(ps: &[ProbVector]) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Argument("divergence of an empty list".into()));
    }
    if ps.iter().any(|p| p.0.len() != ps[0].0.len()) {
        return Err(Error::Dimension("distributions differ in length".into()));
    }
    let rows: Vec<&[f64]> = ps.iter().map(|p| p.0.as_slice()).collect();
    let m = mixture(&rows);
    Ok(rows.iter().map(|p| kl_raw(p, &m)).sum::<f64>() / rows.len() as f64)
}

fn check_labels<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if logits.shape().len() != 2 || logits.batch() != labels.len() || logits.batch() == 0 {
        return Err(Error::Dimension(format!(
            "logits {:?} against {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= logits.shape()[1]) {
        return Err(Error::Argument("label outside the logit range".into()));
    }
    Ok(())
}

/// Per-sample cross-entropy `−log softmax(z)_y`.
pub fn cross_entropy_per_sample<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    Ok((0..logits.batch())
        .map(|i| -ln(softmax(&row_f64(logits, i))[labels[i]]))
        .collect())
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    check_labels(logits, labels)?;
    let n = logits.batch();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax(&row_f64(logits, i));
        total -= ln(p[labels[i]]);
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let d = p[j] - if j == labels[i] { 1.0 } else { 0.0 };
            *g = T::of(d / n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// Per-sample `KL(softmax(clean) ‖ softmax(adv))`.
pub fn kl_per_sample<T: Real>(clean: &Tensor<T>, adv: &Tensor<T>) -> Result<Vec<f64>> {
    same_shape(clean, adv)?;
    Ok((0..clean.batch())
        .map(|i| kl_raw(&softmax(&row_f64(clean, i)), &softmax(&row_f64(adv, i))))
        .collect())
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Batch-mean `KL(softmax(clean) ‖ softmax(adv))` with gradients w.r.t. both logit sets.
pub fn kl_logits<T: Real>(clean: &Tensor<T>, adv: &Tensor<T>) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    same_shape(clean, adv)?;
    let n = clean.batch();
    let nf = n as f64;
    let mut gc = Tensor::zeros(clean.shape());
    let mut ga = Tensor::zeros(adv.shape());
    let mut total = 0.0;
    for i in 0..n {
        let p = softmax(&row_f64(clean, i));
        let q = softmax(&row_f64(adv, i));
        let kl = kl_raw(&p, &q);
        total += kl;
        for j in 0..p.len() {
            gc.row_mut(i)[j] = T::of(p[j] * (ln(p[j]) - ln(q[j]) - kl) / nf);
            ga.row_mut(i)[j] = T::of((q[j] - p[j]) / nf);
        }
    }
    Ok((total / nf, gc, ga))
}

/// Batch-mean Jensen-Shannon divergence across views and its gradient per view.
pub fn jsd_logits<T: Real>(views: &[&Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    let first = views
        .first()
        .ok_or_else(|| Error::Argument("divergence of an empty list".into()))?;
    for v in views {
        same_shape(first, v)?;
    }
    let n = first.batch();
    let nv = views.len() as f64;
    let mut grads: Vec<Tensor<T>> = views.iter().map(|v| Tensor::zeros(v.shape())).collect();
    let mut total = 0.0;
    for i in 0..n {
        let ps: Vec<Vec<f64>> = views.iter().map(|v| softmax(&row_f64(v, i))).collect();
        let rows: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
        let m = mixture(&rows);
        total += rows.iter().map(|p| kl_raw(p, &m)).sum::<f64>() / nv;
        for (v, p) in ps.iter().enumerate() {
            let g: Vec<f64> = p.iter().zip(&m).map(|(&a, &b)| (ln(a) - ln(b)) / nv).collect();
            let dot: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            for (j, out) in grads[v].row_mut(i).iter_mut().enumerate() {
                *out = T::of(p[j] * (g[j] - dot) / n as f64);
            }
        }
    }
    Ok((total / n as f64, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewTerms {
    pub tag: ViewTag,
    pub weight: f64,
    pub ce: f64,
    pub kl: f64,
    /// `ce + β·kl`
    pub trades: f64,
}

/// `total = Σ_v w_v·(ce_v + β·kl_v) + λ·jsd`; `ce_term` and `kl_term` are the weighted sums.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub jsd_term: f64,
    pub beta: f64,
    pub lambda_js: f64,
    pub views: Vec<ViewTerms>,
}

impl LossBreakdown {
    pub fn reconstruct(&self) -> f64 {
        self.ce_term + self.beta * self.kl_term + self.lambda_js * self.jsd_term
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

/// Equal weights `1/(T+1)`, or `w` on the base view and `(1−w)/T` on each complex view.
pub fn view_weights(complex_views: usize, base_weight: Option<f64>) -> Result<Vec<f64>> {
    let t = complex_views;
    match base_weight {
        None => Ok(vec![1.0 / (t + 1) as f64; t + 1]),
        Some(w) if !(0.0..=1.0).contains(&w) => Err(Error::Argument(format!("base view weight {w} outside [0, 1]"))),
        Some(_) if t == 0 => Ok(vec![1.0]),
        Some(w) => {
            let mut v = vec![w];
            v.extend(std::iter::repeat_n((1.0 - w) / t as f64, t));
            Ok(v)
        }
    }
}

/// Clean and adversarial inputs of one view.
#[derive(Debug, Clone, Copy)]
pub struct ViewPair<'a, T> {
    pub clean: &'a Tensor<T>,
    pub adv: &'a Tensor<T>,
    pub tag: ViewTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub beta: f64,
    pub lambda_js: f64,
    pub weights: Vec<f64>,
    pub mode: BnMode,
}

/// The forwards behind a loss value, kept so running statistics can be committed.
#[derive(Debug)]
pub struct LossEval<T> {
    pub breakdown: LossBreakdown,
    pub clean: Vec<Forward<T>>,
    pub adv: Vec<Forward<T>>,
}

/// Weighted per-view TRADES plus λ·JSD over the clean views. When `grads` is
/// given, parameter gradients of the total are accumulated into it.
pub fn multi_view_objective<T: Real>(
    model: &Model<T>,
    views: &[ViewPair<'_, T>],
    labels: &[usize],
    obj: &Objective,
    mut grads: Option<&mut [Tensor<T>]>,
) -> Result<LossEval<T>> {
    if views.is_empty() || views.len() != obj.weights.len() {
        return Err(Error::Argument(format!(
            "{} views against {} weights",
            views.len(),
            obj.weights.len()
        )));
    }
    let mut clean = Vec::with_capacity(views.len());
    let mut adv = Vec::with_capacity(views.len());
    let mut terms = Vec::with_capacity(views.len());
    let mut clean_grads = Vec::with_capacity(views.len());
    let mut adv_grads = Vec::with_capacity(views.len());
    for (v, &w) in views.iter().zip(&obj.weights) {
        same_shape(v.clean, v.adv)?;
        let fc = model.forward(v.clean, v.tag, obj.mode)?;
        let fa = model.forward(v.adv, v.tag, obj.mode)?;
        let (ce, mut gc) = cross_entropy(&fc.logits, labels)?;
        let (kl, gkc, mut gka) = kl_logits(&fc.logits, &fa.logits)?;
        gc.scale(T::of(w));
        gc.axpy(T::of(w * obj.beta), &gkc);
        gka.scale(T::of(w * obj.beta));
        terms.push(ViewTerms {
            tag: v.tag,
            weight: w,
            ce,
            kl,
            trades: ce + obj.beta * kl,
        });
        clean_grads.push(gc);
        adv_grads.push(gka);
        clean.push(fc);
        adv.push(fa);
    }
    let mut jsd_term = 0.0;
    if views.len() > 1 {
        let logits: Vec<&Tensor<T>> = clean.iter().map(|f| &f.logits).collect();
        let (j, gj) = jsd_logits(&logits)?;
        jsd_term = j;
        if obj.lambda_js != 0.0 {
            for (g, d) in clean_grads.iter_mut().zip(&gj) {
                g.axpy(T::of(obj.lambda_js), d);
            }
        }
    }
    if let Some(g) = grads.as_deref_mut() {
        for i in 0..views.len() {
            model.backward(&clean[i], &clean_grads[i], Some(&mut *g), false)?;
            if obj.beta != 0.0 {
                model.backward(&adv[i], &adv_grads[i], Some(&mut *g), false)?;
            }
        }
    }
    let ce_term: f64 = terms.iter().map(|t| t.weight * t.ce).sum();
    let kl_term: f64 = terms.iter().map(|t| t.weight * t.kl).sum();
    let breakdown = LossBreakdown {
        total: ce_term + obj.beta * kl_term + obj.lambda_js * jsd_term,
        ce_term,
        kl_term,
        jsd_term,
        beta: obj.beta,
        lambda_js: obj.lambda_js,
        views: terms,
    };
    Ok(LossEval { breakdown, clean, adv })
}

/// `CE(f(x), y) + β·KL(f(x) ‖ f(x_adv))` with both forwards routed through `tag`.
#[allow(clippy::too_many_arguments)]
pub fn trades_loss<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    x_adv: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    tag: ViewTag,
    mode: BnMode,
    grads: Option<&mut [Tensor<T>]>,
) -> Result<LossEval<T>> {
    let obj = Objective {
        beta,
        lambda_js: 0.0,
        weights: vec![1.0],
        mode,
    };
    multi_view_objective(model, &[ViewPair { clean: x, adv: x_adv, tag }], labels, &obj, grads)
}

/// Checks view/tag alignment, then evaluates the weighted multi-view objective.
#[allow(clippy::too_many_arguments)]
pub fn dajat_loss<T: Real>(
    model: &Model<T>,
    clean: &[(&Tensor<T>, ViewTag)],
    adv: &[(&Tensor<T>, ViewTag)],
    labels: &[usize],
    beta: f64,
    lambda_js: f64,
    base_weight: Option<f64>,
    mode: BnMode,
    grads: Option<&mut [Tensor<T>]>,
) -> Result<LossEval<T>> {
    if clean.len() != adv.len() {
        return Err(Error::Routing(format!(
            "{} clean views but {} adversarial views",
            clean.len(),
            adv.len()
        )));
    }
    if clean.first().map(|c| c.1) != Some(ViewTag::Base) {
        return Err(Error::Routing("the first view must be the base view".into()));
    }
    if let Some(i) = clean.iter().zip(adv).position(|(c, a)| c.1 != a.1) {
        return Err(Error::Routing(format!("view {i}: clean and adversarial tags differ")));
    }
    let pairs: Vec<ViewPair<'_, T>> = clean
        .iter()
        .zip(adv)
        .map(|(c, a)| ViewPair {
            clean: c.0,
            adv: a.0,
            tag: c.1,
        })
        .collect();
    let obj = Objective {
        beta,
        lambda_js,
        weights: view_weights(clean.len() - 1, base_weight)?,
        mode,
    };
    multi_view_objective(model, &pairs, labels, &obj, grads)
}
