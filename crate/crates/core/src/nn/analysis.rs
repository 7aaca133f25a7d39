use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Real, Tensor};

/// Cosine similarity between the base and complex sets of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BnSimilarity {
    pub layer: String,
    pub mean: f64,
    pub var: f64,
    pub scale: f64,
    pub shift: f64,
}

/// Two zero vectors count as identical; one zero vector against a nonzero one gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

fn pair<T: Real>(ts: &[Tensor<T>], idx: [usize; 2]) -> f64 {
    let a: Vec<f64> = ts[idx[0]].data().iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = ts[idx[1]].data().iter().map(|v| v.f64()).collect();
    cosine(&a, &b)
}

/// Per BN layer, in network order.
pub fn bn_cosine_similarity<T: Real>(model: &Model<T>) -> Result<Vec<BnSimilarity>> {
    let variant = model.variant();
    if !variant.splits_stats() && !variant.splits_affine() {
        return Err(Error::NotApplicable(
            "the single-BN variant has only one parameter set to compare".into(),
        ));
    }
    Ok(model
        .bn_sites()
        .iter()
        .map(|s| BnSimilarity {
            layer: s.name.clone(),
            mean: pair(model.buffers(), s.mean),
            var: pair(model.buffers(), s.var),
            scale: pair(model.params(), s.scale),
            shift: pair(model.params(), s.shift),
        })
        .collect())
}
