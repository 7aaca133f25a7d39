//! Network stack: layer kernels, split batch norm, the model and its analytics.

pub mod analysis;
pub mod dualbn;
pub mod layers;
pub mod model;

pub use analysis::{bn_cosine_similarity, BnSimilarity};
pub use dualbn::{route, BnMode, DualBatchNorm, ViewTag};
pub use model::{BnSite, Forward, LayerSpec, Model, ModelSpec, ParamInfo, ParamKind};
