//! Adversarial training with ascending-ε TRADES, weight perturbation and
//! weight averaging (ACAT), and its multi-view extension with split batch
//! normalization and a Jensen-Shannon consistency term (DAJAT).

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod weight_space;

pub use config::{BnVariant, Config, Method, ThreatModel, TrainConfig};
pub use error::{Error, Result};
pub use nn::{BnMode, Model, ModelSpec, ViewTag};
pub use tensor::{Real, Tensor};
