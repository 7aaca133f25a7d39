//! Experiment configuration, threat model and the per-epoch schedules
//! (perturbation radius, learning rate, attack steps) shared by both trainers.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatModel {
    /// ℓ∞ radius in [0,1] pixel units.
    pub epsilon_max: f64,
    #[serde(default = "default_norm")]
    pub norm: Norm,
}

fn default_norm() -> Norm {
    Norm::Linf
}

impl Default for ThreatModel {
    fn default() -> Self {
        ThreatModel {
            epsilon_max: 8.0 / 255.0,
            norm: Norm::Linf,
        }
    }
}

impl ThreatModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon_max) {
            return Err(Error::Config(format!(
                "epsilon_max must lie in [0,1], got {}",
                self.epsilon_max
            )));
        }
        Ok(())
    }
}

/// Which batch-norm fields get a second (complex-view) copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnVariant {
    /// Split running statistics and split affine parameters.
    SplitBoth,
    /// Split running statistics, common affine parameters.
    SplitStatsOnly,
    /// Common running statistics, split affine parameters.
    SplitAffineOnly,
    /// One ordinary batch-norm layer.
    Single,
}

impl BnVariant {
    pub const ALL: [BnVariant; 4] = [
        BnVariant::SplitBoth,
        BnVariant::SplitStatsOnly,
        BnVariant::SplitAffineOnly,
        BnVariant::Single,
    ];

    pub fn splits_stats(self) -> bool {
        matches!(self, BnVariant::SplitBoth | BnVariant::SplitStatsOnly)
    }

    pub fn splits_affine(self) -> bool {
        matches!(self, BnVariant::SplitBoth | BnVariant::SplitAffineOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            BnVariant::SplitBoth => "split_both",
            BnVariant::SplitStatsOnly => "split_stats_only",
            BnVariant::SplitAffineOnly => "split_affine_only",
            BnVariant::Single => "single",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Acat,
    Dajat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepBand {
    pub from: usize,
    pub to: usize,
    pub steps: usize,
}

/// Attack-step count per epoch: either fixed or piecewise constant over
/// closed epoch bands `[from, to]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSchedule {
    Fixed(usize),
    Bands(Vec<StepBand>),
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Fixed(2)
    }
}

impl StepSchedule {
    /// Splits `1..=epochs` into equal bands stepping from `first` to `last`
    /// attack steps. With 200 epochs and 2→5 this yields bands of 50.
    pub fn uniform_ramp(epochs: usize, first: usize, last: usize) -> Result<Self> {
        if first == 0 || last < first {
            return Err(Error::Config(format!(
                "step ramp needs 1 <= first <= last, got {first}..{last}"
            )));
        }
        let levels = last - first + 1;
        if epochs < levels {
            return Err(Error::Config(format!(
                "{epochs} epochs cannot hold {levels} step bands"
            )));
        }
        let bands = (0..levels)
            .map(|i| StepBand {
                from: i * epochs / levels + 1,
                to: (i + 1) * epochs / levels,
                steps: first + i,
            })
            .collect();
        Ok(StepSchedule::Bands(bands))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StepSchedule::Fixed(0) => Err(Error::Config("attack steps must be >= 1".into())),
            StepSchedule::Fixed(_) => Ok(()),
            StepSchedule::Bands(bands) => {
                let mut expect_from = 1;
                let mut prev_steps = 0;
                for band in bands {
                    if band.from != expect_from || band.to < band.from {
                        return Err(Error::Config(format!(
                            "step bands must be contiguous from epoch 1; bad band {band:?}"
                        )));
                    }
                    if band.steps == 0 || band.steps < prev_steps {
                        return Err(Error::Config(format!(
                            "step counts must be >= 1 and non-decreasing; bad band {band:?}"
                        )));
                    }
                    expect_from = band.to + 1;
                    prev_steps = band.steps;
                }
                if bands.is_empty() {
                    return Err(Error::Config("empty step schedule".into()));
                }
                Ok(())
            }
        }
    }

    /// Last epoch covered by the schedule, if bounded.
    pub fn last_epoch(&self) -> Option<usize> {
        match self {
            StepSchedule::Fixed(_) => None,
            StepSchedule::Bands(b) => b.last().map(|b| b.to),
        }
    }
}

fn check_epoch(epoch: usize, epochs: usize) -> Result<()> {
    if epochs == 0 || epoch == 0 || epoch > epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 1..={epochs}"
        )));
    }
    Ok(())
}

/// Linearly ascending perturbation radius: `epoch · ε_max / E`.
pub fn epsilon_at(epoch: usize, epochs: usize, epsilon_max: f64) -> Result<f64> {
    check_epoch(epoch, epochs)?;
    Ok(epoch as f64 * epsilon_max / epochs as f64)
}

/// Cosine-decayed learning rate: `0.5 · lr_max · (1 + cos((epoch−1)/E · π))`.
pub fn lr_at(epoch: usize, epochs: usize, lr_max: f64) -> Result<f64> {
    check_epoch(epoch, epochs)?;
    let phase = (epoch - 1) as f64 / epochs as f64;
    Ok(0.5 * lr_max * (1.0 + (phase * PI).cos()))
}

pub fn attack_steps_at(epoch: usize, schedule: &StepSchedule) -> Result<usize> {
    match schedule {
        StepSchedule::Fixed(s) if *s >= 1 && epoch >= 1 => Ok(*s),
        StepSchedule::Fixed(s) => Err(Error::Config(format!(
            "invalid fixed step count {s} at epoch {epoch}"
        ))),
        StepSchedule::Bands(bands) => bands
            .iter()
            .find(|b| (b.from..=b.to).contains(&epoch))
            .map(|b| b.steps)
            .ok_or_else(|| Error::Config(format!("epoch {epoch} outside every step band"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to batch-norm affine parameters too.
    pub decay_bn: bool,
    /// TRADES coefficient; unset resolves to 8 (ACAT) or 9 (DAJAT).
    pub beta: Option<f64>,
    pub lambda_js: f64,
    pub gamma_awp: f64,
    pub awp_steps: usize,
    /// Number of complex (policy-augmented) views per sample.
    pub views: usize,
    pub attack_steps: StepSchedule,
    /// Attack step size as a multiple of the current radius.
    pub attack_step_factor: f64,
    pub init_noise_sigma: f64,
    pub reinit_per_step: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub ema_decay: f64,
    /// Unset resolves to `single` (ACAT) or `split_both` (DAJAT).
    pub bn_variant: Option<BnVariant>,
    /// Weight of the base-view TRADES term; unset means uniform `1/(T+1)`.
    pub base_view_weight: Option<f64>,
    pub pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Acat,
            epochs: 110,
            lr_max: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_bn: false,
            beta: None,
            lambda_js: 2.0,
            gamma_awp: 0.01,
            awp_steps: 1,
            views: 2,
            attack_steps: StepSchedule::Fixed(2),
            attack_step_factor: 1.0,
            init_noise_sigma: 0.001,
            reinit_per_step: false,
            batch_size: 128,
            seed: 0,
            ema_decay: 0.995,
            bn_variant: None,
            base_view_weight: None,
            pad: 4,
        }
    }
}

impl TrainConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.method {
            Method::Acat => 8.0,
            Method::Dajat => 9.0,
        })
    }

    pub fn bn_variant(&self) -> BnVariant {
        self.bn_variant.unwrap_or(match self.method {
            Method::Acat => BnVariant::Single,
            Method::Dajat => BnVariant::SplitBoth,
        })
    }

    /// Complex views actually used by the configured method.
    pub fn effective_views(&self) -> usize {
        match self.method {
            Method::Acat => 0,
            Method::Dajat => self.views,
        }
    }

    /// Display name, e.g. `acat` or `dajat(Base,2*AA)`.
    pub fn method_label(&self) -> String {
        match self.method {
            Method::Acat => "acat".to_string(),
            Method::Dajat => match self.views {
                0 => "dajat(Base)".to_string(),
                1 => "dajat(Base,AA)".to_string(),
                t => format!("dajat(Base,{t}*AA)"),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr_max > 0.0) || !self.lr_max.is_finite() {
            return bad("lr_max must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0,1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.beta() < 0.0 || self.lambda_js < 0.0 || self.gamma_awp < 0.0 {
            return bad("beta, lambda_js and gamma_awp must be >= 0");
        }
        if self.awp_steps == 0 {
            return bad("awp_steps must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2 for batch statistics");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0,1]");
        }
        if self.attack_step_factor < 0.0 || self.init_noise_sigma < 0.0 {
            return bad("attack step factor and init noise must be >= 0");
        }
        if let Some(w) = self.base_view_weight {
            if !(0.0..=1.0).contains(&w) {
                return bad("base_view_weight must lie in [0,1]");
            }
            if self.effective_views() == 0 && w != 1.0 {
                return bad("base_view_weight must be 1 when there are no complex views");
            }
        }
        if self.method == Method::Acat && self.bn_variant() != BnVariant::Single {
            return bad("acat trains a single augmentation pipeline and needs bn_variant = single");
        }
        self.attack_steps.validate()?;
        if let Some(last) = self.attack_steps.last_epoch() {
            if last < self.epochs {
                return Err(Error::Config(format!(
                    "step schedule ends at epoch {last} but training runs {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    pub classes: usize,
    /// Training pool size (validation is carved out of it).
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub seed: u64,
    /// Held-out validation examples; unset scales 1000-per-50000.
    pub val_size: Option<usize>,
    /// Alternate augmentation policy file.
    pub policy: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            classes: 10,
            n_train: 5000,
            n_test: 1000,
            noise: 0.12,
            seed: 17,
            val_size: None,
            policy: None,
        }
    }
}

impl DataConfig {
    pub fn resolved_val_size(&self, pool: usize) -> usize {
        self.val_size
            .unwrap_or_else(|| ((pool as f64) * 1000.0 / 50_000.0).round().max(1.0) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples used for the quick per-epoch robust metric.
    pub quick_samples: usize,
    pub quick_steps: usize,
    /// PGD steps used on the validation split to pick the best epoch.
    pub select_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quick_samples: 512,
            quick_steps: 7,
            select_steps: 20,
            batch_size: 256,
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub threat: ThreatModel,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub eval: EvalConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.threat.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        if self.data.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.model.classes != self.data.classes {
            return Err(Error::Config(format!(
                "model head has {} classes but data has {}",
                self.model.classes, self.data.classes
            )));
        }
        // TOML integers are signed 64-bit; larger seeds would not survive a snapshot.
        for (name, seed) in [("train.seed", self.train.seed), ("data.seed", self.data.seed), ("eval.seed", self.eval.seed)] {
            if seed > i64::MAX as u64 {
                return Err(Error::Config(format!("{name} = {seed} does not fit in a signed 64-bit integer")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides in order (last wins).
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }
}

/// Applies a single dotted-key override such as `train.beta=6` to a TOML tree.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` lacks `=`")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("empty key in override `{assignment}`")));
    }
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
