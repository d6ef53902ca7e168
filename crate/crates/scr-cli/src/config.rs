//! Run configuration: a flat TOML file plus command-line overrides.
//! Unknown keys are rejected so experiment records stay trustworthy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scr_core::train::{FeatureType, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // model
    pub dim: usize,
    pub num_layers: usize,
    pub semantic_k: usize,
    pub semantic_delta: f64,
    // optimization
    pub learning_rate: f64,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub feature_cycle_interval: usize,
    pub feature_types: Vec<FeatureType>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub threads: usize,
    // data
    pub datasets: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub label_budget: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            dim: t.dim,
            num_layers: t.num_layers,
            semantic_k: t.semantic_k,
            semantic_delta: t.semantic_delta,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            negatives_per_positive: t.negatives_per_positive,
            epochs: t.epochs,
            feature_cycle_interval: t.feature_cycle_interval,
            feature_types: t.feature_set,
            seed: t.seed,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            grad_clip: t.grad_clip,
            threads: t.threads,
            datasets: Vec::new(),
            out_dir: PathBuf::from("runs/default"),
            label_budget: "1.0".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            negatives_per_positive: self.negatives_per_positive,
            epochs: self.epochs,
            feature_cycle_interval: self.feature_cycle_interval,
            feature_set: self.feature_types.clone(),
            seed: self.seed,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            dim: self.dim,
            num_layers: self.num_layers,
            semantic_k: self.semantic_k,
            semantic_delta: self.semantic_delta,
            threads: self.threads,
        }
    }
}

/// `0 < f <= 1` selects a per-class fraction; a bare integer selects a fixed
/// per-class count.
pub fn parse_label_budget(s: &str) -> Result<scr_core::task::LabelBudget, String> {
    use scr_core::task::LabelBudget;
    if let Ok(n) = s.parse::<usize>() {
        if n == 0 {
            return Err("per-class label budget must be >= 1".into());
        }
        return Ok(LabelBudget::PerClass(n));
    }
    let f: f64 = s
        .parse()
        .map_err(|_| format!("label budget {s:?}: expected a fraction or an integer"))?;
    if !(f > 0.0 && f <= 1.0) {
        return Err(format!("label budget fraction {f} outside (0, 1]"));
    }
    if f == 1.0 {
        Ok(LabelBudget::All)
    } else {
        Ok(LabelBudget::Fraction(f))
    }
}
