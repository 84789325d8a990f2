//! Flat `key = value` config files. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::str::FromStr;

use tmignn::model::{Ablation, ModelConfig};
use tmignn::train::TrainConfig;

pub const KEYS: [&str; 17] = [
    "dim",
    "interests",
    "layers",
    "max_step",
    "bucket_width",
    "bidirectional",
    "leaky_slope",
    "init_std",
    "ablation",
    "learning_rate",
    "lr_decay",
    "decay_step",
    "batch_size",
    "epochs",
    "lambda",
    "seed",
    "patience",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key = value", n + 1))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(format!("config line {}: unknown key `{k}`", n + 1));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        self.values
            .get(key)
            .map(|v| v.parse().map_err(|_| format!("config key `{key}`: cannot parse `{v}`")))
            .transpose()
    }

    /// Applies file values on top of `model` and `train`.
    pub fn apply(&self, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<(), String> {
        macro_rules! set {
            ($target:expr, $key:literal) => {
                if let Some(v) = self.get($key)? {
                    $target = v;
                }
            };
        }
        set!(model.dim, "dim");
        set!(model.interests, "interests");
        set!(model.layers, "layers");
        set!(model.max_step, "max_step");
        set!(model.bucket_width, "bucket_width");
        set!(model.bidirectional, "bidirectional");
        set!(model.leaky_slope, "leaky_slope");
        set!(model.init_std, "init_std");
        if let Some(label) = self.values.get("ablation") {
            model.ablation = parse_ablation(label)?;
        }
        set!(train.learning_rate, "learning_rate");
        set!(train.lr_decay, "lr_decay");
        set!(train.decay_step, "decay_step");
        set!(train.batch_size, "batch_size");
        set!(train.epochs, "epochs");
        set!(train.lambda, "lambda");
        set!(train.seed, "seed");
        if let Some(p) = self.get("patience")? {
            train.patience = Some(p);
        }
        Ok(())
    }
}

pub fn parse_ablation(label: &str) -> Result<Ablation, String> {
    Ablation::from_label(label).ok_or_else(|| {
        format!(
            "unknown ablation `{label}` (expected one of {})",
            Ablation::VARIANTS.join(", ")
        )
    })
}
