use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};
use startdet::datagen::{GrammarSpec, SyntheticConfig};
use startdet::evalkit::EvalConfig;
use startdet::model::{LossKind, TrainConfig};

use crate::CliError;

/// Keys of the `train` section that only affect the structured losses.
const STRUCTURED_KEYS: [&str; 4] = ["lambda", "weights", "matching", "wasserstein"];

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory holding `manifest.json`.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.starts.json` files produced by `predict`.
    pub predictions: Option<PathBuf>,
    pub grammar: GrammarSpec,
    pub synthetic: SyntheticConfig,
    pub train: Map<String, Value>,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), e.line())))
    }

    /// Training settings with `loss` resolved first so that an unset `lambda`
    /// falls back to the schedule of the chosen loss.
    pub fn train_config(&self, loss_flag: Option<LossKind>) -> Result<TrainConfig, CliError> {
        let mut section = self.train.clone();
        if let Some(loss) = loss_flag {
            section.insert("loss".into(), Value::String(loss.name().into()));
        }
        let mut cfg: TrainConfig = serde_json::from_value(Value::Object(section.clone()))
            .map_err(|e| CliError::Usage(format!("train section: {e}")))?;
        if !section.contains_key("lambda") {
            cfg.lambda = cfg.loss.default_schedule();
        }
        if section
            .get("adam")
            .and_then(|a| a.get("learning_rate"))
            .is_none()
        {
            cfg.adam.learning_rate = cfg.loss.default_learning_rate();
        }
        if cfg.loss == LossKind::Mse {
            let ignored: Vec<&str> = STRUCTURED_KEYS
                .into_iter()
                .filter(|k| section.contains_key(*k))
                .collect();
            if !ignored.is_empty() {
                eprintln!(
                    "warning: loss is mse; ignoring structured-loss settings: {}",
                    ignored.join(", ")
                );
            }
        }
        Ok(cfg)
    }
}

/// One non-negative offset; clap splits the list on commas.
pub fn parse_offset(text: &str) -> Result<f64, String> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| format!("bad offset '{text}'"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("offset '{text}' must be non-negative"))
    }
}

pub fn parse_loss(text: &str) -> Result<LossKind, String> {
    text.parse().map_err(|e: startdet::Error| e.to_string())
}
