use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{parse_bool, parse_kv, parse_num, ModelConfig};

/// Hyperparameters of one training run. The model is configured by the
/// embedded [`ModelConfig`], whose `seed` also drives batch sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// `None` trains on the built-in desk corpus.
    pub corpus_path: Option<PathBuf>,
    pub context_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Windows of the validation split scored at every step.
    pub val_windows: usize,
    /// Ends the run at the first step whose training loss is at or below
    /// this value.
    pub stop_loss: Option<f64>,
    /// Fill `wall_ms` with elapsed time. Off by default so that reruns
    /// produce identical files.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            corpus_path: None,
            context_len: 128,
            batch_size: 4,
            steps: 500,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            val_windows: 1,
            stop_loss: None,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    /// Parses `key=value` lines. Training keys are listed in
    /// [`TrainConfig::to_kv`]; any other key is passed to the model
    /// configuration.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus_path" => self.corpus_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "context_len" => self.context_len = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "val_windows" => self.val_windows = parse_num(key, value)?,
            "stop_loss" => {
                self.stop_loss = match value {
                    "" | "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "record_wall_clock" => self.record_wall_clock = parse_bool(key, value)?,
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.context_len < 2 {
            return Err(Error::Config(format!("context_len must be at least 2, got {}", self.context_len)));
        }
        if self.batch_size == 0 || self.val_windows == 0 {
            return Err(Error::Config("batch_size and val_windows must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        Ok(())
    }

    /// Every key, model keys included, one per line.
    pub fn to_kv(&self) -> String {
        let path = self
            .corpus_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let stop = self.stop_loss.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        let train = [
            ("corpus_path", path),
            ("context_len", self.context_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("val_windows", self.val_windows.to_string()),
            ("stop_loss", stop),
            ("record_wall_clock", self.record_wall_clock.to_string()),
        ];
        let mut out: String = train.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.push_str(&self.model.to_kv());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_parses_back() {
        let mut cfg = TrainConfig {
            steps: 7,
            stop_loss: Some(2.5),
            corpus_path: Some("data/x.txt".into()),
            ..TrainConfig::default()
        };
        cfg.model.n_layers = 3;
        assert_eq!(TrainConfig::from_kv_str(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["context_len=1", "beta2=1.0", "learning_rate=-1", "batch_size=0", "colour=blue"] {
            assert!(matches!(TrainConfig::from_kv_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
