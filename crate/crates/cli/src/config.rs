//! One JSON config file drives every subcommand; flags override file values
//! and `--print-config` echoes the fully resolved result so a run can be
//! reproduced from its own output.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mdunet::backbone::ModelConfig;
use mdunet::datapipe::SynthConfig;
use mdunet::losses::LossWeights;
use mdunet::trainer::TrainSchedule;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    /// One beta per decoder; `null` means uniform 1.0.
    pub betas: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            betas: None,
        }
    }
}

impl LossConfig {
    pub fn resolve(&self, n_decoders: usize) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            betas: self.betas.clone().unwrap_or_else(|| vec![1.0; n_decoders]),
            cross_enabled: false, // the trainer gates this by epoch
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub loss: LossConfig,
    pub synth: SynthConfig,
    /// CT intensity window applied by `preprocess` on CT cases.
    pub ct_window: [f32; 2],
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Number of hyperparameter-ensemble runs; `null` trains a single model.
    pub ensemble: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: TrainSchedule::default(),
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            ct_window: [0.0, 100.0],
            data: None,
            out: None,
            ensemble: None,
        }
    }
}

/// Command-line overrides; every set flag wins over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub cross_enable_epoch: Option<usize>,
    pub alpha: Option<f64>,
    pub betas: Option<Vec<f64>>,
    pub ensemble: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(v) = &ov.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &ov.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = ov.seed {
            self.schedule.seed = v;
            self.synth.seed = v;
        }
        if let Some(v) = ov.epochs {
            self.schedule.total_epochs = v;
        }
        if let Some(v) = ov.cross_enable_epoch {
            self.schedule.cross_enable_epoch = v;
        }
        if let Some(v) = ov.alpha {
            self.loss.alpha = v;
        }
        if let Some(v) = &ov.betas {
            self.loss.betas = Some(v.clone());
        }
        if let Some(v) = ov.ensemble {
            self.ensemble = Some(v);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.schedule.validate().map_err(|e| e.to_string())?;
        self.synth.validate().map_err(|e| e.to_string())?;
        self.loss
            .resolve(self.model.n_decoders)
            .validate(self.model.n_decoders)
            .map_err(|e| e.to_string())?;
        if self.ct_window[0] >= self.ct_window[1] || self.ct_window.iter().any(|v| !v.is_finite()) {
            return Err("ct_window must be (low, high) with low < high".into());
        }
        if let Some(n) = self.ensemble {
            if n == 0 {
                return Err("ensemble must be >= 1 when set".into());
            }
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_pretty_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.schedule, cfg.schedule);
        assert_eq!(back.synth, cfg.synth);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"stage_chans": [8]}}"#).is_err());
    }

    #[test]
    fn overrides_win_over_file_values() {
        let mut cfg = RunConfig::default();
        cfg.schedule.seed = 1;
        cfg.apply(&Overrides {
            seed: Some(42),
            alpha: Some(0.5),
            betas: Some(vec![1.0, 2.0, 3.0]),
            ..Default::default()
        });
        assert_eq!(cfg.schedule.seed, 42);
        assert_eq!(cfg.synth.seed, 42);
        assert_eq!(cfg.loss.alpha, 0.5);
        assert_eq!(cfg.loss.resolve(3).betas, vec![1.0, 2.0, 3.0]);
    }
}
