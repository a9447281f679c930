use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxtag::model::ModelConfig;
use voxtag::perturb::PerturbConfig;
use voxtag::synthdata::SynthSpec;
use voxtag::train::{ProbeConfig, TrainConfig};

/// Every tunable knob of a run, one section per stage. Missing keys take the stage
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub synth: SynthSpec,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Points every random stream at one seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.perturb.seed = seed;
        self.synth.seed = seed;
        self.probe.seed = seed;
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.perturb.validate().map_err(|e| e.to_string())?;
        self.synth.validate().map_err(|e| e.to_string())?;
        if self.probe.hidden == 0 || self.probe.epochs == 0 || !(self.probe.lr > 0.0) {
            return Err("probe needs positive hidden, epochs and lr".into());
        }
        if !(self.probe.fit_fraction > 0.0 && self.probe.fit_fraction < 1.0) {
            return Err("probe.fit_fraction must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"hidden_dim": 16}, "train": {"use_grl": true}}"#).unwrap();
        assert_eq!(c.model.hidden_dim, 16);
        assert_eq!(c.model.encoder_layers, ModelConfig::default().encoder_layers);
        assert!(c.train.use_grl);
        assert_eq!(c.train.average_last, 7);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1.0}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"perturb": {"p": 0.5, "q": 1}}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.set_seed(42);
        assert_eq!((c.train.seed, c.perturb.seed, c.synth.seed, c.probe.seed), (42, 42, 42, 42));
    }
}
