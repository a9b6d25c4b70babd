//! Run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compose::{plan_layout, AugConfig, LayoutConfig};
use crate::error::{Error, Result};
use crate::harness::{Experiment, ToyModelConfig};
use crate::rope::{RopeConfig, ThetaSchedule};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoPaths {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a command needs. Loaded from JSON, then overridden by flags.
///
/// `rope` and `seed` are authoritative: [`RunConfig::resolve`] copies them
/// into the model and toy-experiment sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub num_dynimg: usize,
    pub layout: LayoutConfig,
    pub aug: AugConfig,
    pub rope: RopeConfig,
    pub harness: ToyModelConfig,
    /// Desk-scale training setup used by `train` and `attn`.
    pub toy: Experiment,
    pub paths: IoPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_dynimg: 4,
            layout: LayoutConfig::default(),
            aug: AugConfig::default(),
            rope: RopeConfig::default(),
            harness: ToyModelConfig::default(),
            toy: Experiment::toy(),
            paths: IoPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::InvalidConfig(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::parse(&bytes)
    }

    /// Propagate the shared fields into the nested sections.
    pub fn resolve(mut self) -> Self {
        self.harness.rope = self.rope;
        self.harness.seed = self.seed;
        self.toy.model.rope = self.rope;
        self.toy.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_dynimg == 0 {
            return Err(Error::InvalidConfig("num_dynimg must be at least 1".into()));
        }
        plan_layout(&self.layout)?;
        self.aug.validate()?;
        self.harness.validate()?;
        ThetaSchedule::new(self.harness.head_dim(), self.rope)?;
        self.toy.validate()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::parse(b"{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.layout.n_prompts = 6;
        let back = RunConfig::parse(&serde_json::to_vec(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse(br#"{"sed": 1}"#), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn resolve_shares_rope_and_seed() {
        let c = RunConfig { seed: 4, rope: RopeConfig::one_d(), ..Default::default() }.resolve();
        assert_eq!(c.toy.model.rope, RopeConfig::one_d());
        assert_eq!(c.harness.seed, 4);
        assert_eq!(c.toy.seed, 4);
    }

    #[test]
    fn odd_prompt_count_fails_validation() {
        let mut c = RunConfig::default();
        c.layout.n_prompts = 5;
        assert!(matches!(c.validate(), Err(Error::PatchBoundaryViolation { .. })));
    }
}
