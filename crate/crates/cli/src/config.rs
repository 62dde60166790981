//! The TOML run configuration. Every section is optional and falls back to
//! the desk-scale defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tumorseg::infer::InferenceConfig;
use tumorseg::metrics::MetricConfig;
use tumorseg::optim::OptimizerConfig;
use tumorseg::phantom::{DomainProfile, PhantomSpec};
use tumorseg::segnet::SegNetConfig;
use tumorseg::srnet::SRNetConfig;
use tumorseg::train::{StrategyKind, TrainingConfig};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Clean source-domain dataset used for pretraining and SR pairs.
    pub source: Option<PathBuf>,
    /// Target-domain dataset.
    pub target: Option<PathBuf>,
    pub sr_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub count: usize,
    pub spec: PhantomSpec,
    /// Applied after generation; the identity profile keeps clean cases.
    pub profile: DomainProfile,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 4,
            spec: PhantomSpec::default(),
            profile: DomainProfile::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegNetPair {
    pub baseline: SegNetConfig,
    pub expanded: SegNetConfig,
}

impl Default for SegNetPair {
    fn default() -> Self {
        SegNetPair {
            baseline: SegNetConfig::default(),
            expanded: SegNetConfig::desk_expanded(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrTraining {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Degradation producing the low-resolution half of each pair.
    pub profile: DomainProfile,
}

impl Default for SrTraining {
    fn default() -> Self {
        SrTraining {
            epochs: 2,
            optimizer: OptimizerConfig {
                lr0: 1e-3,
                momentum: 0.9,
                ..OptimizerConfig::default()
            },
            profile: DomainProfile::sr_pair(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub pretrain_steps: usize,
    pub target_steps: usize,
    pub pretrain_optimizer: OptimizerConfig,
    pub target_optimizer: OptimizerConfig,
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            kind: StrategyKind::GliToSsa,
            pretrain_steps: 100,
            target_steps: 100,
            pretrain_optimizer: OptimizerConfig::default(),
            target_optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub phantom: PhantomSection,
    pub segnet: SegNetPair,
    pub srnet: SRNetConfig,
    pub sr_training: SrTraining,
    pub training: TrainingConfig,
    pub strategy: StrategySection,
    pub inference: InferenceConfig,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            data: DataPaths::default(),
            phantom: PhantomSection::default(),
            segnet: SegNetPair::default(),
            srnet: SRNetConfig::default(),
            sr_training: SrTraining::default(),
            training: TrainingConfig::default(),
            strategy: StrategySection::default(),
            inference: InferenceConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Checks every section, so a bad value fails before any output exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |r: tumorseg::Result<()>| r.map_err(|e| CliError::Usage(e.to_string()));
        cfg(self.phantom.spec.validate())?;
        cfg(self.phantom.profile.validate())?;
        cfg(self.segnet.baseline.validate())?;
        cfg(self.segnet.expanded.validate())?;
        cfg(self.srnet.validate())?;
        cfg(self.sr_training.optimizer.validate())?;
        cfg(self.sr_training.profile.validate())?;
        cfg(self.training.validate())?;
        cfg(self.strategy.pretrain_optimizer.validate())?;
        cfg(self.strategy.target_optimizer.validate())?;
        cfg(self.inference.validate())?;
        if self.sr_training.profile.downsample_factor != 2 {
            return Err(CliError::Usage("sr_training.profile.downsample_factor must be 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::parse(
            r#"
seed = 7
[phantom]
count = 2
[phantom.spec]
shape = [16, 16, 16]
[segnet.baseline]
base_filters = 4
norm = "group"
[strategy]
kind = "S_SSA"
target_steps = 5
[inference.weighting]
kind = "uniform"
"#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.phantom.spec.shape, [16; 3]);
        assert_eq!(c.segnet.baseline.base_filters, 4);
        assert_eq!(c.strategy.kind, StrategyKind::Ssa);
        assert_eq!(c.inference.weighting, tumorseg::infer::WindowWeighting::Uniform);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[training]\nbatch = 2").is_err());
        assert!(RunConfig::parse("[strategy]\nkind = \"S_X\"").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig::parse("[inference]\nthreshold = 1.5").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse("[segnet.expanded]\nlevels = 0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
