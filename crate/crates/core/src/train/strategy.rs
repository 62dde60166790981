//! The three data-utilization strategies, each run for a list of network
//! variants (normally the baseline and the expanded network).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{fine_tune, logs_digest, train_phase, TrainingConfig, TrainingLog};
use crate::checkpoint::Checkpoint;
use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::segnet::{SegModel, SegNetConfig};
use crate::srnet::{sr_enhance_case, SRModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Pretrain on the source domain, then fine-tune on the target domain.
    #[serde(rename = "S_GLI_to_SSA")]
    GliToSsa,
    /// Target domain only.
    #[serde(rename = "S_SSA")]
    Ssa,
    /// Target domain after 2× super-resolution.
    #[serde(rename = "S_srSSA")]
    SrSsa,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::GliToSsa, StrategyKind::Ssa, StrategyKind::SrSsa];

    pub fn tag(self) -> &'static str {
        match self {
            StrategyKind::GliToSsa => "S_GLI_to_SSA",
            StrategyKind::Ssa => "S_SSA",
            StrategyKind::SrSsa => "S_srSSA",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == tag)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy {tag:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Source-domain dataset name; required for [`StrategyKind::GliToSsa`].
    #[serde(default)]
    pub pretrain: Option<String>,
    pub target: String,
    /// Super-resolution model name; required for [`StrategyKind::SrSsa`].
    #[serde(default)]
    pub sr_model: Option<String>,
    #[serde(default)]
    pub pretrain_steps: usize,
    #[serde(default)]
    pub target_steps: usize,
    #[serde(default)]
    pub pretrain_optimizer: OptimizerConfig,
    #[serde(default)]
    pub target_optimizer: OptimizerConfig,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, target: impl Into<String>) -> Self {
        StrategySpec {
            kind,
            pretrain: None,
            target: target.into(),
            sr_model: None,
            pretrain_steps: 0,
            target_steps: 0,
            pretrain_optimizer: OptimizerConfig::default(),
            target_optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StrategyKind::GliToSsa if self.pretrain.is_none() => Err(Error::MissingInput(
                "S_GLI_to_SSA needs a pretraining dataset".into(),
            )),
            StrategyKind::SrSsa if self.sr_model.is_none() => {
                Err(Error::MissingInput("S_srSSA needs a super-resolution model".into()))
            }
            _ => {
                self.pretrain_optimizer.validate()?;
                self.target_optimizer.validate()
            }
        }
    }
}

/// Named datasets and super-resolution models a strategy can refer to.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    pub datasets: BTreeMap<String, Vec<Case>>,
    pub sr_models: BTreeMap<String, SRModel>,
}

impl Registry {
    pub fn dataset(&self, name: &str) -> Result<&[Case]> {
        self.datasets
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingInput(format!("dataset {name:?} is not registered")))
    }

    pub fn sr_model(&self, name: &str) -> Result<&SRModel> {
        self.sr_models
            .get(name)
            .ok_or_else(|| Error::MissingInput(format!("super-resolution model {name:?} is not registered")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: SegNetConfig,
}

impl Variant {
    pub fn new(name: impl Into<String>, config: SegNetConfig) -> Self {
        Variant { name: name.into(), config }
    }

    /// The `baseline` and `expanded` pair.
    pub fn pair(baseline: SegNetConfig, expanded: SegNetConfig) -> Vec<Variant> {
        vec![Variant::new("baseline", baseline), Variant::new("expanded", expanded)]
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: String,
    pub checkpoint: Checkpoint,
    /// One log per phase, in order.
    pub logs: Vec<TrainingLog>,
}

#[derive(Clone, Debug)]
pub struct StrategyOutcome {
    pub kind: StrategyKind,
    pub results: Vec<VariantResult>,
}

/// Upscales every case of a dataset with the SR network.
pub fn sr_enhance_dataset(model: &SRModel, cases: &[Case]) -> Result<Vec<Case>> {
    cases
        .iter()
        .map(|c| {
            let (image, labels) = sr_enhance_case(model, &c.image, &c.labels)?;
            Case::new(c.id.clone(), image, labels)
        })
        .collect()
}

/// Trains every variant under `spec` and returns one checkpoint per variant,
/// tagged with the strategy. Models are initialised from `seed`.
pub fn run_strategy(
    spec: &StrategySpec,
    registry: &Registry,
    variants: &[Variant],
    training: &TrainingConfig,
    seed: u64,
) -> Result<StrategyOutcome> {
    spec.validate()?;
    let target = registry.dataset(&spec.target)?;
    let pretrain = spec.pretrain.as_deref().map(|n| registry.dataset(n)).transpose()?;
    let enhanced = match (spec.kind, spec.sr_model.as_deref()) {
        (StrategyKind::SrSsa, Some(name)) => Some(sr_enhance_dataset(registry.sr_model(name)?, target)?),
        _ => None,
    };
    let with_opt = |opt: &OptimizerConfig| TrainingConfig {
        optimizer: opt.clone(),
        ..training.clone()
    };
    let tag = spec.kind.tag();
    let mut results = Vec::with_capacity(variants.len());
    for variant in variants {
        let model = SegModel::build(variant.config.clone(), seed)?;
        let target_cfg = with_opt(&spec.target_optimizer);
        let (run, logs) = match spec.kind {
            StrategyKind::GliToSsa => {
                let source = pretrain.expect("validated");
                let pre = train_phase(model, source, &with_opt(&spec.pretrain_optimizer), spec.pretrain_steps, seed, "pretrain")?;
                let ckpt = Checkpoint::from_seg(&pre.model, tag, &pre.optimizer, pre.log.digest());
                let ft = fine_tune(&ckpt, &variant.config, target, &target_cfg, spec.target_steps, seed.wrapping_add(1))?;
                let logs = vec![pre.log, ft.log.clone()];
                (ft, logs)
            }
            StrategyKind::Ssa => {
                let run = train_phase(model, target, &target_cfg, spec.target_steps, seed, "train")?;
                let logs = vec![run.log.clone()];
                (run, logs)
            }
            StrategyKind::SrSsa => {
                let data = enhanced.as_deref().expect("validated");
                let run = train_phase(model, data, &target_cfg, spec.target_steps, seed, "train")?;
                let logs = vec![run.log.clone()];
                (run, logs)
            }
        };
        let checkpoint = Checkpoint::from_seg(&run.model, tag, &run.optimizer, logs_digest(&logs));
        results.push(VariantResult {
            variant: variant.name.clone(),
            checkpoint,
            logs,
        });
    }
    Ok(StrategyOutcome { kind: spec.kind, results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::ModelConfig;
    use crate::srnet::SRNetConfig;
    use crate::train::tests::{cases, tiny_config};

    fn variants() -> Vec<Variant> {
        let base = tiny_config();
        let expanded = SegNetConfig {
            base_filters: 8,
            max_filters: 16,
            ..base.clone()
        }
        .into_expanded(16);
        Variant::pair(base, expanded)
    }

    fn registry() -> Registry {
        let mut r = Registry::default();
        r.datasets.insert("gli".into(), cases(2, 12));
        r.datasets.insert("ssa".into(), cases(1, 10));
        r.sr_models.insert(
            "sr".into(),
            SRModel::zeroed(SRNetConfig { filters: 2, ..SRNetConfig::default() }).unwrap(),
        );
        r
    }

    #[test]
    fn kind_tags_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyKind::from_tag(k.tag()).unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.tag()));
        }
        assert!(StrategyKind::from_tag("S_X").is_err());
    }

    #[test]
    fn zero_step_target_only_gives_fresh_tagged_checkpoints() {
        let spec = StrategySpec::new(StrategyKind::Ssa, "ssa");
        let v = variants();
        let out = run_strategy(&spec, &registry(), &v, &TrainingConfig::default(), 3).unwrap();
        assert_eq!(out.results.len(), 2);
        for (r, v) in out.results.iter().zip(&v) {
            assert_eq!(r.checkpoint.strategy, "S_SSA");
            assert_eq!(r.checkpoint.config, ModelConfig::Seg(v.config.clone()));
            let fresh = Checkpoint::from_seg(&SegModel::build(v.config.clone(), 3).unwrap(), "S_SSA", &Default::default(), [0; 32]);
            assert_eq!(r.checkpoint.params, fresh.params);
        }
        assert_ne!(out.results[0].checkpoint.params.numel(), out.results[1].checkpoint.params.numel());
    }

    #[test]
    fn missing_references_are_reported() {
        let r = registry();
        let t = TrainingConfig::default();
        let spec = StrategySpec::new(StrategyKind::GliToSsa, "ssa");
        assert!(matches!(run_strategy(&spec, &r, &variants(), &t, 0), Err(Error::MissingInput(_))));
        let spec = StrategySpec::new(StrategyKind::SrSsa, "ssa");
        assert!(matches!(run_strategy(&spec, &r, &variants(), &t, 0), Err(Error::MissingInput(_))));
        let spec = StrategySpec { sr_model: Some("none".into()), ..spec };
        assert!(matches!(run_strategy(&spec, &r, &variants(), &t, 0), Err(Error::MissingInput(_))));
        let spec = StrategySpec::new(StrategyKind::Ssa, "nope");
        assert!(matches!(run_strategy(&spec, &r, &variants(), &t, 0), Err(Error::MissingInput(_))));
    }

    #[test]
    fn pretrain_then_fine_tune_resets_the_schedule() {
        let spec = StrategySpec {
            pretrain: Some("gli".into()),
            pretrain_steps: 2,
            target_steps: 2,
            ..StrategySpec::new(StrategyKind::GliToSsa, "ssa")
        };
        let out = run_strategy(&spec, &registry(), &variants()[..1], &TrainingConfig::default(), 0).unwrap();
        let logs = &out.results[0].logs;
        assert_eq!(logs.iter().map(|l| l.phase.as_str()).collect::<Vec<_>>(), ["pretrain", "fine_tune"]);
        for l in logs {
            assert_eq!(l.entries.len(), 2);
            assert_eq!(l.entries[0].lr, 0.01);
        }
        assert_eq!(out.results[0].checkpoint.log_digest, logs_digest(logs));
    }

    #[test]
    fn super_resolution_strategy_trains_on_doubled_volumes() {
        let r = registry();
        let enhanced = sr_enhance_dataset(r.sr_model("sr").unwrap(), r.dataset("ssa").unwrap()).unwrap();
        assert_eq!(enhanced[0].image.geometry().shape, [20; 3]);
        assert_eq!(enhanced[0].labels.geometry().shape, [20; 3]);
        let spec = StrategySpec {
            sr_model: Some("sr".into()),
            target_steps: 1,
            ..StrategySpec::new(StrategyKind::SrSsa, "ssa")
        };
        let out = run_strategy(&spec, &r, &variants()[..1], &TrainingConfig::default(), 0).unwrap();
        assert_eq!(out.results[0].checkpoint.strategy, "S_srSSA");
        assert_eq!(out.results[0].logs[0].len(), 1);
    }
}
