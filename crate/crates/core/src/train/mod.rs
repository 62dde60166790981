//! The training loop: patch sampling, augmentation, the combined loss and
//! SGD under the polynomial schedule.

pub mod augment;
pub mod strategy;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest, Checkpoint, ModelConfig};
use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::{ParamStore, Tape, Tensor};
use crate::optim::{OptimizerConfig, Sgd, SgdState};
use crate::segnet::{Mode, SegModel, SegNetConfig};
use crate::volume::{labels_to_regions, Foreground, LabelMap, MultiModalVolume, Region};

pub use augment::{augment, AugmentationConfig};
pub use strategy::{run_strategy, Registry, StrategyKind, StrategyOutcome, StrategySpec, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub batch_size: usize,
    /// Probability that a patch is centred on a tumour voxel.
    pub foreground_bias: f64,
    /// Steps per epoch; epochs are a fixed step count, not dataset passes.
    pub steps_per_epoch: usize,
    pub normalization: Foreground,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            augmentation: AugmentationConfig::default(),
            batch_size: 2,
            foreground_bias: 0.5,
            steps_per_epoch: 50,
            normalization: Foreground::Nonzero,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return Err(Error::InvalidConfig(format!(
                "foreground_bias {} outside [0, 1]",
                self.foreground_bias
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig("steps_per_epoch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn epochs_to_steps(&self, epochs: usize) -> usize {
        epochs * self.steps_per_epoch
    }
}

/// Crops a patch. With probability `foreground_bias` its centre voxel
/// (index `patch / 2` on each axis) is a random tumour voxel; otherwise the
/// start is uniform, or centred when the patch is larger than the volume.
/// Out-of-volume voxels are zero.
pub fn sample_patch(
    image: &MultiModalVolume,
    labels: &LabelMap,
    patch_shape: [usize; 3],
    foreground_bias: f64,
    rng: &mut impl Rng,
) -> Result<(MultiModalVolume, LabelMap)> {
    let shape = image.geometry().shape;
    let want_fg: f64 = rng.random();
    let start: [isize; 3] = if want_fg < foreground_bias && labels.has_tumor() {
        let tumour: Vec<usize> = labels
            .volume()
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i)
            .collect();
        let centre = labels.geometry().coords(tumour[rng.random_range(0..tumour.len())]);
        [0, 1, 2].map(|a| centre[a] as isize - (patch_shape[a] / 2) as isize)
    } else {
        [0, 1, 2].map(|a| {
            if patch_shape[a] <= shape[a] {
                rng.random_range(0..=shape[a] - patch_shape[a]) as isize
            } else {
                -(((patch_shape[a] - shape[a]) / 2) as isize)
            }
        })
    };
    let img = image.try_map(|c| c.crop(start, patch_shape, 0.0))?;
    let lab = LabelMap::new(labels.volume().crop(start, patch_shape, 0)?)?;
    Ok((img, lab))
}

/// `[N, 4, D, H, W]` network input.
pub fn image_tensor(images: &[&MultiModalVolume]) -> Result<Tensor> {
    let shape = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?
        .geometry()
        .shape;
    let mut data = Vec::with_capacity(images.len() * 4 * shape.iter().product::<usize>());
    for img in images {
        if img.geometry().shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes shapes {shape:?} and {:?}",
                img.geometry().shape
            )));
        }
        for c in img.channels() {
            data.extend(c.data().iter().map(|&v| v as f64));
        }
    }
    Tensor::new([vec![images.len(), 4], shape.to_vec()].concat(), data)
}

/// `[N, 3, D, H, W]` binary region targets in ET, TC, WT order.
pub fn region_tensor(labels: &[&LabelMap]) -> Result<Tensor> {
    let shape = labels
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?
        .geometry()
        .shape;
    let mut data = Vec::with_capacity(labels.len() * 3 * shape.iter().product::<usize>());
    for l in labels {
        if l.geometry().shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes shapes {shape:?} and {:?}",
                l.geometry().shape
            )));
        }
        let regions = labels_to_regions(l);
        for r in Region::ALL {
            data.extend(regions.get(r).data().iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
    }
    Tensor::new([vec![labels.len(), 3], shape.to_vec()].concat(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_term: f64,
    pub bce_term: f64,
    /// Soft Dice of the full-resolution head on this step's batch.
    pub batch_dice: f64,
}

pub const LOG_HEADER: &str = "step,lr,loss,dice_term,bce_term";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub phase: String,
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn new(phase: impl Into<String>) -> Self {
        TrainingLog {
            phase: phase.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&LogEntry> {
        self.entries.last()
    }

    /// Mean batch Dice over the last `n` steps.
    pub fn recent_dice(&self, n: usize) -> Option<f64> {
        let tail = &self.entries[self.entries.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|e| e.batch_dice).sum::<f64>() / tail.len() as f64)
    }

    /// Values use the shortest round-trip formatting, so equal logs give
    /// equal text.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{}", e.step, e.lr, e.loss, e.dice_term, e.bce_term);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        digest(&self.to_csv())
    }
}

/// Digest over several phase logs in order.
pub fn logs_digest(logs: &[TrainingLog]) -> [u8; 32] {
    let text: String = logs.iter().map(|l| format!("# {}\n{}", l.phase, l.to_csv())).collect();
    digest(&text)
}

pub struct TrainRun {
    pub model: SegModel,
    pub log: TrainingLog,
    pub optimizer: SgdState,
}

/// Runs `steps` optimizer steps. Every random draw comes from a ChaCha
/// stream seeded with `seed`, so equal inputs give bit-identical results.
pub fn train(model: SegModel, dataset: &[Case], config: &TrainingConfig, steps: usize, seed: u64) -> Result<TrainRun> {
    train_phase(model, dataset, config, steps, seed, "train")
}

fn train_phase(
    mut model: SegModel,
    dataset: &[Case],
    config: &TrainingConfig,
    steps: usize,
    seed: u64,
    phase: &str,
) -> Result<TrainRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::MissingInput("training dataset is empty".into()));
    }
    let mut log = TrainingLog::new(phase);
    let mut opt = Sgd::new(config.optimizer.clone())?;
    if steps == 0 {
        return Ok(TrainRun { model, log, optimizer: opt.state });
    }
    let cases: Vec<Case> = dataset.iter().map(|c| c.normalized(config.normalization)).collect();
    let patch = model.config().patch_shape;
    let heads = model.config().deep_supervision_heads + 1;
    let weights = config.loss.weights(heads)?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed ^ config.augmentation.seed);
    aug_rng.set_stream(1);

    for step in 0..steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let case = &cases[sample_rng.random_range(0..cases.len())];
            let (img, lab) = sample_patch(&case.image, &case.labels, patch, config.foreground_bias, &mut sample_rng)?;
            batch.push(augment(&img, &lab, &config.augmentation, &mut aug_rng)?);
        }
        let input = image_tensor(&batch.iter().map(|b| &b.0).collect::<Vec<_>>())?;
        let target = region_tensor(&batch.iter().map(|b| &b.1).collect::<Vec<_>>())?;
        let targets = crate::loss::deep_supervision_targets(&target, heads);

        let mut tape = Tape::new();
        let x = tape.constant(input);
        let graph = model.forward(&mut tape, x, Mode::Train, true)?;
        let mut dice_terms = Vec::with_capacity(heads);
        let mut bce_terms = Vec::with_capacity(heads);
        for ((&out, t), &w) in graph.outputs.iter().zip(&targets).zip(&weights) {
            let d = tape.soft_dice(out, t, config.loss.dice_mode, config.loss.dice_smooth)?;
            let b = tape.bce(out, t)?;
            dice_terms.push((d, -w));
            bce_terms.push((b, w));
        }
        let dice_term = tape.linear(&dice_terms, weights.iter().sum());
        let bce_term = tape.linear(&bce_terms, 0.0);
        let loss = tape.linear(&[(dice_term, 1.0), (bce_term, 1.0)], 0.0);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let batch_dice = tape.value(dice_terms[0].0).item();

        let mut grads = tape.backward(loss);
        let mut g = ParamStore::new();
        for (name, var) in graph.params.iter() {
            g.insert(name, grads.take(var).expect("every parameter is reached"));
        }
        model.update_running_stats(&tape, &graph);
        let lr = opt.step(model.params_mut(), g, step, steps)?;
        log.entries.push(LogEntry {
            step,
            lr,
            loss: value,
            dice_term: tape.value(dice_term).item(),
            bce_term: tape.value(bce_term).item(),
            batch_dice,
        });
    }
    Ok(TrainRun { model, log, optimizer: opt.state })
}

/// Continues training from a checkpoint with a fresh optimizer and a poly
/// schedule spanning `steps`. The checkpoint must hold a model of the
/// `requested` configuration.
pub fn fine_tune(
    checkpoint: &Checkpoint,
    requested: &SegNetConfig,
    dataset: &[Case],
    config: &TrainingConfig,
    steps: usize,
    seed: u64,
) -> Result<TrainRun> {
    match &checkpoint.config {
        ModelConfig::Seg(c) if c == requested => {}
        ModelConfig::Seg(c) => {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {c:?}, fine-tuning asked for {requested:?}"
            )))
        }
        ModelConfig::Sr(_) => return Err(Error::Checkpoint("cannot fine-tune a super-resolution checkpoint".into())),
    }
    let model = checkpoint.seg_model()?;
    train_phase(model, dataset, config, steps, seed, "fine_tune")
}
