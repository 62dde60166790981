use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use tumorseg::checkpoint::{digest, Checkpoint, ModelConfig};
use tumorseg::dataset::{
    case_id, file_name, list_cases, load_case, load_dataset, load_image, save_case, Case, DatasetManifest,
    ManifestEntry, LABEL_STEM,
};
use tumorseg::infer::{predict_case, predict_case_sr, predict_probabilities, PatchPredictor};
use tumorseg::metrics::{
    aggregate_report, evaluate_case, format_table, read_metrics_csv, summary_csv, write_metrics_csv, CaseMetrics,
    EvalReport,
};
use tumorseg::optim::SgdState;
use tumorseg::phantom::{degrade, generate_case_indexed, DomainProfile};
use tumorseg::srnet::{build_sr, make_sr_pairs, sr_enhance_case, sr_train, SRModel};
use tumorseg::train::{run_strategy, Registry, StrategyKind, StrategySpec, Variant};
use tumorseg::volume::{load_labels, save_labels, save_volume};

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::overlay::write_overlays;
use crate::{CliError, Command, GlobalArgs};

const SOURCE: &str = "source";
const TARGET: &str = "target";
const SR: &str = "sr";

pub fn run(global: &GlobalArgs, command: &Command) -> Result<(), CliError> {
    let mut config = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(out) = &global.out {
        config.out = Some(out.clone());
    }
    apply_overrides(&mut config, command)?;
    config.validate()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out`".into()))?;
    let workers = if global.deterministic { 1 } else { global.workers.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let ctx = Ctx {
        config,
        out,
        force: global.force,
        deterministic: global.deterministic,
    };
    pool.install(|| match command {
        Command::Phantom { .. } => cmd_phantom(&ctx),
        Command::SrTrain { .. } => cmd_sr_train(&ctx),
        Command::Superres { input, .. } => cmd_superres(&ctx, input),
        Command::Train { .. } => cmd_train(&ctx),
        Command::Infer {
            checkpoints,
            input,
            save_probabilities,
            ..
        } => cmd_infer(&ctx, checkpoints, input, *save_probabilities),
        Command::Eval { pred, gt, label } => cmd_eval(&ctx, pred, gt, label.as_deref()),
        Command::Report { metrics, images, pred } => cmd_report(&ctx, metrics, images.as_deref(), pred.as_deref()),
    })
}

/// Folds subcommand flags into the configuration so that validation and the
/// manifest see the effective values.
fn apply_overrides(config: &mut RunConfig, command: &Command) -> Result<(), CliError> {
    config.phantom.spec.seed = config.seed;
    match command {
        Command::Phantom { count, degraded } => {
            if let Some(n) = count {
                config.phantom.count = *n;
            }
            if *degraded {
                config.phantom.profile = DomainProfile::low_quality();
            }
            if config.phantom.profile.downsample_factor != 1 {
                return Err(CliError::Usage(
                    "phantom.profile.downsample_factor must be 1; use `superres` to change resolution".into(),
                ));
            }
        }
        Command::SrTrain { data, epochs } => {
            if let Some(d) = data {
                config.data.source = Some(d.clone());
            }
            if let Some(e) = epochs {
                config.sr_training.epochs = *e;
            }
        }
        Command::Superres { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                config.data.sr_checkpoint = Some(c.clone());
            }
        }
        Command::Train {
            strategy,
            source,
            target,
            sr_checkpoint,
            steps,
            pretrain_steps,
        } => {
            if let Some(s) = strategy {
                config.strategy.kind = StrategyKind::from_tag(s).map_err(|e| CliError::Usage(e.to_string()))?;
            }
            if let Some(p) = source {
                config.data.source = Some(p.clone());
            }
            if let Some(p) = target {
                config.data.target = Some(p.clone());
            }
            if let Some(p) = sr_checkpoint {
                config.data.sr_checkpoint = Some(p.clone());
            }
            if let Some(n) = steps {
                config.strategy.target_steps = *n;
            }
            if let Some(n) = pretrain_steps {
                config.strategy.pretrain_steps = *n;
            }
        }
        Command::Infer { sr_checkpoint, .. } => {
            if let Some(p) = sr_checkpoint {
                config.data.sr_checkpoint = Some(p.clone());
            }
        }
        Command::Eval { .. } | Command::Report { .. } => {}
    }
    Ok(())
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    force: bool,
    deterministic: bool,
}

impl Ctx {
    /// Creates the output directory, refusing to reuse a non-empty one
    /// unless forced (in which case its contents are removed).
    fn prepare_out(&self) -> Result<(), CliError> {
        if self.out.exists() {
            let non_empty = std::fs::read_dir(&self.out)?.next().is_some();
            if non_empty && !self.force {
                return Err(CliError::Usage(format!(
                    "output directory {} is not empty (use --force to replace it)",
                    self.out.display()
                )));
            }
            if non_empty {
                std::fs::remove_dir_all(&self.out)?;
            }
        }
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.config, self.deterministic)
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} does not exist", path.display())))
    }
}

fn case_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

fn cmd_phantom(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    ctx.prepare_out()?;
    let profile = &c.phantom.profile;
    let identity = *profile == DomainProfile::default();
    let cases: Vec<Case> = (0..c.phantom.count as u64)
        .into_par_iter()
        .map(|i| -> Result<Case, CliError> {
            let (mut image, labels) = generate_case_indexed(&c.phantom.spec, i)?;
            if !identity {
                image = degrade(&image, profile, case_seed(c.seed, i))?;
            }
            Ok(Case::new(format!("case_{i:04}"), image, labels)?)
        })
        .collect::<Result<_, _>>()?;
    cases
        .par_iter()
        .map(|case| save_case(&ctx.out, case).map(|_| ()))
        .collect::<tumorseg::Result<()>>()?;
    let mut notes = BTreeMap::new();
    notes.insert("seed".into(), c.seed.to_string());
    notes.insert("profile".into(), serde_json::to_string(profile).expect("serializable"));
    DatasetManifest {
        cases: cases.iter().map(|k| ManifestEntry::for_case(&k.id)).collect(),
        notes,
    }
    .write(&ctx.out)?;
    let mut m = ctx.manifest("phantom");
    m.details = json!({ "count": cases.len(), "degraded": !identity });
    m.write(&ctx.out)?;
    println!("wrote {} cases to {}", cases.len(), ctx.out.display());
    Ok(())
}

fn configured(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.clone()
        .ok_or_else(|| CliError::Usage(format!("no {what} given")))
}

fn cmd_sr_train(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let data = configured(&c.data.source, "training data (--data or data.source)")?;
    require_dir(&data, "training data")?;
    let cases = load_dataset(&data)?;
    if cases.is_empty() {
        return Err(CliError::Data(format!("no cases in {}", data.display())));
    }
    ctx.prepare_out()?;
    let images: Vec<_> = cases.iter().map(|k| &k.image).collect();
    let pairs = make_sr_pairs(&images, &c.sr_training.profile, c.seed)?;
    let model = build_sr(c.srnet.clone(), c.seed)?;
    let (model, log) = sr_train(model, &pairs, &c.sr_training.optimizer, c.sr_training.epochs)?;
    let mut csv = String::from("step,lr,loss\n");
    for s in &log {
        csv.push_str(&format!("{},{},{}\n", s.step, s.lr, s.loss));
    }
    let state = SgdState {
        step: log.len() as u64,
        ..SgdState::new()
    };
    Checkpoint::from_sr(&model, &state, digest(&csv)).save(ctx.out.join("sr.ckpt"))?;
    std::fs::write(ctx.out.join("sr_log.csv"), &csv)?;
    let mut m = ctx.manifest("sr-train");
    m.input("data", &data);
    m.details = json!({ "pairs": pairs.len(), "steps": log.len(), "final_loss": log.last().map(|s| s.loss) });
    m.write(&ctx.out)?;
    println!("trained super-resolution network on {} pairs ({} steps)", pairs.len(), log.len());
    Ok(())
}

fn load_sr(path: &Path) -> Result<SRModel, CliError> {
    require_file(path, "super-resolution checkpoint")?;
    Ok(Checkpoint::load(path)?.sr_model()?)
}

fn cmd_superres(ctx: &Ctx, input: &Path) -> Result<(), CliError> {
    let ckpt = configured(&ctx.config.data.sr_checkpoint, "super-resolution checkpoint (--checkpoint)")?;
    require_dir(input, "input")?;
    let sr = load_sr(&ckpt)?;
    let dirs = list_cases(input)?;
    ctx.prepare_out()?;
    let geometry: Vec<serde_json::Value> = dirs
        .par_iter()
        .map(|dir| -> Result<_, CliError> {
            let case = load_case(dir)?;
            let (image, labels) = sr_enhance_case(&sr, &case.image, &case.labels)?;
            let before = case.image.geometry().shape;
            let after = image.geometry().shape;
            save_case(&ctx.out, &Case::new(case.id.clone(), image, labels)?)?;
            Ok(json!({ "case": case.id, "shape_in": before, "shape_out": after }))
        })
        .collect::<Result<_, _>>()?;
    let mut notes = BTreeMap::new();
    notes.insert("upscale_factor".into(), "2".into());
    notes.insert("source".into(), input.display().to_string());
    DatasetManifest {
        cases: dirs.iter().map(|d| ManifestEntry::for_case(&case_id(d))).collect(),
        notes,
    }
    .write(&ctx.out)?;
    let mut m = ctx.manifest("superres");
    m.input("input", input);
    m.input("checkpoint", &ckpt);
    m.details = json!({ "upscale_factor": 2, "cases": geometry });
    m.write(&ctx.out)?;
    println!("enhanced {} cases", dirs.len());
    Ok(())
}

fn load_named(registry: &mut Registry, name: &str, path: &Path) -> Result<(), CliError> {
    require_dir(path, name)?;
    let cases = load_dataset(path)?;
    if cases.is_empty() {
        return Err(CliError::Data(format!("dataset {} has no cases", path.display())));
    }
    registry.datasets.insert(name.to_string(), cases);
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let kind = c.strategy.kind;
    let target = configured(&c.data.target, "target dataset (--target or data.target)")?;
    let mut registry = Registry::default();
    let mut spec = StrategySpec {
        pretrain_steps: c.strategy.pretrain_steps,
        target_steps: c.strategy.target_steps,
        pretrain_optimizer: c.strategy.pretrain_optimizer.clone(),
        target_optimizer: c.strategy.target_optimizer.clone(),
        ..StrategySpec::new(kind, TARGET)
    };
    let mut inputs = vec![("target", target.clone())];
    match kind {
        StrategyKind::GliToSsa => {
            let source = configured(&c.data.source, "pretraining dataset for S_GLI_to_SSA (--source)")?;
            load_named(&mut registry, SOURCE, &source)?;
            spec.pretrain = Some(SOURCE.into());
            inputs.push(("source", source));
        }
        StrategyKind::SrSsa => {
            let ckpt = configured(&c.data.sr_checkpoint, "super-resolution checkpoint for S_srSSA (--sr-checkpoint)")?;
            registry.sr_models.insert(SR.into(), load_sr(&ckpt)?);
            spec.sr_model = Some(SR.into());
            inputs.push(("sr_checkpoint", ckpt));
        }
        StrategyKind::Ssa => {}
    }
    load_named(&mut registry, TARGET, &target)?;
    ctx.prepare_out()?;
    let variants = Variant::pair(c.segnet.baseline.clone(), c.segnet.expanded.clone());
    let outcome = run_strategy(&spec, &registry, &variants, &c.training, c.seed)?;
    let mut details = Vec::new();
    for r in &outcome.results {
        let ckpt_name = format!("{}.ckpt", r.variant);
        r.checkpoint.save(ctx.out.join(&ckpt_name))?;
        let mut phases = Vec::new();
        for log in &r.logs {
            let name = format!("{}_{}.csv", r.variant, log.phase);
            log.write_csv(ctx.out.join(&name))?;
            phases.push(json!({
                "phase": log.phase,
                "steps": log.len(),
                "log": name,
                "final_loss": log.last().map(|e| e.loss),
            }));
        }
        details.push(json!({ "variant": r.variant, "checkpoint": ckpt_name, "phases": phases }));
    }
    let mut m = ctx.manifest("train");
    for (name, path) in &inputs {
        m.input(name, path);
    }
    m.details = json!({ "strategy": kind.tag(), "variants": details });
    m.write(&ctx.out)?;
    println!("trained {} variants under {}", outcome.results.len(), kind.tag());
    Ok(())
}

fn cmd_infer(ctx: &Ctx, checkpoints: &[PathBuf], input: &Path, save_probs: bool) -> Result<(), CliError> {
    let c = &ctx.config;
    require_dir(input, "input")?;
    let mut models = Vec::with_capacity(checkpoints.len());
    let mut strategies = Vec::new();
    for path in checkpoints {
        require_file(path, "checkpoint")?;
        let ckpt = Checkpoint::load(path)?;
        if !matches!(ckpt.config, ModelConfig::Seg(_)) {
            return Err(CliError::Usage(format!("{} is not a segmentation checkpoint", path.display())));
        }
        strategies.push(ckpt.strategy.clone());
        models.push(ckpt.seg_model()?);
    }
    let sr_tag = StrategyKind::SrSsa.tag();
    let uses_sr = strategies.iter().any(|s| s == sr_tag);
    if uses_sr && strategies.iter().any(|s| s != sr_tag) {
        return Err(CliError::Usage("cannot ensemble S_srSSA checkpoints with others".into()));
    }
    let sr = if uses_sr {
        let p = configured(&c.data.sr_checkpoint, "super-resolution checkpoint for S_srSSA models (--sr-checkpoint)")?;
        Some(load_sr(&p)?)
    } else {
        None
    };
    c.inference.weights_for(models.len())?;
    let dirs = list_cases(input)?;
    ctx.prepare_out()?;
    let predictors: Vec<&dyn PatchPredictor> = models.iter().map(|m| m as &dyn PatchPredictor).collect();
    dirs.par_iter()
        .map(|dir| -> Result<(), CliError> {
            let id = case_id(dir);
            let image = load_image(dir)?;
            let labels = match &sr {
                Some(sr) => predict_case_sr(&predictors, sr, &image, &c.inference)?,
                None if save_probs => {
                    let probs = predict_probabilities(&predictors, &image, &c.inference)?;
                    for (name, ch) in ["et", "tc", "wt"].iter().zip(&probs.channels) {
                        save_volume(ctx.out.join(format!("{id}_prob_{name}.nii.gz")), ch)?;
                    }
                    tumorseg::infer::compose_prediction(&probs, c.inference.threshold)?
                }
                None => predict_case(&predictors, &image, &c.inference)?,
            };
            save_labels(ctx.out.join(file_name(&id)), &labels)?;
            Ok(())
        })
        .collect::<Result<(), _>>()?;
    let mut m = ctx.manifest("infer");
    m.input("input", input);
    for (i, p) in checkpoints.iter().enumerate() {
        m.input(&format!("checkpoint_{i}"), p);
    }
    m.details = json!({ "cases": dirs.len(), "networks": models.len(), "strategies": strategies, "super_resolved": uses_sr });
    m.write(&ctx.out)?;
    if dirs.is_empty() {
        println!("0 cases in {}", input.display());
    } else {
        println!("segmented {} cases with {} network(s)", dirs.len(), models.len());
    }
    Ok(())
}

fn dir_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_summary(out: &Path, rows: &[(String, EvalReport)]) -> Result<String, CliError> {
    let table = format_table(rows);
    std::fs::write(out.join("summary.txt"), &table)?;
    std::fs::write(out.join("summary.csv"), summary_csv(rows))?;
    Ok(table)
}

fn cmd_eval(ctx: &Ctx, pred: &Path, gt: &Path, label: Option<&str>) -> Result<(), CliError> {
    require_dir(pred, "prediction")?;
    require_dir(gt, "ground-truth")?;
    let dirs = list_cases(gt)?;
    for dir in &dirs {
        require_file(&pred.join(file_name(&case_id(dir))), "prediction")?;
    }
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no ground-truth cases in {}", gt.display())));
    }
    ctx.prepare_out()?;
    let cases: Vec<CaseMetrics> = dirs
        .par_iter()
        .map(|dir| -> Result<_, CliError> {
            let id = case_id(dir);
            let truth = load_labels(dir.join(file_name(LABEL_STEM)))?;
            let predicted = load_labels(pred.join(file_name(&id)))?;
            Ok(evaluate_case(&id, &predicted, &truth, &ctx.config.metrics)?)
        })
        .collect::<Result<_, _>>()?;
    let file = std::fs::File::create(ctx.out.join("metrics.csv"))?;
    write_metrics_csv(file, &cases)?;
    let label = label.map(str::to_string).unwrap_or_else(|| dir_label(pred));
    let table = write_summary(&ctx.out, &[(label, aggregate_report(&cases)?)])?;
    let mut m = ctx.manifest("eval");
    m.input("pred", pred);
    m.input("gt", gt);
    m.details = json!({ "cases": cases.len() });
    m.write(&ctx.out)?;
    print!("{table}");
    Ok(())
}

fn parse_metrics_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let label = path.parent().map(dir_label).filter(|l| !l.is_empty()).unwrap_or_else(|| arg.to_string());
            (label, path)
        }
    }
}

fn cmd_report(ctx: &Ctx, metrics: &[String], images: Option<&Path>, pred: Option<&Path>) -> Result<(), CliError> {
    let mut rows = Vec::with_capacity(metrics.len());
    for arg in metrics {
        let (label, path) = parse_metrics_arg(arg);
        require_file(&path, "metrics file")?;
        let cases = read_metrics_csv(std::fs::File::open(&path)?)?;
        rows.push((label, aggregate_report(&cases)?));
    }
    let case_dirs = match images {
        Some(dir) => {
            require_dir(dir, "image")?;
            list_cases(dir)?
        }
        None => Vec::new(),
    };
    if let Some(p) = pred {
        require_dir(p, "prediction")?;
        for dir in &case_dirs {
            require_file(&p.join(file_name(&case_id(dir))), "prediction")?;
        }
    }
    ctx.prepare_out()?;
    let table = write_summary(&ctx.out, &rows)?;
    let overlay_dir = ctx.out.join("overlays");
    if !case_dirs.is_empty() {
        std::fs::create_dir_all(&overlay_dir)?;
    }
    let written: usize = case_dirs
        .par_iter()
        .map(|dir| -> Result<usize, CliError> {
            let id = case_id(dir);
            let image = load_image(dir)?;
            let labels = match pred {
                Some(p) => load_labels(p.join(file_name(&id)))?,
                None => load_labels(dir.join(file_name(LABEL_STEM)))?,
            };
            Ok(write_overlays(&overlay_dir, &id, &image, &labels)?.len())
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum();
    let mut m = ctx.manifest("report");
    for (i, a) in metrics.iter().enumerate() {
        m.input(&format!("metrics_{i}"), &parse_metrics_arg(a).1);
    }
    m.details = json!({ "rows": rows.len(), "overlays": written });
    m.write(&ctx.out)?;
    print!("{table}");
    Ok(())
}
