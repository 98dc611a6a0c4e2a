use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use samcd::data::{
    read_rgb, scan_dataset, synth_generate, write_binary_png, write_synthetic, BiTemporalSample, Split, SynthMeta,
};
use samcd::metrics::{ConfusionCounts, EvaluationReport};
use samcd::model::{load_external_pyramid, EncoderKind, LevelSet};
use samcd::training::{predict_sample, tta_predict, Checkpoint, LogRecord, Trainer};
use samcd::{ChangeModel, DType, Error, MetricsReport, SamCd, Scalar};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(Error::Data { path: path.to_path_buf(), message: e.to_string() })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn split_plan(cfg: &RunConfig, split: Split) -> (usize, u64) {
    match split {
        Split::Train => (cfg.samples, cfg.data_seed),
        Split::Val => (cfg.val_samples, cfg.data_seed.wrapping_add(1)),
        Split::Test => (cfg.test_samples, cfg.data_seed.wrapping_add(2)),
    }
}

/// Samples of one split, generated or read from `dataset_root`.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<BiTemporalSample>, CliError> {
    if cfg.synthetic {
        let (n, seed) = split_plan(cfg, split);
        return Ok(synth_generate(n, cfg.size, cfg.change_density, &cfg.nuisance_spec(), seed)?);
    }
    let root = cfg
        .dataset_root
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset_root configured and --synthetic not given".into()))?;
    let mut manifest = scan_dataset(root, split)?;
    if let (Some(t), Some(s)) = (cfg.tile_size, cfg.tile_stride) {
        manifest = manifest.with_tiling(t, s)?;
    }
    Ok(manifest.load_all()?)
}

fn load_validation(cfg: &RunConfig) -> Result<Vec<BiTemporalSample>, CliError> {
    if !cfg.synthetic {
        let root = cfg.dataset_root.as_deref().unwrap_or(Path::new("."));
        if !root.join(Split::Val.dir_name()).is_dir() {
            log::warn!("no validation split under {}; skipping validation", root.display());
            return Ok(Vec::new());
        }
    }
    load_split(cfg, Split::Val)
}

#[derive(Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<LogRecord>,
    pub train_size: usize,
    pub model: SamCd<f32>,
}

/// Train on `train`, validating on `val`, and write the run directory.
pub fn train_on(
    cfg: &RunConfig,
    train: Vec<BiTemporalSample>,
    val: Vec<BiTemporalSample>,
    resume: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.to_toml()?)?;

    let trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_compatible(&cfg.model_config())?;
            if ck.dtype != DType::F32 {
                return Err(CliError::Runtime(Error::Format(format!(
                    "{} stores {:?} weights; the command line trains in f32",
                    path.display(),
                    ck.dtype
                ))));
            }
            Trainer::<f32>::resume(&ck, train, val)?
        }
        None => Trainer::new(SamCd::<f32>::new(cfg.model_config())?, cfg.train_config(), train, val)?,
    };
    let train_size = trainer.train_size();
    log::info!(
        "training on {train_size} pairs for {} epochs ({} steps)",
        cfg.epochs,
        trainer.total_steps()
    );

    let log_path = dir.join(LOG_FILE);
    let file = if resume.is_some() { File::options().append(true).create(true).open(&log_path) } else { File::create(&log_path) };
    let mut writer = BufWriter::new(file.map_err(|e| io_err(&log_path, e))?);
    let mut write_error = None;
    let outcome = trainer.fit(|record| {
        if let LogRecord::Epoch(e) = record {
            log::info!(
                "epoch {} lr {:.5} loss_ce {:.4} loss_t {:.4}{}",
                e.epoch,
                e.lr,
                e.loss_ce,
                e.loss_t,
                e.val_f1.map(|f| format!(" val_F1 {f:.4}")).unwrap_or_default()
            );
        }
        let line = serde_json::to_string(record).expect("log records serialize");
        if let Err(err) = writeln!(writer, "{line}") {
            write_error.get_or_insert(err);
        }
    });
    if let Some(err) = write_error {
        return Err(io_err(&log_path, err));
    }
    writer.flush().map_err(|e| io_err(&log_path, e))?;
    let outcome = outcome?;

    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    outcome.final_checkpoint.save(&final_checkpoint)?;
    let best_checkpoint = match &outcome.best_checkpoint {
        Some(ck) => {
            let path = dir.join(BEST_CHECKPOINT);
            ck.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainSummary { output_dir: dir, final_checkpoint, best_checkpoint, log: outcome.log, train_size, model: outcome.model })
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_validation(cfg)?;
    train_on(cfg, train, val, resume)
}

fn restore_checked(cfg: &RunConfig, path: &Path) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(&cfg.model_config())?;
    Ok(ck)
}

fn evaluate_with<S: Scalar>(
    model: &SamCd<S>,
    samples: &[BiTemporalSample],
    tta: bool,
    predictions: Option<&Path>,
) -> Result<EvaluationReport, CliError> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = predict_sample(model, s, tta)?;
        per_image.push((s.id.clone(), ConfusionCounts::from_maps(pred.binary.view(), s.label.changed().view())?));
        if let Some(dir) = predictions {
            write_binary_png(&dir.join(format!("{}.png", s.id)), &pred.binary)?;
        }
    }
    Ok(EvaluationReport::from_counts(per_image)?)
}

/// Metrics of a checkpoint on one split, written to
/// `metrics_<split>.txt` in the output directory.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    tta: bool,
    save_predictions: bool,
) -> Result<EvaluationReport, CliError> {
    cfg.validate()?;
    let ck = restore_checked(cfg, checkpoint)?;
    if ck.model.encoder.kind == EncoderKind::External {
        return Err(CliError::Usage("eval needs the stub encoder; use `infer` with feature pyramids".into()));
    }
    let samples = load_split(cfg, split)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(Error::Validation(format!("split `{split}` is empty"))));
    }
    create_dir(&cfg.output_dir)?;
    let pred_dir = cfg.output_dir.join(format!("predictions_{split}"));
    if save_predictions {
        create_dir(&pred_dir)?;
    }
    let pred_dir = save_predictions.then_some(pred_dir.as_path());
    let report = match ck.dtype {
        DType::F32 => evaluate_with(&ck.restore_model::<f32>()?, &samples, tta, pred_dir)?,
        DType::F64 => evaluate_with(&ck.restore_model::<f64>()?, &samples, tta, pred_dir)?,
    };
    write_file(&cfg.output_dir.join(format!("metrics_{split}.txt")), &report.to_text())?;
    Ok(report)
}

/// Inputs of one inference call.
#[derive(Debug, Clone)]
pub enum InferInput {
    Images { t1: PathBuf, t2: PathBuf },
    /// Precomputed FPYR1 feature pyramids for an external encoder.
    Pyramids { t1: PathBuf, t2: PathBuf },
}

fn infer_with<S: Scalar>(model: &SamCd<S>, input: &InferInput, tta: bool) -> Result<ndarray::Array2<u8>, CliError> {
    match input {
        InferInput::Images { t1, t2 } => {
            let (a, b) = (read_rgb(t1)?, read_rgb(t2)?);
            let pred = if tta {
                tta_predict(model, a.view(), b.view())?
            } else {
                let p = model.predict_probability(a.view(), b.view())?;
                samcd::ChangePrediction::from_probability(p, model.threshold())
            };
            Ok(pred.binary)
        }
        InferInput::Pyramids { t1, t2 } => {
            if tta {
                return Err(CliError::Usage("--tta needs images, not precomputed features".into()));
            }
            let read = |p: &Path| -> Result<_, CliError> {
                let mut f = std::io::BufReader::new(File::open(p).map_err(|e| io_err(p, e))?);
                Ok(load_external_pyramid::<S>(&mut f)?)
            };
            Ok(model.predict_external(&read(t1)?, &read(t2)?)?.binary)
        }
    }
}

/// Predict one pair and write the 255/0 change map to `out`.
pub fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &InferInput,
    out: &Path,
    tta: bool,
) -> Result<ndarray::Array2<u8>, CliError> {
    cfg.validate()?;
    let ck = restore_checked(cfg, checkpoint)?;
    let binary = match ck.dtype {
        DType::F32 => infer_with(&ck.restore_model::<f32>()?, input, tta)?,
        DType::F64 => infer_with(&ck.restore_model::<f64>()?, input, tta)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_binary_png(out, &binary)?;
    Ok(binary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    Temperature,
    Levels,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Temperature => "temperature",
            AblationAxis::Levels => "levels",
        }
    }

    /// Row labels and the configs they run.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            AblationAxis::Temperature => (1..=5)
                .map(|t| (format!("T={t}"), RunConfig { temperature: t as f64, ..base.clone() }))
                .collect(),
            AblationAxis::Levels => LevelSet::ablation_grid()
                .into_iter()
                .map(|l| {
                    let label = l.levels().iter().map(|i| format!("l{i}")).collect::<Vec<_>>().join("+");
                    (label, RunConfig { levels: l, ..base.clone() })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {} | Pre | Rec | F1 | IoU | OA | mF1 | mIoU |", self.axis.name());
        let _ = writeln!(out, "|---|---|---|---|---|---|---|---|");
        for row in &self.rows {
            let m = &row.report;
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                row.setting,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                100.0 * m.iou,
                100.0 * m.oa,
                100.0 * m.mf1,
                100.0 * m.miou
            );
        }
        out
    }
}

/// One training per setting on the configured data, scored on the
/// validation split (the training split when there is none).
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationTable, CliError> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_validation(cfg)?;
    let scored = if val.is_empty() { &train } else { &val };
    let mut rows = Vec::new();
    for (setting, mut run) in axis.settings(cfg) {
        run.output_dir = cfg.output_dir.join(format!("ablation_{}", axis.name())).join(setting.replace(['=', '+'], "_"));
        log::info!("ablation {}: {setting}", axis.name());
        let summary = train_on(&run, train.clone(), val.clone(), None)?;
        let report = evaluate_with(&summary.model, scored, false, None)?;
        rows.push(AblationRow { setting, report: report.aggregate });
    }
    let table = AblationTable { axis, rows };
    write_file(&cfg.output_dir.join(format!("ablation_{}.md", axis.name())), &table.to_markdown())?;
    Ok(table)
}

/// Write a generated split in the paired directory layout under `root`.
pub fn cmd_synth(cfg: &RunConfig, split: Split, root: &Path) -> Result<usize, CliError> {
    cfg.validate()?;
    let (n, seed) = split_plan(cfg, split);
    let nuisance = cfg.nuisance_spec();
    let samples = synth_generate(n, cfg.size, cfg.change_density, &nuisance, seed)?;
    let meta = SynthMeta { n, size: cfg.size, change_density: cfg.change_density, nuisance, seed };
    write_synthetic(root, split, &samples, &meta)?;
    Ok(samples.len())
}
