//! Run configuration: defaults, then a TOML file, then `SAMCD_*` variables,
//! then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use samcd::data::NuisanceSpec;
use samcd::model::{EncoderKind, EncoderSpec, LevelSet};
use samcd::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one command needs. Field names double as TOML keys, flag
/// names (kebab-case) and environment variables (`SAMCD_` + upper case).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_t: f64,
    pub temperature: f64,
    pub crop_size: Option<usize>,
    pub label_fraction: f64,
    pub flip: bool,
    pub eval_every: usize,

    pub encoder: EncoderKind,
    pub encoder_channels: [usize; 4],
    pub encoder_seed: u64,
    pub levels: LevelSet,
    pub adaptor_width: usize,
    pub k: usize,
    pub change_width: usize,
    pub residual_blocks: usize,
    pub threshold: f64,

    pub dataset_root: Option<PathBuf>,
    pub tile_size: Option<usize>,
    pub tile_stride: Option<usize>,
    pub synthetic: bool,
    /// Generator seed; the train, val and test splits use it plus 0, 1 and 2.
    pub data_seed: u64,
    /// Synthetic frame side.
    pub size: usize,
    pub samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub change_density: f64,
    pub nuisance: bool,

    pub output_dir: PathBuf,
    /// Accepted for config compatibility; everything runs on the CPU.
    pub device: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            epochs: t.epochs,
            base_lr: t.base_lr,
            poly_power: t.poly_power,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            seed: t.seed,
            lambda_t: t.lambda_t,
            temperature: t.temperature,
            crop_size: t.crop_size,
            label_fraction: t.label_fraction,
            flip: t.flip,
            eval_every: t.eval_every,
            encoder: m.encoder.kind,
            encoder_channels: m.encoder.channels,
            encoder_seed: m.encoder.seed,
            levels: m.levels,
            adaptor_width: m.adaptor_width,
            k: m.semantic_channels,
            change_width: m.change_width,
            residual_blocks: m.residual_blocks,
            threshold: m.threshold,
            dataset_root: None,
            tile_size: None,
            tile_stride: None,
            synthetic: false,
            data_seed: 0,
            size: 128,
            samples: 8,
            val_samples: 4,
            test_samples: 8,
            change_density: 0.1,
            nuisance: true,
            output_dir: PathBuf::from("runs/samcd"),
            device: "cpu".into(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            poly_power: self.poly_power,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed,
            lambda_t: self.lambda_t,
            temperature: self.temperature,
            crop_size: self.crop_size,
            label_fraction: self.label_fraction,
            flip: self.flip,
            eval_every: self.eval_every,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderSpec {
                kind: self.encoder,
                channels: self.encoder_channels,
                frozen: true,
                seed: self.encoder_seed,
            },
            levels: self.levels,
            adaptor_width: self.adaptor_width,
            semantic_channels: self.k,
            change_width: self.change_width,
            residual_blocks: self.residual_blocks,
            temperature: self.temperature,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    pub fn nuisance_spec(&self) -> NuisanceSpec {
        if self.nuisance {
            NuisanceSpec::default()
        } else {
            NuisanceSpec::disabled()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate().map_err(usage)?;
        self.model_config().validate().map_err(usage)?;
        if self.tile_size.is_some() != self.tile_stride.is_some() {
            return Err(CliError::Usage("tile_size and tile_stride must be given together".into()));
        }
        if self.synthetic && (self.size == 0 || self.size % 32 != 0) {
            return Err(CliError::Usage(format!("synthetic size {} is not a positive multiple of 32", self.size)));
        }
        if !(0.0..=1.0).contains(&self.change_density) {
            return Err(CliError::Usage(format!("change_density {} outside [0, 1]", self.change_density)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    /// Layer `overrides` over the file at `path` (if any) over the defaults.
    pub fn resolve(path: Option<&Path>, overrides: &RunArgs) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("cannot parse config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let flags = toml::Table::try_from(overrides)
            .map_err(|e| CliError::Usage(format!("bad override: {e}")))?;
        table.extend(flags);
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

fn usage(e: samcd::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn parse_levels(s: &str) -> Result<LevelSet, String> {
    s.parse().map_err(|e: samcd::Error| e.to_string())
}

fn parse_encoder(s: &str) -> Result<EncoderKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "stub" => Ok(EncoderKind::Stub),
        "external" => Ok(EncoderKind::External),
        other => Err(format!("unknown encoder `{other}` (expected stub or external)")),
    }
}

/// Flag and environment overrides. Unset fields leave the file value alone.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct RunArgs {
    #[arg(long, env = "SAMCD_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "SAMCD_BASE_LR")]
    pub base_lr: Option<f64>,
    #[arg(long, env = "SAMCD_POLY_POWER")]
    pub poly_power: Option<f64>,
    #[arg(long, env = "SAMCD_MOMENTUM")]
    pub momentum: Option<f64>,
    #[arg(long, env = "SAMCD_WEIGHT_DECAY")]
    pub weight_decay: Option<f64>,
    #[arg(long, env = "SAMCD_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "SAMCD_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "SAMCD_LAMBDA_T")]
    pub lambda_t: Option<f64>,
    #[arg(long, env = "SAMCD_TEMPERATURE", allow_negative_numbers = true)]
    pub temperature: Option<f64>,
    #[arg(long, env = "SAMCD_CROP_SIZE")]
    pub crop_size: Option<usize>,
    #[arg(long, env = "SAMCD_LABEL_FRACTION")]
    pub label_fraction: Option<f64>,
    #[arg(long, env = "SAMCD_FLIP")]
    pub flip: Option<bool>,
    #[arg(long, env = "SAMCD_EVAL_EVERY")]
    pub eval_every: Option<usize>,

    #[arg(long, env = "SAMCD_ENCODER", value_parser = parse_encoder)]
    pub encoder: Option<EncoderKind>,
    #[arg(long, env = "SAMCD_ENCODER_CHANNELS", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub encoder_channels: Vec<usize>,
    #[arg(long, env = "SAMCD_ENCODER_SEED")]
    pub encoder_seed: Option<u64>,
    /// Comma-separated feature levels, 1 = finest.
    #[arg(long, env = "SAMCD_LEVELS", value_parser = parse_levels)]
    pub levels: Option<LevelSet>,
    #[arg(long, env = "SAMCD_ADAPTOR_WIDTH")]
    pub adaptor_width: Option<usize>,
    #[arg(long, env = "SAMCD_K")]
    pub k: Option<usize>,
    #[arg(long, env = "SAMCD_CHANGE_WIDTH")]
    pub change_width: Option<usize>,
    #[arg(long, env = "SAMCD_RESIDUAL_BLOCKS")]
    pub residual_blocks: Option<usize>,
    #[arg(long, env = "SAMCD_THRESHOLD")]
    pub threshold: Option<f64>,

    #[arg(long, env = "SAMCD_DATASET_ROOT")]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, env = "SAMCD_TILE_SIZE")]
    pub tile_size: Option<usize>,
    #[arg(long, env = "SAMCD_TILE_STRIDE")]
    pub tile_stride: Option<usize>,
    /// Use generated pairs instead of a dataset on disk.
    #[arg(long, env = "SAMCD_SYNTHETIC", num_args = 0..=1, default_missing_value = "true")]
    pub synthetic: Option<bool>,
    #[arg(long, env = "SAMCD_DATA_SEED")]
    pub data_seed: Option<u64>,
    #[arg(long, env = "SAMCD_SIZE")]
    pub size: Option<usize>,
    #[arg(long, env = "SAMCD_SAMPLES")]
    pub samples: Option<usize>,
    #[arg(long, env = "SAMCD_VAL_SAMPLES")]
    pub val_samples: Option<usize>,
    #[arg(long, env = "SAMCD_TEST_SAMPLES")]
    pub test_samples: Option<usize>,
    #[arg(long, env = "SAMCD_CHANGE_DENSITY")]
    pub change_density: Option<f64>,
    #[arg(long, env = "SAMCD_NUISANCE")]
    pub nuisance: Option<bool>,

    #[arg(long, short = 'o', env = "SAMCD_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, env = "SAMCD_DEVICE")]
    pub device: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_values() {
        let c = RunConfig::default();
        assert_eq!((c.epochs, c.base_lr, c.poly_power, c.temperature, c.k), (50, 0.1, 1.5, 3.0, 8));
        assert_eq!(c.levels, LevelSet::ALL);
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let c = RunConfig { base_lr: 0.1 + 0.2, crop_size: Some(64), ..RunConfig::default() };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 7\nk = 4\nlevels = [2, 3]\n").unwrap();
        let args = RunArgs { epochs: Some(9), ..RunArgs::default() };
        let c = RunConfig::resolve(Some(&path), &args).unwrap();
        assert_eq!((c.epochs, c.k), (9, 4));
        assert_eq!(c.levels.levels(), vec![2, 3]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epoch = 7\n").unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &RunArgs::default()), Err(CliError::Usage(_))));
        let args = RunArgs { temperature: Some(0.0), ..RunArgs::default() };
        match RunConfig::resolve(None, &args) {
            Err(CliError::Usage(m)) => assert!(m.contains("T > 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
