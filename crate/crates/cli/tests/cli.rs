use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::{Array2, Array3};
use samcd::data::{scan_dataset, write_dataset, BiTemporalSample, ChangeLabel, Split};
use samcd::metrics::EvaluationReport;
use samcd::training::LogRecord;
use samcd_cli::{cmd_ablate, AblationAxis, RunArgs, RunConfig, CONFIG_FILE, FINAL_CHECKPOINT, LOG_FILE};

const TINY: &[&str] = &[
    "--encoder-channels",
    "6,8,10,12",
    "--adaptor-width",
    "6",
    "--k",
    "4",
    "--change-width",
    "6",
    "--residual-blocks",
    "2",
    "--batch-size",
    "2",
    "--samples",
    "2",
    "--val-samples",
    "1",
    "--test-samples",
    "2",
];

fn samcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samcd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn samcd_with(dir: &Path, sub: &str, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![sub, "--output-dir", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    samcd(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_log(dir: &Path) -> Vec<LogRecord> {
    fs::read_to_string(dir.join(LOG_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn tiny_config(dir: &Path) -> RunConfig {
    RunConfig {
        encoder_channels: [6, 8, 10, 12],
        adaptor_width: 6,
        k: 4,
        change_width: 6,
        residual_blocks: 2,
        batch_size: 2,
        samples: 2,
        val_samples: 1,
        synthetic: true,
        size: 64,
        epochs: 1,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn synthetic_smoke_run_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(dir.path(), "train", &["--synthetic", "--epochs", "2", "--size", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [CONFIG_FILE, LOG_FILE, FINAL_CHECKPOINT, "best.ckpt"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let epochs = read_log(dir.path()).into_iter().filter(|r| matches!(r, LogRecord::Epoch(_))).count();
    assert_eq!(epochs, 2);
    let frozen: RunConfig = toml::from_str(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!((frozen.epochs, frozen.size, frozen.k), (2, 64, 4));
}

#[test]
fn zero_temperature_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(dir.path(), "train", &["--synthetic", "--temperature", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("T > 0"), "{}", stderr(&o));
}

#[test]
fn malformed_flags_and_configs_exit_two() {
    assert_eq!(samcd(&["train", "--epochs", "many"]).status.code(), Some(2));
    assert_eq!(samcd(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochs = \"ten\"\n").unwrap();
    assert_eq!(samcd(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(samcd(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_dataset_root_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(dir.path(), "train", &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn environment_overrides_the_file_and_flags_override_both() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "epochs = 5\nsynthetic = true\nsize = 64\n").unwrap();
    let run = |flags: &[&str]| {
        let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()];
        args.extend_from_slice(TINY);
        args.extend_from_slice(flags);
        let o = Command::new(env!("CARGO_BIN_EXE_samcd"))
            .args(&args)
            .env("SAMCD_EPOCHS", "2")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let frozen: RunConfig = toml::from_str(&fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
        frozen.epochs
    };
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["--epochs", "1"]), 1);
}

#[test]
fn label_fraction_is_recorded_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(
        dir.path(),
        "train",
        &["--synthetic", "--size", "32", "--samples", "20", "--epochs", "1", "--label-fraction", "0.2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sizes: Vec<usize> = read_log(dir.path())
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e.train_size),
            _ => None,
        })
        .collect();
    assert_eq!(sizes, vec![4]);
}

#[test]
fn frozen_config_reproduces_the_first_loss() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = samcd_with(a.path(), "train", &["--synthetic", "--size", "64", "--epochs", "1", "--seed", "17"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = a.path().join(CONFIG_FILE);
    let o = samcd(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", b.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = |dir: &Path| {
        read_log(dir)
            .into_iter()
            .find_map(|r| match r {
                LogRecord::Step(s) => Some(s.loss.to_bits()),
                _ => None,
            })
            .unwrap()
    };
    assert_eq!(first(a.path()), first(b.path()));
}

#[test]
fn eval_rejects_a_checkpoint_with_a_different_k() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(dir.path(), "train", &["--synthetic", "--size", "64", "--epochs", "1", "--k", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join(FINAL_CHECKPOINT);
    let o = samcd_with(dir.path(), "eval", &["--synthetic", "--size", "64", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`k`"), "{}", stderr(&o));
    let o = samcd_with(
        dir.path(),
        "eval",
        &["--synthetic", "--size", "64", "--k", "8", "--checkpoint", ck.to_str().unwrap(), "--save-predictions"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("metrics_test.txt")).unwrap();
    let blocks = EvaluationReport::parse_blocks(&text).unwrap();
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks.last().unwrap().0, "aggregate");
    let png = image::open(dir.path().join("predictions_test/synth_00000.png")).unwrap().to_luma8();
    assert!(png.pixels().all(|p| p[0] == 0 || p[0] == 255));
}

fn is_d4_invariant(map: &image::GrayImage) -> bool {
    let (w, h) = map.dimensions();
    (0..h).all(|y| {
        (0..w).all(|x| {
            let v = map.get_pixel(x, y)[0];
            v == map.get_pixel(w - 1 - x, y)[0] && v == map.get_pixel(x, h - 1 - y)[0] && v == map.get_pixel(y, x)[0]
        })
    })
}

/// On all-zero pairs the averaged map is D4-invariant, and whenever the
/// single-pass map already is, the two reports coincide. Zero padding lets a
/// trained network answer differently at different borders, so the
/// single-pass map is not invariant in general.
#[test]
fn tta_on_all_zero_pairs_matches_a_symmetric_single_pass() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let zero = |i: usize| {
        let img = Array3::<f32>::zeros((3, 64, 64));
        let label = ChangeLabel::from_changed(Array2::<u8>::zeros((64, 64))).unwrap();
        BiTemporalSample::new(format!("z{i}"), img.clone(), img, label).unwrap()
    };
    write_dataset(&data, Split::Test, &[zero(0), zero(1)]).unwrap();
    let mut symmetric_cases = 0;
    for threshold in ["0.5", "0.999"] {
        let run = dir.path().join(format!("run_{threshold}"));
        let o = samcd_with(&run, "train", &["--synthetic", "--size", "64", "--epochs", "1", "--threshold", threshold]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ck = run.join(FINAL_CHECKPOINT);
        let eval = |tta: bool| {
            let out = run.join(if tta { "tta" } else { "single" });
            let mut extra =
                vec!["--dataset-root", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--save-predictions"];
            if tta {
                extra.push("--tta");
            }
            let o = samcd_with(&out, "eval", &extra);
            assert!(o.status.success(), "{}", stderr(&o));
            let map = image::open(out.join("predictions_test/z0.png")).unwrap().to_luma8();
            (fs::read_to_string(out.join("metrics_test.txt")).unwrap(), map)
        };
        let (single, single_map) = eval(false);
        let (tta, tta_map) = eval(true);
        assert!(is_d4_invariant(&tta_map));
        if is_d4_invariant(&single_map) {
            symmetric_cases += 1;
            assert_eq!(single, tta);
        }
    }
    assert!(symmetric_cases > 0);
}

#[test]
fn infer_writes_a_binary_raster() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd_with(dir.path(), "train", &["--synthetic", "--size", "64", "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let data = dir.path().join("data");
    let o = samcd_with(dir.path(), "synth", &["--size", "64", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("pred/map.png");
    let a = data.join("train/A/synth_00000.png");
    let b = data.join("train/B/synth_00000.png");
    let o = samcd_with(
        dir.path(),
        "infer",
        &[
            "--checkpoint",
            dir.path().join(FINAL_CHECKPOINT).to_str().unwrap(),
            "--t1",
            a.to_str().unwrap(),
            "--t2",
            b.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--tta",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let png = image::open(&out).unwrap().to_luma8();
    assert_eq!(png.dimensions(), (64, 64));
    assert!(png.pixels().all(|p| p[0] == 0 || p[0] == 255));
}

#[test]
fn synth_writes_a_scannable_split() {
    let dir = tempfile::tempdir().unwrap();
    let o = samcd(&["synth", "--size", "32", "--val-samples", "3", "--split", "val", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(scan_dataset(dir.path(), Split::Val).unwrap().len(), 3);
    assert!(dir.path().join("val/meta.json").is_file());
}

#[test]
fn temperature_sweep_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { size: 32, ..tiny_config(dir.path()) };
    let table = cmd_ablate(&cfg, AblationAxis::Temperature).unwrap();
    let labels: Vec<_> = table.rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(labels, ["T=1", "T=2", "T=3", "T=4", "T=5"]);
    let md = fs::read_to_string(dir.path().join("ablation_temperature.md")).unwrap();
    assert_eq!(md.lines().count(), 7);
}

#[test]
fn resolve_without_a_file_uses_defaults() {
    let c = RunConfig::resolve(None, &RunArgs::default()).unwrap();
    assert_eq!(c, RunConfig::default());
}
