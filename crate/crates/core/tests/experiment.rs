use std::path::Path;

use tarecon::config::{Config, ConfigError, Experiment, Scale};
use tarecon::data::write_synthetic_mnist;
use tarecon::experiment::{run_eval, run_sweep, run_train, ExperimentError};
use tarecon::data::Split;
use tarecon::report::read_table;

fn tiny_mnist(dir: &Path) -> String {
    write_synthetic_mnist(dir, 24, 8, 1).unwrap();
    format!(
        r#"
experiment = "mnist"
mnist_dir = "{}"
mnist_validation = 4
steps = 3
batch_size = 4
pretrain_recon_steps = 2
pretrain_recon_batch_size = 4
pretrain_task_max_steps = 2
pretrain_task_check_every = 1
pretrain_eval_size = 4
recon_iterations = 2
recon_channels = [4]
classifier_channels = [2, 2, 2]
eval_batch_size = 4
log_every = 1
checkpoint_every = 0
c_list = [0.1, 0.9]
"#,
        dir.display()
    )
}

#[test]
fn presets_validate_and_round_trip() {
    for exp in [Experiment::Mnist, Experiment::Segmentation] {
        for scale in [Scale::Desk, Scale::Full] {
            let cfg = Config::preset(exp, scale);
            cfg.validate().unwrap();
            assert_eq!(Config::from_toml(&cfg.to_toml(), Scale::Desk).unwrap(), cfg);
        }
    }
    let desk = Config::preset(Experiment::Mnist, Scale::Desk);
    assert_eq!((desk.steps, desk.batch_size, desk.pretrain_recon_steps, desk.pretrain_recon_batch_size), (10_000, 32, 8_000, 64));
    assert_eq!(Config::preset(Experiment::Mnist, Scale::Full).steps * 32, 512_000);
}

#[test]
fn file_keys_override_the_preset() {
    let cfg = Config::from_toml("experiment = \"segmentation\"\nc = 0.9\nsteps = 7\n", Scale::Desk).unwrap();
    assert_eq!(cfg.experiment, "segmentation");
    assert_eq!((cfg.c, cfg.steps, cfg.num_angles, cfg.num_lines), (0.9, 7, 30, 183));
    let mnist = Config::from_toml("", Scale::Desk).unwrap();
    assert_eq!(mnist.experiment, "mnist");
}

#[test]
fn bad_configs_are_rejected() {
    for text in [
        "stpes = 10",
        "c = 1.5",
        "regime = \"semi\"",
        "steps = 0",
        "c_list = [0.5, -0.1]",
        "noise = \"salt\"",
        "recon = \"tv\"",
        "experiment = \"mnist\"\naugment = true",
        "num_angles = 0",
        "steps = \"many\"",
    ] {
        let err = Config::from_toml(text, Scale::Desk).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_) | ConfigError::Invalid(_)), "{text}: {err}");
    }
}

#[test]
fn missing_mnist_is_a_config_error() {
    let mut cfg = Config::preset(Experiment::Mnist, Scale::Desk);
    cfg.mnist_dir = "/nonexistent/mnist".into();
    let err = run_train(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(matches!(err, ExperimentError::Data(_)));
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let cfg = Config::from_toml(&tiny_mnist(data.path()), Scale::Desk).unwrap();
    let outs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for o in &outs {
        let rows = run_train(&cfg, o.path()).unwrap();
        assert_eq!(rows.iter().map(|r| r.regime.as_str()).collect::<Vec<_>>(), ["true_images", "pretrain", "joint"]);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        for f in ["metrics.csv", "config.toml", "params.trkp", "params.manifest.toml", "meta.toml", "truth.png", "reconstructions.png", "probabilities.csv", "joint/steps.csv", "pretrain/steps.csv"] {
            assert!(o.path().join(f).exists(), "{f}");
        }
    }
    for f in ["metrics.csv", "joint/steps.csv", "pretrain/steps.csv"] {
        assert_eq!(std::fs::read(outs[0].path().join(f)).unwrap(), std::fs::read(outs[1].path().join(f)).unwrap(), "{f}");
    }
    let table = read_table(&outs[0].path().join("metrics.csv")).unwrap();
    assert_eq!(table.len(), 3);

    let row = run_eval(&cfg, &outs[0].path().join("params.trkp"), Split::Test, &outs[0].path().join("eval")).unwrap();
    assert!((row.accuracy - table[2].accuracy).abs() < 1e-6);
}

#[test]
fn sweep_writes_one_row_per_c_and_plots() {
    let data = tempfile::tempdir().unwrap();
    let mut cfg = Config::from_toml(&tiny_mnist(data.path()), Scale::Desk).unwrap();
    let out = tempfile::tempdir().unwrap();
    cfg.pretrained_checkpoint = out.path().join("cache/pre.trkp").display().to_string();
    let rows = run_sweep(&cfg, out.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(out.path().join("d_x_vs_c.svg").exists() && out.path().join("d_d_vs_c.svg").exists());
    assert!(out.path().join("cache/pre.trkp").exists());
    // the cached pre-training gives the same sweep
    let again = run_sweep(&cfg, tempfile::tempdir().unwrap().path()).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn sequential_and_end_to_end_regimes_run() {
    let data = tempfile::tempdir().unwrap();
    for regime in ["sequential", "end_to_end"] {
        let text = format!("{}regime = \"{regime}\"\nprecision = \"f64\"\n", tiny_mnist(data.path()));
        let cfg = Config::from_toml(&text, Scale::Desk).unwrap();
        let rows = run_train(&cfg, tempfile::tempdir().unwrap().path()).unwrap();
        assert_eq!(rows.last().unwrap().regime, regime);
    }
}

#[test]
fn segmentation_smoke_run() {
    let text = r#"
experiment = "segmentation"
steps = 2
pretrain_recon_steps = 1
pretrain_task_max_steps = 1
pretrain_task_check_every = 1
pretrain_eval_size = 1
phantom_train = 3
phantom_validation = 1
phantom_test = 2
num_angles = 6
num_lines = 41
recon_iterations = 1
recon_channels = [2]
recon_memory = 2
unet_base_channels = 2
eval_batch_size = 2
c_list = [0.01, 0.999]
"#;
    let cfg = Config::from_toml(text, Scale::Desk).unwrap();
    let out = tempfile::tempdir().unwrap();
    let rows = run_sweep(&cfg, out.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.is_ok() && (0.0..=1.0).contains(&r.accuracy)));
    let svg = std::fs::read_to_string(out.path().join("d_d_vs_c.svg")).unwrap();
    assert!(svg.contains("<svg"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            for scale in [Scale::Desk, Scale::Full] {
                Config::load(&path, scale).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            }
            n += 1;
        }
    }
    assert!(n >= 5);
}
