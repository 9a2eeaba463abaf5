use std::path::Path;
use std::process::{Command, Output};

fn tarecon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tarecon")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let out = tarecon(&["data", "synthetic", "--dir", "digits", "--train", "24", "--test", "8"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        format!(
            "mnist_dir = \"digits\"\nmnist_validation = 4\nsteps = 3\nbatch_size = 4\npretrain_recon_steps = 2\n\
             pretrain_recon_batch_size = 4\npretrain_task_max_steps = 2\npretrain_task_check_every = 1\n\
             pretrain_eval_size = 4\nrecon_iterations = 1\nrecon_channels = [4]\nclassifier_channels = [2, 2, 2]\n\
             eval_batch_size = 4\nc_list = [0.2, 0.8]\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn check_suites_pass_and_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = tarecon(&["check", "theory", "--models", "20", "--out-dir", "ck"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let csv = std::fs::read_to_string(dir.path().join("ck/theory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    let out = tarecon(&["check", "adjoint", "--pairs", "3", "--out-dir", "ck"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("ck/adjoint.csv").exists());
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("typo.toml"), "stpes = 3\n").unwrap();
    let out = tarecon(&["train", "--config", "typo.toml"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpes"));
    assert_eq!(code(&tarecon(&["train", "--config", "missing.toml"], dir.path())), 1);
    std::fs::write(dir.path().join("c.toml"), "c = 2.0\n").unwrap();
    assert_eq!(code(&tarecon(&["sweep", "--config", "c.toml"], dir.path())), 1);
    assert_eq!(code(&tarecon(&["train", "--scale", "huge"], dir.path())), 1);
    assert_eq!(code(&tarecon(&["--help"], dir.path())), 0);
}

#[test]
fn divergence_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "pretrain = false\noptimizer = \"sgd\"\nlearning_rate = 1e30\nlearning_rate_min = 1e30\n");
    let out = tarecon(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", "run"], dir.path());
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_is_repeatable_and_feeds_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for run in ["a", "b"] {
        let out = tarecon(&["train", "--config", cfg, "--seed", "7", "--out-dir", run], dir.path());
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.csv"), read("b/metrics.csv"));
    assert!(String::from_utf8_lossy(&read("a/metrics.csv")).contains(",7,ok"));

    let out = tarecon(&["eval", "--config", cfg, "--seed", "7", "--checkpoint", "a/params.trkp", "--out-dir", "ev"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ev/eval.csv").exists());
    assert_eq!(code(&tarecon(&["eval", "--config", cfg, "--checkpoint", "nope.trkp"], dir.path())), 1);

    let out = tarecon(&["sweep", "--config", cfg, "--out-dir", "sw"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = tarecon(
        &["report", "sw/metrics.csv", "a/metrics.csv", "--steps", "a/joint/steps.csv", "--out-dir", "rep"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let merged = std::fs::read_to_string(dir.path().join("rep/metrics.csv")).unwrap();
    assert_eq!(merged.lines().count(), 1 + 2 + 3);
    assert!(dir.path().join("rep/d_x_vs_c.svg").exists());
    assert!(std::fs::read_dir(dir.path().join("rep/steps0")).unwrap().count() > 0);
}

#[test]
fn data_generate_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("seg.toml"),
        "experiment = \"segmentation\"\nphantom_train = 4\nphantom_validation = 1\nphantom_test = 2\n",
    )
    .unwrap();
    let out = tarecon(&["data", "generate", "--config", "seg.toml", "--out-dir", "ph"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ph/phantoms.trds").exists() && dir.path().join("ph/phantoms.png").exists());
    let out = tarecon(&["data", "validate", "--config", "seg.toml"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train 4 validation 1 test 2"));

    tiny_config(dir.path(), "");
    let out = tarecon(&["data", "validate", "--config", "tiny.toml"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train 20 validation 4 test 8"));
    std::fs::write(dir.path().join("digits/t10k-labels-idx1-ubyte"), [0u8; 3]).unwrap();
    assert_eq!(code(&tarecon(&["data", "validate", "--config", "tiny.toml"], dir.path())), 1);
}
