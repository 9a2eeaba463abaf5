use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flate2::read::GzDecoder;
use tarecon::checks::{adjoint_csv, adjoint_suite, gradient_csv, gradient_suite};
use tarecon::config::{Config, Experiment, Scale};
use tarecon::data::{load_mnist, phantom_dataset, write_synthetic_mnist, Split, MNIST_FILES};
use tarecon::experiment::{run_eval, run_sweep, run_train, ExperimentError};
use tarecon::report::{emit_plots, emit_step_plots, emit_table, image_grid_png, parse_steps, read_table, MetricsRow};
use tarecon::theory::{run_suite, theory_csv};

const MNIST_MIRRORS: [&str; 2] =
    ["https://ossci-datasets.s3.amazonaws.com/mnist/", "https://storage.googleapis.com/cvdf-datasets/mnist/"];

#[derive(Parser)]
#[command(name = "tarecon", version, about = "Task-adapted tomographic reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; keys override the preset of its `experiment`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Suite {
    Adjoint,
    Gradient,
    Theory,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train one regime and evaluate it on the test split.
    Train(Common),
    /// Joint training for every C in `c_list`.
    Sweep(Common),
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Merge metrics tables and draw loss plots.
    Report {
        /// Metrics CSVs written by train or sweep.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Step logs to plot.
        #[arg(long)]
        steps: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out_dir: PathBuf,
        /// Log-scaled axes for the C plots.
        #[arg(long)]
        log: bool,
    },
    /// Numerical self-checks; exit code 3 if any case fails.
    Check {
        #[arg(value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random pairs per geometry for the adjoint suite.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Seeds for the theory suite (three models each).
        #[arg(long, default_value_t = 1000)]
        models: u64,
        #[arg(long, default_value = "checks")]
        out_dir: PathBuf,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Fetch the MNIST IDX files into `dir`.
    Download {
        #[arg(long, default_value = "data/mnist")]
        dir: PathBuf,
    },
    /// Check the dataset a config refers to and print its split sizes.
    Validate(Common),
    /// Generate the phantom dataset of a config and save it.
    Generate(Common),
    /// Write small synthetic IDX files (digit-like bars) for smoke tests.
    Synthetic {
        #[arg(long, default_value = "data/synthetic")]
        dir: PathBuf,
        #[arg(long, default_value_t = 600)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type Result<T, E = Failure> = std::result::Result<T, E>;

fn load_config(common: &Common) -> Result<Config> {
    let scale = match common.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Full => Scale::Full,
    };
    let mut cfg = match &common.config {
        Some(path) => Config::load(path, scale),
        None => Config::from_toml("", scale),
    }
    .map_err(Failure::config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn print_rows(rows: &[MetricsRow]) {
    for r in rows {
        println!(
            "{:<12} c={:<6} accuracy={:.4} l2={:.5} ce={:.5} {}",
            r.regime, r.c, r.accuracy, r.l2_loss, r.cross_entropy, r.status
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            print_rows(&run_train(&cfg, &common.out_dir)?);
        }
        Command::Sweep(common) => {
            let cfg = load_config(&common)?;
            let rows = run_sweep(&cfg, &common.out_dir)?;
            print_rows(&rows);
            if rows.iter().any(|r| !r.is_ok()) {
                return Err(Failure { code: 2, message: "one or more C values failed, see metrics.csv".into() });
            }
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = load_config(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Validation => Split::Validation,
                SplitArg::Test => Split::Test,
            };
            print_rows(&[run_eval(&cfg, &checkpoint, split, &common.out_dir)?]);
        }
        Command::Report { metrics, steps, out_dir, log } => {
            let mut rows = Vec::new();
            for path in &metrics {
                rows.extend(read_table(path).map_err(Failure::config)?);
            }
            fs::create_dir_all(&out_dir).map_err(|e| Failure::config(format!("{}: {e}", out_dir.display())))?;
            emit_table(&rows, &out_dir.join("metrics.csv")).map_err(Failure::config)?;
            let joint: Vec<MetricsRow> = rows.iter().filter(|r| r.regime == "joint").cloned().collect();
            if !joint.is_empty() {
                for p in emit_plots(&joint, &out_dir, log).map_err(Failure::config)? {
                    println!("{}", p.display());
                }
            }
            for (i, path) in steps.iter().enumerate() {
                let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
                let parsed = parse_steps(&text, path).map_err(Failure::config)?;
                let dir = out_dir.join(format!("steps{i}"));
                fs::create_dir_all(&dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
                for p in emit_step_plots(&parsed, &dir).map_err(Failure::config)? {
                    println!("{}", p.display());
                }
            }
            print_rows(&rows);
        }
        Command::Check { suite, seed, pairs, models, out_dir } => {
            let want = |s: Suite| suite == s || suite == Suite::All;
            let (adjoint, gradient, theory) = std::thread::scope(|s| {
                let adjoint = want(Suite::Adjoint).then(|| s.spawn(|| adjoint_suite(pairs, seed)));
                let gradient = want(Suite::Gradient).then(|| s.spawn(|| gradient_suite(seed)));
                let theory = want(Suite::Theory).then(|| s.spawn(|| run_suite(seed..seed + models)));
                (adjoint.map(join), gradient.map(join), theory.map(join))
            });
            let mut failed = Vec::new();
            if let Some(rows) = adjoint {
                write(&out_dir.join("adjoint.csv"), &adjoint_csv(&rows))?;
                for r in &rows {
                    println!("adjoint  {:<22} max defect {:.3e} {}", r.geometry, r.max_defect, verdict(r.passed()));
                    if !r.passed() {
                        failed.push(format!("adjoint {}", r.geometry));
                    }
                }
            }
            if let Some(rows) = gradient {
                let rows = rows.map_err(|e| Failure { code: 2, message: e.to_string() })?;
                write(&out_dir.join("gradient.csv"), &gradient_csv(&rows))?;
                for r in &rows {
                    println!("gradient {:<22} max rel err {:.3e} {}", r.name, r.report.max_rel_err, verdict(r.passed()));
                    if !r.passed() {
                        failed.push(format!("gradient {}", r.name));
                    }
                }
            }
            if let Some(rows) = theory {
                let rows = rows.map_err(|e| Failure { code: 2, message: e.to_string() })?;
                write(&out_dir.join("theory.csv"), &theory_csv(&rows))?;
                let bad = rows.iter().filter(|r| !r.consistent()).count();
                println!("theory   {} models, {bad} inconsistent {}", rows.len(), verdict(bad == 0));
                if bad > 0 {
                    failed.push(format!("theory ({bad} models)"));
                }
            }
            if !failed.is_empty() {
                return Err(Failure { code: 3, message: format!("failed: {}", failed.join(", ")) });
            }
        }
        Command::Data { action } => data(action)?,
    }
    Ok(())
}

fn join<T>(h: std::thread::ScopedJoinHandle<'_, T>) -> T {
    h.join().expect("check suite panicked")
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn data(action: DataAction) -> Result<()> {
    match action {
        DataAction::Download { dir } => {
            fs::create_dir_all(&dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
            for name in MNIST_FILES {
                let target = dir.join(name);
                if target.exists() {
                    println!("{} present", target.display());
                    continue;
                }
                let bytes = fetch_gz(&format!("{name}.gz"))?;
                fs::write(&target, bytes).map_err(|e| Failure::config(format!("{}: {e}", target.display())))?;
                println!("{}", target.display());
            }
            let ds = load_mnist::<f32>(&dir, 0).map_err(Failure::config)?;
            println!("{} images", ds.len());
        }
        DataAction::Validate(common) => {
            let cfg = load_config(&common)?;
            let (n, splits) = match cfg.experiment().map_err(Failure::config)? {
                Experiment::Mnist => {
                    let ds = load_mnist::<f32>(&cfg.mnist_dir, cfg.mnist_validation).map_err(Failure::config)?;
                    (ds.len(), split_counts(ds.splits()))
                }
                Experiment::Segmentation => {
                    let ds = phantom_dataset::<f32>(&cfg.phantom_spec(), cfg.phantom_train, cfg.phantom_validation, cfg.phantom_test)
                        .map_err(Failure::config)?;
                    (ds.len(), split_counts(ds.splits()))
                }
            };
            println!("{n} images: train {} validation {} test {}", splits[0], splits[1], splits[2]);
        }
        DataAction::Generate(common) => {
            let cfg = load_config(&common)?;
            let ds = phantom_dataset::<f32>(&cfg.phantom_spec(), cfg.phantom_train, cfg.phantom_validation, cfg.phantom_test)
                .map_err(Failure::config)?;
            fs::create_dir_all(&common.out_dir).map_err(|e| Failure::config(format!("{}: {e}", common.out_dir.display())))?;
            let path = common.out_dir.join("phantoms.trds");
            ds.save(&path).map_err(Failure::config)?;
            let preview = ds.images().select_outer(&(0..ds.len().min(8)).collect::<Vec<_>>()).map_err(Failure::config)?;
            image_grid_png(&preview, 4, &common.out_dir.join("phantoms.png")).map_err(Failure::config)?;
            println!("{} ({} phantoms)", path.display(), ds.len());
        }
        DataAction::Synthetic { dir, train, test, seed } => {
            write_synthetic_mnist(&dir, train, test, seed).map_err(Failure::config)?;
            println!("{} ({train} train, {test} test)", dir.display());
        }
    }
    Ok(())
}

fn split_counts(splits: &[Split]) -> [usize; 3] {
    let mut c = [0; 3];
    for s in splits {
        c[match s {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }] += 1;
    }
    c
}

fn fetch_gz(name: &str) -> Result<Vec<u8>> {
    let mut errors = Vec::new();
    for base in MNIST_MIRRORS {
        let url = format!("{base}{name}");
        let body = ureq::get(&url).call().and_then(|r| r.into_body().with_config().limit(64 << 20).read_to_vec());
        match body {
            Ok(gz) => {
                let mut out = Vec::new();
                match GzDecoder::new(&gz[..]).read_to_end(&mut out) {
                    Ok(_) => return Ok(out),
                    Err(e) => errors.push(format!("{url}: {e}")),
                }
            }
            Err(e) => errors.push(format!("{url}: {e}")),
        }
    }
    Err(Failure::config(format!("could not download {name}:\n  {}", errors.join("\n  "))))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors; clap would use 2
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
