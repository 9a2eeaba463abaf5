//! Acceptance criteria 1-10. Each test writes one `criterion N: PASS|FAIL`
//! line straight to stdout (visible without `--nocapture`).
//!
//! Criteria 6-8 are multi-hour training runs and are `#[ignore]`d; run them
//! with `cargo test --release --test acceptance -- --ignored`. Criteria 6
//! and 7 read MNIST from `TARECON_MNIST_DIR`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tarecon::checks::{adjoint_suite, gradient_suite, ADJOINT_TOLERANCE};
use tarecon::config::{Config, Scale};
use tarecon::data::{evaluation_batches, write_synthetic_mnist, Dataset, NoiseModel, Split, Targets, TripletStream};
use tarecon::experiment::{run_sweep, run_train};
use tarecon::recon::{Acquisition, Init, Scheme, UnrollConfig, UnrolledNet};
use tarecon::report::{MetricsRow, TABLE_HEADER};
use tarecon::task::Classifier;
use tarecon::theory::{run_suite, CorollaryOutcome, NoiseCoupling, TOLERANCE};
use tarecon::tomography::{ray_transform, FbpFilter, Geometry, PoissonModel, MNIST_ATTENUATION};
use tarecon::train::{invariance_probe, JointModel, Objective, ReconLossNorm, ReconModel, TaskModel, Terms};
use tarecon::{ParamSet, Tape, Tensor, Var};

fn report(n: u32, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "criterion {n}: {detail}");
}

fn small_model() -> JointModel<f64> {
    let geom = Geometry::parallel(4, 11, (8, 8)).unwrap();
    let acq = Arc::new(Acquisition::new(&geom, FbpFilter::Hann));
    let cfg = UnrollConfig { num_iterations: 2, channels_per_block: vec![4], memory_channels: 2, init: Init::Fbp };
    JointModel {
        recon: ReconModel::Unrolled(UnrolledNet::new(Scheme::GradientDescent, cfg, acq).unwrap()),
        task: TaskModel::Classifier(Classifier { image_size: (8, 8), channels: [2, 3, 4] }),
        recon_loss: ReconLossNorm::Sum,
    }
}

fn small_dataset(seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[8, 8, 8], |_| rng.random_range(0.0..1.0));
    let splits = (0..8).map(|i| if i < 6 { Split::Train } else { Split::Test }).collect();
    Dataset::new(images, Targets::Labels((0..8).collect()), splits).unwrap()
}

/// Pre-trained-looking parameters: initialisation plus jitter so no block
/// sits at its zero initialisation.
fn small_params(m: &JointModel<f64>, seed: u64) -> ParamSet<f64> {
    let (theta, vartheta) = m.init_params(seed).unwrap();
    let mut p = theta.merged(&vartheta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    p
}

#[test]
fn criterion_01_adjoint_identity() {
    let start = Instant::now();
    let rows = adjoint_suite(100, 2024);
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_defect).fold(0.0, f64::max);
    report(
        1,
        rows.len() == 2 && worst < ADJOINT_TOLERANCE && secs < 10.0,
        format!("max relative defect {worst:.2e} over 2 x 100 pairs in {secs:.2} s"),
    );
}

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let rows = gradient_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = rows.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let nets = ["unrolled_lgd", "unrolled_lpd"].iter().all(|n| rows.iter().any(|r| r.name == *n));
    report(
        2,
        failed.is_empty() && nets && secs < 120.0,
        format!("{} cases, worst relative error {worst:.2e}, failed {failed:?}, {secs:.2} s", rows.len()),
    );
}

#[test]
fn criterion_03_joint_loss_identities() {
    let m = small_model();
    let ds = small_dataset(1);
    let params = small_params(&m, 2);
    let geom = Geometry::parallel(4, 11, (8, 8)).unwrap();
    let batch = TripletStream::new(&ds, Split::Train, &geom, NoiseModel::Noiseless, false, 4, 3).unwrap().next_batch().unwrap();

    let eval = |c: f64, pick: for<'t> fn(&Terms<'t, f64>) -> Var<'t, f64>| {
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let t = m.terms(&tape, &bound, &batch, Objective::Joint(c)).unwrap();
        let v = pick(&t).value().item();
        (v, tape.backward(pick(&t), &bound).unwrap())
    };
    let (dx, gx) = eval(0.5, |t| t.d_x.unwrap());
    let (dd, gd) = eval(0.5, |t| t.d_d.unwrap());
    let mut affine_err = 0.0f64;
    for c in [0.0, 0.1, 0.25, 0.5, 0.77, 0.9, 1.0] {
        let (loss, _) = eval(c, |t| t.loss);
        affine_err = affine_err.max((loss - ((1.0 - c) * dx + c * dd)).abs() / (dx.abs() + dd.abs()));
    }
    let (_, g0) = eval(0.0, |t| t.loss);
    let (_, g1) = eval(1.0, |t| t.loss);
    let mut task_at_0 = 0.0f64;
    let mut mismatch = 0.0f64;
    for name in params.names() {
        if m.is_task_param(name) {
            task_at_0 = task_at_0.max(g0[name].norm());
        } else {
            // at C = 0 only d_X drives theta
            mismatch = mismatch.max(g0[name].zip_map(&gx[name], |a, b| a - b).unwrap().norm());
        }
        // at C = 1 the d_X contribution is gone for every parameter
        mismatch = mismatch.max(g1[name].zip_map(&gd[name], |a, b| a - b).unwrap().norm());
    }
    report(
        3,
        affine_err <= 1e-12 && task_at_0 == 0.0 && mismatch == 0.0,
        format!("affinity error {affine_err:.2e}, |task grad at C=0| {task_at_0:e}, |grad - single-term grad| {mismatch:e}"),
    );
}

#[test]
fn criterion_04_non_uniqueness_probe() {
    let m = small_model();
    let ds = small_dataset(18);
    let params = small_params(&m, 19);
    let geom = Geometry::parallel(4, 11, (8, 8)).unwrap();
    let eval = evaluation_batches(&ds, Split::Test, &geom, NoiseModel::Noiseless, 2, None, 0).unwrap();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (a, b) in [(2.0, 0.0), (-0.5, 0.3), (3.0, -1.0), (0.1, 0.9)] {
        let r = invariance_probe(&m, &params, a, b, &eval, 1.0).unwrap();
        worst = worst.max(r.difference / r.original.abs().max(1.0));
    }
    let half = invariance_probe(&m, &params, 2.0, 0.0, &eval, 0.5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        worst <= 1e-12 && half.difference > 0.0,
        format!("C=1 relative change {worst:.2e}, C=0.5 with B=2x change {:.4e}, {secs:.2} s", half.difference),
    );
}

#[test]
fn criterion_05_theory_suite() {
    let start = Instant::now();
    let rows = run_suite(0..1000).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let holding: Vec<_> = rows.iter().filter(|r| r.coupling == NoiseCoupling::Independent).collect();
    let max_dev = holding
        .iter()
        .map(|r| r.corollary.deviation().max(r.independence_deviation).max(r.sufficiency_deviation))
        .fold(0.0, f64::max);
    let all_hold = holding.iter().all(|r| matches!(r.corollary, CorollaryOutcome::Holds { .. }));
    let violating: Vec<_> = rows.iter().filter(|r| r.coupling == NoiseCoupling::CorrelatedWithX).collect();
    let both_fail = violating.iter().all(|r| r.independence_deviation >= TOLERANCE && r.sufficiency_deviation >= TOLERANCE);
    let consistent = rows.iter().all(|r| r.consistent());
    report(
        5,
        holding.len() == 1000 && max_dev < 1e-12 && all_hold && both_fail && consistent && secs < 300.0,
        format!(
            "{} models, max deviation under the hypotheses {max_dev:.2e}, {} violating models fail both sides: {both_fail}, {secs:.1} s",
            rows.len(),
            violating.len()
        ),
    );
}

fn mnist_dir() -> String {
    std::env::var("TARECON_MNIST_DIR").expect("set TARECON_MNIST_DIR to a directory with the four MNIST IDX files")
}

fn mean(rows: &[MetricsRow], regime: &str, f: fn(&MetricsRow) -> f64) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.regime == regime).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Desk-scale MNIST runs of the three regimes for one seed, sharing one
/// pre-training. Results are cached under `target/acceptance` so criteria
/// 6 and 7 reuse the same runs.
fn mnist_runs(seed: u64) -> Vec<MetricsRow> {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance/mnist_seed{seed}"));
    let mut rows = Vec::new();
    for (regime, c) in [("sequential", 0.0), ("joint", 0.5), ("end_to_end", 1.0)] {
        let dir = root.join(regime);
        let cached = dir.join("metrics.csv");
        let table = if cached.exists() {
            tarecon::report::read_table(&cached).unwrap()
        } else {
            let text = format!(
                "mnist_dir = {:?}\nregime = \"{regime}\"\nc = {c}\nseed = {seed}\npretrained_checkpoint = {:?}\n",
                mnist_dir(),
                root.join("pretrained.trkp").display().to_string()
            );
            let cfg = Config::from_toml(&text, Scale::Desk).unwrap();
            run_train(&cfg, &dir).unwrap()
        };
        if rows.is_empty() {
            rows.extend(table.iter().filter(|r| r.regime == "pretrain").cloned());
        }
        rows.extend(table.into_iter().filter(|r| r.regime == regime));
    }
    rows
}

#[test]
#[ignore = "desk-scale MNIST training (3 seeds x 3 regimes); needs TARECON_MNIST_DIR"]
fn criterion_06_mnist_ordering() {
    let rows: Vec<MetricsRow> = (0..3).flat_map(mnist_runs).collect();
    let acc = |regime| mean(&rows, regime, |r| r.accuracy);
    let (joint, seq, pre) = (acc("joint"), acc("sequential"), acc("pretrain"));
    report(
        6,
        joint - seq >= 0.003 && seq - pre >= 0.003,
        format!("mean accuracy joint C=0.5 {joint:.4}, sequential {seq:.4}, pre-training only {pre:.4}"),
    );
}

#[test]
#[ignore = "desk-scale MNIST training; needs TARECON_MNIST_DIR"]
fn criterion_07_end_to_end_degrades_reconstructions() {
    let rows: Vec<MetricsRow> = (0..3).flat_map(mnist_runs).collect();
    let l2 = |regime| mean(&rows, regime, |r| r.l2_loss);
    let (e2e, joint) = (l2("end_to_end"), l2("joint"));
    report(7, e2e >= 1.2 * joint, format!("mean L2 loss C=1 {e2e:.4}, C=0.5 {joint:.4}, ratio {:.3}", e2e / joint));
}

#[test]
#[ignore = "desk-scale segmentation sweep, 5,000 steps per C"]
fn criterion_08_segmentation_sweep() {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance/segmentation");
    let cfg = Config::from_toml("experiment = \"segmentation\"\nc_list = [0.01, 0.5, 0.9, 0.999]\n", Scale::Desk).unwrap();
    let rows = run_sweep(&cfg, &dir).unwrap();
    let at = |c: f64| rows.iter().find(|r| r.c == c).unwrap();
    let (lo, hi) = (at(0.01), at(0.999));
    let monotone = hi.l2_loss >= lo.l2_loss && hi.cross_entropy <= lo.cross_entropy;
    let mid = at(0.5).cross_entropy < lo.cross_entropy && at(0.9).cross_entropy < lo.cross_entropy;
    report(
        8,
        monotone && mid,
        format!(
            "d_X {:.4e} -> {:.4e}, d_D {:.4e} -> {:.4e} (C 0.01 -> 0.999); d_D at 0.5 {:.4e}, at 0.9 {:.4e}",
            lo.l2_loss,
            hi.l2_loss,
            lo.cross_entropy,
            hi.cross_entropy,
            at(0.5).cross_entropy,
            at(0.9).cross_entropy
        ),
    );
}

#[test]
fn criterion_09_poisson_statistics() {
    let model = PoissonModel::mnist();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stats = |line: f64, rng: &mut ChaCha8Rng| {
        let draws = model.sample(&vec![line; n], rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, var)
    };
    let (m0, v0) = stats(0.0, &mut rng);
    let zero_ok = (59.5..=60.5).contains(&m0) && (v0 - 60.0).abs() <= 0.05 * 60.0;

    // a bin with a nonzero line integral through a constant image
    let g = Geometry::parallel(1, 1, (8, 8)).unwrap();
    let p = ray_transform(&Tensor::<f64>::full(&[8, 8], 0.5), &g).unwrap().data().item();
    let lambda = 60.0 * (-MNIST_ATTENUATION * p).exp();
    let (m1, v1) = stats(p, &mut rng);
    let se = (lambda / n as f64).sqrt();
    let line_ok = (m1 - lambda).abs() <= 5.0 * se && (v1 - lambda).abs() <= 0.05 * lambda;
    report(
        9,
        zero_ok && line_ok,
        format!("x=0: mean {m0:.3} variance {v0:.3}; line integral {p:.3}: mean {m1:.3} variance {v1:.3} (expected {lambda:.3})"),
    );
}

#[test]
fn criterion_10_determinism() {
    let data = tempfile::tempdir().unwrap();
    write_synthetic_mnist(data.path(), 40, 16, 10).unwrap();
    let text = format!(
        "mnist_dir = {:?}\nmnist_validation = 8\nsteps = 4\nbatch_size = 4\npretrain_recon_steps = 3\n\
         pretrain_recon_batch_size = 4\npretrain_task_max_steps = 3\npretrain_task_check_every = 1\npretrain_eval_size = 8\n\
         recon_iterations = 2\nrecon_channels = [4, 4]\nclassifier_channels = [2, 2, 2]\neval_batch_size = 8\n\
         c_list = [0.1, 0.5, 0.9]\nseed = 42\n",
        data.path().display().to_string()
    );
    let mut identical = true;
    let mut checked = 0;
    for (precision, regime) in [("f32", "joint"), ("f64", "sequential"), ("f32", "end_to_end")] {
        let cfg = Config::from_toml(&format!("{text}precision = \"{precision}\"\nregime = \"{regime}\"\n"), Scale::Desk).unwrap();
        let runs: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let out = tempfile::tempdir().unwrap();
                run_train(&cfg, out.path()).unwrap();
                std::fs::read(out.path().join("metrics.csv")).unwrap()
            })
            .collect();
        identical &= runs[0] == runs[1] && runs[0].starts_with(TABLE_HEADER.as_bytes());
        checked += 1;
    }
    let cfg = Config::from_toml(&text, Scale::Desk).unwrap();
    let sweeps: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            run_sweep(&cfg, out.path()).unwrap();
            std::fs::read(out.path().join("metrics.csv")).unwrap()
        })
        .collect();
    identical &= sweeps[0] == sweeps[1];
    checked += 1;
    report(10, identical, format!("{checked} configurations run twice, metrics CSVs byte-identical: {identical}"));
}
