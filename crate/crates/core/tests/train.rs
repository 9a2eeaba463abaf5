use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tarecon::data::{evaluation_batches, Dataset, NoiseModel, Split, Targets, TripletStream};
use tarecon::recon::{Acquisition, Init, Scheme, UnrollConfig, UnrolledNet};
use tarecon::task::Classifier;
use tarecon::tomography::{FbpFilter, Geometry};
use tarecon::train::*;
use tarecon::{ParamSet, Tape, Tensor};

fn geometry() -> Geometry {
    Geometry::parallel(4, 11, (8, 8)).unwrap()
}

fn dataset(n: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[n, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|i| i % 10).collect();
    let splits = (0..n).map(|i| if i < n * 3 / 4 { Split::Train } else { Split::Test }).collect();
    Dataset::new(images, Targets::Labels(labels), splits).unwrap()
}

fn model(init: Init) -> JointModel<f64> {
    let acq = Arc::new(Acquisition::new(&geometry(), FbpFilter::Hann));
    let cfg = UnrollConfig { num_iterations: 2, channels_per_block: vec![4], memory_channels: 2, init };
    JointModel {
        recon: ReconModel::Unrolled(UnrolledNet::new(Scheme::GradientDescent, cfg, acq).unwrap()),
        task: TaskModel::Classifier(Classifier { image_size: (8, 8), channels: [2, 3, 4] }),
        recon_loss: ReconLossNorm::Sum,
    }
}

fn jitter(params: &ParamSet<f64>, scale: f64, seed: u64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
    p
}

fn initial(m: &JointModel<f64>, seed: u64) -> ParamSet<f64> {
    let (theta, vartheta) = m.init_params(seed).unwrap();
    jitter(&theta.merged(&vartheta).unwrap(), 0.05, seed)
}

fn stream(ds: &Dataset<f64>, batch: usize, seed: u64) -> TripletStream<'_, f64> {
    TripletStream::new(ds, Split::Train, &geometry(), NoiseModel::Noiseless, false, batch, seed).unwrap()
}

fn regime(regime: Regime, c: f64, steps: usize, seed: u64) -> RegimeConfig {
    RegimeConfig {
        regime,
        c,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        lr_min: 1e-5,
        batch_size: 4,
        steps,
        recon_steps: steps,
        seed,
    }
}

proptest! {
    #[test]
    fn joint_loss_is_affine_in_c(dx in 0.0..100.0f64, dd in 0.0..10.0f64, c in 0.0..=1.0f64) {
        let tape = Tape::<f64>::new();
        let at = |c: f64| joint_loss(tape.constant(Tensor::scalar(dx)), tape.constant(Tensor::scalar(dd)), c).unwrap().value().item();
        let (v0, v1) = (at(0.0), at(1.0));
        prop_assert!((at(c) - ((1.0 - c) * v0 + c * v1)).abs() <= 1e-12 * (1.0 + v0.abs() + v1.abs()));
    }
}

#[test]
fn c_outside_unit_interval_is_rejected() {
    let tape = Tape::<f64>::new();
    let z = || tape.constant(Tensor::scalar(1.0));
    for c in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(joint_loss(z(), z(), c), Err(TrainError::Config(_))));
        assert!(regime(Regime::Joint, c, 1, 0).validate().is_err());
    }
}

#[test]
fn gradient_decomposition_at_the_endpoints() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 1);
    let params = initial(&m, 2);
    let batch = stream(&ds, 4, 3).next_batch().unwrap();
    let grads = |objective: Objective, pick: for<'t> fn(&Terms<'t, f64>) -> tarecon::Var<'t, f64>| {
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let t = m.terms(&tape, &bound, &batch, objective).unwrap();
        tape.backward(pick(&t), &bound).unwrap()
    };
    let g0 = grads(Objective::Joint(0.0), |t| t.loss);
    let g1 = grads(Objective::Joint(1.0), |t| t.loss);
    let gx = grads(Objective::Joint(0.5), |t| t.d_x.unwrap());
    let gd = grads(Objective::Joint(0.5), |t| t.d_d.unwrap());
    for name in params.names() {
        let task = m.is_task_param(name);
        if task {
            assert!(g0[name].data().iter().all(|&v| v == 0.0), "C=0 task gradient for {name}");
            assert!(gd[name].norm() > 0.0);
        } else {
            assert_eq!(g0[name], gx[name], "C=0 must equal the reconstruction gradient for {name}");
            assert!(gx[name].norm() > 0.0);
        }
        assert_eq!(g1[name], gd[name], "C=1 must equal the task gradient for {name}");
    }
}

#[test]
fn schedule_and_optimizer_basics() {
    let s = Schedule { lr: 1e-3, lr_min: 1e-5, steps: 101 };
    assert_eq!(s.at(0), 1e-3);
    assert!((s.at(100) - 1e-5).abs() < 1e-18);
    assert!((s.at(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    assert!((1..101).all(|k| s.at(k) <= s.at(k - 1)));

    // Adam's first step moves every coordinate by lr against the gradient sign
    let mut p = ParamSet::<f64>::new();
    p.insert("w", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let mut g = std::collections::BTreeMap::new();
    g.insert("w".to_string(), Tensor::new(&[3], vec![0.5, -4.0, 1e-3]).unwrap());
    let mut adam = Optimizer::new(OptimizerKind::Adam);
    adam.step(&mut p, &g, 0.1);
    let w = p.get("w").unwrap().data().to_vec();
    for (got, want) in w.iter().zip([0.9, 2.1, 2.9]) {
        assert!((got - want).abs() < 1e-6, "{w:?}");
    }
    let mut sgd = Optimizer::new(OptimizerKind::Sgd);
    sgd.step(&mut p, &g, 0.1);
    assert!((p.get("w").unwrap().data()[1] - (w[1] + 0.4)).abs() < 1e-12);
}

#[test]
fn c_zero_reproduces_the_sequential_reconstruction_stage() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 4);
    let init = initial(&m, 5);
    let steps = 6;

    let mut seq = init.clone();
    let recs_seq = train_stage(
        &m,
        &mut seq,
        &mut stream(&ds, 4, 9),
        &StageConfig { objective: Objective::Reconstruction, steps, optimizer: OptimizerKind::Adam, lr: 1e-3, lr_min: 1e-5 },
        &Outputs::none(),
    )
    .unwrap();
    let mut joint = init.clone();
    let recs_joint = train_joint(&m, &mut joint, &mut stream(&ds, 4, 9), &regime(Regime::Joint, 0.0, steps, 0), &Outputs::none()).unwrap();

    let dx = |r: &[StepRecord]| r.iter().map(|s| s.d_x.unwrap()).collect::<Vec<_>>();
    assert_eq!(dx(&recs_seq), dx(&recs_joint));
    for (name, t) in seq.iter() {
        assert_eq!(t, joint.get(name).unwrap(), "{name}");
    }
}

#[test]
fn sequential_second_stage_freezes_reconstruction() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 6);
    let mut params = initial(&m, 7);
    let mut s = stream(&ds, 4, 1);
    train_stage(&m, &mut params, &mut s, &StageConfig { objective: Objective::Reconstruction, steps: 2, optimizer: OptimizerKind::Adam, lr: 1e-3, lr_min: 1e-3 }, &Outputs::none()).unwrap();
    let before = params.clone();
    let recs = train_stage(&m, &mut params, &mut s, &StageConfig { objective: Objective::TaskOnReconstructions, steps: 3, optimizer: OptimizerKind::Adam, lr: 1e-3, lr_min: 1e-3 }, &Outputs::none()).unwrap();
    assert!(recs.iter().all(|r| r.d_x.is_none() && r.d_d.is_some()));
    for (name, t) in before.iter() {
        if m.is_task_param(name) {
            assert_ne!(t, params.get(name).unwrap(), "{name} should have moved");
        } else {
            assert_eq!(t, params.get(name).unwrap(), "{name} must stay frozen");
        }
    }
}

#[test]
fn end_to_end_is_joint_with_c_one() {
    let m = model(Init::Zero);
    let ds = dataset(8, 8);
    let init = initial(&m, 9);
    let mut a = init.clone();
    let mut b = init.clone();
    let ra = train_end_to_end(&m, &mut a, &mut stream(&ds, 4, 2), &regime(Regime::EndToEnd, 0.3, 3, 0), &Outputs::none()).unwrap();
    let rb = train_joint(&m, &mut b, &mut stream(&ds, 4, 2), &regime(Regime::Joint, 1.0, 3, 0), &Outputs::none()).unwrap();
    assert_eq!(ra, rb);
    assert!(ra.iter().all(|r| r.joint == r.d_d.unwrap()));
}

#[test]
fn repeated_runs_write_identical_logs() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 10);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    for d in &dirs {
        let mut p = initial(&m, 11);
        let out = Outputs::in_dir(d.path(), 1, 2);
        train_regime(&m, &mut p, &mut stream(&ds, 4, 12), &regime(Regime::Sequential, 0.0, 3, 0), &out).unwrap();
        logs.push(std::fs::read_to_string(d.path().join("steps.csv")).unwrap());
        assert!(d.path().join("reconstruction_step000002.trkp").exists());
    }
    assert_eq!(logs[0], logs[1]);
    assert!(logs[0].starts_with(STEP_CSV_HEADER));
    assert_eq!(logs[0].lines().count(), 7);
}

#[test]
fn reconstruction_training_overfits_a_fixed_batch() {
    let m = model(Init::Zero);
    let ds = dataset(4, 13);
    let (theta, _) = m.init_params(14).unwrap();
    let mut params = theta;
    let recs = train_stage(
        &m,
        &mut params,
        &mut TripletStream::new(&ds, Split::Train, &geometry(), NoiseModel::Noiseless, false, 3, 15).unwrap(),
        &StageConfig { objective: Objective::Reconstruction, steps: 100, optimizer: OptimizerKind::Adam, lr: 1e-2, lr_min: 1e-4 },
        &Outputs::none(),
    )
    .unwrap();
    let losses: Vec<f64> = recs.iter().map(|r| r.joint).collect();
    // averages over windows of ten steps decrease
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    assert!(losses[99] < 0.5 * losses[0], "{} -> {}", losses[0], losses[99]);
}

#[test]
fn divergence_aborts_with_last_good_parameters() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 16);
    let mut params = initial(&m, 17);
    params.get_mut("clf.dense.w").unwrap().data_mut()[0] = f64::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train_joint(&m, &mut params, &mut stream(&ds, 4, 1), &regime(Regime::Joint, 0.5, 3, 0), &Outputs::in_dir(dir.path(), 1, 0)).unwrap_err();
    match err {
        TrainError::Diverged { step, last_good: Some(path), .. } => {
            assert_eq!(step, 0);
            assert_eq!(ParamSet::<f64>::load(&path).unwrap().len(), params.len());
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn invariance_probe_behaviour() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 18);
    let params = initial(&m, 19);
    let eval = evaluation_batches(&ds, Split::Test, &geometry(), NoiseModel::Noiseless, 2, None, 0).unwrap();

    let id = invariance_probe(&m, &params, 1.0, 0.0, &eval, 1.0).unwrap();
    assert_eq!(id.difference, 0.0);
    for (a, b) in [(2.0, 0.0), (-0.5, 0.3), (3.0, -1.0)] {
        let r = invariance_probe(&m, &params, a, b, &eval, 1.0).unwrap();
        assert!(r.difference <= 1e-12 * r.original.abs().max(1.0), "a={a} b={b}: {r:?}");
    }
    let half = invariance_probe(&m, &params, 2.0, 0.0, &eval, 0.5).unwrap();
    assert!(half.difference > 0.0, "{half:?}");
    assert!(invariance_probe(&m, &params, 0.0, 1.0, &eval, 1.0).is_err());
}

#[test]
fn sweep_marks_failures_and_keeps_going() {
    let m = model(Init::Fbp);
    let ds = dataset(8, 20);
    let init = initial(&m, 21);
    let eval = evaluation_batches(&ds, Split::Test, &geometry(), NoiseModel::Noiseless, 2, None, 0).unwrap();
    let cfg = regime(Regime::Joint, 0.0, 2, 5);
    let mut calls = 0;
    let rows = sweep_c(
        &m,
        &init,
        |seed| {
            calls += 1;
            if calls == 2 {
                return Err(TrainError::Config("simulated failure".into()));
            }
            Ok(stream(&ds, 4, seed))
        },
        &eval,
        &cfg,
        &[0.1, 0.5, 0.9],
        None,
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].metrics.is_some() && rows[2].metrics.is_some());
    assert!(rows[1].error.as_deref().unwrap().contains("simulated"));

    let single = sweep_c(&m, &init, |seed| Ok(stream(&ds, 4, seed)), &eval, &cfg, &[0.5], None).unwrap();
    assert_eq!(single.len(), 1);
    let mut direct = init.clone();
    train_joint(&m, &mut direct, &mut stream(&ds, 4, 5), &RegimeConfig { c: 0.5, ..cfg.clone() }, &Outputs::none()).unwrap();
    assert_eq!(single[0].metrics.unwrap(), evaluate(&m, &direct, &eval, false).unwrap());

    assert!(sweep_c(&m, &init, |seed| Ok(stream(&ds, 4, seed)), &eval, &cfg, &[], None).is_err());
    assert!(sweep_c(&m, &init, |seed| Ok(stream(&ds, 4, seed)), &eval, &cfg, &[0.5, 2.0], None).is_err());
}

#[test]
fn evaluation_metrics_are_consistent() {
    let m = model(Init::Fbp);
    let ds = dataset(12, 22);
    let params = initial(&m, 23);
    let eval = evaluation_batches(&ds, Split::Test, &geometry(), NoiseModel::Noiseless, 2, None, 0).unwrap();
    let e = evaluate(&m, &params, &eval, false).unwrap();
    assert_eq!(e.count, 3);
    assert!((0.0..=1.0).contains(&e.accuracy));
    assert!(e.l2_loss > 0.0 && e.cross_entropy > 0.0);
    let clean = evaluate(&m, &params, &eval, true).unwrap();
    assert_eq!(clean.l2_loss, 0.0);
}
