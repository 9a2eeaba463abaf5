//! Self-check suites behind `tarecon check`: adjoint identity of the ray
//! transform and finite-difference gradients of every tape primitive and
//! network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check_inputs, check_params, GradCheckReport};
use crate::params::ParamSet;
use crate::recon::{Acquisition, Init, Scheme, UnrollConfig, UnrolledNet};
use crate::report::fmt_sig;
use crate::task::{classification_loss, segmentation_loss, Classifier, UNet};
use crate::tomography::{FbpFilter, Geometry, RayTransform};
use crate::{LinearOp, Tape, Tensor, Var};

pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointRow {
    pub geometry: String,
    pub pairs: usize,
    pub max_defect: f64,
}

impl AdjointRow {
    pub fn passed(&self) -> bool {
        self.max_defect < ADJOINT_TOLERANCE
    }
}

/// Relative defect `|<Ax,y> - <x,A*y>| / (|Ax| |y|)`.
pub fn adjoint_defect(op: &RayTransform, x: &[f64], y: &[f64]) -> f64 {
    let mut ax = vec![0.0; y.len()];
    let mut aty = vec![0.0; x.len()];
    op.forward(x, 1, &mut ax);
    op.adjoint(y, 1, &mut aty);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let scale = dot(&ax, &ax).sqrt() * dot(y, y).sqrt();
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}

/// Random pairs on the MNIST (5×25) and segmentation (30×183) geometries.
pub fn adjoint_suite(pairs: usize, seed: u64) -> Vec<AdjointRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [("mnist_5x25", Geometry::mnist()), ("segmentation_30x183", Geometry::segmentation())]
        .into_iter()
        .map(|(name, g)| {
            let op = RayTransform::new(g.clone());
            let [na, nl] = g.sinogram_shape();
            let (h, w) = g.image_size();
            let mut max_defect = 0.0f64;
            for _ in 0..pairs {
                let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..na * nl).map(|_| rng.random_range(-1.0..1.0)).collect();
                max_defect = max_defect.max(adjoint_defect(&op, &x, &y));
            }
            AdjointRow { geometry: name.into(), pairs, max_defect }
        })
        .collect()
}

pub const ADJOINT_CSV_HEADER: &str = "geometry,pairs,max_defect,passed";

pub fn adjoint_csv(rows: &[AdjointRow]) -> String {
    let mut out = format!("{ADJOINT_CSV_HEADER}\n");
    for r in rows {
        out += &format!("{},{},{:e},{}\n", r.geometry, r.pairs, r.max_defect, r.passed());
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradientRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradientRow {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.passes(GRADIENT_TOLERANCE)
    }
}

type InputCase = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::tensor::Result<Var<'t, f64>> + Send + Sync>;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn jitter(params: &mut ParamSet<f64>, scale: f64, rng: &mut impl Rng) {
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
}

/// Central-difference checks of every differentiable primitive, both
/// unrolled reconstruction nets and both task heads (64-bit).
pub fn gradient_suite(seed: u64) -> crate::tensor::Result<Vec<GradientRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let c = rand_tensor(&[3, 4], &mut rng);
    let img = rand_tensor(&[1, 2, 5, 6], &mut rng);
    let kernel = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let bias2 = rand_tensor(&[2], &mut rng);
    let bias4 = rand_tensor(&[4], &mut rng);
    let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.2..2.0));
    let weights = rand_tensor(&[1, 2, 10, 12], &mut rng);
    let geom = Geometry::parallel(3, 9, (6, 6)).expect("valid geometry");
    let acq = Arc::new(Acquisition::<f64>::new(&geom, FbpFilter::Hann));
    let op: Arc<dyn LinearOp<f64>> = acq.normalized().clone();
    let phantom = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(0.0..1.0));
    let sino = Tensor::from_fn(&[2, 3, 9], |_| rng.random_range(0.0..1.0));

    let op2 = op.clone();
    let cases: Vec<(&str, Vec<Tensor<f64>>, InputCase)> = vec![
        ("matmul", vec![a.clone(), b], Box::new(|_, v| Ok(v[0].matmul(&v[1])?.square().sum()))),
        ("add", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].add(&v[1])?.square().sum()))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].sub(&v[1])?.square().mean()))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].mul(&v[1])?.sum()))),
        ("relu", vec![a.clone()], Box::new(|_, v| Ok(v[0].relu().square().sum()))),
        ("sigmoid", vec![a.clone()], Box::new(|_, v| Ok(v[0].sigmoid().square().sum()))),
        ("exp", vec![a.clone()], Box::new(|_, v| Ok(v[0].exp().sum()))),
        ("log", vec![pos.clone()], Box::new(|_, v| Ok(v[0].log().square().sum()))),
        ("log_floor", vec![pos], Box::new(|_, v| Ok(v[0].log_floor(1e-12).square().sum()))),
        ("softmax", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].softmax()?.mul(&v[1])?.sum()))),
        ("mean", vec![a.clone()], Box::new(|_, v| Ok(v[0].square().mean()))),
        ("scale_shift", vec![a.clone()], Box::new(|_, v| Ok(v[0].scale(-2.5).add_scalar(0.3).square().sum()))),
        (
            "reshape",
            vec![a.clone(), c],
            Box::new(|_, v| Ok(v[0].reshape(&[6, 2])?.mul(&v[1].reshape(&[6, 2])?)?.square().sum())),
        ),
        (
            "concat_narrow",
            vec![img.clone(), img.clone()],
            Box::new(|_, v| Ok(Var::concat(&[v[0], v[1].scale(2.0)], 1)?.narrow(1, 1, 2)?.square().sum())),
        ),
        (
            "conv2d",
            vec![img.clone(), kernel],
            Box::new(|_, v| Ok(v[0].conv2d(&v[1], 1)?.square().sum())),
        ),
        (
            "channel_bias",
            vec![img.clone(), bias2],
            Box::new(|_, v| Ok(v[0].add_channel_bias(&v[1])?.square().sum())),
        ),
        ("row_bias", vec![a, bias4], Box::new(|_, v| Ok(v[0].add_row_bias(&v[1])?.square().sum()))),
        ("max_pool2d", vec![img.clone()], Box::new(|_, v| Ok(v[0].max_pool2d()?.square().sum()))),
        (
            "upsample2",
            vec![img],
            Box::new(move |t, v| Ok(v[0].upsample2()?.mul(&t.constant(weights.clone()))?.sum())),
        ),
        ("ray_transform", vec![phantom], Box::new(move |_, v| Ok(v[0].linear(&op)?.square().sum()))),
        ("ray_adjoint", vec![sino.clone()], Box::new(move |_, v| Ok(v[0].linear_adjoint(&op2)?.square().sum()))),
    ];
    let mut rows = std::thread::scope(|s| {
        let handles: Vec<_> = cases
            .iter()
            .map(|(name, inputs, f)| s.spawn(move || check_inputs(inputs, |t, v| f(t, v), 1e-3).map(|report| GradientRow { name: (*name).into(), report })))
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient case panicked")).collect::<crate::tensor::Result<Vec<_>>>()
    })?;

    let target = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(0.0..1.0));
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        let cfg = UnrollConfig { num_iterations: 2, channels_per_block: vec![3], memory_channels: 2, init: Init::Fbp };
        let net = UnrolledNet::new(scheme, cfg, acq.clone())?;
        let mut params = net.init_params(&mut rng)?;
        // the last layer of each block starts at zero; move off it so
        // every block contributes
        jitter(&mut params, 0.3, &mut rng);
        let report = check_params(
            &params,
            |tape, bound| {
                let out = net.forward(bound, tape.constant(sino.clone()))?;
                Ok(out.sub(&tape.constant(target.clone()))?.square().mean())
            },
            1e-5,
            Some(6),
        )?;
        rows.push(GradientRow { name: format!("unrolled_{scheme}"), report });
    }

    let clf = Classifier { image_size: (8, 8), channels: [2, 3, 4] };
    let mut params = clf.init_params(&mut rng)?;
    // zero biases put ReLU inputs exactly on the kink
    jitter(&mut params, 0.05, &mut rng);
    let x = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0));
    let labels = [1, 4, 9];
    let report = check_params(
        &params,
        |tape, bound| classification_loss(clf.classify(bound, tape.constant(x.clone()))?, &labels),
        1e-6,
        Some(8),
    )?;
    rows.push(GradientRow { name: "classifier".into(), report });

    let unet = UNet { image_size: (8, 8), base_channels: 2 };
    let mut params = unet.init_params(&mut rng)?;
    jitter(&mut params, 0.05, &mut rng);
    let x = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(0.0..1.0));
    let mask = Tensor::from_fn(&[2, 8, 8], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let report = check_params(
        &params,
        |tape, bound| segmentation_loss(unet.segment(bound, tape.constant(x.clone()))?, &mask),
        1e-6,
        Some(6),
    )?;
    rows.push(GradientRow { name: "unet".into(), report });
    Ok(rows)
}

pub const GRADIENT_CSV_HEADER: &str = "name,checked,max_rel_err,max_small_abs_err,passed";

pub fn gradient_csv(rows: &[GradientRow]) -> String {
    let mut out = format!("{GRADIENT_CSV_HEADER}\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{}\n",
            r.name,
            r.report.checked,
            fmt_sig(r.report.max_rel_err),
            fmt_sig(r.report.max_small_abs_err),
            r.passed()
        );
    }
    out
}
