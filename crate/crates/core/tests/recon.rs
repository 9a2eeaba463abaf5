use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tarecon::gradcheck::check_params;
use tarecon::recon::{fbp_operator, Acquisition, Init, Scheme, UnrollConfig, UnrolledNet};
use tarecon::tomography::{disc_phantom, ray_transform, FbpFilter, Geometry, Sinogram, MNIST_ATTENUATION};
use tarecon::{ParamSet, Tape, Tensor, TensorError};

fn small_geometry() -> Geometry {
    Geometry::parallel(3, 9, (6, 6)).unwrap()
}

fn small_config(iterations: usize, init: Init) -> UnrollConfig {
    UnrollConfig { num_iterations: iterations, channels_per_block: vec![3], memory_channels: 2, init }
}

fn net(scheme: Scheme, cfg: UnrollConfig, geom: &Geometry) -> UnrolledNet<f64> {
    UnrolledNet::new(scheme, cfg, Arc::new(Acquisition::new(geom, FbpFilter::Hann))).unwrap()
}

/// Adds uniform noise to every parameter so no block is exactly zero.
fn jitter(params: &ParamSet<f64>, scale: f64, rng: &mut impl Rng) -> ParamSet<f64> {
    let mut p = params.clone();
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    }
    p
}

fn random_sinos(geom: &Geometry, batch: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let [na, nl] = geom.sinogram_shape();
    Tensor::from_fn(&[batch, na, nl], |_| rng.random_range(0.0..2.0))
}

fn run(net: &UnrolledNet<f64>, params: &ParamSet<f64>, y: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
    let tape = Tape::new();
    let bound = tape.bind(params);
    let out = net.forward(&bound, tape.constant(y.clone()))?;
    Ok((*out.value()).clone())
}

#[test]
fn fresh_parameters_return_the_initialisation() {
    let geom = small_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = random_sinos(&geom, 2, &mut rng);
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        for init in [Init::Zero, Init::Fbp] {
            let n = net(scheme, small_config(3, init), &geom);
            let params = n.init_params(&mut rng).unwrap();
            let out = run(&n, &params, &y).unwrap();
            assert_eq!(out, n.initial_image(&y).unwrap(), "{scheme} {init}");
        }
    }
}

#[test]
fn output_shape_independent_of_depth() {
    let geom = small_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random_sinos(&geom, 3, &mut rng);
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        for depth in 1..=4 {
            let n = net(scheme, small_config(depth, Init::Zero), &geom);
            let params = jitter(&n.init_params(&mut rng).unwrap(), 0.2, &mut rng);
            assert_eq!(run(&n, &params, &y).unwrap().shape(), &[3, 6, 6]);
        }
    }
}

#[test]
fn wrong_sinogram_shape_rejected() {
    let geom = small_geometry();
    let n = net(Scheme::PrimalDual, small_config(1, Init::Zero), &geom);
    let params = n.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = run(&n, &params, &Tensor::zeros(&[1, 3, 8])).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }), "{err}");
    assert!(small_config(0, Init::Zero).validate().is_err());
    assert!(UnrollConfig { channels_per_block: vec![], ..small_config(1, Init::Zero) }.validate().is_err());
}

#[test]
fn missing_parameter_is_an_error() {
    let geom = small_geometry();
    let n3 = net(Scheme::GradientDescent, small_config(3, Init::Zero), &geom);
    let n2 = net(Scheme::GradientDescent, small_config(2, Init::Zero), &geom);
    let params = n2.init_params(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(run(&n3, &params, &Tensor::zeros(&[1, 3, 9])).is_err());
}

#[test]
fn every_parameter_receives_gradient() {
    let geom = small_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = random_sinos(&geom, 2, &mut rng);
    let target = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(0.0..1.0));
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        let n = net(scheme, small_config(3, Init::Fbp), &geom);
        let params = jitter(&n.init_params(&mut rng).unwrap(), 0.3, &mut rng);
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let out = n.forward(&bound, tape.constant(y.clone())).unwrap();
        let loss = out.sub(&tape.constant(target.clone())).unwrap().square().sum();
        let grads = tape.backward(loss, &bound).unwrap();
        assert_eq!(grads.len(), params.len());
        for (name, g) in &grads {
            assert!(g.norm() > 0.0, "{scheme}: zero gradient for {name}");
        }
    }
}

#[test]
fn finite_difference_gradients() {
    let geom = small_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_sinos(&geom, 2, &mut rng);
    let target = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(0.0..1.0));
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        let n = net(scheme, small_config(2, Init::Fbp), &geom);
        let params = jitter(&n.init_params(&mut rng).unwrap(), 0.3, &mut rng);
        let report = check_params(
            &params,
            |tape, bound| {
                let out = n.forward(bound, tape.constant(y.clone()))?;
                Ok(out.sub(&tape.constant(target.clone()))?.square().mean())
            },
            1e-5,
            Some(6),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{scheme}: {report:?}");
    }
}

#[test]
fn depth_matters() {
    let geom = small_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = random_sinos(&geom, 1, &mut rng);
    for scheme in [Scheme::GradientDescent, Scheme::PrimalDual] {
        let deep = net(scheme, small_config(3, Init::Zero), &geom);
        let shallow = net(scheme, small_config(2, Init::Zero), &geom);
        let params = jitter(&deep.init_params(&mut rng).unwrap(), 0.3, &mut rng);
        let a = run(&deep, &params, &y).unwrap();
        let b = run(&shallow, &params, &y).unwrap();
        assert!(a.zip_map(&b, |p, q| p - q).unwrap().norm() > 1e-8, "{scheme}");
    }
}

#[test]
fn embedded_operator_is_adjoint_consistent() {
    let geom = Geometry::mnist();
    let acq = Acquisition::<f64>::new(&geom, FbpFilter::Hann);
    let op = acq.normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..28 * 28).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..5 * 25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut ax, mut aty) = (vec![0.0; 125], vec![0.0; 784]);
    op.apply(&x, 1, &mut ax);
    op.apply_adjoint(&y, 1, &mut aty);
    let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
    let scale = ax.iter().map(|v| v * v).sum::<f64>().sqrt() * y.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((lhs - rhs).abs() / scale < 1e-12);
    // normalised operator has unit norm
    let mut plain = vec![0.0; 125];
    acq.ray().forward(&x, 1, &mut plain);
    for (p, n) in plain.iter().zip(&ax) {
        assert!((p / acq.norm() - n).abs() < 1e-12);
    }
}

#[test]
fn operator_norm_bounds_the_operator() {
    let geom = Geometry::mnist();
    let acq = Acquisition::<f64>::new(&geom, FbpFilter::Hann);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x: Vec<f64> = (0..784).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ax = vec![0.0; 125];
        acq.ray().forward(&x, 1, &mut ax);
        let ratio = ax.iter().map(|v| v * v).sum::<f64>().sqrt() / x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(ratio <= acq.norm() * (1.0 + 1e-6));
    }
}

#[test]
fn fbp_operator_contract() {
    let geom = Geometry::mnist();
    let photons = 60.0;
    let full = Sinogram::new(Tensor::<f64>::full(&[5, 25], photons), &geom).unwrap();
    let zero = fbp_operator(&full, photons).unwrap();
    assert!(zero.data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let counts = Sinogram::new(Tensor::from_fn(&[5, 25], |_| rng.random_range(0.0..60.0f64).round()), &geom).unwrap();
    let a = fbp_operator(&counts, photons).unwrap();
    assert_eq!(a, fbp_operator(&counts, photons).unwrap());
    assert!(a.all_finite());

    // noiseless counts of a weakly attenuating disc on the dense geometry
    // (central chord 80, transmission about 0.47)
    let dense = Geometry::parallel(180, 183, (128, 128)).unwrap();
    let disc = disc_phantom::<f64>(&dense, 40.0, 0.05);
    let sino = ray_transform(&disc, &dense).unwrap();
    let counts = sino.data().map(|t| photons * (-MNIST_ATTENUATION * t).exp());
    let rec = fbp_operator(&Sinogram::new(counts, &dense).unwrap(), photons).unwrap();
    let err = rec.zip_map(&disc, |a, b| a - b).unwrap().norm() / disc.norm();
    assert!(err < 0.1, "relative error {err}");
}
