use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tarecon::gradcheck::{check_inputs, check_params};
use tarecon::{ParamSet, Tape, Tensor, TensorError};

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct summation cross-correlation, independent of the im2col path.
fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ho, wo) = (h + 2 * pad + 1 - kh, w + 2 * pad + 1 - kw);
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    for b in 0..n {
        for o in 0..f {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = y as isize + i as isize - pad as isize;
                                let ix = xx as isize + j as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ch) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * f + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel() {
    let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv2d(&tape.constant(k), 1).unwrap();
    assert_eq!(*y.value(), x);
}

#[test]
fn conv_zero_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let y = tape
        .constant(rand_tensor(&[2, 3, 6, 5], &mut rng))
        .conv2d(&tape.constant(Tensor::zeros(&[4, 3, 3, 3])), 1)
        .unwrap();
    assert_eq!(y.shape(), vec![2, 4, 6, 5]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
    let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
    for pad in [0, 1, 2] {
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(&tape.constant(k.clone()), pad).unwrap();
        let expect = conv_oracle(&x, &k, pad);
        assert_eq!(y.shape(), expect.shape());
        for (a, b) in y.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let wrong_channels = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let even = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(x.conv2d(&wrong_channels, 1), Err(TensorError::Shape { .. })));
    assert!(matches!(x.conv2d(&even, 1), Err(TensorError::Shape { .. })));
    let msg = x.conv2d(&wrong_channels, 1).unwrap_err().to_string();
    assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn quadratic_and_linear_gradients() {
    let mut p = ParamSet::<f64>::new();
    p.insert("p", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    p.insert("unused", Tensor::ones(&[2])).unwrap();
    let tape = Tape::new();
    let b = tape.bind(&p);
    let pv = b.get("p").unwrap();
    let loss = pv.mul(&pv).unwrap().sum();
    let g = tape.backward(loss, &b).unwrap();
    assert_eq!(g["p"].data(), &[2.0, 4.0, 6.0]);
    assert_eq!(g["unused"].data(), &[0.0, 0.0]);

    let tape = Tape::new();
    let b = tape.bind(&p);
    let a = tape.constant(Tensor::new(&[3], vec![0.5, -1.0, 4.0]).unwrap());
    let loss = a.mul(&b.get("p").unwrap()).unwrap().sum();
    let g = tape.backward(loss, &b).unwrap();
    assert_eq!(g["p"].data(), &[0.5, -1.0, 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut p = ParamSet::<f64>::new();
    p.insert("p", Tensor::ones(&[3])).unwrap();
    let tape = Tape::new();
    let b = tape.bind(&p);
    let v = b.get("p").unwrap().relu();
    assert!(matches!(tape.backward(v, &b), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn two_layer_conv_relu_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::<f64>::new();
    p.add_conv("c1", 4, 2, 3, false, &mut rng).unwrap();
    p.add_conv("c2", 1, 4, 3, false, &mut rng).unwrap();
    // non-zero biases so the bias gradients are exercised away from symmetry
    p.get_mut("c1.b").unwrap().data_mut().copy_from_slice(&[0.1, -0.2, 0.05, 0.3]);
    let x = rand_tensor(&[2, 2, 6, 6], &mut rng);
    let r = check_params(
        &p,
        |tape, b| {
            let h = tape
                .constant(x.clone())
                .conv2d(&b.get("c1.w")?, 1)?
                .add_channel_bias(&b.get("c1.b")?)?
                .relu();
            let y = h.conv2d(&b.get("c2.w")?, 1)?.add_channel_bias(&b.get("c2.b")?)?;
            Ok(y.square().sum())
        },
        1e-3,
        None,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
    assert!(r.checked > 80);
}

#[test]
fn softmax_relu_pool_examples() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::zeros(&[1, 10])).softmax().unwrap();
    assert!(s.value().data().iter().all(|&v| (v - 0.1).abs() < 1e-15));

    let r = tape.constant(Tensor::new(&[4], vec![-2.0, -0.5, 0.0, 3.0]).unwrap()).relu();
    assert_eq!(r.value().data(), &[0.0, 0.0, 0.0, 3.0]);

    let ramp = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let p = tape.constant(ramp).max_pool2d().unwrap();
    assert_eq!(p.shape(), vec![1, 1, 2, 2]);
    assert_eq!(p.value().data(), &[5.0, 7.0, 13.0, 15.0]);
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let c = rand_tensor(&[3, 4], &mut rng);
    let img = rand_tensor(&[1, 2, 5, 6], &mut rng);
    let pos = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.2..2.0));
    let weights = rand_tensor(&[1, 2, 10, 12], &mut rng);

    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn for<'t> Fn(&'t Tape<f64>, &[tarecon::Var<'t, f64>]) -> tarecon::tensor::Result<tarecon::Var<'t, f64>>>)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|_, v| Ok(v[0].matmul(&v[1])?.square().sum()))),
        ("add", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].add(&v[1])?.square().sum()))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].sub(&v[1])?.square().mean()))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].mul(&v[1])?.sum()))),
        ("relu", vec![a.clone()], Box::new(|_, v| Ok(v[0].relu().square().sum()))),
        ("sigmoid", vec![a.clone()], Box::new(|_, v| Ok(v[0].sigmoid().square().sum()))),
        ("exp", vec![a.clone()], Box::new(|_, v| Ok(v[0].exp().sum()))),
        ("log", vec![pos.clone()], Box::new(|_, v| Ok(v[0].log().square().sum()))),
        ("softmax", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].softmax()?.mul(&v[1])?.sum()))),
        ("mean", vec![a.clone()], Box::new(|_, v| Ok(v[0].square().mean()))),
        ("scale_shift", vec![a.clone()], Box::new(|_, v| Ok(v[0].scale(-2.5).add_scalar(0.3).square().sum()))),
        ("reshape", vec![a.clone(), c.clone()], Box::new(|_, v| Ok(v[0].reshape(&[6, 2])?.mul(&v[1].reshape(&[2, 6])?.reshape(&[6, 2])?)?.square().sum()))),
        (
            "concat_narrow",
            vec![img.clone(), img.clone()],
            Box::new(|_, v| {
                let cat = tarecon::Var::concat(&[v[0], v[1].scale(2.0)], 1)?;
                Ok(cat.narrow(1, 1, 2)?.square().sum())
            }),
        ),
        ("max_pool2d", vec![img.clone()], Box::new(|_, v| Ok(v[0].max_pool2d()?.square().sum()))),
        (
            "upsample2",
            vec![img.clone()],
            Box::new(move |t, v| Ok(v[0].upsample2()?.mul(&t.constant(weights.clone()))?.sum())),
        ),
    ];
    for (name, inputs, f) in cases {
        let r = check_inputs(&inputs, |t, v| f(t, v), 1e-3).unwrap();
        assert!(r.passes(1e-4), "{name}: {r:?}");
    }
}

#[test]
fn biases_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamSet::<f64>::new();
    p.add_dense("d", 5, 3, false, &mut rng).unwrap();
    p.get_mut("d.b").unwrap().data_mut().copy_from_slice(&[0.2, -0.1, 0.4]);
    let x = rand_tensor(&[4, 5], &mut rng);
    let r = check_params(
        &p,
        |t, b| Ok(t.constant(x.clone()).matmul(&b.get("d.w")?)?.add_row_bias(&b.get("d.b")?)?.softmax()?.log().sum()),
        1e-3,
        None,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn repeated_forward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ParamSet::<f32>::new();
    p.add_conv("c", 8, 1, 3, false, &mut rng).unwrap();
    let x: Tensor<f32> = rand_tensor(&[2, 1, 9, 9], &mut rng).cast();
    let run = || {
        let tape = Tape::new();
        let b = tape.bind(&p);
        let y = tape.constant(x.clone()).conv2d(&b.get("c.w").unwrap(), 1).unwrap().relu().sum();
        let g = tape.backward(y, &b).unwrap();
        (y.value().item().to_bits(), g["c.w"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(seed in 0u64..1000, alpha in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        p.insert("w", rand_tensor(&[3, 3], &mut rng)).unwrap();
        let x = rand_tensor(&[2, 3], &mut rng);
        let grads = |which: u8| {
            let tape = Tape::new();
            let b = tape.bind(&p);
            let h = tape.constant(x.clone()).matmul(&b.get("w").unwrap()).unwrap();
            let l1 = h.square().sum();
            let l2 = h.relu().exp().mean();
            let loss = match which {
                0 => l1,
                1 => l2,
                _ => l1.add(&l2.scale(alpha)).unwrap(),
            };
            tape.backward(loss, &b).unwrap().remove("w").unwrap()
        };
        let (g1, g2, g12) = (grads(0), grads(1), grads(2));
        for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
            prop_assert!((a + alpha * b - c).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }
}
