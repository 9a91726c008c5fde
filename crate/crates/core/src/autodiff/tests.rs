use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracle::{finite_diff, naive_conv2d, GradReport};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `build` by reducing its output with fixed random weights to a scalar.
fn gradcheck(x: Tensor<f64>, h: f64, build: impl Fn(&mut Tape<f64>, Var) -> Var) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = build(&mut t, v);
        t.shape(out).to_vec()
    };
    let weights = random(&probe_shape, &mut rng);
    let eval = |t: &mut Tape<f64>, xv: Var| {
        let out = build(t, xv);
        let w = t.constant(weights.clone());
        let prod = t.mul(out, w).unwrap();
        t.sum(prod).unwrap()
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = eval(&mut tape, xv);
    tape.backward(loss).unwrap();
    let analytic = tape.grad_tensor(xv);
    let numeric = finite_diff(
        |p| {
            let mut t = Tape::new();
            let v = t.constant(p.clone());
            let l = eval(&mut t, v);
            t.item(l)
        },
        &x,
        h,
    )
    .unwrap();
    GradReport::compare("op", analytic.data(), numeric.data()).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.scalar(0.0);
    let s = t.sigmoid(z).unwrap();
    let e = t.exp(z).unwrap();
    assert_eq!(t.item(s), 0.5);
    assert_eq!(t.item(e), 1.0);

    let x = t.param(Tensor::scalar(1.5));
    let c = t.clamp(x, 0.0, 1.0).unwrap();
    assert_eq!(t.item(c), 1.0);
    t.backward(c).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0]);
}

#[test]
fn clamp_boundary_gradient_is_one() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_vec(vec![0.0, 1.0, 0.5, -0.2]));
    let c = t.clamp(x, 0.0, 1.0).unwrap();
    let s = t.sum(c).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn broadcasting_beyond_scalar_is_rejected() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    let s = t.scalar(2.0);
    let ok = t.mul(a, s).unwrap();
    assert_eq!(t.shape(ok), &[2, 3]);
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.value(y), t.value(x));

    let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
    assert!(matches!(t.matmul(a, a), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let bb = b.clone();
    let ra = gradcheck(a.clone(), 1e-5, move |t, x| {
        let bv = t.constant(bb.clone());
        t.matmul(x, bv).unwrap()
    });
    let rb = gradcheck(b, 1e-5, move |t, x| {
        let av = t.constant(a.clone());
        t.matmul(av, x).unwrap()
    });
    assert!(ra.passed(1e-6), "{ra}");
    assert!(rb.passed(1e-6), "{rb}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::from_vec(vec![0.0; 3]));
    let s = t.softmax(z, 0).unwrap();
    for &v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = t.constant(Tensor::from_vec(vec![1000.0, 1000.0]));
    let s = t.softmax(big, 0).unwrap();
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = t.softmax(x, axis).unwrap();
        let v = t.value(s).data();
        if axis == 1 {
            for r in 0..3 {
                let total: f64 = v[r * 4..r * 4 + 4].iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        } else {
            for c in 0..4 {
                let total: f64 = (0..3).map(|r| v[r * 4 + c]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(v.iter().all(|&p| p > 0.0 && p < 1.0 || p == 1.0 || p == 0.0));
    }
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random(&[1, 5, 6], &mut rng);
    let mut t = Tape::new();
    let x = t.constant(img.clone());
    let k = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv2d(x, k, 0, 1).unwrap();
    assert_eq!(t.value(y).data(), img.data());
}

#[test]
fn conv_impulse_response_is_rotated_kernel() {
    // Cross-correlation of a delta reproduces the kernel rotated by 180°.
    let mut img = vec![0.0; 49];
    img[3 * 7 + 3] = 1.0;
    let kernel: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 7, 7], img).unwrap());
    let k = t.constant(Tensor::new(vec![1, 1, 3, 3], kernel.clone()).unwrap());
    let y = t.conv2d(x, k, 1, 1).unwrap();
    let out = t.value(y).data();
    for ki in 0..3 {
        for kj in 0..3 {
            assert_eq!(out[(2 + ki) * 7 + 2 + kj], kernel[(2 - ki) * 3 + (2 - kj)]);
        }
    }
    // a point-symmetric kernel is copied verbatim
    let sym = vec![1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0, 1.0];
    let ks = t.constant(Tensor::new(vec![1, 1, 3, 3], sym.clone()).unwrap());
    let y = t.conv2d(x, ks, 1, 1).unwrap();
    let out = t.value(y).data();
    for ki in 0..3 {
        for kj in 0..3 {
            assert_eq!(out[(2 + ki) * 7 + 2 + kj], sym[ki * 3 + kj]);
        }
    }
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let (c_in, c_out, h, w) = (1 + case % 3, 1 + case % 4, 5 + case, 6 + case % 5);
        let k = [1, 3, 5][case % 3];
        let stride = 1 + case % 2;
        let pad = k / 2;
        let img = random(&[c_in, h, w], &mut rng);
        let ker = random(&[c_out, c_in, k, k], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let kv = t.constant(ker.clone());
        let y = t.conv2d(x, kv, pad, stride).unwrap();
        let naive = naive_conv2d(img.data(), c_in, h, w, ker.data(), c_out, k, pad, stride);
        let got = t.value(y).data();
        assert_eq!(got.len(), naive.len());
        for (a, b) in got.iter().zip(&naive) {
            assert!((a - b).abs() <= 1e-10, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn conv_rejects_oversized_kernel() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 3, 3]));
    let k = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(t.conv2d(x, k, 0, 1), Err(TensorError::KernelTooLarge { .. })));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let img = random(&[2, 6, 5], &mut rng);
    let ker = random(&[3, 2, 3, 3], &mut rng);
    for stride in [1, 2] {
        let kk = ker.clone();
        let r_in = gradcheck(img.clone(), 1e-4, move |t, x| {
            let k = t.constant(kk.clone());
            t.conv2d(x, k, 1, stride).unwrap()
        });
        let ii = img.clone();
        let r_k = gradcheck(ker.clone(), 1e-4, move |t, k| {
            let x = t.constant(ii.clone());
            t.conv2d(x, k, 1, stride).unwrap()
        });
        assert!(r_in.passed(1e-6), "{r_in}");
        assert!(r_k.passed(1e-6), "{r_k}");
    }
}

#[test]
fn scalar_backward_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.sigmoid(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25]);
}

#[test]
fn backward_requires_scalar_root_and_accumulates() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.scale(x, 3.0).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarRoot(_))));
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0, 6.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0, 3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(Tensor::scalar(2.0));
    let x = t.param(Tensor::scalar(5.0));
    let y = t.mul(c, x).unwrap();
    t.backward(y).unwrap();
    assert!(t.grad(c).is_none());
    assert_eq!(t.grad(x).unwrap(), &[2.0]);
}

#[test]
fn smooth_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[3, 4], &mut rng);
    let positive = x.map(|v| v.abs() + 0.5);
    let cases: Vec<(&str, Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Var>)> = vec![
        ("exp", x.clone(), Box::new(|t, v| t.exp(v).unwrap())),
        ("sigmoid", x.clone(), Box::new(|t, v| t.sigmoid(v).unwrap())),
        ("sin", x.clone(), Box::new(|t, v| t.sin(v).unwrap())),
        ("cos", x.clone(), Box::new(|t, v| t.cos(v).unwrap())),
        ("sqrt", positive.clone(), Box::new(|t, v| t.sqrt(v).unwrap())),
        ("div", positive.clone(), Box::new(|t, v| {
            let e = t.exp(v).unwrap();
            t.div(e, v).unwrap()
        })),
        ("scalar-div", x.clone(), Box::new(|t, v| {
            let s = t.index(v, 3).unwrap();
            let s = t.add_scalar(s, 3.0).unwrap();
            t.div(v, s).unwrap()
        })),
        ("softmax0", x.clone(), Box::new(|t, v| t.softmax(v, 0).unwrap())),
        ("softmax1", x.clone(), Box::new(|t, v| t.softmax(v, 1).unwrap())),
        ("transpose", x.clone(), Box::new(|t, v| t.transpose(v).unwrap())),
        ("sum_axis0", x.clone(), Box::new(|t, v| t.sum_axis(v, 0).unwrap())),
        ("sum_axis1", x.clone(), Box::new(|t, v| t.sum_axis(v, 1).unwrap())),
        ("mean_rows", x.clone(), Box::new(|t, v| t.mean_rows(v).unwrap())),
        ("slice_cols", x.clone(), Box::new(|t, v| t.slice_cols(v, 1, 3).unwrap())),
        ("slice_rows", x.clone(), Box::new(|t, v| t.slice_axis0(v, 1, 3).unwrap())),
        ("concat_cols", x.clone(), Box::new(|t, v| {
            let a = t.slice_cols(v, 0, 1).unwrap();
            let e = t.exp(v).unwrap();
            t.concat_cols(&[e, a, v]).unwrap()
        })),
        ("stack", x.clone(), Box::new(|t, v| {
            let a = t.index(v, 2).unwrap();
            let b = t.index(v, 7).unwrap();
            let ab = t.mul(a, b).unwrap();
            t.stack(&[a, ab, b]).unwrap()
        })),
        ("add_along0", x.clone(), Box::new(|t, v| {
            let b = t.slice_cols(v, 0, 1).unwrap();
            let b = t.reshape(b, &[3]).unwrap();
            let b = t.exp(b).unwrap();
            t.add_along(v, b, 0).unwrap()
        })),
        ("avg_pool", x.clone(), Box::new(|t, v| {
            let r = t.reshape(v, &[3, 2, 2]).unwrap();
            t.avg_pool2(r).unwrap()
        })),
        ("max", x.clone(), Box::new(|t, v| {
            let m = t.max(v).unwrap();
            t.mul(v, m).unwrap()
        })),
        ("min", x.clone(), Box::new(|t, v| {
            let m = t.min(v).unwrap();
            t.mul(v, m).unwrap()
        })),
        ("cross_entropy", x.clone(), Box::new(|t, v| {
            let r = t.reshape(v, &[12]).unwrap();
            t.cross_entropy(r, 4).unwrap()
        })),
    ];
    for (name, input, build) in cases {
        let report = gradcheck(input, 1e-4, build);
        assert!(report.passed(1e-4), "{name}: {report}");
    }
}

#[test]
fn kinked_ops_match_away_from_kinks() {
    // entries kept at least 1e-2 from 0 and from the clamp bounds
    let x = Tensor::new(vec![6], vec![-0.7, -0.2, 0.3, 0.55, 0.9, 1.4]).unwrap();
    for (name, build) in [
        ("relu", Box::new(|t: &mut Tape<f64>, v| t.relu(v).unwrap()) as Box<dyn Fn(&mut Tape<f64>, Var) -> Var>),
        ("abs", Box::new(|t: &mut Tape<f64>, v| t.abs(v).unwrap())),
        ("clamp", Box::new(|t: &mut Tape<f64>, v| t.clamp(v, 0.0, 1.0).unwrap())),
    ] {
        let report = gradcheck(x.clone(), 1e-4, build);
        assert!(report.passed(1e-4), "{name}: {report}");
    }
}

#[test]
fn spire_matches_finite_differences_in_both_modes() {
    let intensity = Tensor::from_vec(vec![0.12, 0.31, 0.47, 0.52, 0.74, 0.93, 0.66]);
    let levels = Tensor::from_vec(vec![0.25, 0.5, 0.75, 1.0]);
    for centered in [false, true] {
        let lv = levels.clone();
        let r_i = gradcheck(intensity.clone(), 1e-4, move |t, x| {
            let l = t.constant(lv.clone());
            let w = t.scalar(0.125);
            t.spire(x, l, w, centered).unwrap()
        });
        let iv = intensity.clone();
        let r_l = gradcheck(levels.clone(), 1e-4, move |t, l| {
            let x = t.constant(iv.clone());
            let w = t.scalar(0.125);
            t.spire(x, l, w, centered).unwrap()
        });
        assert!(r_i.passed(1e-4), "{r_i}");
        assert!(r_l.passed(1e-4), "{r_l}");
    }
    let (iv, lv) = (intensity.clone(), levels.clone());
    let r_w = gradcheck(Tensor::scalar(0.125), 1e-5, move |t, w| {
        let x = t.constant(iv.clone());
        let l = t.constant(lv.clone());
        t.spire(x, l, w, true).unwrap()
    });
    assert!(r_w.passed(1e-4), "{r_w}");
}

#[test]
fn sparse_map_matches_finite_differences() {
    let map = SparseMap { n_in: 4, n_out: 3, entries: vec![(0, 0, 0.5), (0, 3, 0.5), (1, 1, 2.0), (2, 2, -1.0), (2, 0, 0.25)] };
    let map = std::sync::Arc::new(map);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = gradcheck(random(&[2, 4], &mut rng), 1e-4, move |t, x| t.sparse_map(x, map.clone(), &[3]).unwrap());
    assert!(r.passed(1e-6), "{r}");
}

#[test]
fn straight_through_passes_gradient_to_surrogate() {
    let mut t = Tape::<f64>::new();
    let s = t.param(Tensor::from_vec(vec![0.3, -0.2]));
    let sq = t.square(s).unwrap();
    let st = t.straight_through(sq, Tensor::from_vec(vec![1.0, 0.0])).unwrap();
    assert_eq!(t.value(st).data(), &[1.0, 0.0]);
    let total = t.sum(st).unwrap();
    t.backward(total).unwrap();
    let g = t.grad(s).unwrap();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] + 0.4).abs() < 1e-15);
}

#[test]
fn replay_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::<f64>::new();
        let x = t.param(random(&[1, 6, 6], &mut rng));
        let k = t.param(random(&[2, 1, 3, 3], &mut rng));
        let y = t.conv2d(x, k, 1, 1).unwrap();
        let y = t.sigmoid(y).unwrap();
        let y = t.reshape(y, &[2, 36]).unwrap();
        let y = t.softmax(y, 1).unwrap();
        let l = t.index(y, 5).unwrap();
        t.backward(l).unwrap();
        (t.value(y).clone(), t.grad_tensor(x), t.grad_tensor(k))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
}

#[test]
fn nonfinite_values_are_flagged() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
    let one = t.scalar(1.0);
    assert!(t.first_nonfinite().is_none());
    let _ = t.div(one, x).unwrap();
    assert_eq!(t.first_nonfinite(), Some(2));
}

#[test]
fn generic_over_f32() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::scalar(3.0f32));
    let y = t.square(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0f32]);
}

#[test]
fn branch_signature_tracks_kinks() {
    let sig = |x: f64| {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::from_vec(vec![x, 0.5]));
        let r = t.relu(v).unwrap();
        let _ = t.max(r).unwrap();
        t.branch_signature()
    };
    assert_eq!(sig(0.2), sig(0.3));
    assert_ne!(sig(0.2), sig(-0.2));
    assert_ne!(sig(0.2), sig(0.7));
}
