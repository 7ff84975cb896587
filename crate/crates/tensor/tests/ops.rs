use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistr_tensor::nn::normal;
use vistr_tensor::{Tape, Tensor, TensorError};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[3]));
    let y = t.softmax(x, 0).unwrap();
    assert!(close(&t.value(y).to_f64(), &[1.0 / 3.0; 3], 1e-12));
}

#[test]
fn softmax_is_shift_stable() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).to_f64(), vec![0.5, 0.5]);
}

#[test]
fn softmax_reference_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert!(close(&t.value(y).to_f64(), &[0.09003057, 0.24472847, 0.66524096], 1e-8));
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = Tape::<f32>::new();
    let x = t.constant(normal(&[3, 4, 5], 3.0, &mut rng));
    for axis in 0..3 {
        let y = t.softmax(x, axis).unwrap();
        let s = t.sum_axis(y, axis).unwrap();
        assert!(t.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(t.softmax(x, 2), Err(TensorError::Argument(_))));
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::<f64>::new();
    let input = normal::<f64>(&[1, 1, 3, 4, 5], 1.0, &mut rng);
    let x = t.constant(input.clone());
    let w = t.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = t.conv3d(x, w, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn ones_kernel_on_constant_field_gives_27c_inside() {
    let c = 0.75;
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[1, 1, 4, 5, 6], c));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let y = t.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
    let out = t.value(y);
    assert_eq!(out.shape(), &[1, 1, 4, 5, 6]);
    for z in 1..3 {
        for yy in 1..4 {
            for xx in 1..5 {
                assert!((out.at(&[0, 0, z, yy, xx]) - 27.0 * c).abs() < 1e-12);
            }
        }
    }
    // a corner sees 8 taps
    assert!((out.at(&[0, 0, 0, 0, 0]) - 8.0 * c).abs() < 1e-12);
}

/// Direct nested-loop convolution.
#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<f64> {
    let (b, cin) = (x.shape()[0], x.shape()[1]);
    let inp = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let cout = w.shape()[0];
    let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let o: Vec<usize> = (0..3).map(|d| (inp[d] + 2 * pad[d] - k[d]) / stride[d] + 1).collect();
    let mut out = vec![0.0; b * cout * o[0] * o[1] * o[2]];
    let mut i = 0;
    for bb in 0..b {
        for co in 0..cout {
            for zt in 0..o[0] {
                for zh in 0..o[1] {
                    for zw in 0..o[2] {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for dt in 0..k[0] {
                                for dh in 0..k[1] {
                                    for dw in 0..k[2] {
                                        let tt = (zt * stride[0] + dt) as isize - pad[0] as isize;
                                        let hh = (zh * stride[1] + dh) as isize - pad[1] as isize;
                                        let ww = (zw * stride[2] + dw) as isize - pad[2] as isize;
                                        if tt < 0
                                            || hh < 0
                                            || ww < 0
                                            || tt >= inp[0] as isize
                                            || hh >= inp[1] as isize
                                            || ww >= inp[2] as isize
                                        {
                                            continue;
                                        }
                                        s += x.at(&[bb, ci, tt as usize, hh as usize, ww as usize])
                                            * w.at(&[co, ci, dt, dh, dw]);
                                    }
                                }
                            }
                        }
                        out[i] = s;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = normal::<f64>(&[1, 1, 3, 4, 5], 1.0, &mut rng);
    let w = normal::<f64>(&[2, 1, 2, 2, 2], 1.0, &mut rng);
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv3d(xv, wv, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert!(close(&t.value(y).to_f64(), &naive_conv3d(&x, &w, [1, 1, 1], [0, 0, 0]), 1e-12));

    for &(stride, pad) in &[([1, 2, 1], [1, 0, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 1, 3], [0, 1, 0])] {
        let x = normal::<f64>(&[2, 3, 4, 5, 6], 1.0, &mut rng);
        let w = normal::<f64>(&[2, 3, 3, 2, 3], 1.0, &mut rng);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv3d(xv, wv, None, stride, pad).unwrap();
        assert!(close(&t.value(y).to_f64(), &naive_conv3d(&x, &w, stride, pad), 1e-10));
    }
}

#[test]
fn conv3d_output_extent_arithmetic() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 6, 96, 160]));
    let w = t.constant(Tensor::zeros(&[4, 2, 3, 3, 3]));
    let y = t.conv3d(x, w, None, [1, 2, 2], [1, 1, 1]).unwrap();
    assert_eq!(t.shape(y), &[1, 4, 6, 48, 80]);
}

#[test]
fn conv3d_rejects_channel_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
    let w = t.constant(Tensor::zeros(&[1, 3, 1, 1, 1]));
    assert!(matches!(t.conv3d(x, w, None, [1, 1, 1], [0, 0, 0]), Err(TensorError::Argument(_))));
}

#[test]
fn bilinear_upsampling_preserves_constants() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[2, 3, 5], 1.5));
    let y = t.upsample_bilinear(x, 12, 20).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-12));
}

#[test]
fn broadcasting_adds_bias_rows() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let b = t.constant(Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap());
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).to_f64(), vec![11., 22., 33., 14., 25., 36.]);
    let bad = t.constant(Tensor::zeros(&[2]));
    assert!(t.add(a, bad).is_err());
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::ones(&[2]));
    assert!(t.backward(a).is_err());
}

#[test]
fn gradients_reach_every_leaf_on_path() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = t.leaf(Tensor::from_f64(&[2, 2], &[0.5, -1., 2., 1.]).unwrap());
    let unused = t.leaf(Tensor::ones(&[3]));
    let c = t.matmul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().shape(), &[2, 2]);
    assert_eq!(g.get(b).unwrap().shape(), &[2, 2]);
    assert!(g.get(unused).is_none());
    // d/dA sum(A B) = 1 · B^T
    assert_eq!(g.get(a).unwrap().to_f64(), vec![-0.5, 3.0, -0.5, 3.0]);
}

#[test]
fn forward_is_bitwise_repeatable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::<f32>::new();
        let x = t.constant(normal(&[2, 3, 4, 6, 7], 1.0, &mut rng));
        let w = t.constant(normal(&[5, 3, 3, 3, 3], 1.0, &mut rng));
        let y = t.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
        let y = t.softmax(y, 4).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

proptest! {
    #[test]
    fn permute_round_trip_is_exact(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal::<f32>(&shape, 1.0, &mut rng);
        let rank = shape.len();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.rotate_left(seed as usize % rank);
        let mut inv = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        let back = x.permute(&axes).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back, x.clone());
        let flat = x.reshape(&[x.len()]).unwrap().reshape(&shape).unwrap();
        prop_assert_eq!(flat, x);
    }

    #[test]
    fn sum_over_permuted_axis_matches_loops(shape in prop::collection::vec(1usize..5, 3..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal::<f64>(&shape, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let p = t.permute(xv, &[2, 0, 1]).unwrap();
        let s = t.sum_axis(p, 0).unwrap();
        let got = t.value(s).clone();
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                let direct: f64 = (0..shape[2]).map(|k| x.at(&[i, j, k])).sum();
                prop_assert!((got.at(&[i, j]) - direct).abs() < 1e-12);
            }
        }
    }
}
