//! Finite-difference battery over every differentiable primitive, each on a
//! series of randomly drawn shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradient_check_many, CoordSample};
use crate::nn::normal;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error observed for one primitive.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Build,
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=max)).collect()
}

fn away_from_zero(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

fn positive(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.abs() + 0.2)
}

/// Reduces an arbitrary output to a scalar through a fixed random weighting,
/// so every output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = normal::<f64>(tape.shape(y), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    prep: fn(Tensor<f64>) -> Tensor<f64>,
    op: fn(&mut Tape<f64>, Var) -> Var,
) -> Case {
    let rank = rng.gen_range(1..=3);
    let shape = rand_shape(rng, rank, 5);
    let seed = rng.gen();
    Case {
        inputs: vec![prep(normal(&shape, 1.0, rng))],
        f: Box::new(move |t, v| {
            let y = op(t, v[0]);
            weighted_sum(t, y, seed)
        }),
    }
}

/// Second operand shape that broadcasts against `shape`.
fn broadcast_partner(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<usize> {
    let drop = rng.gen_range(0..shape.len());
    shape[drop..].iter().map(|&d| if rng.gen_bool(0.3) { 1 } else { d }).collect()
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
    b_prep: fn(Tensor<f64>) -> Tensor<f64>,
    separated: bool,
) -> Case {
    let rank = rng.gen_range(1..=3);
    let shape = rand_shape(rng, rank, 4);
    let other = if rng.gen_bool(0.5) { shape.clone() } else { broadcast_partner(rng, &shape) };
    let a: Tensor<f64> = normal(&shape, 1.0, rng);
    let b = b_prep(normal(&other, 1.0, rng));
    if separated {
        // |a| > 3 and |b| <= 1 keeps max/min away from ties
        let a_shift = a.map(|v| v + 3.0 * v.signum());
        let seed = rng.gen();
        return Case {
            inputs: vec![a_shift, b],
            f: Box::new(move |t, v| {
                let y = op(t, v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        };
    }
    let seed = rng.gen();
    Case {
        inputs: vec![a, b],
        f: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, seed)
        }),
    }
}

fn cases_for(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let seed: u64 = rng.gen();
    match op {
        "add" => binary_case(rng, |t, a, b| t.add(a, b), |x| x, false),
        "sub" => binary_case(rng, |t, a, b| t.sub(a, b), |x| x, false),
        "mul" => binary_case(rng, |t, a, b| t.mul(a, b), |x| x, false),
        "div" => binary_case(rng, |t, a, b| t.div(a, b), positive, false),
        "maximum" => binary_case(rng, |t, a, b| t.maximum(a, b), |x| x.map(|v| v.clamp(-1.0, 1.0)), true),
        "minimum" => binary_case(rng, |t, a, b| t.minimum(a, b), |x| x.map(|v| v.clamp(-1.0, 1.0)), true),
        "neg" => unary_case(rng, |x| x, |t, v| t.neg(v)),
        "relu" => unary_case(rng, |x| away_from_zero(x, 0.05), |t, v| t.relu(v)),
        "sigmoid" => unary_case(rng, |x| x, |t, v| t.sigmoid(v)),
        "exp" => unary_case(rng, |x| x, |t, v| t.exp(v)),
        "log" => unary_case(rng, positive, |t, v| t.log(v)),
        "abs" => unary_case(rng, |x| away_from_zero(x, 0.05), |t, v| t.abs(v)),
        "log_sigmoid" => unary_case(rng, |x| x.map(|v| 4.0 * v), |t, v| t.log_sigmoid(v)),
        "scale" => unary_case(rng, |x| x, |t, v| t.scale(v, -1.7)),
        "add_scalar" => unary_case(rng, |x| x, |t, v| t.add_scalar(v, 0.3)),
        "powf" => unary_case(rng, positive, |t, v| t.powf(v, 2.5)),
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
            let (ta, tb) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let layout = rng.gen_range(0..4);
            let batch = rng.gen_range(1..=3);
            let mut a_shape = if ta { vec![k, m] } else { vec![m, k] };
            let mut b_shape = if tb { vec![n, k] } else { vec![k, n] };
            match layout {
                1 => a_shape.insert(0, batch),
                2 => b_shape.insert(0, batch),
                3 => {
                    a_shape.insert(0, batch);
                    b_shape.insert(0, batch);
                }
                _ => {}
            }
            Case {
                inputs: vec![normal(&a_shape, 1.0, rng), normal(&b_shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.matmul_t(v[0], v[1], ta, tb)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "reshape" => {
            let shape = rand_shape(rng, 3, 4);
            let target = vec![shape[0] * shape[1], shape[2]];
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.reshape(v[0], &target)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "permute" => {
            let rank = rng.gen_range(2..=4);
            let shape = rand_shape(rng, rank, 4);
            let mut axes: Vec<usize> = (0..rank).collect();
            for i in (1..rank).rev() {
                axes.swap(i, rng.gen_range(0..=i));
            }
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.permute(v[0], &axes)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "concat" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let base = rand_shape(rng, rank, 4);
            let parts = rng.gen_range(1..=3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.gen_range(1..=3);
                    normal(&s, 1.0, rng)
                })
                .collect();
            Case {
                inputs,
                f: Box::new(move |t, v| {
                    let y = t.concat(v, axis)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "narrow" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let mut shape = rand_shape(rng, rank, 4);
            shape[axis] += 1;
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.narrow(v[0], axis, start, len)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "index_select" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let shape = rand_shape(rng, rank, 4);
            let count = rng.gen_range(1..=6);
            let ext = shape[axis];
            let idx: Vec<usize> = (0..count).map(|_| rng.gen_range(0..ext)).collect();
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.index_select(v[0], axis, &idx)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "sum" => {
            let shape = rand_shape(rng, 2, 5);
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                }),
            }
        }
        "mean" => {
            let shape = rand_shape(rng, 2, 5);
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let e = t.exp(v[0]);
                    Ok(t.mean(e))
                }),
            }
        }
        "sum_axis" => {
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let shape = rand_shape(rng, rank, 4);
            Case {
                inputs: vec![normal(&shape, 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.sum_axis(v[0], axis)?;
                    let y = t.exp(y);
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "softmax" | "log_softmax" => {
            let log = op == "log_softmax";
            let rank = rng.gen_range(1..=3);
            let axis = rng.gen_range(0..rank);
            let shape = rand_shape(rng, rank, 5);
            Case {
                inputs: vec![normal(&shape, 2.0, rng)],
                f: Box::new(move |t, v| {
                    let y = if log { t.log_softmax(v[0], axis)? } else { t.softmax(v[0], axis)? };
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "layer_norm" => {
            let rows = rng.gen_range(1..=4);
            let d = rng.gen_range(2..=6);
            Case {
                inputs: vec![
                    normal(&[rows, d], 1.0, rng),
                    normal(&[d], 1.0, rng),
                    normal(&[d], 1.0, rng),
                ],
                f: Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "group_norm" => {
            let groups = rng.gen_range(1..=3);
            let c = groups * rng.gen_range(1..=2);
            let b = rng.gen_range(1..=2);
            let mut shape = vec![b, c];
            let extra = rng.gen_range(1..=3);
            shape.extend(rand_shape(rng, extra, 3));
            if shape[2..].iter().product::<usize>() * (c / groups) < 2 {
                shape[2] += 1;
            }
            Case {
                inputs: vec![normal(&shape, 1.0, rng), normal(&[c], 1.0, rng), normal(&[c], 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "conv3d" => {
            let (b, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2));
            let k = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
            let stride = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2)];
            let pad = [rng.gen_range(0..=1), rng.gen_range(0..=1), rng.gen_range(0..=1)];
            let input: Vec<usize> = (0..3).map(|d| k[d] + rng.gen_range(0..=2)).collect();
            Case {
                inputs: vec![
                    normal(&[b, cin, input[0], input[1], input[2]], 1.0, rng),
                    normal(&[cout, cin, k[0], k[1], k[2]], 1.0, rng),
                    normal(&[cout], 1.0, rng),
                ],
                f: Box::new(move |t, v| {
                    let y = t.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "conv2d" => {
            let (b, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let (h, w) = (k + rng.gen_range(0..=3), k + rng.gen_range(0..=3));
            Case {
                inputs: vec![
                    normal(&[b, cin, h, w], 1.0, rng),
                    normal(&[cout, cin, k, k], 1.0, rng),
                    normal(&[cout], 1.0, rng),
                ],
                f: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), [stride, stride], [pad, pad])?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        "upsample_bilinear" => {
            let planes = rng.gen_range(1..=3);
            let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            let (oh, ow) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            Case {
                inputs: vec![normal(&[planes, h, w], 1.0, rng)],
                f: Box::new(move |t, v| {
                    let y = t.upsample_bilinear(v[0], oh, ow)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "maximum",
    "minimum",
    "neg",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "abs",
    "log_sigmoid",
    "scale",
    "add_scalar",
    "powf",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "index_select",
    "sum",
    "mean",
    "sum_axis",
    "softmax",
    "log_softmax",
    "layer_norm",
    "group_norm",
    "conv3d",
    "conv2d",
    "upsample_bilinear",
];

/// Runs `cases` random instances of every primitive at 64-bit with step
/// `eps`.
pub fn primitive_gradients(cases: usize, eps: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let case = cases_for(op, &mut rng);
                let err = gradient_check_many(&case.f, &case.inputs, eps, CoordSample::All)?;
                worst = worst.max(err);
            }
            Ok(OpCheck { op, cases, max_rel_error: worst })
        })
        .collect()
}
