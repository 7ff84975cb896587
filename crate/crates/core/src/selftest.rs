//! Built-in verification battery: exact assignment against brute force,
//! finite-difference gradients, scalar oracles for the geometry and mask
//! losses, RLE round trips and positional-encoding distinctness.
//!
//! Functions under test are taken through [`Hooks`] so a deliberately
//! broken implementation can be substituted to show that a suite catches it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistr_tensor::checks::primitive_gradients;
use vistr_tensor::{gradient_check_many, CoordSample, Tape, Tensor, TensorError, Var};

use crate::error::{Result, VisError};
use crate::losses::{dice_loss, focal_loss, hungarian_loss_with, LossWeights, PredictionVars};
use crate::mask::{derive_box, rle_decode, rle_encode, Mask};
use crate::matching::{generalized_iou, hungarian, matching_cost_matrix, Assignment, BoxXyxy, CostMatrix};
use crate::posenc::{positional_encoding_3d, PositionalEncodingConfig};
use crate::synth::InstanceSequenceTruth;

#[derive(Clone, Copy)]
pub struct Hooks {
    pub giou: fn(BoxXyxy, BoxXyxy) -> f64,
    pub hungarian: fn(&CostMatrix) -> Result<Assignment>,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks { giou: generalized_iou, hungarian }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Minimum of `sum_i cost[i][p(i)]` over all permutations, summed in row
/// order.
pub fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn go(cost: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.n {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.n {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost.at(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.n], 0.0, &mut best);
    if cost.n == 0 {
        0.0
    } else {
        best
    }
}

/// A random prediction/truth problem: inputs are raw class logits
/// `[n*t, k+1]`, box pre-activations `[n*t, 4]` (boxes are their
/// sigmoid) and mask logits `[n, t, h, w]`.
pub struct ToyProblem {
    pub n: usize,
    pub t: usize,
    pub inputs: Vec<Tensor<f64>>,
    pub truths: Vec<InstanceSequenceTruth>,
}

pub fn toy_problem(rng: &mut impl Rng, n: usize, t: usize, k: usize, h: usize, w: usize, m: usize) -> ToyProblem {
    let mut randn = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-s..s)).collect() };
    let inputs = vec![
        Tensor::new(vec![n * t, k + 1], randn(n * t * (k + 1), 2.0)).expect("shape"),
        Tensor::new(vec![n * t, 4], randn(n * t * 4, 1.5)).expect("shape"),
        Tensor::new(vec![n, t, h, w], randn(n * t * h * w, 3.0)).expect("shape"),
    ];
    let truths = (0..m)
        .map(|_| {
            let class_id = rng.gen_range(0..k);
            let masks: Vec<Mask> = (0..t)
                .map(|f| {
                    // A random rectangle, so boxes differ between instances.
                    if f > 0 && rng.gen_bool(0.2) {
                        return Mask::empty(h, w);
                    }
                    let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
                    let (y1, x1) = (rng.gen_range(y0..h), rng.gen_range(x0..w));
                    Mask::from_fn(h, w, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x))
                })
                .collect();
            let boxes = masks.iter().map(|mk| derive_box(mk).unwrap_or([0.0; 4])).collect();
            let presence = masks.iter().map(|mk| !mk.is_empty()).collect();
            InstanceSequenceTruth { class_id, boxes, masks, presence }
        })
        .collect();
    ToyProblem { n, t, inputs, truths }
}

impl ToyProblem {
    pub fn vars(&self, tape: &mut Tape<f64>, leaves: &[Var]) -> Result<PredictionVars> {
        let boxes = tape.sigmoid(leaves[1]);
        Ok(PredictionVars { n: self.n, t: self.t, class_logits: leaves[0], boxes, mask_logits: leaves[2] })
    }

    /// Assignment chosen by the matcher at the problem's own inputs.
    pub fn assignment(&self, w: &LossWeights) -> Result<Assignment> {
        let mut tape = Tape::new();
        let leaves: Vec<_> = self.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let preds = self.vars(&mut tape, &leaves)?;
        hungarian(&matching_cost_matrix(&preds.values(&tape), &self.truths, &w.matching())?)
    }

    /// Worst relative error of the loss gradient with the assignment held
    /// at its value for the unperturbed inputs.
    pub fn gradient_error(&self, w: &LossWeights, eps: f64) -> Result<f64> {
        let assignment = self.assignment(w)?;
        let err = gradient_check_many(
            |tape, leaves| {
                let as_tensor_err = |e: VisError| TensorError::Argument(e.to_string());
                let preds = self.vars(tape, leaves).map_err(as_tensor_err)?;
                let out =
                    hungarian_loss_with(tape, &preds, &self.truths, w, assignment.clone()).map_err(as_tensor_err)?;
                Ok(out.total)
            },
            &self.inputs,
            eps,
            CoordSample::All,
        )?;
        Ok(err)
    }
}

fn suite(name: &'static str, f: impl FnOnce() -> Result<std::result::Result<String, String>>) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteReport { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn hungarian_suite(hooks: &Hooks, per_size: usize, seed: u64) -> SuiteReport {
    suite("hungarian-vs-brute-force", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut checked = 0;
        for n in 1..=6 {
            for i in 0..per_size {
                // Every other matrix uses small integers to force ties.
                let values = (0..n * n)
                    .map(|_| if i % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(0..4) as f64 })
                    .collect();
                let cost = CostMatrix::new(n, values)?;
                let a = (hooks.hungarian)(&cost)?;
                let want = brute_force_min(&cost);
                let mut seen = vec![false; n];
                let perm = a.sigma.len() == n && a.sigma.iter().all(|&j| j < n && !std::mem::replace(&mut seen[j], true));
                if !perm || a.cost != want {
                    return Ok(Err(format!("n={n}: got {:?} cost {}, optimum {want}", a.sigma, a.cost)));
                }
                checked += 1;
            }
        }
        Ok(Ok(format!("{checked} matrices match exhaustive search")))
    })
}

pub fn gradient_suite(cases: usize, seed: u64) -> SuiteReport {
    suite("gradients", || {
        let mut worst = 0.0f64;
        for c in primitive_gradients(cases, 1e-6, seed)? {
            if c.max_rel_error >= 1e-4 {
                return Ok(Err(format!("{}: relative error {:e}", c.op, c.max_rel_error)));
            }
            worst = worst.max(c.max_rel_error);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = LossWeights::default();
        for _ in 0..cases {
            let p = toy_problem(&mut rng, 3, 2, 2, 3, 4, 2);
            let e = p.gradient_error(&w, 1e-6)?;
            if e >= 1e-4 {
                return Ok(Err(format!("hungarian loss: relative error {e:e}")));
            }
            worst = worst.max(e);
        }
        Ok(Ok(format!("worst relative error {worst:.2e}")))
    })
}

fn close(name: &str, got: f64, want: f64, fails: &mut Vec<String>) {
    if !((got - want).abs() < 1e-6) {
        fails.push(format!("{name}: {got} vs {want}"));
    }
}

pub fn scalar_suite(hooks: &Hooks) -> SuiteReport {
    suite("scalar-oracles", || {
        let mut fails = Vec::new();
        close("giou identical", (hooks.giou)([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0, &mut fails);
        close("giou disjoint", (hooks.giou)([0.0, 0.0, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0]), -1.0 / 3.0, &mut fails);
        close("giou overlap", (hooks.giou)([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]), 1.0 / 7.0 - 2.0 / 9.0, &mut fails);

        // Left half predicted with probability 1 against the top half: 4
        // shared pixels, 8 + 8 total, smoothing 1.
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_f64(&[4, 4], &(0..16).map(|i| if i % 4 < 2 { 1.0 } else { 0.0 }).collect::<Vec<_>>())?);
        let g = Tensor::from_f64(&[4, 4], &(0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect::<Vec<_>>())?;
        let d = dice_loss(&mut tape, p, &g, 1.0)?;
        close("dice 4x4", tape.value(d).item(), 1.0 - 9.0 / 17.0, &mut fails);

        let x = tape.leaf(Tensor::from_f64(&[1, 1], &[0.0])?);
        let f = focal_loss(&mut tape, x, &Tensor::from_f64(&[1, 1], &[1.0])?, 0.25, 2.0)?;
        close("focal p=0.5", tape.value(f).item(), 0.25 * 0.25 * std::f64::consts::LN_2, &mut fails);

        let cost = CostMatrix::new(3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0])?;
        let a = (hooks.hungarian)(&cost)?;
        close("hungarian 3x3", a.cost, 5.0, &mut fails);
        Ok(if fails.is_empty() { Ok("all fixtures match".into()) } else { Err(fails.join("; ")) })
    })
}

pub fn rle_suite(count: usize, seed: u64) -> SuiteReport {
    suite("rle-round-trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..count {
            let density = rng.gen::<f64>();
            let m = Mask::from_bits(13, 17, (0..13 * 17).map(|_| rng.gen_bool(density)).collect())?;
            if rle_decode(&rle_encode(&m), 13, 17)? != m {
                return Ok(Err(format!("mask {i} (density {density:.2}) does not survive")));
            }
        }
        Ok(Ok(format!("{count} random 13x17 masks")))
    })
}

/// Smallest squared distance between encodings of two different positions.
pub fn min_position_separation(cfg: &PositionalEncodingConfig) -> Result<f64> {
    let pe = positional_encoding_3d::<f64>(cfg)?;
    let (d, l) = (cfg.d, cfg.raster().len());
    let data = pe.data();
    let vecs: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|c| data[c * l + i]).collect()).collect();
    let mut best = f64::INFINITY;
    for i in 0..l {
        for j in i + 1..l {
            let s: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(s);
        }
    }
    Ok(best)
}

pub fn positional_suite() -> SuiteReport {
    suite("positional-distinct", || {
        let cfg = PositionalEncodingConfig::new(96, 6, 12, 20);
        let sep = min_position_separation(&cfg)?;
        Ok(if sep > 1e-12 {
            Ok(format!("{} positions, min squared separation {sep:.3e}", cfg.raster().len()))
        } else {
            Err(format!("two positions share an encoding (separation {sep:e})"))
        })
    })
}

/// Every suite at its default size.
pub fn run_all(hooks: &Hooks) -> Vec<SuiteReport> {
    vec![
        hungarian_suite(hooks, 60, 11),
        gradient_suite(20, 12),
        scalar_suite(hooks),
        rle_suite(1000, 13),
        positional_suite(),
    ]
}
