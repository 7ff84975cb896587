//! The matched set loss: class negative log-likelihood over every
//! prediction, plus box and mask sequence losses over matched slots, all
//! recorded on a tape so gradients reach every head.

use serde::{Deserialize, Serialize};
use vistr_tensor::{Float, Tape, Tensor, Var};

use crate::error::{arg_err, Result};
use crate::matching::{hungarian, matching_cost_matrix, Assignment, ClassReduction, MatchWeights, PredictionValues};
use crate::synth::InstanceSequenceTruth;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub lambda_mask: f64,
    pub background_class_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    /// How per-frame probabilities enter the matching cost.
    pub class_reduction: ClassReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            lambda_mask: 1.0,
            background_class_weight: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_smooth: 1.0,
            class_reduction: ClassReduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_iou,
            self.lambda_l1,
            self.lambda_mask,
            self.background_class_weight,
            self.focal_alpha,
            self.focal_gamma,
            self.dice_smooth,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return arg_err("loss weights must be finite and nonnegative");
        }
        if self.focal_alpha > 1.0 {
            return arg_err("focal_alpha must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn matching(&self) -> MatchWeights {
        MatchWeights { lambda_iou: self.lambda_iou, lambda_l1: self.lambda_l1, class_reduction: self.class_reduction }
    }
}

/// Network outputs on a tape. Prediction `j` is slot `j % n` at frame
/// `j / n`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub n: usize,
    pub t: usize,
    /// `[N, K+1]`.
    pub class_logits: Var,
    /// `[N, 4]`, normalized `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[n, T, h, w]`; resized to the truth resolution when they differ.
    pub mask_logits: Var,
}

impl PredictionVars {
    /// Detached probabilities and boxes for matching.
    pub fn values<E: Float>(&self, tape: &Tape<E>) -> PredictionValues {
        let logits = tape.value(self.class_logits);
        let classes = logits.shape()[1];
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.data().chunks(classes) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / z));
        }
        let boxes = tape
            .value(self.boxes)
            .data()
            .chunks(4)
            .map(|b| [b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()])
            .collect();
        PredictionValues { n: self.n, t: self.t, classes, probs, boxes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLoss {
    pub truth: usize,
    pub slot: usize,
    /// Unnormalized box and mask terms of this pair.
    pub box_term: f64,
    pub mask_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_nll: f64,
    pub box_loss: f64,
    pub mask: f64,
    pub sequences: Vec<SequenceLoss>,
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

fn constant<E: Float>(tape: &mut Tape<E>, shape: &[usize], values: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_f64(shape, values)?))
}

fn scalar<E: Float>(tape: &Tape<E>, v: Var) -> f64 {
    tape.value(v).data().iter().map(|x| x.as_f64()).sum()
}

/// Per-row `1 - (2 sum p g + s) / (sum p + sum g + s)` for `[R, P]` inputs.
pub fn dice_rows<E: Float>(tape: &mut Tape<E>, probs: Var, gt: &Tensor<E>, smooth: f64) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || gt.shape() != shape.as_slice() {
        return arg_err(format!("dice expects matching [R, P] inputs, got {:?} and {:?}", shape, gt.shape()));
    }
    let g = tape.constant(gt.clone());
    let pg = tape.mul(probs, g)?;
    let inter = tape.sum_axis(pg, 1)?;
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let ps = tape.sum_axis(probs, 1)?;
    let gs: Vec<f64> = gt.to_f64().chunks(shape[1]).map(|r| r.iter().sum::<f64>() + smooth).collect();
    let gs = constant(tape, &[shape[0]], &gs)?;
    let den = tape.add(ps, gs)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Per-row mean over pixels of `-alpha_t (1 - p_t)^gamma log p_t` for
/// `[R, P]` logits and binary targets.
pub fn focal_rows<E: Float>(tape: &mut Tape<E>, logits: Var, gt: &Tensor<E>, alpha: f64, gamma: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || gt.shape() != shape.as_slice() {
        return arg_err(format!("focal expects matching [R, P] inputs, got {:?} and {:?}", shape, gt.shape()));
    }
    let g = gt.to_f64();
    // log p_t = log sigmoid(x) - (1 - g) x
    let ls = tape.log_sigmoid(logits);
    let neg_g = constant(tape, &shape, &g.iter().map(|v| 1.0 - v).collect::<Vec<_>>())?;
    let shift = tape.mul(logits, neg_g)?;
    let log_pt = tape.sub(ls, shift)?;
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let pt = tape.exp(log_pt);
        let q = tape.neg(pt);
        let q = tape.add_scalar(q, 1.0);
        let modulator = tape.powf(q, gamma);
        tape.mul(modulator, log_pt)?
    };
    let alpha_t: Vec<f64> = g.iter().map(|&v| -(v * alpha + (1.0 - v) * (1.0 - alpha))).collect();
    let alpha_t = constant(tape, &shape, &alpha_t)?;
    let terms = tape.mul(weighted, alpha_t)?;
    let rows = tape.sum_axis(terms, 1)?;
    Ok(tape.scale(rows, 1.0 / shape[1] as f64))
}

fn flatten_pair<E: Float>(tape: &mut Tape<E>, x: Var, gt: &Tensor<E>) -> Result<(Var, Tensor<E>)> {
    if tape.shape(x) != gt.shape() {
        return arg_err(format!("prediction {:?} and target {:?} differ", tape.shape(x), gt.shape()));
    }
    let p = gt.len();
    Ok((tape.reshape(x, &[1, p])?, gt.reshape(&[1, p])?))
}

/// Dice loss of one mask of probabilities against a binary target.
pub fn dice_loss<E: Float>(tape: &mut Tape<E>, probs: Var, gt: &Tensor<E>, smooth: f64) -> Result<Var> {
    let (p, g) = flatten_pair(tape, probs, gt)?;
    let rows = dice_rows(tape, p, &g, smooth)?;
    Ok(tape.sum(rows))
}

/// Focal loss of one mask of logits against a binary target.
pub fn focal_loss<E: Float>(tape: &mut Tape<E>, logits: Var, gt: &Tensor<E>, alpha: f64, gamma: f64) -> Result<Var> {
    let (x, g) = flatten_pair(tape, logits, gt)?;
    let rows = focal_rows(tape, x, &g, alpha, gamma)?;
    Ok(tape.sum(rows))
}

/// Per-frame dice plus focal, averaged over frames and scaled by
/// `lambda_mask`. Inputs are `[T, H, W]` logits and targets.
pub fn mask_sequence_loss<E: Float>(tape: &mut Tape<E>, logits: Var, gt: &Tensor<E>, w: &LossWeights) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || gt.shape() != shape.as_slice() {
        return arg_err(format!("mask sequence expects matching [T, H, W], got {:?} and {:?}", shape, gt.shape()));
    }
    let rows = per_frame_mask_terms(tape, logits, gt, w)?;
    let total = tape.sum(rows);
    Ok(tape.scale(total, w.lambda_mask / shape[0] as f64))
}

/// `dice + focal` per leading index of matching `[R, ...]` tensors.
fn per_frame_mask_terms<E: Float>(tape: &mut Tape<E>, logits: Var, gt: &Tensor<E>, w: &LossWeights) -> Result<Var> {
    let r = gt.shape()[0];
    let p = gt.len() / r.max(1);
    let x = tape.reshape(logits, &[r, p])?;
    let g = gt.reshape(&[r, p])?;
    let probs = tape.sigmoid(x);
    let dice = dice_rows(tape, probs, &g, w.dice_smooth)?;
    let focal = focal_rows(tape, x, &g, w.focal_alpha, w.focal_gamma)?;
    Ok(tape.add(dice, focal)?)
}

/// Target class and weight of every prediction: matched slots take their
/// truth's class on all frames, the rest take the background class with
/// `background_class_weight`.
pub fn class_targets(
    assignment: &Assignment,
    truths: &[InstanceSequenceTruth],
    n: usize,
    t: usize,
    background: usize,
    background_weight: f64,
) -> (Vec<usize>, Vec<f64>) {
    let owner = assignment.inverse(truths.len());
    let mut targets = Vec::with_capacity(n * t);
    let mut weights = Vec::with_capacity(n * t);
    for _frame in 0..t {
        for slot in 0..n {
            match owner[slot] {
                Some(g) => {
                    targets.push(truths[g].class_id);
                    weights.push(1.0);
                }
                None => {
                    targets.push(background);
                    weights.push(background_weight);
                }
            }
        }
    }
    (targets, weights)
}

/// Weighted mean negative log-likelihood `sum w_j nll_j / sum w_j`.
pub fn classification_loss<E: Float>(tape: &mut Tape<E>, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() || targets.len() != weights.len() {
        return arg_err(format!("{} targets for logits {:?}", targets.len(), shape));
    }
    let total: f64 = weights.iter().sum();
    let mut sel = vec![0.0; shape[0] * shape[1]];
    if total > 0.0 {
        for (j, (&c, &w)) in targets.iter().zip(weights).enumerate() {
            if c >= shape[1] {
                return arg_err(format!("target class {c} outside {} columns", shape[1]));
            }
            sel[j * shape[1] + c] = -w / total;
        }
    }
    let logp = tape.log_softmax(logits, 1)?;
    let sel = constant(tape, &shape, &sel)?;
    let prod = tape.mul(logp, sel)?;
    Ok(tape.sum(prod))
}

/// Per-row `lambda_l1 |p - g|_1 + lambda_iou (1 - GIoU(p, g))` for `[M, 4]`
/// predicted boxes against constant targets.
pub fn box_rows<E: Float>(tape: &mut Tape<E>, pred: Var, gt: &[[f64; 4]], w: &LossWeights) -> Result<Var> {
    let m = gt.len();
    if tape.shape(pred) != [m, 4] {
        return arg_err(format!("{:?} boxes against {m} targets", tape.shape(pred)));
    }
    let flat: Vec<f64> = gt.iter().flatten().copied().collect();
    let g = constant(tape, &[m, 4], &flat)?;
    let diff = tape.sub(pred, g)?;
    let abs = tape.abs(diff);
    let l1 = tape.sum_axis(abs, 1)?;

    let mut cols = [pred; 4];
    for (k, c) in cols.iter_mut().enumerate() {
        *c = tape.narrow(pred, 1, k, 1)?;
    }
    let [cx, cy, bw, bh] = cols;
    let hw = tape.scale(bw, 0.5);
    let hh = tape.scale(bh, 0.5);
    let x1 = tape.sub(cx, hw)?;
    let x2 = tape.add(cx, hw)?;
    let y1 = tape.sub(cy, hh)?;
    let y2 = tape.add(cy, hh)?;
    let gxyxy: Vec<[f64; 4]> = gt.iter().map(|b| crate::matching::box_cxcywh_to_xyxy(*b)).collect();
    let gcol = |tape: &mut Tape<E>, k: usize| constant(tape, &[m, 1], &gxyxy.iter().map(|b| b[k]).collect::<Vec<_>>());
    let (gx1, gy1, gx2, gy2) = (gcol(tape, 0)?, gcol(tape, 1)?, gcol(tape, 2)?, gcol(tape, 3)?);
    let garea: Vec<f64> = gxyxy.iter().map(|b| (b[2] - b[0]) * (b[3] - b[1])).collect();
    let garea = constant(tape, &[m, 1], &garea)?;

    let ix1 = tape.maximum(x1, gx1)?;
    let ix2 = tape.minimum(x2, gx2)?;
    let iy1 = tape.maximum(y1, gy1)?;
    let iy2 = tape.minimum(y2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;
    let parea = tape.mul(bw, bh)?;
    let union = tape.add(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.minimum(x1, gx1)?;
    let ex2 = tape.maximum(x2, gx2)?;
    let ey1 = tape.minimum(y1, gy1)?;
    let ey2 = tape.maximum(y2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclose = tape.mul(ew, eh)?;
    let gap = tape.sub(enclose, union)?;
    let gap = tape.div(gap, enclose)?;
    let giou = tape.sub(iou, gap)?;
    let giou = tape.reshape(giou, &[m])?;

    let l1 = tape.scale(l1, w.lambda_l1);
    let one_minus = tape.neg(giou);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let giou_term = tape.scale(one_minus, w.lambda_iou);
    Ok(tape.add(l1, giou_term)?)
}

/// Matches on detached outputs, then records the loss under that fixed
/// assignment.
pub fn hungarian_loss<E: Float>(
    tape: &mut Tape<E>,
    preds: &PredictionVars,
    truths: &[InstanceSequenceTruth],
    w: &LossWeights,
) -> Result<LossOutput> {
    let values = preds.values(tape);
    let cost = matching_cost_matrix(&values, truths, &w.matching())?;
    let assignment = hungarian(&cost)?;
    hungarian_loss_with(tape, preds, truths, w, assignment)
}

/// The loss under a given assignment, which the backward pass treats as a
/// constant.
pub fn hungarian_loss_with<E: Float>(
    tape: &mut Tape<E>,
    preds: &PredictionVars,
    truths: &[InstanceSequenceTruth],
    w: &LossWeights,
    assignment: Assignment,
) -> Result<LossOutput> {
    let (n, t) = (preds.n, preds.t);
    if truths.len() > n || assignment.sigma.len() != n {
        return arg_err(format!("{} truths, {} slots, assignment of {}", truths.len(), n, assignment.sigma.len()));
    }
    let classes = tape.shape(preds.class_logits)[1];
    let (targets, weights) = class_targets(&assignment, truths, n, t, classes - 1, w.background_class_weight);
    let class_nll = classification_loss(tape, preds.class_logits, &targets, &weights)?;

    let m = truths.len();
    let norm = m.max(1) as f64;
    let mut sequences: Vec<SequenceLoss> =
        (0..m).map(|g| SequenceLoss { truth: g, slot: assignment.sigma[g], box_term: 0.0, mask_term: 0.0 }).collect();

    // Box rows: one per matched pair and frame where the truth is present.
    let (mut rows, mut gt_boxes, mut row_w, mut row_seq) = (vec![], vec![], vec![], vec![]);
    for (g, truth) in truths.iter().enumerate() {
        let present = truth.presence.iter().filter(|&&p| p).count();
        for f in (0..t).filter(|&f| truth.presence[f]) {
            rows.push(f * n + assignment.sigma[g]);
            gt_boxes.push(truth.boxes[f]);
            row_w.push(1.0 / present as f64);
            row_seq.push(g);
        }
    }
    let box_loss = if rows.is_empty() {
        tape.constant(Tensor::scalar(E::zero()))
    } else {
        let picked = tape.index_select(preds.boxes, 0, &rows)?;
        let per_row = box_rows(tape, picked, &gt_boxes, w)?;
        for (k, v) in tape.value(per_row).to_f64().iter().enumerate() {
            sequences[row_seq[k]].box_term += v * row_w[k];
        }
        let scale: Vec<f64> = row_w.iter().map(|v| v / norm).collect();
        let scale = constant(tape, &[rows.len()], &scale)?;
        let weighted = tape.mul(per_row, scale)?;
        tape.sum(weighted)
    };

    let mask_loss = if m == 0 || w.lambda_mask == 0.0 {
        tape.constant(Tensor::scalar(E::zero()))
    } else {
        let (th, tw) = (truths[0].masks[0].height, truths[0].masks[0].width);
        let slots: Vec<usize> = assignment.sigma[..m].to_vec();
        let picked = tape.index_select(preds.mask_logits, 0, &slots)?;
        let ps = tape.shape(picked).to_vec();
        if ps.len() != 4 || ps[1] != t {
            return arg_err(format!("mask logits {:?} do not hold {t} frames", ps));
        }
        let picked =
            if (ps[2], ps[3]) == (th, tw) { picked } else { tape.upsample_bilinear(picked, th, tw)? };
        let mut gt = Vec::with_capacity(m * t * th * tw);
        for truth in truths {
            for mask in &truth.masks {
                if (mask.height, mask.width) != (th, tw) {
                    return arg_err("truth masks differ in resolution");
                }
                gt.extend(mask.bits().iter().map(|&b| if b { E::one() } else { E::zero() }));
            }
        }
        let gt = Tensor::new(vec![m * t, th, tw], gt)?;
        let flat = tape.reshape(picked, &[m * t, th, tw])?;
        let per_frame = per_frame_mask_terms(tape, flat, &gt, w)?;
        for (k, v) in tape.value(per_frame).to_f64().iter().enumerate() {
            sequences[k / t].mask_term += w.lambda_mask * v / t as f64;
        }
        let total = tape.sum(per_frame);
        tape.scale(total, w.lambda_mask / (t as f64 * norm))
    };

    let total = tape.add(class_nll, box_loss)?;
    let total = tape.add(total, mask_loss)?;
    let breakdown = LossBreakdown {
        total: scalar(tape, total),
        class_nll: scalar(tape, class_nll),
        box_loss: scalar(tape, box_loss),
        mask: scalar(tape, mask_loss),
        sequences,
    };
    Ok(LossOutput { total, breakdown, assignment })
}
