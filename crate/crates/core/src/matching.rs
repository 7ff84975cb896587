//! Sequence-level matching between predicted instance slots and ground
//! truth: box geometry, the pairwise cost, and an exact assignment solver.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::mask::BoxCxCyWH;
use crate::synth::InstanceSequenceTruth;

/// `(x1, y1, x2, y2)`.
pub type BoxXyxy = [f64; 4];

pub fn box_cxcywh_to_xyxy(b: BoxCxCyWH) -> BoxXyxy {
    let (w, h) = (b[2].max(0.0), b[3].max(0.0));
    [b[0] - w / 2.0, b[1] - h / 2.0, b[0] + w / 2.0, b[1] + h / 2.0]
}

fn area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// IoU minus the share of the enclosing box covered by neither input. Two
/// degenerate boxes with an empty enclosing box score 0.
pub fn generalized_iou(a: BoxXyxy, b: BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(&a) + area(&b) - inter;
    let enclose = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if enclose <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (enclose - union) / enclose
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassReduction {
    /// Average the per-frame probabilities of a sequence.
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub class_reduction: ClassReduction,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { lambda_iou: 2.0, lambda_l1: 5.0, class_reduction: ClassReduction::Mean }
    }
}

/// `(1/T) sum_t [lambda_iou (1 - GIoU) + lambda_l1 |b_t - b^_t|_1]`.
pub fn sequence_box_cost(pred: &[BoxCxCyWH], gt: &[BoxCxCyWH], lambda_iou: f64, lambda_l1: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return arg_err(format!("{} predicted boxes against {} targets", pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let l1: f64 = p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum();
            let giou = generalized_iou(box_cxcywh_to_xyxy(*g), box_cxcywh_to_xyxy(*p));
            lambda_iou * (1.0 - giou) + lambda_l1 * l1
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Detached per-prediction outputs. Prediction `j` is slot `j % n` at frame
/// `j / n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionValues {
    pub n: usize,
    pub t: usize,
    /// Classes including the trailing background column.
    pub classes: usize,
    /// Softmax probabilities, `[N, classes]` row-major.
    pub probs: Vec<f64>,
    pub boxes: Vec<BoxCxCyWH>,
}

impl PredictionValues {
    pub fn index(&self, slot: usize, frame: usize) -> usize {
        frame * self.n + slot
    }

    pub fn prob(&self, slot: usize, frame: usize, class: usize) -> f64 {
        self.probs[self.index(slot, frame) * self.classes + class]
    }

    pub fn sequence_boxes(&self, slot: usize) -> Vec<BoxCxCyWH> {
        (0..self.t).map(|f| self.boxes[self.index(slot, f)]).collect()
    }
}

/// Rows are ground-truth sequences (padded with zero rows), columns are
/// predicted slots.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return arg_err(format!("{} entries for a {n}x{n} cost matrix", values.len()));
        }
        Ok(CostMatrix { n, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Cost of pairing truth `truth` with slot `slot`: the negated class
/// probability reduced over frames plus the box cost over the frames where
/// the truth is present.
pub fn pair_cost(preds: &PredictionValues, slot: usize, truth: &InstanceSequenceTruth, w: &MatchWeights) -> Result<f64> {
    if truth.boxes.len() != preds.t || truth.presence.len() != preds.t {
        return arg_err(format!("truth spans {} frames, predictions {}", truth.boxes.len(), preds.t));
    }
    if truth.class_id + 1 >= preds.classes {
        return arg_err(format!("class {} outside the {} foreground classes", truth.class_id, preds.classes - 1));
    }
    let probs = (0..preds.t).map(|f| preds.prob(slot, f, truth.class_id));
    let class = match w.class_reduction {
        ClassReduction::Mean => probs.sum::<f64>() / preds.t as f64,
        ClassReduction::Sum => probs.sum::<f64>(),
    };
    let (mut pb, mut gb) = (Vec::new(), Vec::new());
    for f in (0..preds.t).filter(|&f| truth.presence[f]) {
        pb.push(preds.boxes[preds.index(slot, f)]);
        gb.push(truth.boxes[f]);
    }
    Ok(-class + sequence_box_cost(&pb, &gb, w.lambda_iou, w.lambda_l1)?)
}

pub fn matching_cost_matrix(
    preds: &PredictionValues,
    truths: &[InstanceSequenceTruth],
    w: &MatchWeights,
) -> Result<CostMatrix> {
    let n = preds.n;
    if truths.len() > n {
        return arg_err(format!("{} truths exceed {n} prediction slots", truths.len()));
    }
    let mut values = vec![0.0; n * n];
    for (i, truth) in truths.iter().enumerate() {
        for j in 0..n {
            values[i * n + j] = pair_cost(preds, j, truth, w)?;
        }
    }
    CostMatrix::new(n, values)
}

/// Row `i` is assigned column `sigma[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Which truth row, if any, a column is matched to among the first
    /// `rows` rows.
    pub fn inverse(&self, rows: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.sigma.len()];
        for (i, &j) in self.sigma.iter().enumerate().take(rows) {
            inv[j] = Some(i);
        }
        inv
    }
}

/// Minimum-cost perfect matching by shortest augmenting paths with vertex
/// potentials, O(n^3). Among equal reduced costs the lowest column index is
/// taken first, which makes the result reproducible.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.n;
    if let Some(v) = cost.values.iter().find(|v| !v.is_finite()) {
        return arg_err(format!("cost matrix holds non-finite entry {v}"));
    }
    // 1-based rows/columns; column 0 is the virtual start of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[row_of[j] - 1] = j - 1;
    }
    let total = sigma.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
    Ok(Assignment { sigma, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_single() {
        let a = hungarian(&CostMatrix::new(0, vec![]).unwrap()).unwrap();
        assert!(a.sigma.is_empty());
        let a = hungarian(&CostMatrix::new(1, vec![3.5]).unwrap()).unwrap();
        assert_eq!((a.sigma, a.cost), (vec![0], 3.5));
    }

    #[test]
    fn nan_rejected() {
        assert!(hungarian(&CostMatrix::new(2, vec![0.0, f64::NAN, 1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn degenerate_giou() {
        let p = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(generalized_iou(p, p), 0.0);
    }
}
