//! Post-processing of network outputs into scored mask sequences, and
//! AP/AR under video IoU.
//!
//! Matching follows the COCO protocol with sequences in place of images:
//! per video and category, results are visited by descending score and
//! each takes the unmatched truth of highest IoU at or above the
//! threshold. Precision is interpolated at 101 recall points.
//!
//! Ties are broken so that input order never matters: results of equal
//! score are ranked by their best IoU against any truth of their category
//! (higher first), then by video id, then by position in the input.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vistr_tensor::kernels::upsample_bilinear;
use vistr_tensor::Tensor;

use crate::error::{arg_err, format_err, Result, VisError};
use crate::mask::{rle_decode, rle_encode, Mask};
use crate::matching::PredictionValues;
use crate::synth::InstanceSequenceTruth;

/// Results scoring at or below this are dropped.
pub const MIN_SCORE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub video_id: u64,
    pub category: usize,
    pub score: f64,
    pub masks: Vec<Mask>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    /// AP at each IoU threshold, averaged over categories.
    pub ap_per_threshold: Vec<f64>,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Most frequent foreground argmax over frames, ties to the lower class id.
pub fn sequence_category(values: &PredictionValues, slot: usize) -> usize {
    let k = values.classes - 1;
    let mut votes = vec![0usize; k];
    for f in 0..values.t {
        let mut best = 0;
        for c in 1..k {
            if values.prob(slot, f, c) > values.prob(slot, f, best) {
                best = c;
            }
        }
        votes[best] += 1;
    }
    let mut cat = 0;
    for c in 1..k {
        if votes[c] > votes[cat] {
            cat = c;
        }
    }
    cat
}

/// One result per instance slot: category by majority vote over frames,
/// score as the mean probability of that category, masks from logits
/// resized to `height x width` and thresholded at probability 0.5.
pub fn postprocess(
    video_id: u64,
    values: &PredictionValues,
    mask_logits: &Tensor<f32>,
    height: usize,
    width: usize,
) -> Result<Vec<InstanceResult>> {
    let s = mask_logits.shape();
    if s.len() != 4 || s[0] != values.n || s[1] != values.t {
        return arg_err(format!("mask logits {:?} for {} slots and {} frames", s, values.n, values.t));
    }
    let mut out = Vec::new();
    for slot in 0..values.n {
        let category = sequence_category(values, slot);
        let score = (0..values.t).map(|f| values.prob(slot, f, category)).sum::<f64>() / values.t as f64;
        if score <= MIN_SCORE {
            continue;
        }
        let masks = slot_masks(mask_logits, slot, height, width)?;
        out.push(InstanceResult { video_id, category, score, masks });
    }
    Ok(out)
}

/// Mask sequence of one slot from `[n, T, h, w]` logits, resized to
/// `height x width` and thresholded at probability 0.5.
pub fn slot_masks(mask_logits: &Tensor<f32>, slot: usize, height: usize, width: usize) -> Result<Vec<Mask>> {
    let s = mask_logits.shape();
    if s.len() != 4 || slot >= s[0] {
        return arg_err(format!("slot {slot} of mask logits {s:?}"));
    }
    let (t, h, w) = (s[1], s[2], s[3]);
    (0..t)
        .map(|f| {
            let off = (slot * t + f) * h * w;
            let logits = &mask_logits.data()[off..off + h * w];
            let full = upsample_bilinear(logits, h, w, height, width);
            Mask::from_bits(height, width, full.iter().map(|&v| v > 0.0).collect())
        })
        .collect()
}

/// Frame-summed intersection over frame-summed union; two empty sequences
/// score 1.
pub fn sequence_mask_iou(pred: &[Mask], gt: &[Mask]) -> Result<f64> {
    if pred.len() != gt.len() {
        return arg_err(format!("{} predicted frames against {} truth frames", pred.len(), gt.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if (p.height, p.width) != (g.height, g.width) {
            return arg_err("mask resolutions differ");
        }
        inter += p.intersection(g);
        union += p.union(g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Ground truth of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTruth {
    pub video_id: u64,
    pub instances: Vec<InstanceSequenceTruth>,
}

/// A result ranked within its category.
struct Ranked {
    score: f64,
    best_iou: f64,
    video_id: u64,
    index: usize,
    /// IoU against each truth of the same video and category.
    ious: Vec<f64>,
}

fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.best_iou.total_cmp(&a.best_iou))
        .then(a.video_id.cmp(&b.video_id))
        .then(a.index.cmp(&b.index))
}

/// Per category, the ranked results of each video plus truth counts.
struct CategoryData {
    /// video id -> ranked results (best first).
    per_video: BTreeMap<u64, Vec<Ranked>>,
    truths_per_video: BTreeMap<u64, usize>,
}

impl CategoryData {
    fn num_truths(&self) -> usize {
        self.truths_per_video.values().sum()
    }

    /// Greedy matching with at most `max_dets` results per video; returns
    /// the (score-ordered) true-positive flags of all kept results.
    fn matched(&self, threshold: f64, max_dets: usize) -> Vec<(bool, &Ranked)> {
        let mut kept = Vec::new();
        for (vid, results) in &self.per_video {
            let n_gt = self.truths_per_video.get(vid).copied().unwrap_or(0);
            let mut taken = vec![false; n_gt];
            for r in results.iter().take(max_dets) {
                let mut best: Option<usize> = None;
                for g in 0..n_gt {
                    if taken[g] || r.ious[g] < threshold {
                        continue;
                    }
                    if best.is_none_or(|b| r.ious[g] > r.ious[b]) {
                        best = Some(g);
                    }
                }
                if let Some(g) = best {
                    taken[g] = true;
                }
                kept.push((best.is_some(), r));
            }
        }
        kept.sort_by(|a, b| rank_order(a.1, b.1));
        kept
    }
}

/// 101-point interpolated precision of score-ordered hit flags.
pub fn interpolated_ap(hits: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_truths as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// AP and AR over all categories that have at least one truth.
pub fn evaluate(
    results: &[InstanceResult],
    truths: &[VideoTruth],
    categories: &[usize],
    thresholds: &[f64],
) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return arg_err("no IoU thresholds");
    }
    for r in results {
        if !categories.contains(&r.category) {
            return format_err(format!("result for video {} has unknown category {}", r.video_id, r.category));
        }
        if !truths.iter().any(|v| v.video_id == r.video_id) {
            return format_err(format!("result refers to unknown video {}", r.video_id));
        }
    }
    for v in truths {
        if let Some(t) = v.instances.iter().find(|t| !categories.contains(&t.class_id)) {
            return format_err(format!("truth in video {} has unknown category {}", v.video_id, t.class_id));
        }
    }

    let mut per_category = Vec::new();
    for &cat in categories {
        let mut data = CategoryData { per_video: BTreeMap::new(), truths_per_video: BTreeMap::new() };
        for v in truths {
            let gts: Vec<&InstanceSequenceTruth> = v.instances.iter().filter(|t| t.class_id == cat).collect();
            data.truths_per_video.insert(v.video_id, gts.len());
            let mut ranked = Vec::new();
            for (index, r) in results.iter().enumerate() {
                if r.video_id != v.video_id || r.category != cat {
                    continue;
                }
                let ious = gts.iter().map(|g| sequence_mask_iou(&r.masks, &g.masks)).collect::<Result<Vec<_>>>()?;
                let best_iou = ious.iter().copied().fold(0.0, f64::max);
                ranked.push(Ranked { score: r.score, best_iou, video_id: v.video_id, index, ious });
            }
            ranked.sort_by(rank_order);
            data.per_video.insert(v.video_id, ranked);
        }
        if data.num_truths() > 0 {
            per_category.push(data);
        }
    }
    if per_category.is_empty() {
        return Ok(EvalReport { ap_per_threshold: vec![0.0; thresholds.len()], ..Default::default() });
    }

    let nc = per_category.len() as f64;
    let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
    let (mut ar1, mut ar10) = (0.0, 0.0);
    for &thr in thresholds {
        let mut ap = 0.0;
        for data in &per_category {
            let n = data.num_truths();
            let hits: Vec<bool> = data.matched(thr, 100).iter().map(|(h, _)| *h).collect();
            ap += interpolated_ap(&hits, n);
            for (k, acc) in [(1usize, &mut ar1), (10, &mut ar10)] {
                let found = data.matched(thr, k).iter().filter(|(h, _)| *h).count();
                *acc += found as f64 / n as f64;
            }
        }
        ap_per_threshold.push(ap / nc);
    }
    let nt = thresholds.len() as f64;
    let at = |x: f64| thresholds.iter().position(|&t| (t - x).abs() < 1e-12).map(|i| ap_per_threshold[i]);
    Ok(EvalReport {
        ap: ap_per_threshold.iter().sum::<f64>() / nt,
        ap50: at(0.5).unwrap_or(0.0),
        ap75: at(0.75).unwrap_or(0.0),
        ar1: ar1 / (nc * nt),
        ar10: ar10 / (nc * nt),
        ap_per_threshold,
    })
}

/// Entry of a results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub video_id: u64,
    pub category_id: usize,
    pub score: f64,
    pub rle_masks: Vec<Vec<u32>>,
}

pub fn results_to_json(results: &[InstanceResult]) -> Result<Vec<u8>> {
    let entries: Vec<ResultEntry> = results
        .iter()
        .map(|r| ResultEntry {
            video_id: r.video_id,
            category_id: r.category,
            score: r.score,
            rle_masks: r.masks.iter().map(rle_encode).collect(),
        })
        .collect();
    let mut out = serde_json::to_vec_pretty(&entries).map_err(|e| VisError::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Parses a results file; mask extents come from the video lookup
/// `(height, width)` by id.
pub fn results_from_json(
    bytes: &[u8],
    extents: impl Fn(u64) -> Option<(usize, usize)>,
) -> Result<Vec<InstanceResult>> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let entries: Vec<ResultEntry> = serde_path_to_error::deserialize(de)
        .map_err(|e| VisError::Format(format!("results at `{}`: {}", e.path(), e.inner())))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let Some((h, w)) = extents(e.video_id) else {
                return format_err(format!("results[{i}].video_id: unknown video {}", e.video_id));
            };
            let masks = e.rle_masks.iter().map(|c| rle_decode(c, h, w)).collect::<Result<_>>()?;
            Ok(InstanceResult { video_id: e.video_id, category: e.category_id, score: e.score, masks })
        })
        .collect()
}
