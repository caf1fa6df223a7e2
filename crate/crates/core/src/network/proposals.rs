//! Turning branch outputs into ranked proposals and detections.

use super::branch::ProposalForward;
use crate::anchors::Anchor;
use crate::error::{invalid, Result};
use crate::geometry::{clip, decode_clamped, nms_limited, BBox, RegressionTarget, ScoredBox};

/// A scored box emitted by one detection branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub branch: usize,
}

/// A classified box. `class` is in `1..=K`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// One anchor's raw prediction: objectness and box offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPrediction {
    pub anchor: Anchor,
    pub score: f64,
    pub deltas: [f64; 4],
}

/// Objectness and offsets of every anchor of the given branches.
pub fn raw_predictions(fwd: &ProposalForward, anchors: &[Vec<Anchor>]) -> Vec<RawPrediction> {
    anchors
        .iter()
        .flatten()
        .map(|a| RawPrediction { anchor: *a, score: fwd.objectness(a), deltas: fwd.deltas(a) })
        .collect()
}

/// Decodes each prediction onto its anchor and clips it to the image;
/// boxes that vanish under clipping are dropped.
pub fn decode_predictions(preds: &[RawPrediction], width: f64, height: f64) -> Vec<Proposal> {
    preds
        .iter()
        .filter_map(|p| {
            let t = RegressionTarget::from_array(p.deltas);
            let b = decode_clamped(&p.anchor.bbox, &t).ok()?;
            let b = clip(&b, width, height).ok()?;
            Some(Proposal { bbox: b, score: p.score, branch: p.anchor.branch })
        })
        .collect()
}

/// Pools decoded boxes from all branches, applies NMS at `nms_iou` and
/// keeps the `top_n` best. Candidates are first cut to the `pre_nms`
/// highest-scoring (ties by lower index).
pub fn select_proposals(mut candidates: Vec<Proposal>, top_n: usize, nms_iou: f64, pre_nms: usize) -> Vec<Proposal> {
    if candidates.len() > pre_nms {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
        order.truncate(pre_nms);
        order.sort_unstable();
        candidates = order.into_iter().map(|i| candidates[i]).collect();
    }
    let scored: Vec<ScoredBox> = candidates.iter().map(|p| ScoredBox { bbox: p.bbox, score: p.score }).collect();
    nms_limited(&scored, nms_iou, top_n).into_iter().map(|i| candidates[i]).collect()
}

/// Decode → clip → pool across branches → NMS → top `top_n`.
pub fn collect_proposals(
    fwd: &ProposalForward,
    anchors: &[Vec<Anchor>],
    top_n: usize,
    nms_iou: f64,
    pre_nms: usize,
) -> Vec<Proposal> {
    let decoded = decode_predictions(&raw_predictions(fwd, anchors), fwd.width as f64, fwd.height as f64);
    select_proposals(decoded, top_n, nms_iou, pre_nms)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorMode {
    /// Objectness only; every detection gets class 1.
    ClassAgnostic,
    /// Most probable object class per anchor, scored by its probability.
    ClassSpecific,
}

/// Uses the proposal branches directly as a detector. Anchors whose score
/// is below `threshold` are dropped; survivors go through per-class NMS.
pub fn proposal_as_detector(
    fwd: &ProposalForward,
    anchors: &[Vec<Anchor>],
    mode: DetectorMode,
    threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    if fwd.classes < 1 {
        return invalid("class-specific detection requires K >= 1 object classes");
    }
    let (w, h) = (fwd.width as f64, fwd.height as f64);
    let mut dets = Vec::new();
    for a in anchors.iter().flatten() {
        let p = fwd.probabilities(a);
        let (class, score) = match mode {
            DetectorMode::ClassAgnostic => (1, 1.0 - p[0]),
            DetectorMode::ClassSpecific => {
                let mut best = 1;
                for c in 2..p.len() {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                (best, p[best])
            }
        };
        if score < threshold {
            continue;
        }
        let t = RegressionTarget::from_array(fwd.deltas(a));
        let Ok(b) = decode_clamped(&a.bbox, &t).and_then(|b| clip(&b, w, h)) else { continue };
        dets.push(Detection { bbox: b, class, score });
    }
    Ok(per_class_nms(dets, nms_iou))
}

/// NMS applied independently within each class; output ordered by class, then score.
pub fn per_class_nms(dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    let max_class = dets.iter().map(|d| d.class).max().unwrap_or(0);
    let mut out = Vec::new();
    for c in 1..=max_class {
        let group: Vec<Detection> = dets.iter().filter(|d| d.class == c).copied().collect();
        let scored: Vec<ScoredBox> = group.iter().map(|d| ScoredBox { bbox: d.bbox, score: d.score }).collect();
        out.extend(nms_limited(&scored, nms_iou, usize::MAX).into_iter().map(|i| group[i]));
    }
    out
}
