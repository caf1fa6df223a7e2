//! Anchor grids per detection branch, IoU labeling against ground truth,
//! scale-band assignment and negative sampling.

use crate::error::{invalid, Error, Result};
use crate::geometry::{encode, iou, BBox, RegressionTarget};
use crate::GroundTruth;
use rand::seq::index;
use rand::Rng;

/// IoU at or above which an anchor is a positive sample.
pub const POSITIVE_IOU: f64 = 0.5;
/// IoU below which an anchor enters the negative pool.
pub const NEGATIVE_IOU: f64 = 0.2;
/// Default ratio |S⁻| / |S⁺|.
pub const DEFAULT_GAMMA: f64 = 3.0;
/// Stand-in positive count used to size the negative set of a branch with no positives.
pub const EMPTY_POSITIVE_BASE: usize = 8;

/// One detection branch: the trunk stride it is attached to, its detection
/// filters (height × width) and the anchor (width × height) paired with
/// each filter, in listed order.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub name: String,
    pub stride: usize,
    pub filter_sizes: Vec<(usize, usize)>,
    pub anchor_sizes: Vec<(f64, f64)>,
    pub alpha: f64,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32, 64].contains(&self.stride) {
            return invalid(format!("{}: stride {} not in {{8,16,32,64}}", self.name, self.stride));
        }
        if self.filter_sizes.is_empty() || self.filter_sizes.len() != self.anchor_sizes.len() {
            return invalid(format!(
                "{}: {} filters for {} anchors",
                self.name,
                self.filter_sizes.len(),
                self.anchor_sizes.len()
            ));
        }
        if self.filter_sizes.iter().any(|&(h, w)| h == 0 || w == 0) {
            return invalid(format!("{}: zero-sized filter", self.name));
        }
        if self.anchor_sizes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return invalid(format!("{}: non-positive anchor size", self.name));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid(format!("{}: alpha must be non-negative", self.name));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    /// Anchor sizes scaled by `factor` (for desk-scale image sizes).
    pub fn with_anchor_scale(&self, factor: f64) -> BranchConfig {
        BranchConfig {
            anchor_sizes: self
                .anchor_sizes
                .iter()
                .map(|&(w, h)| (w * factor, h * factor))
                .collect(),
            ..self.clone()
        }
    }
}

/// The three model configurations (car, pedestrian/cyclist, Caltech pedestrian).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Car,
    PedCyc,
    Caltech,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Car => "car",
            Profile::PedCyc => "ped-cyc",
            Profile::Caltech => "caltech",
        }
    }

    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "car" => Ok(Profile::Car),
            "ped-cyc" => Ok(Profile::PedCyc),
            "caltech" => Ok(Profile::Caltech),
            other => invalid(format!("unknown profile {other:?} (car|ped-cyc|caltech)")),
        }
    }

    /// Detection branch rows. Filters are (h, w); anchors are stored (w, h).
    pub fn branches(self) -> Vec<BranchConfig> {
        let (filters, anchors_hw): ([(usize, usize); 2], [(f64, f64); 7]) = match self {
            Profile::Car => (
                [(5, 5), (7, 7)],
                [(40., 40.), (56., 56.), (80., 80.), (112., 112.), (160., 160.), (224., 224.), (320., 320.)],
            ),
            Profile::PedCyc => (
                [(5, 3), (7, 5)],
                [(40., 28.), (56., 36.), (80., 56.), (112., 72.), (160., 112.), (224., 144.), (320., 224.)],
            ),
            Profile::Caltech => (
                [(5, 3), (7, 5)],
                [(40., 20.), (56., 28.), (80., 40.), (112., 56.), (160., 80.), (224., 112.), (320., 160.)],
            ),
        };
        let wh = |i: usize| (anchors_hw[i].1, anchors_hw[i].0);
        let mut out = Vec::with_capacity(4);
        for (b, stride) in [8usize, 16, 32].into_iter().enumerate() {
            out.push(BranchConfig {
                name: format!("det-{stride}"),
                stride,
                filter_sizes: filters.to_vec(),
                anchor_sizes: vec![wh(2 * b), wh(2 * b + 1)],
                alpha: if stride == 8 { 0.9 } else { 1.0 },
            });
        }
        out.push(BranchConfig {
            name: "det-64".into(),
            stride: 64,
            filter_sizes: vec![filters[0]],
            anchor_sizes: vec![wh(6)],
            alpha: 1.0,
        });
        out
    }

    /// ROI pooling output (h, w) of the detection head.
    pub fn roi_size(self) -> (usize, usize) {
        match self {
            Profile::Car => (7, 7),
            Profile::PedCyc => (7, 5),
            Profile::Caltech => (8, 4),
        }
    }

    /// Width of the detection head's fully connected layer.
    pub fn fc_width(self) -> usize {
        match self {
            Profile::Car => 4096,
            Profile::PedCyc | Profile::Caltech => 2048,
        }
    }

    /// Object classes, in label order `1..=K`.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Profile::Car => &["Car"],
            Profile::PedCyc => &["Pedestrian", "Cyclist"],
            Profile::Caltech => &["Pedestrian"],
        }
    }
}

/// A reference box on branch `branch` at grid cell (`row`, `col`), paired
/// with the branch's `slot`-th filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub branch: usize,
    pub row: usize,
    pub col: usize,
    pub slot: usize,
}

/// Grid extent (rows, cols) of a branch on an image.
pub fn grid_size(config: &BranchConfig, image_w: usize, image_h: usize) -> (usize, usize) {
    (image_h / config.stride, image_w / config.stride)
}

/// One anchor per grid cell and anchor size, ordered row, column, slot.
/// Anchors are not clipped to the image.
pub fn build_anchor_grid(config: &BranchConfig, branch: usize, image_w: usize, image_h: usize) -> Vec<Anchor> {
    let (rows, cols) = grid_size(config, image_w, image_h);
    let s = config.stride as f64;
    let mut out = Vec::with_capacity(rows * cols * config.num_anchors());
    for row in 0..rows {
        for col in 0..cols {
            let cx = col as f64 * s + 0.5 * s;
            let cy = row as f64 * s + 0.5 * s;
            for (slot, &(w, h)) in config.anchor_sizes.iter().enumerate() {
                out.push(Anchor {
                    bbox: BBox::new(cx, cy, w, h),
                    branch,
                    row,
                    col,
                    slot,
                });
            }
        }
    }
    out
}

/// An anchor with its training label. `class == 0` is background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledSample {
    pub anchor_index: usize,
    pub anchor: BBox,
    pub branch: usize,
    pub class: usize,
    pub matched_gt: Option<BBox>,
    pub target: Option<RegressionTarget>,
    pub o_star: f64,
}

/// Partition of a set of anchors into positives, the negative pool and discarded indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labeling {
    pub positives: Vec<LabeledSample>,
    pub negatives: Vec<LabeledSample>,
    pub discarded: Vec<usize>,
}

/// Best-overlapping ground truth `(index, iou)`; ties go to the lowest index.
pub fn best_match(b: &BBox, gts: &[GroundTruth]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        let v = iou(b, &g.bbox);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

/// Labels every anchor by its maximum IoU `o*` over the ground truth:
/// `o* ≥ 0.5` positive (class and target of the argmax), `o* < 0.2` negative
/// pool, otherwise discarded.
pub fn label_anchors(anchors: &[Anchor], gts: &[GroundTruth]) -> Result<Labeling> {
    label_with(anchors, gts, |_| true)
}

/// Like [`label_anchors`], but only ground truth assigned to `branch`
/// (per `gt_branches`) may produce positives; anchors whose best match is
/// another branch's object at positive overlap are discarded.
pub fn label_anchors_for_branch(
    anchors: &[Anchor],
    gts: &[GroundTruth],
    gt_branches: &[usize],
    branch: usize,
) -> Result<Labeling> {
    if gt_branches.len() != gts.len() {
        return invalid("one branch assignment per ground-truth box required");
    }
    label_with(anchors, gts, |i| gt_branches[i] == branch)
}

fn label_with<F: Fn(usize) -> bool>(anchors: &[Anchor], gts: &[GroundTruth], eligible: F) -> Result<Labeling> {
    if let Some(g) = gts.iter().find(|g| g.class == 0 || !g.bbox.is_valid()) {
        return invalid(format!("invalid ground truth {g:?}"));
    }
    let mut out = Labeling::default();
    for (i, a) in anchors.iter().enumerate() {
        let (gi, o_star) = best_match(&a.bbox, gts).unwrap_or((usize::MAX, 0.0));
        let mut sample = LabeledSample {
            anchor_index: i,
            anchor: a.bbox,
            branch: a.branch,
            class: 0,
            matched_gt: None,
            target: None,
            o_star,
        };
        if o_star >= POSITIVE_IOU {
            if !eligible(gi) {
                out.discarded.push(i);
                continue;
            }
            let g = &gts[gi];
            sample.class = g.class;
            sample.matched_gt = Some(g.bbox);
            sample.target = Some(encode(&a.bbox, &g.bbox)?);
            out.positives.push(sample);
        } else if o_star < NEGATIVE_IOU {
            out.negatives.push(sample);
        } else {
            out.discarded.push(i);
        }
    }
    Ok(out)
}

/// Branch whose anchors are closest in log size to `gt` (size = √(w·h));
/// ties go to the lower branch.
pub fn assign_scale_branch(gt: &BBox, configs: &[BranchConfig]) -> usize {
    let size = gt.size().ln();
    let mut best = (0, f64::INFINITY);
    for (m, c) in configs.iter().enumerate() {
        for &(w, h) in &c.anchor_sizes {
            let d = (size - (w * h).sqrt().ln()).abs();
            if d < best.1 {
                best = (m, d);
            }
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingStrategy {
    Random,
    Bootstrapping,
    Mixture,
}

impl SamplingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::Bootstrapping => "bootstrapping",
            SamplingStrategy::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplingStrategy::Random),
            "bootstrapping" => Ok(SamplingStrategy::Bootstrapping),
            "mixture" => Ok(SamplingStrategy::Mixture),
            other => invalid(format!("unknown sampling strategy {other:?}")),
        }
    }
}

/// Number of negatives requested for `num_pos` positives: `round(γ·|S⁺|)`,
/// or `min(pool, round(γ·8))` when there are no positives.
pub fn negative_quota(num_pos: usize, gamma: f64, pool_len: usize) -> usize {
    if num_pos == 0 {
        ((gamma * EMPTY_POSITIVE_BASE as f64).round() as usize).min(pool_len)
    } else {
        (gamma * num_pos as f64).round() as usize
    }
}

/// Selected pool indices plus how many requested negatives were unavailable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeDraw {
    pub indices: Vec<usize>,
    pub shortfall: usize,
}

/// Pool indices ordered by descending score, ties by lower index.
fn ranked(candidates: impl Iterator<Item = usize>, scores: &[f64]) -> Vec<usize> {
    let mut v: Vec<usize> = candidates.collect();
    v.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    v
}

/// Draws `count` negatives from a pool of `pool_len`.
///
/// * random: uniform without replacement;
/// * bootstrapping: the `count` highest objectness `scores`;
/// * mixture: `count / 2` uniform, the rest the top-scored of what remains.
pub fn sample_negatives<R: Rng + ?Sized>(
    pool_len: usize,
    scores: Option<&[f64]>,
    strategy: SamplingStrategy,
    count: usize,
    rng: &mut R,
) -> Result<NegativeDraw> {
    if let Some(s) = scores {
        if s.len() != pool_len {
            return invalid(format!("{} scores for a pool of {pool_len}", s.len()));
        }
    }
    let need_scores = || {
        scores.ok_or_else(|| Error::Invalid(format!("{} sampling requires scores", strategy.name())))
    };
    let take = count.min(pool_len);
    let shortfall = count - take;
    let mut indices = match strategy {
        SamplingStrategy::Random => index::sample(rng, pool_len, take).into_vec(),
        SamplingStrategy::Bootstrapping => {
            let s = need_scores()?;
            let mut top = ranked(0..pool_len, s);
            top.truncate(take);
            top
        }
        SamplingStrategy::Mixture => {
            let s = need_scores()?;
            let n_rand = take / 2;
            let mut chosen = index::sample(rng, pool_len, n_rand).into_vec();
            let mut taken = vec![false; pool_len];
            chosen.iter().for_each(|&i| taken[i] = true);
            let rest = ranked((0..pool_len).filter(|&i| !taken[i]), s);
            chosen.extend(rest.into_iter().take(take - n_rand));
            chosen
        }
    };
    indices.sort_unstable();
    Ok(NegativeDraw { indices, shortfall })
}

/// The training samples of one branch: all positives plus sampled negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub positives: Vec<LabeledSample>,
    pub negatives: Vec<LabeledSample>,
    pub gamma: f64,
    pub shortfall: usize,
}

impl SampleSet {
    /// Samples negatives from `labeling`'s pool. `pool_scores[i]` is the
    /// objectness of `labeling.negatives[i]`.
    pub fn draw<R: Rng + ?Sized>(
        labeling: &Labeling,
        pool_scores: Option<&[f64]>,
        strategy: SamplingStrategy,
        gamma: f64,
        rng: &mut R,
    ) -> Result<SampleSet> {
        let pool = &labeling.negatives;
        let count = negative_quota(labeling.positives.len(), gamma, pool.len());
        let draw = sample_negatives(pool.len(), pool_scores, strategy, count, rng)?;
        Ok(SampleSet {
            positives: labeling.positives.clone(),
            negatives: draw.indices.iter().map(|&i| pool[i]).collect(),
            gamma,
            shortfall: draw.shortfall,
        })
    }
}
