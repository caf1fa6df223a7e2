//! Oracle recall, per-scale recall tables and average precision.

use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};

/// Half-open pixel height range `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightBin {
    pub lo: f64,
    pub hi: f64,
}

impl HeightBin {
    pub fn contains(&self, h: f64) -> bool {
        h >= self.lo && h < self.hi
    }

    pub fn label(&self) -> String {
        if self.hi.is_infinite() {
            format!("height>={}", self.lo)
        } else {
            format!("{}<=height<{}", self.lo, self.hi)
        }
    }
}

/// The four KITTI-style bins: 25–50, 50–100, 100–200 and ≥ 200 pixels.
pub fn kitti_bins() -> Vec<HeightBin> {
    [(25.0, 50.0), (50.0, 100.0), (100.0, 200.0), (200.0, f64::INFINITY)]
        .into_iter()
        .map(|(lo, hi)| HeightBin { lo, hi })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallSpec {
    pub iou_threshold: f64,
    pub budgets: Vec<usize>,
    pub height_bins: Vec<HeightBin>,
}

impl RecallSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return invalid(format!("IoU threshold {} not in (0, 1)", self.iou_threshold));
        }
        for (i, b) in self.height_bins.iter().enumerate() {
            if !(b.lo < b.hi) {
                return invalid(format!("empty height bin {:?}", b));
            }
            if i > 0 && b.lo < self.height_bins[i - 1].hi {
                return invalid("height bins must be ordered and disjoint");
            }
        }
        Ok(())
    }
}

/// Recall over a set of ground truth. `vacuous` marks an empty set, whose
/// recall is defined as 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recall {
    pub value: f64,
    pub recalled: usize,
    pub total: usize,
    pub vacuous: bool,
}

impl Recall {
    fn from_counts(recalled: usize, total: usize) -> Recall {
        if total == 0 {
            Recall { value: 1.0, recalled, total, vacuous: true }
        } else {
            Recall { value: recalled as f64 / total as f64, recalled, total, vacuous: false }
        }
    }
}

/// Best IoU of `gt` over `proposals`, 0 when there are none.
pub fn best_iou(gt: &BBox, proposals: &[BBox]) -> f64 {
    proposals.iter().map(|p| iou(gt, p)).fold(0.0, f64::max)
}

/// Fraction of `gts` whose best IoU over the first `budget` ranked
/// proposals is at least `iou_t`.
pub fn oracle_recall(gts: &[BBox], ranked: &[BBox], budget: usize, iou_t: f64) -> Recall {
    let top = &ranked[..budget.min(ranked.len())];
    let recalled = gts.iter().filter(|g| best_iou(g, top) >= iou_t).count();
    Recall::from_counts(recalled, gts.len())
}

/// Ground truth and ranked proposals of one image, per branch and merged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageProposals {
    pub gts: Vec<BBox>,
    /// Each branch's own proposals, best first.
    pub per_branch: Vec<Vec<BBox>>,
    /// All branches pooled and ranked together, best first.
    pub combined: Vec<BBox>,
}

/// Dataset recall of the merged proposals at `budget`.
pub fn dataset_recall(images: &[ImageProposals], budget: usize, iou_t: f64) -> Recall {
    let (mut r, mut t) = (0, 0);
    for im in images {
        let x = oracle_recall(&im.gts, &im.combined, budget, iou_t);
        r += x.recalled;
        t += x.total;
    }
    Recall::from_counts(r, t)
}

/// Recall of the merged proposals at each budget.
pub fn recall_vs_budget(images: &[ImageProposals], budgets: &[usize], iou_t: f64) -> Vec<(usize, Recall)> {
    budgets.iter().map(|&b| (b, dataset_recall(images, b, iou_t))).collect()
}

/// Recall of the merged proposals at a fixed budget over a grid of IoU thresholds.
pub fn recall_vs_iou(images: &[ImageProposals], budget: usize, grid: &[f64]) -> Vec<(f64, Recall)> {
    let best: Vec<f64> = images
        .iter()
        .flat_map(|im| {
            let top = &im.combined[..budget.min(im.combined.len())];
            im.gts.iter().map(move |g| best_iou(g, top))
        })
        .collect();
    grid.iter()
        .map(|&t| (t, Recall::from_counts(best.iter().filter(|&&b| b >= t).count(), best.len())))
        .collect()
}

/// A row of the per-scale recall table.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallRow {
    pub label: String,
    pub per_branch: Vec<Recall>,
    pub combined: Recall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub branch_names: Vec<String>,
    pub budget: usize,
    pub iou_threshold: f64,
    /// One row per height bin, then "all scales".
    pub rows: Vec<RecallRow>,
}

impl RecallTable {
    pub fn all_scales(&self) -> &RecallRow {
        self.rows.last().expect("table has an all-scales row")
    }
}

/// Per-bin recall of each branch alone (its own top `budget`) and of the
/// union of those sets.
pub fn recall_table(
    images: &[ImageProposals],
    branch_names: &[String],
    bins: &[HeightBin],
    budget: usize,
    iou_t: f64,
) -> Result<RecallTable> {
    let m = branch_names.len();
    if images.iter().any(|im| im.per_branch.len() != m) {
        return invalid(format!("every image needs proposals for {m} branches"));
    }
    // counts[bin][branch or m = combined]
    let nb = bins.len() + 1;
    let mut hit = vec![vec![0usize; m + 1]; nb];
    let mut total = vec![0usize; nb];
    for im in images {
        let tops: Vec<&[BBox]> = im.per_branch.iter().map(|p| &p[..budget.min(p.len())]).collect();
        for g in &im.gts {
            let best: Vec<f64> = tops.iter().map(|t| best_iou(g, t)).collect();
            let union = best.iter().copied().fold(0.0, f64::max);
            let mut rows = vec![bins.len()];
            if let Some(b) = bins.iter().position(|b| b.contains(g.h)) {
                rows.push(b);
            }
            for r in rows {
                total[r] += 1;
                for (k, &v) in best.iter().enumerate() {
                    hit[r][k] += (v >= iou_t) as usize;
                }
                hit[r][m] += (union >= iou_t) as usize;
            }
        }
    }
    let rows = (0..nb)
        .map(|r| RecallRow {
            label: if r < bins.len() { bins[r].label() } else { "all scales".into() },
            per_branch: (0..m).map(|k| Recall::from_counts(hit[r][k], total[r])).collect(),
            combined: Recall::from_counts(hit[r][m], total[r]),
        })
        .collect();
    Ok(RecallTable { branch_names: branch_names.to_vec(), budget, iou_threshold: iou_t, rows })
}

/// A detection on image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredDetection {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Precision/recall after each detection in descending score order (ties
/// keep input order). Each detection claims its best-overlapping ground
/// truth in the same image if that overlap reaches `iou_t` and the ground
/// truth is still unclaimed.
pub fn precision_recall(dets: &[ScoredDetection], gts: &[Vec<BBox>], iou_t: f64) -> Vec<(f64, f64)> {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut out = Vec::with_capacity(dets.len());
    for (k, &i) in order.iter().enumerate() {
        let d = &dets[i];
        if let Some(g) = gts.get(d.image) {
            let mut best: Option<(usize, f64)> = None;
            for (j, b) in g.iter().enumerate() {
                let v = iou(&d.bbox, b);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, v)) = best {
                if v >= iou_t && !claimed[d.image][j] {
                    claimed[d.image][j] = true;
                    tp += 1;
                }
            }
        }
        let recall = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
        out.push((tp as f64 / (k + 1) as f64, recall));
    }
    out
}

/// 11-point interpolated average precision.
pub fn average_precision(dets: &[ScoredDetection], gts: &[Vec<BBox>], iou_t: f64) -> f64 {
    let pr = precision_recall(dets, gts, iou_t);
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            pr.iter()
                .filter(|(_, rec)| *rec >= r - 1e-12)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(x: f64, y: f64, s: f64) -> BBox {
        BBox::from_corners(x, y, x + s, y + s)
    }

    #[test]
    fn recall_examples() {
        let gts = [sq(0.0, 0.0, 10.0), sq(50.0, 50.0, 10.0)];
        // IoU of a 10x10 box with a 10x8 box inside it is 0.8.
        let props = [BBox::from_corners(0.0, 0.0, 10.0, 8.0)];
        let r = oracle_recall(&gts, &props, 10, 0.7);
        assert_eq!(r.value, 0.5);
        assert_eq!(oracle_recall(&gts, &props, 0, 0.7).value, 0.0);
        let e = oracle_recall(&[], &props, 10, 0.7);
        assert!(e.vacuous && e.value == 1.0);
    }

    #[test]
    fn ap_extremes() {
        let gts = vec![vec![sq(0.0, 0.0, 10.0), sq(20.0, 0.0, 10.0)]];
        let perfect: Vec<ScoredDetection> = gts[0]
            .iter()
            .map(|&b| ScoredDetection { image: 0, bbox: b, score: 0.9 })
            .collect();
        assert_eq!(average_precision(&perfect, &gts, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let gts = vec![vec![sq(0.0, 0.0, 10.0)]];
        let d = |s| ScoredDetection { image: 0, bbox: sq(0.0, 0.0, 10.0), score: s };
        let pr = precision_recall(&[d(0.9), d(0.8)], &gts, 0.5);
        assert_eq!(pr, vec![(1.0, 1.0), (0.5, 1.0)]);
    }

    #[test]
    fn single_branch_column_equals_combined() {
        let gts = vec![sq(0.0, 0.0, 30.0), sq(40.0, 40.0, 60.0)];
        let im = ImageProposals {
            gts: gts.clone(),
            per_branch: vec![gts.clone(), vec![]],
            combined: gts,
        };
        let names = vec!["a".to_string(), "b".to_string()];
        let t = recall_table(&[im], &names, &kitti_bins(), 100, 0.7).unwrap();
        for row in &t.rows {
            assert_eq!(row.per_branch[0].value, row.combined.value);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..200.0f64, 0.0..200.0f64, 5.0..80.0f64, 5.0..80.0f64).prop_map(|(x, y, w, h)| BBox::from_corners(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn recall_matches_double_loop(gts in prop::collection::vec(arb_box(), 1..50),
                                      props in prop::collection::vec(arb_box(), 0..120),
                                      budget in 0usize..150, t in 0.1..0.9f64) {
            let mut hit = 0;
            for g in &gts {
                let mut best = 0.0f64;
                for (k, p) in props.iter().enumerate() {
                    if k < budget { best = best.max(iou(g, p)); }
                }
                if best >= t { hit += 1; }
            }
            let r = oracle_recall(&gts, &props, budget, t);
            prop_assert_eq!(r.recalled, hit);
        }

        #[test]
        fn recall_monotone(gts in prop::collection::vec(arb_box(), 1..30),
                           props in prop::collection::vec(arb_box(), 0..60)) {
            let im = ImageProposals { gts, per_branch: vec![], combined: props };
            let imgs = [im];
            let by_budget = recall_vs_budget(&imgs, &[0, 5, 10, 20, 40, 80], 0.5);
            for w in by_budget.windows(2) { prop_assert!(w[0].1.value <= w[1].1.value); }
            let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
            let by_iou = recall_vs_iou(&imgs, 100, &grid);
            for w in by_iou.windows(2) { prop_assert!(w[0].1.value >= w[1].1.value); }
        }

        #[test]
        fn combined_dominates_columns(gts in prop::collection::vec(arb_box(), 1..20),
                                      a in prop::collection::vec(arb_box(), 0..30),
                                      b in prop::collection::vec(arb_box(), 0..30)) {
            let mut combined = a.clone();
            combined.extend(b.iter().copied());
            let im = ImageProposals { gts, per_branch: vec![a, b], combined };
            let names = vec!["a".to_string(), "b".to_string()];
            let t = recall_table(&[im], &names, &kitti_bins(), 50, 0.5).unwrap();
            for row in &t.rows {
                for c in &row.per_branch { prop_assert!(row.combined.value >= c.value); }
            }
        }

        #[test]
        fn ap_is_rank_only(gts in prop::collection::vec(arb_box(), 1..8),
                           dets in prop::collection::vec((arb_box(), 0.01..1.0f64), 0..20)) {
            let g = vec![gts];
            let d: Vec<ScoredDetection> = dets.iter().map(|&(b, s)| ScoredDetection { image: 0, bbox: b, score: s }).collect();
            let e: Vec<ScoredDetection> = d.iter().map(|x| ScoredDetection { score: 3.0 * x.score.powi(3) + 1.0, ..*x }).collect();
            prop_assert_eq!(average_precision(&d, &g, 0.5), average_precision(&e, &g, 0.5));
        }
    }
}
