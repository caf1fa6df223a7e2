use mscnn_core::eval::{
    average_precision, dataset_recall, oracle_recall, recall_table, recall_vs_budget, recall_vs_iou, HeightBin,
    ImageProposals, ScoredDetection,
};
use mscnn_core::BBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let (x, y) = (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0));
    BBox::from_corners(x, y, x + rng.gen_range(4.0..80.0), y + rng.gen_range(4.0..80.0))
}

/// Intersection over union from corner coordinates, written out independently.
fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0);
    let (bx1, by1, bx2, by2) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

#[test]
fn oracle_recall_matches_the_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let gts: Vec<BBox> = (0..50).map(|_| random_box(&mut rng)).collect();
        let props: Vec<BBox> = (0..500).map(|_| random_box(&mut rng)).collect();
        for (budget, t) in [(500, 0.5), (100, 0.3), (10, 0.1), (0, 0.5)] {
            let mut hit = 0;
            for g in &gts {
                let mut best: f64 = 0.0;
                for p in props.iter().take(budget) {
                    best = best.max(iou_ref(g, p));
                }
                if best >= t {
                    hit += 1;
                }
            }
            let r = oracle_recall(&gts, &props, budget, t);
            assert_eq!(r.recalled, hit);
            assert!((r.value - hit as f64 / 50.0).abs() < 1e-15);
        }
    }
}

fn arb_image() -> impl Strategy<Value = ImageProposals> {
    (any::<u64>(), 0usize..6, 1usize..4).prop_map(|(seed, n_gt, m)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<BBox> = (0..n_gt).map(|_| random_box(&mut rng)).collect();
        let per_branch: Vec<Vec<BBox>> = (0..m)
            .map(|_| {
                let n = rng.gen_range(0..30);
                (0..n)
                    .map(|_| {
                        // Half the proposals jitter a ground-truth box.
                        match gts.get(rng.gen_range(0..2 * n_gt.max(1))) {
                            Some(g) => BBox::new(g.cx + rng.gen_range(-6.0..6.0), g.cy + rng.gen_range(-6.0..6.0), g.w, g.h),
                            None => random_box(&mut rng),
                        }
                    })
                    .collect()
            })
            .collect();
        let combined = per_branch.iter().flatten().copied().collect();
        ImageProposals { gts, per_branch, combined }
    })
}

fn bins() -> Vec<HeightBin> {
    vec![HeightBin { lo: 0.0, hi: 30.0 }, HeightBin { lo: 30.0, hi: 60.0 }, HeightBin { lo: 60.0, hi: f64::INFINITY }]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_budget_and_threshold(img in arb_image()) {
        let imgs = [img];
        let by_budget = recall_vs_budget(&imgs, &[0, 1, 2, 5, 10, 50], 0.5);
        prop_assert!(by_budget.windows(2).all(|w| w[0].1.value <= w[1].1.value || w[0].1.vacuous));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let by_iou = recall_vs_iou(&imgs, 20, &grid);
        prop_assert!(by_iou.windows(2).all(|w| w[0].1.value >= w[1].1.value));
        prop_assert!(by_iou.iter().all(|(_, r)| (0.0..=1.0).contains(&r.value)));
    }

    #[test]
    fn combined_column_dominates_and_ignores_branch_order(img in arb_image(), budget in 1usize..20) {
        let names: Vec<String> = (0..img.per_branch.len()).map(|i| format!("b{i}")).collect();
        let t = recall_table(std::slice::from_ref(&img), &names, &bins(), budget, 0.5).unwrap();
        for row in &t.rows {
            for r in &row.per_branch {
                prop_assert!(row.combined.value >= r.value);
            }
        }
        let mut rev = img.clone();
        rev.per_branch.reverse();
        let t2 = recall_table(&[rev], &names, &bins(), budget, 0.5).unwrap();
        for (a, b) in t.rows.iter().zip(&t2.rows) {
            prop_assert_eq!(a.combined, b.combined);
        }
        // The union column is the recall of the pooled per-branch top sets.
        let pooled: Vec<BBox> = img.per_branch.iter().flat_map(|p| p.iter().take(budget).copied()).collect();
        let want = oracle_recall(&img.gts, &pooled, pooled.len(), 0.5);
        prop_assert_eq!(t.all_scales().combined.recalled, want.recalled);
    }

    #[test]
    fn ap_depends_only_on_score_ranks(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<Vec<BBox>> = (0..3).map(|_| (0..rng.gen_range(0..4)).map(|_| random_box(&mut rng)).collect()).collect();
        let dets: Vec<ScoredDetection> = (0..20)
            .map(|_| {
                let image = rng.gen_range(0..3);
                let bbox = match gts[image].first() {
                    Some(g) if rng.gen_bool(0.5) => BBox::new(g.cx + rng.gen_range(-3.0..3.0), g.cy, g.w, g.h),
                    _ => random_box(&mut rng),
                };
                ScoredDetection { image, bbox, score: rng.gen_range(0.0..1.0) }
            })
            .collect();
        let moved: Vec<ScoredDetection> = dets.iter().map(|d| ScoredDetection { score: scale * d.score.powi(3) + shift, ..*d }).collect();
        prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&moved, &gts, 0.5));
    }
}

/// Precision/recall by explicit enumeration of score thresholds, then the
/// 11-point interpolation.
fn ap_reference(dets: &[ScoredDetection], gts: &[Vec<BBox>], t: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut points = Vec::new();
    for k in 1..=order.len() {
        // Replay the greedy matching on the first k detections.
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &i in &order[..k] {
            let d = &dets[i];
            let g = &gts[d.image];
            let best = (0..g.len()).max_by(|&a, &b| iou_ref(&d.bbox, &g[a]).partial_cmp(&iou_ref(&d.bbox, &g[b])).unwrap().then(b.cmp(&a)));
            if let Some(j) = best {
                if iou_ref(&d.bbox, &g[j]) >= t && !used[d.image][j] {
                    used[d.image][j] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / k as f64, if total == 0 { 0.0 } else { tp as f64 / total as f64 }));
    }
    (0..=10)
        .map(|i| points.iter().filter(|p| p.1 >= i as f64 / 10.0 - 1e-12).map(|p| p.0).fold(0.0, f64::max))
        .sum::<f64>()
        / 11.0
}

#[test]
fn ap_matches_the_reference_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let gts: Vec<Vec<BBox>> = (0..3).map(|_| (0..rng.gen_range(0..4)).map(|_| random_box(&mut rng)).collect()).collect();
        let n = rng.gen_range(0..12);
        let dets: Vec<ScoredDetection> = (0..n)
            .map(|_| {
                let image = rng.gen_range(0..3);
                let bbox = match gts[image].first() {
                    Some(g) if rng.gen_bool(0.6) => BBox::new(g.cx + rng.gen_range(-4.0..4.0), g.cy, g.w, g.h),
                    _ => random_box(&mut rng),
                };
                ScoredDetection { image, bbox, score: rng.gen_range(0..5) as f64 }
            })
            .collect();
        let (a, b) = (average_precision(&dets, &gts, 0.5), ap_reference(&dets, &gts, 0.5));
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn empty_ground_truth_is_vacuous_recall_one() {
    let img = ImageProposals { gts: vec![], per_branch: vec![vec![]], combined: vec![] };
    let r = dataset_recall(&[img], 10, 0.5);
    assert!(r.vacuous);
    assert_eq!(r.value, 1.0);
}
