use mscnn_core::geometry::{clip, decode, encode, iou, nms, ScoredBox};
use mscnn_core::BBox;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..200.0, 0.0f64..200.0, 1.0f64..120.0, 1.0f64..120.0).prop_map(|(x, y, w, h)| BBox::from_corners(x, y, x + w, y + h))
}

fn scored() -> impl Strategy<Value = Vec<ScoredBox>> {
    prop::collection::vec((arb_box(), 0u8..8), 0..40)
        .prop_map(|v| v.into_iter().map(|(bbox, s)| ScoredBox { bbox, score: s as f64 / 8.0 }).collect())
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in arb_box(), b in arb_box(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let shift = |x: &BBox| BBox::new(x.cx + dx, x.cy + dy, x.w, x.h);
        prop_assert!((iou(&a, &b) - iou(&shift(&a), &shift(&b))).abs() < 1e-9);
    }

    #[test]
    fn decode_inverts_encode(a in arb_box(), g in arb_box()) {
        let back = decode(&a, &encode(&a, &g).unwrap()).unwrap();
        for (p, q) in [(back.cx, g.cx), (back.cy, g.cy), (back.w, g.w), (back.h, g.h)] {
            prop_assert!((p - q).abs() < 1e-10 * q.abs().max(1.0));
        }
    }

    #[test]
    fn clipped_boxes_lie_inside_the_image(b in arb_box(), w in 10.0f64..300.0, h in 10.0f64..300.0) {
        if let Ok(c) = clip(&b, w, h) {
            let (x1, y1, x2, y2) = c.corners();
            prop_assert!(x1 >= -1e-9 && y1 >= -1e-9 && x2 <= w + 1e-9 && y2 <= h + 1e-9);
            prop_assert!(c.w > 0.0 && c.h > 0.0);
        }
    }

    #[test]
    fn nms_keeps_a_maximal_non_overlapping_set(boxes in scored(), t in 0.1f64..0.9) {
        let kept = nms(&boxes, t);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(iou(&boxes[a].bbox, &boxes[b].bbox) <= t);
            }
        }
        // Each suppressed box overlaps a kept box that ranks before it.
        for j in (0..boxes.len()).filter(|j| !kept.contains(j)) {
            let ranks_before = |k: usize| boxes[k].score > boxes[j].score || (boxes[k].score == boxes[j].score && k < j);
            prop_assert!(kept.iter().any(|&k| ranks_before(k) && iou(&boxes[k].bbox, &boxes[j].bbox) > t));
        }
        // Kept boxes come out in descending score.
        prop_assert!(kept.windows(2).all(|w| boxes[w[0]].score >= boxes[w[1]].score));
    }
}
