use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> BBox {
    BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

fn det(image_id: usize, score: f64, b: BBox) -> Detection {
    Detection {
        image_id,
        class_id: 0,
        score,
        bbox: b,
    }
}

fn gt(image_id: usize, b: BBox) -> GroundTruth {
    GroundTruth { image_id, bbox: b }
}

#[test]
fn iou_hand_values() {
    let a = bbox(0.0, 0.0, 2.0, 2.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &bbox(5.0, 5.0, 7.0, 7.0)), 0.0);
    let b = bbox(1.0, 1.0, 3.0, 3.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn matching_perfect_duplicate_and_threshold() {
    let g = [gt(0, bbox(0.0, 0.0, 10.0, 10.0))];

    let scored = match_and_score(&[det(0, 0.7, bbox(0.0, 0.0, 10.0, 10.0))], &g, 0.5);
    assert_eq!(scored, vec![(0.7, true)]);

    // Two detections on one ground truth: best score wins, second is FP.
    let scored = match_and_score(
        &[
            det(0, 0.8, bbox(0.0, 0.0, 10.0, 10.0)),
            det(0, 0.9, bbox(0.1, 0.1, 10.0, 10.0)),
        ],
        &g,
        0.5,
    );
    assert_eq!(scored[0], (0.9, true));
    assert_eq!(scored[1], (0.8, false));

    // IoU 0.49 against its best ground truth stays a false positive.
    let offset = bbox(0.0, 3.42, 10.0, 13.42); // IoU = 6.58/13.42 ≈ 0.4903
    let scored = match_and_score(&[det(0, 0.9, offset)], &g, 0.5);
    assert!((iou(&offset, &g[0].bbox) - 0.49).abs() < 0.01);
    assert_eq!(scored, vec![(0.9, false)]);
}

#[test]
fn matching_respects_image_boundaries() {
    let g = [gt(0, bbox(0.0, 0.0, 10.0, 10.0))];
    let scored = match_and_score(&[det(1, 0.9, bbox(0.0, 0.0, 10.0, 10.0))], &g, 0.5);
    assert_eq!(scored, vec![(0.9, false)]);
}

#[test]
fn average_precision_hand_values() {
    assert_eq!(average_precision(&[(0.9, true)], 1).unwrap(), 1.0);

    // (TP, FP, TP) with two ground truths: envelope gives 0.5·1 + 0.5·(2/3).
    let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    assert!((ap - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);
    assert!((ap - 0.8333).abs() < 1e-4);

    let ap = average_precision(&[(0.9, false), (0.8, false)], 3).unwrap();
    assert_eq!(ap, 0.0);

    assert!(average_precision(&[(0.9, true)], 0).is_err());
}

#[test]
fn report_excludes_scarce_classes_and_averages() {
    let gts = vec![
        (0, 0, bbox(0.0, 0.0, 10.0, 10.0)),
        (0, 1, bbox(20.0, 20.0, 30.0, 30.0)),
    ];
    let dets = vec![
        Detection {
            image_id: 0,
            class_id: 0,
            score: 1.0,
            bbox: bbox(0.0, 0.0, 10.0, 10.0),
        },
    ];
    // Class 2 has no ground truth: absent, not zero.
    let report = score_detections(&dets, &gts, 3, 0.5, 1).unwrap();
    assert!(report.per_class[0].is_some());
    assert!(report.per_class[1].is_some());
    assert!(report.per_class[2].is_none());
    assert_eq!(report.per_class[0].as_ref().unwrap().ap, 1.0);
    assert_eq!(report.per_class[1].as_ref().unwrap().ap, 0.0);
    assert_eq!(report.map, 0.5);

    // Raising the minimum excludes both singleton classes.
    let report = score_detections(&dets, &gts, 3, 0.5, 2).unwrap();
    assert!(report.per_class.iter().all(Option::is_none));
    assert_eq!(report.map, 0.0);
}

/// Independent references used by the oracle-equivalence tests below. They
/// re-implement the same greedy semantics and the envelope construction in a
/// deliberately different style.
mod reference {
    use super::*;

    pub fn greedy_match(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> Vec<(f64, bool)> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&i, &j| {
            dets[j]
                .score
                .partial_cmp(&dets[i].score)
                .unwrap()
                .then_with(|| dets[i].image_id.cmp(&dets[j].image_id))
                .then_with(|| dets[i].bbox.lex_cmp(&dets[j].bbox))
        });
        let mut taken = vec![false; gts.len()];
        let mut out = Vec::new();
        for &i in &idx {
            let candidates: Vec<(usize, f64)> = gts
                .iter()
                .enumerate()
                .filter(|(gi, gt)| !taken[*gi] && gt.image_id == dets[i].image_id)
                .map(|(gi, gt)| (gi, iou(&dets[i].bbox, &gt.bbox)))
                .filter(|(_, o)| *o >= thresh)
                .collect();
            let best = candidates
                .into_iter()
                .fold(None::<(usize, f64)>, |acc, (gi, o)| match acc {
                    Some((_, bo)) if bo >= o => acc,
                    _ => Some((gi, o)),
                });
            if let Some((gi, _)) = best {
                taken[gi] = true;
                out.push((dets[i].score, true));
            } else {
                out.push((dets[i].score, false));
            }
        }
        out
    }

    /// Direct envelope enumeration: AP = Σ over distinct recall levels of
    /// (r_k - r_{k-1}) · max precision among points at recall ≥ r_k.
    pub fn envelope_ap(scored: &[(f64, bool)], num_gt: usize) -> f64 {
        let mut points = Vec::new();
        let mut tp = 0usize;
        for (k, (_, is_tp)) in scored.iter().enumerate() {
            if *is_tp {
                tp += 1;
            }
            points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
        }
        let mut recalls: Vec<f64> = points.iter().map(|(r, _)| *r).filter(|r| *r > 0.0).collect();
        recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        recalls.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in recalls {
            let env = points
                .iter()
                .filter(|(pr, _)| *pr >= r)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            ap += (r - prev) * env;
            prev = r;
        }
        ap
    }
}

#[test]
fn oracle_equivalence_on_random_tiny_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe7a1);
    for _ in 0..20 {
        let n_det = rng.gen_range(0..=4);
        let n_gt = rng.gen_range(1..=3);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.gen_range(0.0..40.0);
            let y = rng.gen_range(0.0..40.0);
            bbox(x, y, x + rng.gen_range(4.0..20.0), y + rng.gen_range(4.0..20.0))
        };
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| det(rng.gen_range(0..2), rng.gen_range(0.05..1.0), rand_box(&mut rng)))
            .collect();
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| gt(rng.gen_range(0..2), rand_box(&mut rng)))
            .collect();

        let scored = match_and_score(&dets, &gts, 0.5);
        let scored_ref = reference::greedy_match(&dets, &gts, 0.5);
        assert_eq!(scored.len(), scored_ref.len());
        for (a, b) in scored.iter().zip(&scored_ref) {
            assert_eq!(a.1, b.1);
            assert!((a.0 - b.0).abs() < 1e-15);
        }

        let ap = average_precision(&scored, gts.len()).unwrap();
        let ap_ref = reference::envelope_ap(&scored_ref, gts.len());
        assert!(
            (ap - ap_ref).abs() < 1e-12,
            "ap {ap} vs reference {ap_ref}"
        );
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn arb_instance() -> impl Strategy<Value = (Vec<Detection>, Vec<(usize, usize, BBox)>)> {
        let b = (0.0..50.0f64, 0.0..50.0f64, 2.0..20.0f64, 2.0..20.0f64)
            .prop_map(|(x, y, w, h)| bbox(x, y, x + w, y + h));
        let d = (0usize..2, 0usize..2, 0.01..1.0f64, b.clone()).prop_map(
            |(image_id, class_id, score, bbox)| Detection {
                image_id,
                class_id,
                score,
                bbox,
            },
        );
        let g = (0usize..2, 0usize..2, b).prop_map(|(i, c, b)| (i, c, b));
        (
            proptest::collection::vec(d, 0..8),
            proptest::collection::vec(g, 1..6),
        )
    }

    proptest! {
        #[test]
        fn report_is_permutation_invariant(
            (dets, gts) in arb_instance(),
            seed in 0u64..100,
        ) {
            let base = score_detections(&dets, &gts, 2, 0.5, 1).unwrap();
            let mut shuffled = dets.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let other = score_detections(&shuffled, &gts, 2, 0.5, 1).unwrap();
            prop_assert_eq!(base.map, other.map);
            for (a, b) in base.per_class.iter().zip(&other.per_class) {
                match (a, b) {
                    (Some(x), Some(y)) => prop_assert_eq!(x.ap, y.ap),
                    (None, None) => {}
                    _ => prop_assert!(false, "exclusion mismatch"),
                }
            }
        }

        #[test]
        fn ap_bounds_and_map_mean(
            (dets, gts) in arb_instance(),
        ) {
            let report = score_detections(&dets, &gts, 2, 0.5, 1).unwrap();
            let included: Vec<f64> = report.per_class.iter().flatten().map(|e| e.ap).collect();
            for ap in &included {
                prop_assert!((0.0..=1.0).contains(ap));
            }
            if !included.is_empty() {
                let mean = included.iter().sum::<f64>() / included.len() as f64;
                prop_assert!((report.map - mean).abs() < 1e-15);
            }
        }

        #[test]
        fn adding_a_confident_correct_detection_never_hurts(
            (dets, gts) in arb_instance(),
        ) {
            // Add a perfect detection on the first class-0 ground truth with
            // a score above everything else.
            let class0: Vec<(usize, usize, BBox)> =
                gts.iter().filter(|(_, c, _)| *c == 0).cloned().collect();
            prop_assume!(!class0.is_empty());
            let before = {
                let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == 0).cloned().collect();
                let g: Vec<GroundTruth> = class0
                    .iter()
                    .map(|(i, _, b)| GroundTruth { image_id: *i, bbox: *b })
                    .collect();
                average_precision(&match_and_score(&d, &g, 0.5), g.len()).unwrap()
            };
            let after = {
                let mut d: Vec<Detection> = dets.iter().filter(|d| d.class_id == 0).cloned().collect();
                d.push(Detection {
                    image_id: class0[0].0,
                    class_id: 0,
                    score: 2.0,
                    bbox: class0[0].2,
                });
                let g: Vec<GroundTruth> = class0
                    .iter()
                    .map(|(i, _, b)| GroundTruth { image_id: *i, bbox: *b })
                    .collect();
                average_precision(&match_and_score(&d, &g, 0.5), g.len()).unwrap()
            };
            prop_assert!(after >= before - 1e-12, "AP dropped: {} -> {}", before, after);
        }
    }
}
