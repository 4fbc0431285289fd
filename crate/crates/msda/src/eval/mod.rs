//! Detection metrics: IoU, greedy matching at IoU 0.5, all-point
//! interpolated average precision, and report aggregation.

mod ablate;
mod run;

pub use ablate::{ablate, AblationRow, ABLATION_SUBSETS};
pub use run::{domain_confusion, evaluate, EvalOptions};

/// IoU threshold the whole evaluation protocol runs at.
pub const IOU_THRESH: f64 = 0.5;

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `min` corner inclusive of the
/// top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    /// Total order on coordinates, used for deterministic tie-breaking.
    pub fn lex_cmp(&self, other: &BBox) -> Ordering {
        let a = [self.x_min, self.y_min, self.x_max, self.y_max];
        let b = [other.x_min, other.y_min, other.x_max, other.y_max];
        for (x, y) in a.iter().zip(&b) {
            match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

/// One predicted box.
#[derive(Debug, Clone)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// One annotated box, already grouped per class by the caller.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: usize,
    pub bbox: BBox,
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    debug_assert!(a.is_valid() && b.is_valid());
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Matches one class's detections against its ground truths.
///
/// Detections are sorted by descending score (ties: image id, then box
/// coordinates) and each greedily claims the highest-IoU unmatched ground
/// truth in its image at IoU >= `iou_thresh`. Returns the ordered
/// `(score, is_true_positive)` list.
pub fn match_and_score(
    detections: &[Detection],
    ground_truths: &[GroundTruth],
    iou_thresh: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });

    let mut matched = vec![false; ground_truths.len()];
    let mut scored = Vec::with_capacity(order.len());
    for det in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truths.iter().enumerate() {
            if matched[gi] || gt.image_id != det.image_id {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                scored.push((det.score, true));
            }
            None => scored.push((det.score, false)),
        }
    }
    scored
}

/// All-point interpolated average precision: the area under the precision
/// envelope as a function of recall.
///
/// `scored` must already be ordered by descending score, as produced by
/// [`match_and_score`].
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Result<f64> {
    if num_gt == 0 {
        return Err(Error::InvalidArg(
            "average_precision requires at least one ground truth".into(),
        ));
    }
    if scored.is_empty() {
        return Ok(0.0);
    }
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (k, (_, is_tp)) in scored.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope from the right, then sum rectangle segments.
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Per-class slice of an evaluation.
#[derive(Debug, Clone)]
pub struct ClassEval {
    pub ap: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub true_positives: usize,
}

/// Aggregated detection-quality report. Classes without enough ground truth
/// are absent rather than scored zero.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Indexed by class id; `None` marks an excluded class.
    pub per_class: Vec<Option<ClassEval>>,
    /// Arithmetic mean of the included per-class APs.
    pub map: f64,
    pub total_gt: usize,
    pub total_det: usize,
    pub total_tp: usize,
}

impl EvalReport {
    /// Serializes as `class,ap` rows followed by an `mAP` row.
    pub fn to_csv(&self, class_names: &[&str]) -> String {
        let mut out = String::from("class,ap\n");
        for (c, entry) in self.per_class.iter().enumerate() {
            let name = class_names.get(c).copied().unwrap_or("?");
            match entry {
                Some(e) => out.push_str(&format!("{name},{}\n", e.ap)),
                None => out.push_str(&format!("{name},absent\n")),
            }
        }
        out.push_str(&format!("mAP,{}\n", self.map));
        out
    }
}

/// Scores a full detection set against its ground truths at IoU 0.5.
///
/// Classes with fewer than `min_class_gt` ground truths are excluded from
/// the report (absent, never zero).
pub fn score_detections(
    detections: &[Detection],
    ground_truths: &[(usize, usize, BBox)],
    num_classes: usize,
    iou_thresh: f64,
    min_class_gt: usize,
) -> Result<EvalReport> {
    let min_class_gt = min_class_gt.max(1);
    let mut per_class = Vec::with_capacity(num_classes);
    let mut total_tp = 0;
    for class in 0..num_classes {
        let dets: Vec<Detection> = detections
            .iter()
            .filter(|d| d.class_id == class)
            .cloned()
            .collect();
        let gts: Vec<GroundTruth> = ground_truths
            .iter()
            .filter(|(_, c, _)| *c == class)
            .map(|(image_id, _, bbox)| GroundTruth {
                image_id: *image_id,
                bbox: *bbox,
            })
            .collect();
        if gts.len() < min_class_gt {
            per_class.push(None);
            continue;
        }
        let scored = match_and_score(&dets, &gts, iou_thresh);
        let tp = scored.iter().filter(|(_, t)| *t).count();
        total_tp += tp;
        per_class.push(Some(ClassEval {
            ap: average_precision(&scored, gts.len())?,
            num_gt: gts.len(),
            num_det: dets.len(),
            true_positives: tp,
        }));
    }
    let included: Vec<f64> = per_class
        .iter()
        .flatten()
        .map(|e| e.ap)
        .collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(EvalReport {
        per_class,
        map,
        total_gt: ground_truths.len(),
        total_det: detections.len(),
        total_tp,
    })
}

#[cfg(test)]
mod tests;
