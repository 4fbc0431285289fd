//! Grid decoding and per-class non-maximum suppression.

use crate::autodiff::{sigmoid_value, Graph};
use crate::error::{Error, Result};
use crate::eval::{iou, BBox, Detection};

use super::{HeadOutput, ModelConfig, Scale};

/// Box width/height use `anchor · exp(t)` with `t` clamped from above to
/// guard against early-training overflow.
const EXP_CLAMP: f64 = 4.0;

/// Turns raw head grids into per-image detection lists.
///
/// Per cell: center = (cell + sigmoid(txy)) · stride, size = anchor ·
/// exp(clamped twh), score = sigmoid(objectness) · best class sigmoid.
/// Candidates below `conf_thresh` are dropped, the rest go through greedy
/// per-class NMS at `nms_iou`.
pub fn decode_predictions(
    g: &Graph,
    head: &HeadOutput,
    cfg: &ModelConfig,
    conf_thresh: f64,
    nms_iou: f64,
    anchors: &[f64; 3],
) -> Result<Vec<Vec<Detection>>> {
    if !(0.0..1.0).contains(&conf_thresh) || conf_thresh == 0.0 {
        return Err(Error::InvalidArg(format!(
            "conf_thresh {conf_thresh} must be in (0, 1)"
        )));
    }
    if !(0.0..1.0).contains(&nms_iou) || nms_iou == 0.0 {
        return Err(Error::InvalidArg(format!(
            "nms_iou {nms_iou} must be in (0, 1)"
        )));
    }

    let batch = g.shape(head.maps[0])[0];
    let classes = cfg.num_classes;
    let mut out = Vec::with_capacity(batch);

    for image in 0..batch {
        let mut candidates: Vec<Detection> = Vec::new();
        for scale in Scale::ALL {
            let map = head.maps[scale.index()];
            let shape = g.shape(map);
            let (ch, grid) = (shape[1], shape[2]);
            debug_assert_eq!(ch, cfg.head_channels());
            let values = g.value(map);
            let plane = grid * grid;
            let base = image * ch * plane;
            let at = |c: usize, i: usize, j: usize| values[base + c * plane + i * grid + j];
            let stride = scale.stride() as f64;
            let anchor = anchors[scale.index()];

            for i in 0..grid {
                for j in 0..grid {
                    let obj = sigmoid_value(at(4, i, j));
                    let (mut best_class, mut best_p) = (0, f64::NEG_INFINITY);
                    for c in 0..classes {
                        let p = sigmoid_value(at(5 + c, i, j));
                        if p > best_p {
                            best_p = p;
                            best_class = c;
                        }
                    }
                    let score = obj * best_p;
                    if score < conf_thresh {
                        continue;
                    }
                    let cx = (j as f64 + sigmoid_value(at(0, i, j))) * stride;
                    let cy = (i as f64 + sigmoid_value(at(1, i, j))) * stride;
                    let w = anchor * at(2, i, j).min(EXP_CLAMP).exp();
                    let h = anchor * at(3, i, j).min(EXP_CLAMP).exp();
                    candidates.push(Detection {
                        image_id: image,
                        class_id: best_class,
                        score,
                        bbox: BBox {
                            x_min: cx - w / 2.0,
                            y_min: cy - h / 2.0,
                            x_max: cx + w / 2.0,
                            y_max: cy + h / 2.0,
                        },
                    });
                }
            }
        }
        out.push(nms_per_class(candidates, classes, nms_iou));
    }
    Ok(out)
}

/// Greedy NMS within each class: keep the best-scoring box, drop any later
/// box overlapping a kept one at `IoU >= nms_iou`.
fn nms_per_class(mut candidates: Vec<Detection>, classes: usize, nms_iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for class in 0..classes {
        let mut class_kept: Vec<usize> = Vec::new();
        for (idx, det) in candidates.iter().enumerate() {
            if det.class_id != class {
                continue;
            }
            if class_kept
                .iter()
                .all(|&k| iou(&candidates[k].bbox, &det.bbox) < nms_iou)
            {
                class_kept.push(idx);
            }
        }
        kept.extend(class_kept.into_iter().map(|k| candidates[k].clone()));
    }
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
    });
    kept
}
