//! Synthetic two-domain detection data: clear source scenes and their foggy
//! target counterparts, plus the on-disk dataset and batching machinery.

mod manifest;
mod ppm;

pub use manifest::{
    make_split, Batcher, BatchItem, BatchMode, DatasetManifest, ManifestRecord, Split, SplitCounts,
};
pub use ppm::{quantize, read_ppm, write_ppm};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::BBox;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Which side of the domain shift an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    /// Clear weather, annotated.
    Source,
    /// Foggy weather, unannotated during training.
    Target,
}

impl Domain {
    /// Ground-truth domain label: source = 1, target = 0.
    pub fn tag(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Domain> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(crate::Error::InvalidArg(format!("unknown domain `{other}`"))),
        }
    }
}

/// Tight bounding box of one rendered shape, in integer pixel coordinates
/// with an exclusive max corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl GroundTruthBox {
    pub fn to_bbox(&self) -> BBox {
        BBox {
            x_min: self.x_min as f64,
            y_min: self.y_min as f64,
            x_max: self.x_max as f64,
            y_max: self.y_max as f64,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }
}

/// One synthetic image with its annotations and domain tag.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Planar 3×S×S floats in [0, 1].
    pub image: Vec<f64>,
    pub size: usize,
    pub boxes: Vec<GroundTruthBox>,
    pub domain: Domain,
    pub scene_seed: u64,
}

const MAX_BOXES: usize = 5;
const MAX_PLACEMENT_ATTEMPTS: usize = 60;
/// Generation-time cap on pairwise box overlap, keeping target assignment
/// unambiguous.
const MAX_PAIRWISE_IOU: f64 = 0.3;

/// Deterministically renders one scene.
///
/// Layout (background, shapes, colors) depends only on `scene_seed`, so the
/// same seed yields an identical layout in both domains; the target variant
/// additionally runs [`fog_transform`] with a seeded intensity in
/// [0.4, 0.8].
pub fn gen_scene(scene_seed: u64, domain: Domain, size: usize, num_classes: usize) -> Scene {
    assert!(size >= 16, "scene size too small");
    assert!((1..=CLASS_NAMES.len()).contains(&num_classes));
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];

    // Vertical luminance gradient with a gentle per-channel tint.
    let lo = 0.30 + 0.10 * rng.gen::<f64>();
    let hi = 0.55 + 0.10 * rng.gen::<f64>();
    let tint: [f64; 3] = [
        0.06 * rng.gen::<f64>() - 0.03,
        0.06 * rng.gen::<f64>() - 0.03,
        0.06 * rng.gen::<f64>() - 0.03,
    ];
    for y in 0..size {
        let lum = lo + (hi - lo) * y as f64 / (size - 1) as f64;
        for x in 0..size {
            for ch in 0..3 {
                image[ch * plane + y * size + x] = (lum + tint[ch]).clamp(0.0, 1.0);
            }
        }
    }

    // Low-frequency noise: a coarse grid upsampled bilinearly, shared across
    // channels.
    let cells = 8;
    let amp = 0.02 + 0.04 * rng.gen::<f64>();
    let coarse: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| amp * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    for y in 0..size {
        let fy = y as f64 / (size - 1) as f64 * cells as f64;
        let (cy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / (size - 1) as f64 * cells as f64;
            let (cx, tx) = (fx.floor() as usize, fx.fract());
            let c = |gy: usize, gx: usize| coarse[gy.min(cells) * (cells + 1) + gx.min(cells)];
            let noise = c(cy, cx) * (1.0 - ty) * (1.0 - tx)
                + c(cy, cx + 1) * (1.0 - ty) * tx
                + c(cy + 1, cx) * ty * (1.0 - tx)
                + c(cy + 1, cx + 1) * ty * tx;
            for ch in 0..3 {
                let v = &mut image[ch * plane + y * size + x];
                *v = (*v + noise).clamp(0.0, 1.0);
            }
        }
    }

    // Shapes: rejection-sampled so pairwise box IoU stays below the cap.
    let min_edge = size / 8;
    let max_edge = size * 7 / 8;
    let count = 1 + rng.gen_range(0..MAX_BOXES);
    let mut boxes: Vec<GroundTruthBox> = Vec::new();
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let class_id = rng.gen_range(0..num_classes);
            let w = rng.gen_range(min_edge..=max_edge);
            let h = match class_id {
                // Circles and squares stay square; triangles vary freely.
                0 | 1 => w,
                _ => rng.gen_range(min_edge..=max_edge),
            };
            if w > size || h > size {
                continue;
            }
            let x_min = rng.gen_range(0..=size - w);
            let y_min = rng.gen_range(0..=size - h);
            let candidate = GroundTruthBox {
                class_id,
                x_min,
                y_min,
                x_max: x_min + w,
                y_max: y_min + h,
            };
            let clear = boxes
                .iter()
                .all(|b| crate::eval::iou(&b.to_bbox(), &candidate.to_bbox()) < MAX_PAIRWISE_IOU);
            if clear {
                placed = Some(candidate);
                break;
            }
        }
        let Some(b) = placed else { break };
        // Fill is strongly dark or bright against the mid-gray background;
        // the outline takes the opposite pole.
        let dark_fill = rng.gen::<bool>();
        let fill_lum = if dark_fill {
            0.02 + 0.13 * rng.gen::<f64>()
        } else {
            0.85 + 0.13 * rng.gen::<f64>()
        };
        let fill: [f64; 3] = [
            (fill_lum + 0.08 * rng.gen::<f64>() - 0.04).clamp(0.0, 1.0),
            (fill_lum + 0.08 * rng.gen::<f64>() - 0.04).clamp(0.0, 1.0),
            (fill_lum + 0.08 * rng.gen::<f64>() - 0.04).clamp(0.0, 1.0),
        ];
        let outline_lum = if dark_fill { 0.95 } else { 0.05 };
        let outline = [outline_lum; 3];
        draw_shape(&mut image, size, &b, &fill, &outline);
        boxes.push(b);
    }

    let mut scene = Scene {
        image,
        size,
        boxes,
        domain,
        scene_seed,
    };
    if domain == Domain::Target {
        let mut fog_rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0xf06_f06);
        let intensity = 0.4 + 0.4 * fog_rng.gen::<f64>();
        let airlight = 0.75 + 0.15 * fog_rng.gen::<f64>();
        scene.image = fog_transform(&scene.image, size, intensity, airlight);
    }
    scene
}

fn draw_shape(image: &mut [f64], size: usize, b: &GroundTruthBox, fill: &[f64; 3], outline: &[f64; 3]) {
    let (w, h) = (b.width(), b.height());
    let inside = |x: usize, y: usize| -> bool {
        // Local coordinates at pixel centers.
        let lx = x as f64 - b.x_min as f64 + 0.5;
        let ly = y as f64 - b.y_min as f64 + 0.5;
        match b.class_id {
            0 => {
                let r = w as f64 / 2.0;
                let dx = lx - r;
                let dy = ly - h as f64 / 2.0;
                dx * dx + dy * dy <= r * r
            }
            1 => true,
            _ => {
                // Upward isosceles triangle: apex top-center, base at the
                // bottom edge of the box.
                let fy = ly / h as f64;
                let half = fy * w as f64 / 2.0;
                let cx = w as f64 / 2.0;
                lx >= cx - half && lx <= cx + half
            }
        }
    };
    let plane = size * size;
    let mask_at = |x: usize, y: usize| -> bool {
        x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max && inside(x, y)
    };
    for y in b.y_min..b.y_max {
        for x in b.x_min..b.x_max {
            if !mask_at(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == size
                || y + 1 == size
                || !mask_at(x - 1, y)
                || !mask_at(x + 1, y)
                || !mask_at(x, y - 1)
                || !mask_at(x, y + 1);
            let color = if edge { outline } else { fill };
            for ch in 0..3 {
                image[ch * plane + y * size + x] = color[ch];
            }
        }
    }
}

/// Fog synthesis: a convex blend toward the airlight that thickens with
/// image depth (proxied by the row), then `ceil(3t)` passes of 3×3 box blur.
///
/// Per pixel: `out = in·(1−t_eff) + A·t_eff` with
/// `t_eff = t·(0.5 + 0.5·y/(S−1))`, so the bottom row at `t = 1` lands
/// exactly on the airlight.
pub fn fog_transform(image: &[f64], size: usize, intensity: f64, airlight: f64) -> Vec<f64> {
    assert!((0.0..=1.0).contains(&intensity), "intensity out of range");
    assert!((0.0..=1.0).contains(&airlight), "airlight out of range");
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for y in 0..size {
        let depth = if size > 1 {
            y as f64 / (size - 1) as f64
        } else {
            1.0
        };
        let t_eff = intensity * (0.5 + 0.5 * depth);
        for x in 0..size {
            for ch in 0..3 {
                let idx = ch * plane + y * size + x;
                out[idx] = image[idx] * (1.0 - t_eff) + airlight * t_eff;
            }
        }
    }
    let passes = (3.0 * intensity).ceil() as usize;
    for _ in 0..passes {
        out = box_blur(&out, size);
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// 3×3 box blur averaging over the valid neighborhood (no darkening at the
/// borders).
fn box_blur(image: &[f64], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    for ch in 0..3 {
        let src = &image[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && ny < size as i64 && nx >= 0 && nx < size as i64 {
                            acc += src[ny as usize * size + nx as usize];
                            count += 1.0;
                        }
                    }
                }
                dst[y * size + x] = acc / count;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
