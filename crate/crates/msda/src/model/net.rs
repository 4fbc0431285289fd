//! Forward passes: backbone, neck + head, and the domain classifiers.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams, Scale, LEAKY_SLOPE};

/// Model parameters inserted into one graph as differentiable leaves.
pub struct BoundModel<'a> {
    params: &'a ModelParams,
    ids: Vec<NodeId>,
}

impl<'a> BoundModel<'a> {
    /// Binds every parameter as a differentiable leaf.
    pub fn bind(g: &mut Graph, params: &'a ModelParams) -> Result<Self> {
        Self::bind_inner(g, params, true)
    }

    /// Binds parameters as constants; forward-only passes skip all gradient
    /// bookkeeping.
    pub fn bind_frozen(g: &mut Graph, params: &'a ModelParams) -> Result<Self> {
        Self::bind_inner(g, params, false)
    }

    fn bind_inner(g: &mut Graph, params: &'a ModelParams, trainable: bool) -> Result<Self> {
        let ids = params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.shape, p.values.clone())
                } else {
                    g.constant(&p.shape, p.values.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel { params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Node id of a named parameter. Names are fixed at build time, so a
    /// miss is a programming error.
    pub fn node(&self, name: &str) -> NodeId {
        let idx = self
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.ids[idx]
    }

    /// Parameters paired with their graph ids, in construction order.
    pub fn entries(&self) -> impl Iterator<Item = (&super::Param, NodeId)> {
        self.params.iter().zip(self.ids.iter().copied())
    }

    fn conv(&self, g: &mut Graph, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.node(&format!("{name}/weight"));
        let b = self.node(&format!("{name}/bias"));
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_act(&self, g: &mut Graph, name: &str, x: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let y = self.conv(g, name, x, stride, pad)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Per-scale raw head grids, N × (5 + num_classes) × Hs × Ws, index 0 being
/// the stride-8 scale. Channel order: tx, ty, tw, th, objectness, classes.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub maps: [NodeId; 3],
}

/// Per-location domain probability maps for the adapted scales.
#[derive(Debug, Clone)]
pub struct DomainMaps {
    maps: Vec<(Scale, NodeId)>,
}

impl DomainMaps {
    pub fn get(&self, scale: Scale) -> Option<NodeId> {
        self.maps
            .iter()
            .find(|(s, _)| *s == scale)
            .map(|(_, id)| *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Scale, NodeId)> + '_ {
        self.maps.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Runs the backbone on an N×3×S×S batch and returns the three feature taps
/// (F1 at stride 8, F2 at 16, F3 at 32).
pub fn forward_backbone(
    g: &mut Graph,
    model: &BoundModel,
    images: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let cfg = model.config();
    let shape = g.shape(images).to_vec();
    let s = cfg.input_size;
    if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
        return Err(Error::Shape {
            op: "forward_backbone",
            detail: format!("expected N×3×{s}×{s} images, got {shape:?}"),
        });
    }

    let mut x = model.conv_act(g, "backbone/stem", images, 1, 1)?;
    let mut taps = Vec::with_capacity(3);
    for stage in 1..=5 {
        let down_w = model.node(&format!("backbone/stage{stage}/down/weight"));
        let down_b = model.node(&format!("backbone/stage{stage}/down/bias"));
        let down = g.downsample_conv(x, down_w, Some(down_b))?;
        x = g.leaky_relu(down, LEAKY_SLOPE)?;

        // One residual block: x + conv2(act(conv1(x))). With conv2 zeroed the
        // block is an exact identity.
        let t = model.conv_act(g, &format!("backbone/stage{stage}/res/conv1"), x, 1, 1)?;
        let t = model.conv(g, &format!("backbone/stage{stage}/res/conv2"), t, 1, 1)?;
        x = g.add(x, t)?;

        if stage >= 3 {
            taps.push(x);
        }
    }
    Ok((taps[0], taps[1], taps[2]))
}

/// Top-down fusion and the three per-scale prediction grids.
pub fn forward_neck_head(
    g: &mut Graph,
    model: &BoundModel,
    f1: NodeId,
    f2: NodeId,
    f3: NodeId,
) -> Result<HeadOutput> {
    let p3 = model.conv_act(g, "neck/p3", f3, 1, 1)?;
    let up3 = g.upsample_nearest(p3, 2)?;
    let cat2 = g.concat_channels(up3, f2)?;
    let p2 = model.conv_act(g, "neck/p2", cat2, 1, 1)?;
    let up2 = g.upsample_nearest(p2, 2)?;
    let cat1 = g.concat_channels(up2, f1)?;
    let p1 = model.conv_act(g, "neck/p1", cat1, 1, 1)?;

    let mut maps = [p1, p2, p3];
    for (k, p) in [p1, p2, p3].into_iter().enumerate() {
        let h = model.conv_act(g, &format!("head/s{}/conv", k + 1), p, 1, 1)?;
        maps[k] = model.conv(g, &format!("head/s{}/out", k + 1), h, 1, 0)?;
    }
    Ok(HeadOutput { maps })
}

/// Domain classifier on each requested feature tap: gradient reversal, a
/// 1×1 conv halving the channels, and a 1×1 conv to a single sigmoid
/// probability per location.
pub fn forward_dan(
    g: &mut Graph,
    model: &BoundModel,
    features: &[(Scale, NodeId)],
    lambda: f64,
) -> Result<DomainMaps> {
    let cfg = model.config();
    let mut maps = Vec::with_capacity(features.len());
    for &(scale, feature) in features {
        if !cfg.scales_adapted.contains(&scale) {
            return Err(Error::InvalidArg(format!(
                "scale {scale} is not in scales_adapted"
            )));
        }
        let tag = format!("dan/f{}", scale.index() + 1);
        let rev = g.grl(feature, lambda)?;
        let mid = model.conv_act(g, &format!("{tag}/reduce"), rev, 1, 0)?;
        let logits = model.conv(g, &format!("{tag}/classify"), mid, 1, 0)?;
        let prob = g.sigmoid(logits)?;
        maps.push((scale, prob));
    }
    Ok(DomainMaps { maps })
}
