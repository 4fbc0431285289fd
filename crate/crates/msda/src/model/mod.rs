//! The miniature three-scale detector and its per-scale domain classifiers.
//!
//! A small backbone (stem plus five stride-2 stages, one residual block each)
//! taps features at strides 8/16/32; a top-down neck fuses them and a
//! per-cell head predicts boxes and classes at each scale. During adaptive
//! training a two-conv domain classifier hangs off each adapted feature tap
//! behind a gradient reversal.

mod decode;
mod net;

pub use decode::decode_predictions;
pub use net::{forward_backbone, forward_dan, forward_neck_head, BoundModel, DomainMaps, HeadOutput};

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Slope used by every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Grid strides of the three detection scales, relative to the input.
pub const SCALE_STRIDES: [usize; 3] = [8, 16, 32];

/// One anchor per scale; edge length in pixels.
pub const DEFAULT_ANCHORS: [f64; 3] = [12.0, 24.0, 48.0];

/// The three backbone feature taps fed to the neck (and, when adapted, to
/// the domain classifiers). F1 is the highest-resolution tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scale {
    F1,
    F2,
    F3,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::F1, Scale::F2, Scale::F3];

    /// 0-based index: F1 -> 0, F2 -> 1, F3 -> 2.
    pub fn index(self) -> usize {
        match self {
            Scale::F1 => 0,
            Scale::F2 => 1,
            Scale::F3 => 2,
        }
    }

    pub fn stride(self) -> usize {
        SCALE_STRIDES[self.index()]
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s.trim().to_ascii_uppercase().as_str() {
            "F1" => Ok(Scale::F1),
            "F2" => Ok(Scale::F2),
            "F3" => Ok(Scale::F3),
            other => Err(Error::InvalidArg(format!("unknown scale `{other}`"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(["F1", "F2", "F3"][self.index()])
    }
}

/// Static description of one model instance. Parameter names, shapes, and
/// counts are a pure function of this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input extent; must be divisible by 32.
    pub input_size: usize,
    /// Stem output channels; the widest layers carry 8x this.
    pub base_channels: usize,
    pub num_classes: usize,
    /// Feature taps that get a domain classifier. Empty means adaptation is
    /// disabled and no DAN parameters exist.
    pub scales_adapted: BTreeSet<Scale>,
    /// Gradient reversal strength on the backbone path.
    pub grl_lambda: f64,
    /// Anchor edge length per scale, in pixels.
    pub anchors: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            base_channels: 8,
            num_classes: 3,
            scales_adapted: BTreeSet::new(),
            grl_lambda: 0.1,
            anchors: DEFAULT_ANCHORS,
        }
    }
}

impl ModelConfig {
    /// Default config with all three scales adapted.
    pub fn adapted() -> Self {
        ModelConfig {
            scales_adapted: Scale::ALL.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn adaptation_enabled(&self) -> bool {
        !self.scales_adapted.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config {
                field: "input_size",
                detail: format!("{} is not a positive multiple of 32", self.input_size),
            });
        }
        if self.base_channels == 0 {
            return Err(Error::Config {
                field: "base_channels",
                detail: "must be positive".into(),
            });
        }
        if self.num_classes == 0 {
            return Err(Error::Config {
                field: "num_classes",
                detail: "must be positive".into(),
            });
        }
        if !self.grl_lambda.is_finite() || self.grl_lambda < 0.0 {
            return Err(Error::Config {
                field: "grl_lambda",
                detail: format!("{} must be finite and non-negative", self.grl_lambda),
            });
        }
        if self.anchors.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Config {
                field: "anchors",
                detail: format!("{:?} must all be positive", self.anchors),
            });
        }
        Ok(())
    }

    /// Channels coming out of backbone stage `i` (1-based); doubling from
    /// stage 2 on, capped at 8x the stem width.
    pub(crate) fn stage_channels(&self, stage: usize) -> usize {
        debug_assert!((1..=5).contains(&stage));
        (self.base_channels << (stage - 1)).min(8 * self.base_channels)
    }

    /// Channels of a feature tap: F1 = 4C, F2 = F3 = 8C.
    pub fn tap_channels(&self, scale: Scale) -> usize {
        self.stage_channels(scale.index() + 3)
    }

    /// Grid extent at a scale: input_size / stride.
    pub fn grid_size(&self, scale: Scale) -> usize {
        self.input_size / scale.stride()
    }

    /// Channels in the fused neck feature at every scale.
    pub(crate) fn neck_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn head_channels(&self) -> usize {
        5 + self.num_classes
    }
}

/// Parameter group tags used for optimizer bookkeeping and DAN stripping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Neck,
    Head,
    Dan,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Neck => "neck",
            ParamGroup::Head => "head",
            ParamGroup::Dan => "dan",
        }
    }
}

/// One named, learnable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of model parameters. Iteration order is the fixed
/// construction order, which checkpointing and the optimizer rely on.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
}

impl ModelParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn group_is_empty(&self, group: ParamGroup) -> bool {
        !self.params.iter().any(|p| p.group == group)
    }

    /// Total number of scalar values across a group.
    pub fn group_value_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.values.len())
            .sum()
    }

    /// Drops every DAN-group parameter and disables adaptation in the echoed
    /// config. Detection-path parameters are untouched.
    pub fn strip_dan(&mut self) {
        self.params.retain(|p| p.group != ParamGroup::Dan);
        self.config.scales_adapted.clear();
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>) -> Self {
        ModelParams { config, params }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    /// Conv weight from a zero-mean uniform scaled by 1/sqrt(fan_in), plus a
    /// zero bias.
    fn conv(&mut self, name: &str, group: ParamGroup, cout: usize, cin: usize, k: usize) {
        let fan_in = cin * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..cout * fan_in)
            .map(|_| (2.0 * self.rng.gen::<f64>() - 1.0) * bound)
            .collect();
        self.params.push(Param {
            name: format!("{name}/weight"),
            group,
            shape: vec![cout, cin, k, k],
            values: weight,
        });
        self.params.push(Param {
            name: format!("{name}/bias"),
            group,
            shape: vec![cout],
            values: vec![0.0; cout],
        });
    }
}

/// Deterministically initializes all parameters for `cfg` from `seed`.
///
/// The detector parameters draw from the RNG before any DAN parameters, so
/// two configs differing only in adapted scales share identical detector
/// initializations for the same seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
    };
    let c = cfg.base_channels;

    b.conv("backbone/stem", ParamGroup::Backbone, c, 3, 3);
    let mut prev = c;
    for stage in 1..=5 {
        let ch = cfg.stage_channels(stage);
        b.conv(
            &format!("backbone/stage{stage}/down"),
            ParamGroup::Backbone,
            ch,
            prev,
            3,
        );
        b.conv(
            &format!("backbone/stage{stage}/res/conv1"),
            ParamGroup::Backbone,
            ch,
            ch,
            3,
        );
        b.conv(
            &format!("backbone/stage{stage}/res/conv2"),
            ParamGroup::Backbone,
            ch,
            ch,
            3,
        );
        prev = ch;
    }

    let nc = cfg.neck_channels();
    b.conv("neck/p3", ParamGroup::Neck, nc, cfg.tap_channels(Scale::F3), 3);
    b.conv(
        "neck/p2",
        ParamGroup::Neck,
        nc,
        nc + cfg.tap_channels(Scale::F2),
        3,
    );
    b.conv(
        "neck/p1",
        ParamGroup::Neck,
        nc,
        nc + cfg.tap_channels(Scale::F1),
        3,
    );

    for k in 1..=3 {
        b.conv(&format!("head/s{k}/conv"), ParamGroup::Head, nc, nc, 3);
        b.conv(
            &format!("head/s{k}/out"),
            ParamGroup::Head,
            cfg.head_channels(),
            nc,
            1,
        );
        // Start objectness near zero probability so the background term is
        // calm from the first iteration.
        let bias_name = format!("head/s{k}/out/bias");
        let bias = b.params.iter_mut().find(|p| p.name == bias_name).unwrap();
        bias.values[4] = (0.01_f64 / 0.99).ln();
    }

    for scale in &cfg.scales_adapted {
        let ch = cfg.tap_channels(*scale);
        let tag = format!("dan/f{}", scale.index() + 1);
        b.conv(&format!("{tag}/reduce"), ParamGroup::Dan, ch / 2, ch, 1);
        b.conv(&format!("{tag}/classify"), ParamGroup::Dan, 1, ch / 2, 1);
    }

    Ok(ModelParams::from_parts(cfg.clone(), b.params))
}

/// Closed-form table of every activation shape the forward pass must
/// produce for batch size `n`; used by the shape-audit tests.
pub fn expected_shapes(cfg: &ModelConfig, n: usize) -> Vec<(String, Vec<usize>)> {
    let mut rows = Vec::new();
    let s = cfg.input_size;
    for scale in Scale::ALL {
        let g = cfg.grid_size(scale);
        rows.push((format!("{scale}"), vec![n, cfg.tap_channels(scale), g, g]));
    }
    for (k, scale) in Scale::ALL.into_iter().enumerate() {
        let g = cfg.grid_size(scale);
        rows.push((format!("P{}", k + 1), vec![n, cfg.neck_channels(), g, g]));
        rows.push((
            format!("head/s{}", k + 1),
            vec![n, cfg.head_channels(), g, g],
        ));
    }
    for scale in &cfg.scales_adapted {
        let g = cfg.grid_size(*scale);
        rows.push((format!("dan/{scale}"), vec![n, 1, g, g]));
    }
    debug_assert_eq!(s % 32, 0);
    rows
}

#[cfg(test)]
mod tests;
