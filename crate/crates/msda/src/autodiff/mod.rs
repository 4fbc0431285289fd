//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Operations
//! evaluate eagerly, record themselves on the tape, and [`Graph::backward`]
//! replays the tape in reverse to accumulate exact gradients. The operator
//! set is exactly what the detector, the domain classifiers, and the losses
//! need — including the gradient reversal operator that turns the shared
//! backward pass into a min/max game.
//!
//! All math is in `f64`. Tensors are immutable once created; distinct graphs
//! may run on different threads, and the per-operator parallelism inside one
//! graph never reduces across threads, so results are bitwise deterministic.

mod conv;
mod gradcheck;

pub use gradcheck::{
    analytic_gradients, audit_operators, grad_check, numeric_gradients, rel_error, AuditRow,
    InputSpec,
};

use crate::error::{Error, Result};

/// Identity of a tensor within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Reduction applied by [`Graph::bce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Probabilities fed to binary cross entropy are clamped into
/// `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    UpsampleNearest {
        input: NodeId,
        factor: usize,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    SliceChannels {
        input: NodeId,
        from: usize,
        to: usize,
    },
    SelectRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    Sigmoid {
        input: NodeId,
    },
    /// Elementwise binary cross entropy; `target` is a constant input.
    BceMap {
        pred: NodeId,
        target: NodeId,
    },
    Grl {
        input: NodeId,
        lambda: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
}

/// One tape entry: the produced values plus the operation record.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }
}

/// Reverse-mode tape. Node ids index into construction order, which is also
/// a valid topological order, so one backward sweep visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::Shape {
            op,
            detail: format!("expected a rank-4 N×C×H×W tensor, got shape {other:?}"),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Accumulated gradient, if this node participated in a backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        self.insert_leaf(shape, values, true)
    }

    /// Non-differentiable leaf (input data, targets, masks).
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        self.insert_leaf(shape, values, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.insert_leaf(&[1], vec![v], false)
            .expect("scalar leaf is always valid")
    }

    fn insert_leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if shape.is_empty() {
            return Err(Error::Shape {
                op: "leaf",
                detail: "empty shape".into(),
            });
        }
        if shape_len(shape) != values.len() {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!(
                    "shape {shape:?} implies {} values, got {}",
                    shape_len(shape),
                    values.len()
                ),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape_len(&shape), values.len());
        self.nodes.push(Tensor {
            shape,
            values,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_finite(&self, op: &'static str, id: NodeId) -> Result<NodeId> {
        if self.nodes[id.0].values.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// 2-D cross-correlation with zero padding and broadcast bias.
    ///
    /// `input` is N×Cin×H×W, `weight` Cout×Cin×kH×kW, `bias` a length-Cout
    /// vector. Output spatial extents follow the usual floor formula.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let (n, cin, h, w) = dims4(OP, self.shape(input))?;
        let (cout, wcin, kh, kw) = dims4(OP, self.shape(weight))?;
        if stride == 0 {
            return Err(Error::Shape {
                op: OP,
                detail: "stride must be positive".into(),
            });
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Shape {
                op: OP,
                detail: "kernel extents must be positive".into(),
            });
        }
        if cin != wcin {
            return Err(Error::Shape {
                op: OP,
                detail: format!("input has {cin} channels but weight expects {wcin}"),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape {
                op: OP,
                detail: format!(
                    "padded input {}×{} is smaller than the {kh}×{kw} kernel",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            });
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [cout] {
                return Err(Error::Shape {
                    op: OP,
                    detail: format!("bias shape {bs:?} does not match {cout} output channels"),
                });
            }
        }
        let geom = conv::ConvGeom::new(n, cin, h, w, cout, kh, kw, stride, pad);
        let out = conv::forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let requires =
            self.requires(input) || self.requires(weight) || bias.is_some_and(|b| self.requires(b));
        let id = self.push(
            vec![n, cout, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            requires,
        );
        self.check_finite(OP, id)
    }

    /// Stride-2 3×3 conv with pad 1; halves both spatial extents.
    /// Rejects odd spatial extents so the halving is exact.
    pub fn downsample_conv(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        const OP: &str = "downsample_conv";
        let (_, _, h, w) = dims4(OP, self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: OP,
                detail: format!("spatial extents {h}×{w} must be even"),
            });
        }
        let (_, _, kh, kw) = dims4(OP, self.shape(weight))?;
        if (kh, kw) != (3, 3) {
            return Err(Error::Shape {
                op: OP,
                detail: format!("kernel must be 3×3, got {kh}×{kw}"),
            });
        }
        self.conv2d(input, weight, bias, 2, 1)
    }

    /// Elementwise `x if x > 0 else slope·x`. `slope` must lie in `[0, 1)`.
    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> Result<NodeId> {
        const OP: &str = "leaky_relu";
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArg(format!(
                "leaky_relu slope must be in [0, 1), got {slope}"
            )));
        }
        let values = map_parallel(self.value(input), |x| if x > 0.0 { x } else { slope * x });
        let requires = self.requires(input);
        let shape = self.shape(input).to_vec();
        let id = self.push(shape, values, Op::LeakyRelu { input, slope }, requires);
        self.check_finite(OP, id)
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        const OP: &str = "upsample_nearest";
        if factor == 0 {
            return Err(Error::InvalidArg("upsample factor must be >= 1".into()));
        }
        let (n, c, h, w) = dims4(OP, self.shape(input))?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input);
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let iy = oy / factor;
                for ox in 0..ow {
                    dst[oy * ow + ox] = plane[iy * w + ox / factor];
                }
            }
        }
        let requires = self.requires(input);
        let id = self.push(
            vec![n, c, oh, ow],
            out,
            Op::UpsampleNearest { input, factor },
            requires,
        );
        self.check_finite(OP, id)
    }

    /// Channel-axis concatenation of two N×C×H×W tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        let (na, ca, ha, wa) = dims4(OP, self.shape(a))?;
        let (nb, cb, hb, wb) = dims4(OP, self.shape(b))?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape {
                op: OP,
                detail: format!(
                    "batch/spatial mismatch: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity((ca + cb) * na * ha * wa);
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        for i in 0..na {
            out.extend_from_slice(&av[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&bv[i * pb..(i + 1) * pb]);
        }
        let requires = self.requires(a) || self.requires(b);
        let id = self.push(
            vec![na, ca + cb, ha, wa],
            out,
            Op::ConcatChannels { a, b },
            requires,
        );
        self.check_finite(OP, id)
    }

    /// Channel range `[from, to)` of an N×C×H×W tensor.
    pub fn slice_channels(&mut self, input: NodeId, from: usize, to: usize) -> Result<NodeId> {
        const OP: &str = "slice_channels";
        let (n, c, h, w) = dims4(OP, self.shape(input))?;
        if from >= to || to > c {
            return Err(Error::Shape {
                op: OP,
                detail: format!("channel range {from}..{to} invalid for {c} channels"),
            });
        }
        let src = self.value(input);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (to - from) * plane);
        for i in 0..n {
            let base = i * c * plane;
            out.extend_from_slice(&src[base + from * plane..base + to * plane]);
        }
        let requires = self.requires(input);
        let id = self.push(
            vec![n, to - from, h, w],
            out,
            Op::SliceChannels { input, from, to },
            requires,
        );
        self.check_finite(OP, id)
    }

    /// Gathers batch rows by index; duplicates are allowed and gradients
    /// accumulate on the shared source row.
    pub fn select_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        const OP: &str = "select_rows";
        let shape = self.shape(input).to_vec();
        let n = shape[0];
        if rows.is_empty() {
            return Err(Error::Shape {
                op: OP,
                detail: "row selection is empty".into(),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape {
                op: OP,
                detail: format!("row {bad} out of range for batch size {n}"),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let src = self.value(input);
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            out.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let requires = self.requires(input);
        let id = self.push(
            out_shape,
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            requires,
        );
        self.check_finite(OP, id)
    }

    /// Elementwise logistic function, overflow-safe for large |x|.
    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        const OP: &str = "sigmoid";
        let values = map_parallel(self.value(input), sigmoid_value);
        let requires = self.requires(input);
        let shape = self.shape(input).to_vec();
        let id = self.push(shape, values, Op::Sigmoid { input }, requires);
        self.check_finite(OP, id)
    }

    /// Elementwise binary cross entropy map (no reduction).
    ///
    /// `pred` must already be in [0, 1]; it is clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]` before the logs. `target` entries must be
    /// exactly 0 or 1.
    pub fn bce_map(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        const OP: &str = "bce";
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape {
                op: OP,
                detail: format!(
                    "prediction shape {:?} != target shape {:?}",
                    self.shape(pred),
                    self.shape(target)
                ),
            });
        }
        let p = self.value(pred);
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArg(format!(
                "bce probability {bad} outside [0, 1]"
            )));
        }
        let t = self.value(target);
        if let Some(bad) = t.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::InvalidArg(format!("bce target {bad} not in {{0, 1}}")));
        }
        let values: Vec<f64> = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .collect();
        let requires = self.requires(pred);
        let shape = self.shape(pred).to_vec();
        let id = self.push(shape, values, Op::BceMap { pred, target }, requires);
        self.check_finite(OP, id)
    }

    /// Reduced binary cross entropy: `-Σ [t·ln p + (1-t)·ln(1-p)]`,
    /// optionally divided by the element count.
    pub fn bce(&mut self, pred: NodeId, target: NodeId, reduction: Reduction) -> Result<NodeId> {
        let map = self.bce_map(pred, target)?;
        let total = self.sum(map)?;
        match reduction {
            Reduction::Sum => Ok(total),
            Reduction::Mean => {
                let count = self.value(map).len() as f64;
                self.scale(total, 1.0 / count)
            }
        }
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// on the way back.
    pub fn grl(&mut self, input: NodeId, lambda: f64) -> Result<NodeId> {
        const OP: &str = "grl";
        if !lambda.is_finite() {
            return Err(Error::InvalidArg(format!("grl lambda {lambda} not finite")));
        }
        let values = self.value(input).to_vec();
        let requires = self.requires(input);
        let shape = self.shape(input).to_vec();
        let id = self.push(shape, values, Op::Grl { input, lambda }, requires);
        self.check_finite(OP, id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64 + Sync,
        op: Op,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let values: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let requires = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        let id = self.push(shape, values, op, requires);
        self.check_finite(name, id)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        const OP: &str = "scale";
        if !factor.is_finite() {
            return Err(Error::InvalidArg(format!("scale factor {factor} not finite")));
        }
        let values = map_parallel(self.value(input), |x| x * factor);
        let requires = self.requires(input);
        let shape = self.shape(input).to_vec();
        let id = self.push(shape, values, Op::Scale { input, factor }, requires);
        self.check_finite(OP, id)
    }

    /// Full reduction to a single-element tensor.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        const OP: &str = "sum";
        let total: f64 = self.value(input).iter().sum();
        let requires = self.requires(input);
        let id = self.push(vec![1], vec![total], Op::Sum { input }, requires);
        self.check_finite(OP, id)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that requires them; repeated calls without
    /// [`Graph::zero_grads`] keep accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut sweep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        sweep[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = sweep[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &gout, &mut sweep);
            let node = &mut self.nodes[id];
            let grad = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.values.len()]);
            for (g, u) in grad.iter_mut().zip(&gout) {
                *g += u;
            }
        }
        Ok(())
    }

    /// Applies one node's chain rule, adding contributions into the sweep
    /// buffers of its inputs.
    fn propagate(&self, id: usize, gout: &[f64], sweep: &mut [Option<Vec<f64>>]) {
        let mut stage = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].requires_grad {
                return;
            }
            let buf = sweep[target.0]
                .get_or_insert_with(|| vec![0.0; self.nodes[target.0].values.len()]);
            f(buf);
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (n, cin, h, w) = dims4("conv2d", &self.nodes[input.0].shape).unwrap();
                let (cout, _, kh, kw) = dims4("conv2d", &self.nodes[weight.0].shape).unwrap();
                let geom = conv::ConvGeom::new(n, cin, h, w, cout, kh, kw, *stride, *pad);
                if self.nodes[input.0].requires_grad {
                    let dx = conv::backward_input(&geom, &self.nodes[weight.0].values, gout);
                    stage(*input, &mut |buf| add_into(buf, &dx));
                }
                if self.nodes[weight.0].requires_grad {
                    let dw = conv::backward_weight(&geom, &self.nodes[input.0].values, gout);
                    stage(*weight, &mut |buf| add_into(buf, &dw));
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].requires_grad {
                        let db = conv::backward_bias(&geom, gout);
                        stage(*b, &mut |buf| add_into(buf, &db));
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[input.0].values;
                stage(*input, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * if x[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::UpsampleNearest { input, factor } => {
                let (n, c, h, w) = dims4("upsample", &self.nodes[input.0].shape).unwrap();
                let (oh, ow) = (h * factor, w * factor);
                stage(*input, &mut |buf| {
                    for nc in 0..n * c {
                        let src = &gout[nc * oh * ow..(nc + 1) * oh * ow];
                        let dst = &mut buf[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy / factor;
                            for ox in 0..ow {
                                dst[iy * w + ox / factor] += src[oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = dims4("concat", &self.nodes[a.0].shape).unwrap();
                let cb = self.nodes[b.0].shape[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                stage(*a, &mut |buf| {
                    for i in 0..n {
                        let src = &gout[i * (pa + pb)..i * (pa + pb) + pa];
                        add_into(&mut buf[i * pa..(i + 1) * pa], src);
                    }
                });
                stage(*b, &mut |buf| {
                    for i in 0..n {
                        let src = &gout[i * (pa + pb) + pa..(i + 1) * (pa + pb)];
                        add_into(&mut buf[i * pb..(i + 1) * pb], src);
                    }
                });
            }
            Op::SliceChannels { input, from, to } => {
                let (n, c, h, w) = dims4("slice", &self.nodes[input.0].shape).unwrap();
                let plane = h * w;
                let span = (to - from) * plane;
                stage(*input, &mut |buf| {
                    for i in 0..n {
                        let dst_base = i * c * plane + from * plane;
                        add_into(
                            &mut buf[dst_base..dst_base + span],
                            &gout[i * span..(i + 1) * span],
                        );
                    }
                });
            }
            Op::SelectRows { input, rows } => {
                let stride: usize = self.nodes[input.0].shape[1..].iter().product();
                stage(*input, &mut |buf| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut buf[r * stride..(r + 1) * stride],
                            &gout[k * stride..(k + 1) * stride],
                        );
                    }
                });
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[id].values;
                stage(*input, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::BceMap { pred, target } => {
                let p = &self.nodes[pred.0].values;
                let t = &self.nodes[target.0].values;
                stage(*pred, &mut |buf| {
                    for i in 0..buf.len() {
                        let pc = p[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        buf[i] += gout[i] * (-t[i] / pc + (1.0 - t[i]) / (1.0 - pc));
                    }
                });
            }
            Op::Grl { input, lambda } => {
                let lambda = *lambda;
                stage(*input, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += -lambda * gout[i];
                    }
                });
            }
            Op::Add { a, b } => {
                stage(*a, &mut |buf| add_into(buf, gout));
                stage(*b, &mut |buf| add_into(buf, gout));
            }
            Op::Sub { a, b } => {
                stage(*a, &mut |buf| add_into(buf, gout));
                stage(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] -= gout[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
                stage(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * bv[i];
                    }
                });
                stage(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale { input, factor } => {
                let factor = *factor;
                stage(*input, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * factor;
                    }
                });
            }
            Op::Sum { input } => {
                let g = gout[0];
                stage(*input, &mut |buf| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Overflow-safe logistic function on a plain value; shared with the
/// non-graph decoding path.
pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise map, parallel for large tensors. Each output element is
/// produced independently, so chunking does not affect the result.
fn map_parallel(src: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    use rayon::prelude::*;
    const PAR_THRESHOLD: usize = 1 << 15;
    if src.len() < PAR_THRESHOLD {
        return src.iter().map(|&x| f(x)).collect();
    }
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(1 << 13)
        .zip(src.par_chunks(1 << 13))
        .for_each(|(o, s)| {
            for (d, &x) in o.iter_mut().zip(s) {
                *d = f(x);
            }
        });
    out
}

#[cfg(test)]
mod tests;
