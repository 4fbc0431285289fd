//! Central-difference gradient checking and the operator audit table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Reduction};
use crate::error::{Error, Result};

/// One differentiable input handed to a forward-function builder.
#[derive(Debug, Clone)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl InputSpec {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        InputSpec {
            shape: shape.to_vec(),
            values,
        }
    }
}

type Builder<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_loss(builder: Builder, inputs: &[InputSpec]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|spec| g.param(&spec.shape, spec.values.clone()))
        .collect::<Result<_>>()?;
    let loss = builder(&mut g, &ids)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: "builder must produce a scalar loss".into(),
        });
    }
    Ok(g.scalar(loss))
}

/// Reverse-mode gradients of the builder's loss w.r.t. every input entry.
pub fn analytic_gradients(builder: Builder, inputs: &[InputSpec]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|spec| g.param(&spec.shape, spec.values.clone()))
        .collect::<Result<_>>()?;
    let loss = builder(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, spec)| {
            g.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; spec.values.len()])
        })
        .collect())
}

/// Central-difference gradients at step `eps`, one forward pair per entry.
pub fn numeric_gradients(builder: Builder, inputs: &[InputSpec], eps: f64) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[which].values.len()];
        for entry in 0..grad.len() {
            let mut plus = inputs.to_vec();
            plus[which].values[entry] += eps;
            let mut minus = inputs.to_vec();
            minus[which].values[entry] -= eps;
            grad[entry] = (eval_loss(builder, &plus)? - eval_loss(builder, &minus)?) / (2.0 * eps);
        }
        grads.push(grad);
    }
    Ok(grads)
}

/// Compares reverse-mode gradients against central differences and returns
/// the worst relative error over all input entries.
///
/// The builder must be deterministic; two forward evaluations that disagree
/// bitwise are rejected.
pub fn grad_check(builder: Builder, inputs: &[InputSpec], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "grad_check eps must be in [1e-7, 1e-3], got {eps}"
        )));
    }
    let first = eval_loss(builder, inputs)?;
    let second = eval_loss(builder, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two forward evaluations differ: {first} vs {second}"
        )));
    }
    let analytic = analytic_gradients(builder, inputs)?;
    let numeric = numeric_gradients(builder, inputs, eps)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a.iter().zip(n) {
            worst = worst.max(rel_error(a, n));
        }
    }
    Ok(worst)
}

/// One line of the operator audit table.
#[derive(Debug, Clone)]
pub struct AuditRow {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl AuditRow {
    pub fn pass(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

const FD_EPS: f64 = 1e-5;
const SMOOTH_TOL: f64 = 1e-6;
const GENERAL_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect()
}

/// Values bounded away from zero so the leaky_relu kink never sits within
/// the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let mag = 0.2 + 0.8 * rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect()
}


/// Multiplies by a fixed random mask and sums, giving every entry a distinct
/// upstream gradient.
fn masked_sum(g: &mut Graph, y: NodeId, mask: &[f64]) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let m = g.constant(&shape, mask.to_vec())?;
    let prod = g.mul(y, m)?;
    g.sum(prod)
}

/// Runs the finite-difference suite for every graph operator across
/// `num_seeds` randomized instances and reports the worst error per op.
pub fn audit_operators(num_seeds: u64) -> Result<Vec<AuditRow>> {
    let mut rows: Vec<AuditRow> = Vec::new();
    let mut record = |op: &'static str, threshold: f64, err: f64| {
        match rows.iter_mut().find(|r| r.op == op) {
            Some(row) => row.max_rel_error = row.max_rel_error.max(err),
            None => rows.push(AuditRow {
                op,
                max_rel_error: err,
                threshold,
            }),
        }
    };

    for seed in 0..num_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ seed.wrapping_mul(0x9e37_79b9));

        // conv2d: stride/pad vary with the seed.
        {
            let stride = 1 + (seed % 2) as usize;
            let pad = (seed % 2) as usize;
            let input = InputSpec::new(&[1, 2, 5, 5], uniform(&mut rng, 50, -1.0, 1.0));
            let weight = InputSpec::new(&[3, 2, 3, 3], uniform(&mut rng, 54, -0.5, 0.5));
            let bias = InputSpec::new(&[3], uniform(&mut rng, 3, -0.2, 0.2));
            let mask = uniform(&mut rng, ((5 + 2 * pad - 3) / stride + 1).pow(2) * 3, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad)?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input, weight, bias], FD_EPS)?;
            record("conv2d", SMOOTH_TOL, err);
        }

        // downsample_conv
        {
            let input = InputSpec::new(&[1, 2, 6, 6], uniform(&mut rng, 72, -1.0, 1.0));
            let weight = InputSpec::new(&[4, 2, 3, 3], uniform(&mut rng, 72, -0.5, 0.5));
            let bias = InputSpec::new(&[4], uniform(&mut rng, 4, -0.2, 0.2));
            let mask = uniform(&mut rng, 4 * 9, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.downsample_conv(ids[0], ids[1], Some(ids[2]))?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input, weight, bias], FD_EPS)?;
            record("downsample_conv", SMOOTH_TOL, err);
        }

        // leaky_relu
        {
            let input = InputSpec::new(&[1, 2, 3, 3], away_from_zero(&mut rng, 18));
            let mask = uniform(&mut rng, 18, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.leaky_relu(ids[0], 0.1)?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input], FD_EPS)?;
            record("leaky_relu", GENERAL_TOL, err);
        }

        // upsample_nearest
        {
            let input = InputSpec::new(&[1, 2, 3, 3], uniform(&mut rng, 18, -1.0, 1.0));
            let mask = uniform(&mut rng, 72, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.upsample_nearest(ids[0], 2)?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input], FD_EPS)?;
            record("upsample_nearest", SMOOTH_TOL, err);
        }

        // concat_channels
        {
            let a = InputSpec::new(&[1, 2, 3, 3], uniform(&mut rng, 18, -1.0, 1.0));
            let b = InputSpec::new(&[1, 3, 3, 3], uniform(&mut rng, 27, -1.0, 1.0));
            let mask = uniform(&mut rng, 45, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.concat_channels(ids[0], ids[1])?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[a, b], FD_EPS)?;
            record("concat_channels", SMOOTH_TOL, err);
        }

        // slice_channels
        {
            let input = InputSpec::new(&[1, 4, 3, 3], uniform(&mut rng, 36, -1.0, 1.0));
            let mask = uniform(&mut rng, 18, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.slice_channels(ids[0], 1, 3)?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input], FD_EPS)?;
            record("slice_channels", GENERAL_TOL, err);
        }

        // select_rows (with a duplicated row to exercise accumulation)
        {
            let input = InputSpec::new(&[3, 2, 2, 2], uniform(&mut rng, 24, -1.0, 1.0));
            let mask = uniform(&mut rng, 24, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.select_rows(ids[0], &[2, 0, 2])?;
                masked_sum(g, y, &mask)
            };
            let err = grad_check(&builder, &[input], FD_EPS)?;
            record("select_rows", GENERAL_TOL, err);
        }

        // sigmoid
        {
            let input = InputSpec::new(&[8], uniform(&mut rng, 8, -3.0, 3.0));
            let mask = uniform(&mut rng, 8, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.sigmoid(ids[0])?;
                let m = g.constant(&[8], mask.clone())?;
                let prod = g.mul(y, m)?;
                g.sum(prod)
            };
            let err = grad_check(&builder, &[input], FD_EPS)?;
            record("sigmoid", SMOOTH_TOL, err);
        }

        // bce, both reductions
        {
            let p = InputSpec::new(&[8], uniform(&mut rng, 8, 0.05, 0.95));
            let t: Vec<f64> = (0..8).map(|_| f64::from(rng.gen::<bool>())).collect();
            let reduction = if seed % 2 == 0 {
                Reduction::Sum
            } else {
                Reduction::Mean
            };
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let target = g.constant(&[8], t.clone())?;
                g.bce(ids[0], target, reduction)
            };
            let err = grad_check(&builder, &[p], FD_EPS)?;
            record("bce", GENERAL_TOL, err);
        }

        // grl: the forward pass is an identity, so central differences see
        // the identity path; analytic gradients must equal -lambda times it.
        {
            let lambda = 0.1;
            let input = InputSpec::new(&[6], uniform(&mut rng, 6, -1.0, 1.0));
            let mask = uniform(&mut rng, 6, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.grl(ids[0], lambda)?;
                let m = g.constant(&[6], mask.clone())?;
                let prod = g.mul(y, m)?;
                g.sum(prod)
            };
            let analytic = analytic_gradients(&builder, std::slice::from_ref(&input))?;
            let numeric = numeric_gradients(&builder, std::slice::from_ref(&input), FD_EPS)?;
            let mut err: f64 = 0.0;
            for (&a, &n) in analytic[0].iter().zip(&numeric[0]) {
                err = err.max(rel_error(a, -lambda * n));
            }
            record("grl", GENERAL_TOL, err);
        }

        // arithmetic ops
        {
            let a = InputSpec::new(&[6], uniform(&mut rng, 6, -1.0, 1.0));
            let b = InputSpec::new(&[6], uniform(&mut rng, 6, -1.0, 1.0));
            let mask = uniform(&mut rng, 6, -1.0, 1.0);
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let s = g.add(ids[0], ids[1])?;
                let d = g.sub(s, ids[1])?;
                let p = g.mul(d, ids[1])?;
                let sc = g.scale(p, 0.75)?;
                let m = g.constant(&[6], mask.clone())?;
                let prod = g.mul(sc, m)?;
                g.sum(prod)
            };
            let err = grad_check(&builder, &[a, b], FD_EPS)?;
            record("add/sub/mul/scale/sum", GENERAL_TOL, err);
        }

        // composite conv -> leaky_relu -> sigmoid -> bce
        {
            let input = InputSpec::new(&[1, 1, 4, 4], uniform(&mut rng, 16, -1.0, 1.0));
            let weight = InputSpec::new(&[2, 1, 3, 3], uniform(&mut rng, 18, -0.5, 0.5));
            let bias = InputSpec::new(&[2], uniform(&mut rng, 2, -0.2, 0.2));
            let t: Vec<f64> = (0..8).map(|_| f64::from(rng.gen::<bool>())).collect();
            let builder = move |g: &mut Graph, ids: &[NodeId]| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0)?;
                let y = g.leaky_relu(y, 0.1)?;
                let p = g.sigmoid(y)?;
                let target = g.constant(&[1, 2, 2, 2], t.clone())?;
                g.bce(p, target, Reduction::Sum)
            };
            let err = grad_check(&builder, &[input, weight, bias], FD_EPS)?;
            record("composite(conv,leaky,sigmoid,bce)", GENERAL_TOL, err);
        }
    }

    Ok(rows)
}
