//! Finite-difference checking for every differentiable primitive.
//!
//! Each registered op has fixture shapes and a builder; `grad_check` fills
//! the inputs by cycling over the caller's point, runs backward once, and
//! compares against central differences coordinate by coordinate.

use crate::{Error, Result};

use super::compose::{cosine_rows, feed_forward, self_attention, AttentionWeights};
use super::graph::{Graph, NodeId};
use super::rng::Rng;
use super::tensor::Tensor;

type BuildFn = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;
type ShapeFn = fn(usize) -> Vec<Vec<usize>>;

struct OpSpec {
    name: &'static str,
    shapes: ShapeFn,
    build: BuildFn,
}

fn fixed<const N: usize>(shapes: [&[usize]; N]) -> Vec<Vec<usize>> {
    shapes.iter().map(|s| s.to_vec()).collect()
}

fn specs() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "add",
            shapes: |_| fixed([&[2, 3], &[2, 3]]),
            build: |g, l| g.add(l[0], l[1]),
        },
        OpSpec {
            name: "sub",
            shapes: |_| fixed([&[2, 3], &[2, 3]]),
            build: |g, l| g.sub(l[0], l[1]),
        },
        OpSpec {
            name: "mul",
            shapes: |_| fixed([&[2, 3], &[2, 3]]),
            build: |g, l| g.mul(l[0], l[1]),
        },
        OpSpec {
            name: "div",
            shapes: |_| fixed([&[2, 3], &[2, 3]]),
            build: |g, l| {
                // keep the denominator away from zero
                let d2 = g.mul(l[1], l[1])?;
                let half = g.constant(Tensor::full(vec![2, 3], 0.5));
                let denom = g.add(d2, half)?;
                g.div(l[0], denom)
            },
        },
        OpSpec {
            name: "scale",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.scale(l[0], 1.7),
        },
        OpSpec {
            name: "add_row",
            shapes: |_| fixed([&[3, 4], &[4]]),
            build: |g, l| g.add_row(l[0], l[1]),
        },
        OpSpec {
            name: "matmul",
            shapes: |_| fixed([&[2, 2], &[2, 2]]),
            build: |g, l| g.matmul(l[0], l[1]),
        },
        OpSpec {
            name: "transpose",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.transpose(l[0]),
        },
        OpSpec {
            name: "conv1d",
            shapes: |_| fixed([&[6, 2], &[3, 2, 2], &[3]]),
            build: |g, l| g.conv1d(l[0], l[1], l[2], 2),
        },
        OpSpec {
            name: "depthwise_conv1d",
            shapes: |_| fixed([&[5, 3], &[3, 2], &[3]]),
            build: |g, l| g.depthwise_conv1d(l[0], l[1], l[2]),
        },
        OpSpec {
            name: "pad_rows",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.pad_rows(l[0], 1, 2),
        },
        OpSpec {
            name: "avg_pool",
            shapes: |_| fixed([&[6, 2]]),
            build: |g, l| g.avg_pool_rows(l[0], 3),
        },
        OpSpec {
            name: "layernorm",
            shapes: |n| vec![vec![1, n], vec![n], vec![n]],
            build: |g, l| g.layer_norm(l[0], l[1], l[2], 1e-5),
        },
        OpSpec {
            name: "sigmoid",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.sigmoid(l[0]),
        },
        OpSpec {
            name: "swish",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.swish(l[0]),
        },
        OpSpec {
            name: "glu",
            shapes: |_| fixed([&[2, 4]]),
            build: |g, l| g.glu(l[0]),
        },
        OpSpec {
            name: "softmax",
            shapes: |_| fixed([&[2, 4]]),
            build: |g, l| g.softmax(l[0]),
        },
        OpSpec {
            name: "log_softmax",
            shapes: |n| vec![vec![1, n]],
            build: |g, l| g.log_softmax(l[0]),
        },
        OpSpec {
            name: "ln",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| {
                let sq = g.mul(l[0], l[0])?;
                let half = g.constant(Tensor::full(vec![2, 3], 0.5));
                let pos = g.add(sq, half)?;
                g.ln(pos)
            },
        },
        OpSpec {
            name: "exp",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.exp(l[0]),
        },
        OpSpec {
            name: "sqrt",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| {
                let sq = g.mul(l[0], l[0])?;
                let half = g.constant(Tensor::full(vec![2, 3], 0.5));
                let pos = g.add(sq, half)?;
                g.sqrt(pos)
            },
        },
        OpSpec {
            name: "sum",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.sum(l[0]),
        },
        OpSpec {
            name: "mean",
            shapes: |_| fixed([&[2, 3]]),
            build: |g, l| g.mean(l[0]),
        },
        OpSpec {
            name: "row_sums",
            shapes: |_| fixed([&[3, 2]]),
            build: |g, l| g.row_sums(l[0]),
        },
        OpSpec {
            name: "col_means",
            shapes: |_| fixed([&[3, 2]]),
            build: |g, l| g.col_means(l[0]),
        },
        OpSpec {
            name: "slice_cols",
            shapes: |_| fixed([&[2, 4]]),
            build: |g, l| g.slice_cols(l[0], 1, 3),
        },
        OpSpec {
            name: "concat_cols",
            shapes: |_| fixed([&[2, 2], &[2], &[2, 3]]),
            build: |g, l| g.concat_cols(l),
        },
        OpSpec {
            name: "gather_rows",
            shapes: |_| fixed([&[4, 2]]),
            build: |g, l| g.gather_rows(l[0], &[1, 1, 3]),
        },
        OpSpec {
            name: "replace_rows",
            shapes: |_| fixed([&[4, 2], &[2]]),
            build: |g, l| g.replace_rows(l[0], l[1], &[1, 2]),
        },
        OpSpec {
            name: "smooth_l1",
            shapes: |_| fixed([&[2, 3], &[2, 3]]),
            build: |g, l| g.smooth_l1(l[0], l[1], 1.0),
        },
        OpSpec {
            name: "cosine_rows",
            shapes: |_| fixed([&[3, 4], &[3, 4]]),
            build: |g, l| cosine_rows(g, l[0], l[1], 1e-8),
        },
        OpSpec {
            name: "feed_forward",
            shapes: |_| fixed([&[3, 4], &[4, 8], &[8], &[8, 4], &[4]]),
            build: |g, l| feed_forward(g, l[0], l[1], l[2], l[3], l[4]),
        },
        OpSpec {
            name: "attention",
            shapes: |_| {
                fixed([
                    &[3, 4],
                    &[4, 4],
                    &[4],
                    &[4, 4],
                    &[4, 4],
                    &[4],
                    &[4, 4],
                    &[4],
                ])
            },
            build: |g, l| {
                let w = AttentionWeights {
                    wq: l[1],
                    bq: l[2],
                    wk: l[3],
                    wv: l[4],
                    bv: l[5],
                    wo: l[6],
                    bo: l[7],
                };
                self_attention(g, l[0], 2, &w)
            },
        },
    ]
}

/// Names accepted by [`grad_check`].
pub fn registered_ops() -> Vec<&'static str> {
    specs().iter().map(|s| s.name).collect()
}

/// Compare analytic gradients with central finite differences for one op.
///
/// Inputs are filled by cycling over `point`; returns the max over all input
/// coordinates of |analytic - fd| / max(1e-8, |fd|).
pub fn grad_check(op_name: &str, point: &[f64], step: f64) -> Result<f64> {
    if point.is_empty() {
        return Err(Error::InvalidInput("grad_check needs a non-empty point".into()));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidInput(format!("bad step {step}")));
    }
    let all = specs();
    let spec = all
        .iter()
        .find(|s| s.name == op_name)
        .ok_or_else(|| Error::NotFound(format!("op '{op_name}'")))?;
    let shapes = (spec.shapes)(point.len());

    // Fill every input by cycling over the point.
    let mut cursor = 0usize;
    let buffers: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let numel: usize = s.iter().product();
            (0..numel)
                .map(|_| {
                    let v = point[cursor % point.len()];
                    cursor += 1;
                    v
                })
                .collect()
        })
        .collect();

    let analytic = analytic_grads(spec, &buffers, &shapes)?;

    let mut worst = 0.0f64;
    let mut perturbed = buffers.clone();
    for (i, buf) in buffers.iter().enumerate() {
        for j in 0..buf.len() {
            perturbed[i][j] = buf[j] + step;
            let up = eval_loss(spec, &perturbed, &shapes)?;
            perturbed[i][j] = buf[j] - step;
            let down = eval_loss(spec, &perturbed, &shapes)?;
            perturbed[i][j] = buf[j];
            let fd = (up - down) / (2.0 * step);
            let rel = (analytic[i][j] - fd).abs() / fd.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

fn build_loss(
    spec: &OpSpec,
    g: &mut Graph,
    leaves: &[NodeId],
) -> Result<NodeId> {
    let out = (spec.build)(g, leaves)?;
    // weight every output element so nothing cancels by accident
    let n = g.value(out).len();
    let shape = g.value(out).shape().to_vec();
    let mut rng = Rng::seed(0xC0FFEE);
    let w = (0..n).map(|_| rng.uniform_in(0.5, 1.5)).collect();
    let wleaf = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, wleaf)?;
    g.sum(prod)
}

fn eval_loss(spec: &OpSpec, buffers: &[Vec<f64>], shapes: &[Vec<usize>]) -> Result<f64> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = buffers
        .iter()
        .zip(shapes)
        .map(|(b, s)| Ok(g.constant(Tensor::new(s.clone(), b.clone())?)))
        .collect::<Result<_>>()?;
    let loss = build_loss(spec, &mut g, &leaves)?;
    g.value(loss).scalar_value()
}

fn analytic_grads(
    spec: &OpSpec,
    buffers: &[Vec<f64>],
    shapes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = buffers
        .iter()
        .zip(shapes)
        .map(|(b, s)| Ok(g.leaf(Tensor::new(s.clone(), b.clone())?.with_grad())))
        .collect::<Result<_>>()?;
    let loss = build_loss(spec, &mut g, &leaves)?;
    let mut grads = g.backward(loss)?;
    leaves
        .iter()
        .zip(buffers)
        .map(|(&id, buf)| {
            Ok(grads
                .take(id)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; buf.len()]))
        })
        .collect()
}
