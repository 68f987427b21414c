//! Contrastive and masked-regression objectives.

use crate::encoders::{forward, EncoderConfig, ForwardOpts};
use crate::numerics::{cosine_rows, Graph, NodeId, Rng, Tensor};
use crate::signals::RawRecording;
use crate::{Error, Result};

use super::MaskPlan;

const COSINE_EPS: f64 = 1e-8;

/// K distractor indices per masked frame, drawn uniformly from the other
/// masked frames (falling back to all other frames when only one is masked).
/// Indices address rows of the gathered masked matrices.
pub fn sample_distractors(
    masked_count: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if masked_count == 0 {
        return Err(Error::NoMaskedFrames);
    }
    if k == 0 {
        return Err(Error::InvalidInput("need K >= 1 distractors".into()));
    }
    if masked_count == 1 {
        return Err(Error::InvalidInput(
            "need at least 2 masked frames to draw distractors".into(),
        ));
    }
    let mut out = Vec::with_capacity(masked_count);
    for i in 0..masked_count {
        let mut row = Vec::with_capacity(k);
        for _ in 0..k {
            let mut j = rng.below(masked_count - 1);
            if j >= i {
                j += 1;
            }
            row.push(j);
        }
        out.push(row);
    }
    Ok(out)
}

/// Mean over masked frames of -log softmax over cosine similarities:
/// the true quantized target against K distractors, at temperature kappa.
///
/// `context` and `targets` are [M, F] (already gathered to masked rows);
/// `distractors[i]` indexes rows of `targets`.
pub fn contrastive_on_graph(
    g: &mut Graph,
    context: NodeId,
    targets: NodeId,
    distractors: &[Vec<usize>],
    kappa: f64,
) -> Result<NodeId> {
    let (m, _) = g.value(context).dims2()?;
    if g.value(targets).shape() != g.value(context).shape() {
        return Err(Error::Shape(format!(
            "context {:?} vs targets {:?}",
            g.value(context).shape(),
            g.value(targets).shape()
        )));
    }
    if distractors.len() != m {
        return Err(Error::Shape(format!(
            "{} distractor rows for {m} masked frames",
            distractors.len()
        )));
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidInput(format!("kappa {kappa} must be positive")));
    }
    let k = distractors[0].len();
    let mut cols = Vec::with_capacity(k + 1);
    cols.push(cosine_rows(g, context, targets, COSINE_EPS)?);
    for kk in 0..k {
        let idx: Vec<usize> = distractors.iter().map(|row| row[kk]).collect();
        let gathered = g.gather_rows(targets, &idx)?;
        cols.push(cosine_rows(g, context, gathered, COSINE_EPS)?);
    }
    let logits = g.concat_cols(&cols)?;
    let scaled = g.scale(logits, 1.0 / kappa)?;
    let lsm = g.log_softmax(scaled)?;
    let first = g.slice_cols(lsm, 0, 1)?;
    let mean = g.mean(first)?;
    g.scale(mean, -1.0)
}

/// Standalone contrastive loss over full-length context/target matrices and a
/// mask plan; distractors are seeded.
pub fn contrastive_loss(
    context: &Tensor,
    quantized_targets: &Tensor,
    mask: &MaskPlan,
    k: usize,
    kappa: f64,
    seed: u64,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let mut g = Graph::new();
    let ctx_full = g.constant(context.clone());
    let tgt_full = g.constant(quantized_targets.clone());
    let ctx = g.gather_rows(ctx_full, &mask.indices)?;
    let tgt = g.gather_rows(tgt_full, &mask.indices)?;
    let mut rng = Rng::seed(seed);
    let distractors = sample_distractors(mask.len(), k, &mut rng)?;
    let loss = contrastive_on_graph(&mut g, ctx, tgt, &distractors, kappa)?;
    g.value(loss).scalar_value()
}

/// Smooth-L1 between student predictions and teacher targets at masked
/// positions, averaged over positions and dimensions.
pub fn data2vec_loss(
    student_masked_outputs: &Tensor,
    teacher_targets: &Tensor,
    beta: f64,
) -> Result<f64> {
    if student_masked_outputs.shape() != teacher_targets.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student_masked_outputs.shape(),
            teacher_targets.shape()
        )));
    }
    if student_masked_outputs.is_empty() {
        return Err(Error::NoMaskedFrames);
    }
    let mut g = Graph::new();
    let pred = g.constant(student_masked_outputs.clone());
    let tgt = g.constant(teacher_targets.clone());
    let loss = g.smooth_l1(pred, tgt, beta)?;
    g.value(loss).scalar_value()
}

/// Teacher regression targets: the row-normalized average of the teacher's
/// top_k trunk block outputs on the unmasked input, at every frame.
pub fn data2vec_targets(
    config: &EncoderConfig,
    teacher_params: &crate::numerics::ParamSet,
    recording: &RawRecording,
    top_k: usize,
    zscore: bool,
) -> Result<Tensor> {
    if top_k == 0 {
        return Err(Error::InvalidInput("top_k must be >= 1".into()));
    }
    let fwd = forward(
        config,
        teacher_params,
        recording,
        ForwardOpts {
            zscore,
            ..ForwardOpts::default()
        },
    )?;
    let take = top_k.min(fwd.block_outputs.len());
    let picked = &fwd.block_outputs[fwd.block_outputs.len() - take..];
    let shape = fwd.graph.value(picked[0]).shape().to_vec();
    let (t, d) = (shape[0], shape[1]);
    let mut avg = vec![0.0f64; t * d];
    for &node in picked {
        for (a, &v) in avg.iter_mut().zip(fwd.graph.value(node).data()) {
            *a += v / take as f64;
        }
    }
    // instance norm per frame, no affine
    for row in avg.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::new(vec![t, d], avg)
}
