//! Graph assembly for the three encoder families.

use crate::ctc::LogProbLattice;
use crate::numerics::{
    feed_forward, self_attention, AttentionWeights, Gradients, Graph, NodeId, ParamSet, Rng,
    Tensor,
};
use crate::signals::RawRecording;
use crate::{Error, Result};

use super::{EncoderConfig, Family};

/// Latent frames to hide from the trunk (pretraining); replaced by the
/// learned `pretrain.mask_emb` row.
#[derive(Clone, Copy, Debug)]
pub struct MaskSpec<'a> {
    pub indices: &'a [usize],
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts<'a> {
    /// Per-channel z-score normalization of the raw input.
    pub zscore: bool,
    /// Bind parameters as gradient-tracking leaves.
    pub trainable: bool,
    /// Apply dropout at the configured rate (training only).
    pub dropout: bool,
    pub dropout_seed: u64,
    pub mask: Option<MaskSpec<'a>>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        ForwardOpts {
            zscore: true,
            trainable: false,
            dropout: false,
            dropout_seed: 0,
            mask: None,
        }
    }
}

/// A completed forward pass: the graph plus the nodes later stages care about.
pub struct Forwarded {
    pub graph: Graph,
    /// Front-end output [T, D] before any mask replacement.
    pub latent: NodeId,
    /// Residual-stream output of each trunk block, in order.
    pub block_outputs: Vec<NodeId>,
    /// Pre-softmax head output [T, V].
    pub logits: NodeId,
    /// Log-softmax head output [T, V]; seed CTC gradients here.
    pub lattice_node: NodeId,
    bindings: Vec<(String, NodeId)>,
}

impl Forwarded {
    pub fn lattice(&self) -> Result<LogProbLattice> {
        let v = self.graph.value(self.lattice_node);
        let shape = v.shape();
        LogProbLattice::new(shape[0], shape[1], v.data().to_vec())
    }

    pub fn bindings(&self) -> &[(String, NodeId)] {
        &self.bindings
    }

    /// Bind one more parameter (auxiliary heads, codebooks) as a trainable
    /// leaf on this graph.
    pub fn bind_extra(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let tensor = params.get(name)?.clone().with_grad();
        let id = self.graph.leaf(tensor);
        self.bindings.push((name.to_string(), id));
        Ok(id)
    }

    /// Pull per-parameter gradients out of a backward result.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.bindings
            .iter()
            .filter_map(|(name, id)| grads.take(*id).map(|g| (name.clone(), g)))
            .collect()
    }
}

struct Binder<'p> {
    params: &'p ParamSet,
    trainable: bool,
    bindings: Vec<(String, NodeId)>,
}

impl Binder<'_> {
    fn leaf(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let tensor = self.params.get(name)?.clone();
        let id = if self.trainable {
            let id = g.leaf(tensor.with_grad());
            self.bindings.push((name.to_string(), id));
            id
        } else {
            g.constant(tensor)
        };
        Ok(id)
    }

    fn attention(&mut self, g: &mut Graph, prefix: &str) -> Result<AttentionWeights> {
        Ok(AttentionWeights {
            wq: self.leaf(g, &format!("{prefix}.wq"))?,
            bq: self.leaf(g, &format!("{prefix}.bq"))?,
            wk: self.leaf(g, &format!("{prefix}.wk"))?,
            wv: self.leaf(g, &format!("{prefix}.wv"))?,
            bv: self.leaf(g, &format!("{prefix}.bv"))?,
            wo: self.leaf(g, &format!("{prefix}.wo"))?,
            bo: self.leaf(g, &format!("{prefix}.bo"))?,
        })
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Run one recording through the configured encoder.
pub fn forward(
    config: &EncoderConfig,
    params: &ParamSet,
    recording: &RawRecording,
    opts: ForwardOpts<'_>,
) -> Result<Forwarded> {
    config.validate()?;
    if recording.channels != config.in_channels {
        return Err(Error::Shape(format!(
            "recording has {} channels, config expects {}",
            recording.channels, config.in_channels
        )));
    }
    let t_in = recording.t_len();
    if t_in == 0 {
        return Err(Error::InputTooShort);
    }

    let mut g = Graph::new();
    let mut binder = Binder {
        params,
        trainable: opts.trainable,
        bindings: Vec::new(),
    };
    let mut dropout_rng = Rng::seed(opts.dropout_seed);
    let rate = if opts.dropout { config.dropout } else { 0.0 };

    let x = g.constant(input_tensor(recording, opts.zscore));

    // ── front end ───────────────────────────────────────────────────
    let latent = match config.family {
        Family::Conformer => {
            let s = config.subsample_factor;
            let padded = pad_to_multiple(&mut g, x, s)?;
            let w = binder.leaf(&mut g, "front.conv.w")?;
            let b = binder.leaf(&mut g, "front.conv.b")?;
            let conv = g.conv1d(padded, w, b, s)?;
            g.swish(conv)?
        }
        Family::Bendr => {
            let mut h = x;
            for (i, f) in config.stride_stack().into_iter().enumerate() {
                let padded = pad_to_multiple(&mut g, h, f)?;
                let w = binder.leaf(&mut g, &format!("front.conv{i}.w"))?;
                let b = binder.leaf(&mut g, &format!("front.conv{i}.b"))?;
                let conv = g.conv1d(padded, w, b, f)?;
                let gain = binder.leaf(&mut g, &format!("front.ln{i}.g"))?;
                let bias = binder.leaf(&mut g, &format!("front.ln{i}.b"))?;
                let normed = g.layer_norm(conv, gain, bias, LAYER_NORM_EPS)?;
                h = g.swish(normed)?;
            }
            h
        }
        Family::EegConformer => {
            let k = config.conv_kernel;
            let padded = g.pad_rows(x, (k - 1) / 2, k / 2)?;
            let w = binder.leaf(&mut g, "front.temporal.w")?;
            let b = binder.leaf(&mut g, "front.temporal.b")?;
            let conv = g.conv1d(padded, w, b, 1)?;
            let act = g.swish(conv)?;
            let sw = binder.leaf(&mut g, "front.spatial.w")?;
            let sb = binder.leaf(&mut g, "front.spatial.b")?;
            let mixed0 = g.matmul(act, sw)?;
            let mixed = g.add_row(mixed0, sb)?;
            let act2 = g.swish(mixed)?;
            let padded2 = pad_to_multiple(&mut g, act2, config.subsample_factor)?;
            g.avg_pool_rows(padded2, config.subsample_factor)?
        }
    };

    let t_latent = g.value(latent).shape()[0];
    debug_assert_eq!(t_latent, config.output_len(t_in));
    if t_latent == 0 {
        return Err(Error::InputTooShort);
    }

    // ── mask replacement (pretraining), then positional encoding ───
    let mut h = latent;
    if let Some(mask) = opts.mask {
        let emb = binder.leaf(&mut g, "pretrain.mask_emb")?;
        h = g.replace_rows(h, emb, mask.indices)?;
    }
    let pe = g.constant(sinusoidal_positions(t_latent, config.model_dim));
    h = g.add(h, pe)?;

    // ── trunk ───────────────────────────────────────────────────────
    let mut block_outputs = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let block = format!("block{i:02}");
        h = match config.family {
            Family::Conformer => {
                let h1 = half_ffn(&mut g, &mut binder, h, &format!("{block}.ffn1"), rate, &mut dropout_rng)?;
                let h2 = attn_sublayer(&mut g, &mut binder, h1, config.heads, &format!("{block}.attn"), rate, &mut dropout_rng)?;
                let h3 = conv_module(&mut g, &mut binder, h2, config.conv_kernel, &format!("{block}.conv"), rate, &mut dropout_rng)?;
                half_ffn(&mut g, &mut binder, h3, &format!("{block}.ffn2"), rate, &mut dropout_rng)?
            }
            Family::Bendr | Family::EegConformer => {
                let h1 = attn_sublayer(&mut g, &mut binder, h, config.heads, &format!("{block}.attn"), rate, &mut dropout_rng)?;
                full_ffn(&mut g, &mut binder, h1, &format!("{block}.ffn"), rate, &mut dropout_rng)?
            }
        };
        block_outputs.push(h);
    }

    let gain = binder.leaf(&mut g, "final_ln.g")?;
    let bias = binder.leaf(&mut g, "final_ln.b")?;
    let normed = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;

    // ── head: fully connected, projection, log softmax ──────────────
    let fcw = binder.leaf(&mut g, "head.fc.w")?;
    let fcb = binder.leaf(&mut g, "head.fc.b")?;
    let fc0 = g.matmul(normed, fcw)?;
    let fc1 = g.add_row(fc0, fcb)?;
    let fc = g.swish(fc1)?;
    let pw = binder.leaf(&mut g, "head.proj.w")?;
    let pb = binder.leaf(&mut g, "head.proj.b")?;
    let logits0 = g.matmul(fc, pw)?;
    let logits = g.add_row(logits0, pb)?;
    let lattice_node = g.log_softmax(logits)?;

    Ok(Forwarded {
        graph: g,
        latent,
        block_outputs,
        logits,
        lattice_node,
        bindings: binder.bindings,
    })
}

fn family_forward(
    family: Family,
    config: &EncoderConfig,
    params: &ParamSet,
    recording: &RawRecording,
    opts: ForwardOpts<'_>,
) -> Result<Forwarded> {
    if config.family != family {
        return Err(Error::Config(format!(
            "config is for {}, not {family}",
            config.family
        )));
    }
    forward(config, params, recording, opts)
}

/// Conformer trunk: convolutional subsampling, conformer blocks, FC +
/// projection + log-softmax head.
pub fn conformer_forward(
    config: &EncoderConfig,
    params: &ParamSet,
    recording: &RawRecording,
    opts: ForwardOpts<'_>,
) -> Result<Forwarded> {
    family_forward(Family::Conformer, config, params, recording, opts)
}

/// BENDR-style trunk: strided-convolution downsampling stack, transformer
/// blocks, same head.
pub fn bendr_forward(
    config: &EncoderConfig,
    params: &ParamSet,
    recording: &RawRecording,
    opts: ForwardOpts<'_>,
) -> Result<Forwarded> {
    family_forward(Family::Bendr, config, params, recording, opts)
}

/// EEG-Conformer-style trunk: temporal + spatial convolution patch embedding,
/// self-attention blocks, same head.
pub fn eeg_conformer_forward(
    config: &EncoderConfig,
    params: &ParamSet,
    recording: &RawRecording,
    opts: ForwardOpts<'_>,
) -> Result<Forwarded> {
    family_forward(Family::EegConformer, config, params, recording, opts)
}

fn input_tensor(recording: &RawRecording, zscore: bool) -> Tensor {
    let t = recording.t_len();
    let c = recording.channels;
    let mut data = vec![0.0f64; t * c];
    for ch in 0..c {
        let samples = recording.channel(ch);
        let (mut shift, mut scale) = (0.0, 1.0);
        if zscore {
            let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / t as f64;
            let var = samples
                .iter()
                .map(|&v| {
                    let r = v as f64 - mean;
                    r * r
                })
                .sum::<f64>()
                / t as f64;
            shift = mean;
            scale = 1.0 / (var + 1e-8).sqrt();
        }
        for (i, &v) in samples.iter().enumerate() {
            data[i * c + ch] = (v as f64 - shift) * scale;
        }
    }
    Tensor::new(vec![t, c], data).expect("shape arithmetic")
}

fn pad_to_multiple(g: &mut Graph, x: NodeId, s: usize) -> Result<NodeId> {
    let t = g.value(x).shape()[0];
    let rem = t % s;
    if rem == 0 {
        Ok(x)
    } else {
        g.pad_rows(x, 0, s - rem)
    }
}

fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f64; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape arithmetic")
}

fn dropout(g: &mut Graph, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn layer_norm_params(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let gain = binder.leaf(g, &format!("{prefix}.ln.g"))?;
    let bias = binder.leaf(g, &format!("{prefix}.ln.b"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

fn ffn_branch(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    prefix: &str,
    rate: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let normed = layer_norm_params(g, binder, x, prefix)?;
    let w1 = binder.leaf(g, &format!("{prefix}.w1"))?;
    let b1 = binder.leaf(g, &format!("{prefix}.b1"))?;
    let w2 = binder.leaf(g, &format!("{prefix}.w2"))?;
    let b2 = binder.leaf(g, &format!("{prefix}.b2"))?;
    let out = feed_forward(g, normed, w1, b1, w2, b2)?;
    dropout(g, out, rate, rng)
}

/// x + 0.5 * ffn(LN(x)), the conformer half-step.
fn half_ffn(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    prefix: &str,
    rate: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let branch = ffn_branch(g, binder, x, prefix, rate, rng)?;
    let scaled = g.scale(branch, 0.5)?;
    g.add(x, scaled)
}

fn full_ffn(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    prefix: &str,
    rate: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let branch = ffn_branch(g, binder, x, prefix, rate, rng)?;
    g.add(x, branch)
}

fn attn_sublayer(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    heads: usize,
    prefix: &str,
    rate: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let normed = layer_norm_params(g, binder, x, prefix)?;
    let weights = binder.attention(g, prefix)?;
    let out = self_attention(g, normed, heads, &weights)?;
    let dropped = dropout(g, out, rate, rng)?;
    g.add(x, dropped)
}

/// Conformer convolution module: LN, pointwise to 2D, GLU, depthwise (same
/// padding), swish, pointwise back to D, residual.
fn conv_module(
    g: &mut Graph,
    binder: &mut Binder<'_>,
    x: NodeId,
    kernel: usize,
    prefix: &str,
    rate: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let normed = layer_norm_params(g, binder, x, prefix)?;
    let pw1w = binder.leaf(g, &format!("{prefix}.pw1.w"))?;
    let pw1b = binder.leaf(g, &format!("{prefix}.pw1.b"))?;
    let up0 = g.matmul(normed, pw1w)?;
    let up = g.add_row(up0, pw1b)?;
    let gated = g.glu(up)?;
    let padded = g.pad_rows(gated, (kernel - 1) / 2, kernel / 2)?;
    let dww = binder.leaf(g, &format!("{prefix}.dw.w"))?;
    let dwb = binder.leaf(g, &format!("{prefix}.dw.b"))?;
    let dw = g.depthwise_conv1d(padded, dww, dwb)?;
    let act = g.swish(dw)?;
    let pw2w = binder.leaf(g, &format!("{prefix}.pw2.w"))?;
    let pw2b = binder.leaf(g, &format!("{prefix}.pw2.b"))?;
    let down0 = g.matmul(act, pw2w)?;
    let down = g.add_row(down0, pw2b)?;
    let dropped = dropout(g, down, rate, rng)?;
    g.add(x, dropped)
}
