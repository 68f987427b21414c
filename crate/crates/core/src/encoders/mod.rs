//! Encoder families: Conformer, BENDR-style, and EEG-Conformer-style trunks,
//! each ending in the same fully-connected + projection + log-softmax head
//! that emits a [`LogProbLattice`](crate::ctc::LogProbLattice).

mod forward;

pub use forward::{
    bendr_forward, conformer_forward, eeg_conformer_forward, forward, ForwardOpts, Forwarded,
    MaskSpec,
};

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamSet, Rng, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Conformer,
    Bendr,
    EegConformer,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Conformer => write!(f, "conformer"),
            Family::Bendr => write!(f, "bendr"),
            Family::EegConformer => write!(f, "eeg_conformer"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub family: Family,
    pub blocks: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub subsample_factor: usize,
    /// Input channel count the first layer is shaped for.
    pub in_channels: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            family: Family::Conformer,
            blocks: 2,
            model_dim: 64,
            heads: 4,
            conv_kernel: 15,
            subsample_factor: 4,
            in_channels: 8,
            vocab_size: 29,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("blocks must be >= 1".into()));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("conv_kernel must be >= 1".into()));
        }
        if self.subsample_factor == 0 {
            return Err(Error::Config("subsample_factor must be >= 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Output frames for a given input length: ceil(t_in / subsample_factor).
    pub fn output_len(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.subsample_factor)
    }

    /// BENDR downsampling stack: the subsample factor split into small strides.
    pub(crate) fn stride_stack(&self) -> Vec<usize> {
        let mut s = self.subsample_factor;
        let mut factors = Vec::new();
        for p in [2usize, 3] {
            while s % p == 0 {
                factors.push(p);
                s /= p;
            }
        }
        if s > 1 || factors.is_empty() {
            factors.push(s.max(1));
        }
        factors
    }
}

/// Named tensor collection shaped by an [`EncoderConfig`], plus the seed that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub values: ParamSet,
    pub seed: u64,
}

enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

/// Every parameter name and shape, derivable from the config alone, so
/// checkpoint compatibility is checkable without data.
pub fn expected_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    shape_table(config)
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect()
}

fn shape_table(config: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.model_dim;
    let c = config.in_channels;
    let v = config.vocab_size;
    let k = config.conv_kernel;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();

    match config.family {
        Family::Conformer => {
            let s = config.subsample_factor;
            out.push(("front.conv.w".into(), vec![d, c, s], Init::FanIn(c * s)));
            out.push(("front.conv.b".into(), vec![d], Init::Zeros));
        }
        Family::Bendr => {
            let mut ch_in = c;
            for (i, f) in config.stride_stack().into_iter().enumerate() {
                out.push((
                    format!("front.conv{i}.w"),
                    vec![d, ch_in, f],
                    Init::FanIn(ch_in * f),
                ));
                out.push((format!("front.conv{i}.b"), vec![d], Init::Zeros));
                out.push((format!("front.ln{i}.g"), vec![d], Init::Ones));
                out.push((format!("front.ln{i}.b"), vec![d], Init::Zeros));
                ch_in = d;
            }
        }
        Family::EegConformer => {
            out.push(("front.temporal.w".into(), vec![d, c, k], Init::FanIn(c * k)));
            out.push(("front.temporal.b".into(), vec![d], Init::Zeros));
            out.push(("front.spatial.w".into(), vec![d, d], Init::FanIn(d)));
            out.push(("front.spatial.b".into(), vec![d], Init::Zeros));
        }
    }

    let ffn = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        out.push((format!("{prefix}.ln.g"), vec![d], Init::Ones));
        out.push((format!("{prefix}.ln.b"), vec![d], Init::Zeros));
        out.push((format!("{prefix}.w1"), vec![d, 4 * d], Init::FanIn(d)));
        out.push((format!("{prefix}.b1"), vec![4 * d], Init::Zeros));
        out.push((format!("{prefix}.w2"), vec![4 * d, d], Init::FanIn(4 * d)));
        out.push((format!("{prefix}.b2"), vec![d], Init::Zeros));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        out.push((format!("{prefix}.ln.g"), vec![d], Init::Ones));
        out.push((format!("{prefix}.ln.b"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d], Init::FanIn(d)));
        }
        for b in ["bq", "bv", "bo"] {
            out.push((format!("{prefix}.{b}"), vec![d], Init::Zeros));
        }
    };

    for i in 0..config.blocks {
        let block = format!("block{i:02}");
        match config.family {
            Family::Conformer => {
                ffn(&mut out, &format!("{block}.ffn1"));
                attn(&mut out, &format!("{block}.attn"));
                let cm = format!("{block}.conv");
                out.push((format!("{cm}.ln.g"), vec![d], Init::Ones));
                out.push((format!("{cm}.ln.b"), vec![d], Init::Zeros));
                out.push((format!("{cm}.pw1.w"), vec![d, 2 * d], Init::FanIn(d)));
                out.push((format!("{cm}.pw1.b"), vec![2 * d], Init::Zeros));
                out.push((format!("{cm}.dw.w"), vec![d, k], Init::FanIn(k)));
                out.push((format!("{cm}.dw.b"), vec![d], Init::Zeros));
                out.push((format!("{cm}.pw2.w"), vec![d, d], Init::FanIn(d)));
                out.push((format!("{cm}.pw2.b"), vec![d], Init::Zeros));
                ffn(&mut out, &format!("{block}.ffn2"));
            }
            Family::Bendr | Family::EegConformer => {
                attn(&mut out, &format!("{block}.attn"));
                ffn(&mut out, &format!("{block}.ffn"));
            }
        }
    }

    out.push(("final_ln.g".into(), vec![d], Init::Ones));
    out.push(("final_ln.b".into(), vec![d], Init::Zeros));
    out.push(("head.fc.w".into(), vec![d, d], Init::FanIn(d)));
    out.push(("head.fc.b".into(), vec![d], Init::Zeros));
    out.push(("head.proj.w".into(), vec![d, v], Init::FanIn(d)));
    out.push(("head.proj.b".into(), vec![v], Init::Zeros));
    out
}

/// Deterministic fan-in-scaled initialization for (config, seed).
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = Rng::seed(seed);
    let mut values = ParamSet::new();
    for (name, shape, init) in shape_table(config) {
        let tensor = match init {
            Init::FanIn(fan) => Tensor::fan_in_uniform(shape, fan, &mut rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        values.insert(name, tensor);
    }
    Ok(EncoderParams { values, seed })
}

/// Total scalar parameter count implied by the config.
pub fn param_count(config: &EncoderConfig) -> usize {
    shape_table(config)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// Check a parameter set against the config-derived shapes; entries under
/// `pretrain.` are auxiliary and ignored.
pub fn check_compatible(config: &EncoderConfig, params: &ParamSet) -> Result<()> {
    for (name, shape) in expected_shapes(config) {
        let tensor = params.get(&name)?;
        if tensor.shape() != shape {
            return Err(Error::Shape(format!(
                "parameter '{name}': checkpoint has {:?}, config wants {shape:?}",
                tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Closed-form multiply-accumulate estimate for one forward pass.
/// Monotone in blocks and input length.
pub fn count_flops(config: &EncoderConfig, t_in: usize) -> u64 {
    if t_in == 0 {
        return 0;
    }
    let d = config.model_dim as u64;
    let c = config.in_channels as u64;
    let v = config.vocab_size as u64;
    let k = config.conv_kernel as u64;
    let t1 = config.output_len(t_in) as u64;

    let front = match config.family {
        Family::Conformer => t1 * d * c * config.subsample_factor as u64 * 2,
        Family::Bendr => {
            let mut acc = 0u64;
            let mut t = t_in as u64;
            let mut ch = c;
            for f in config.stride_stack() {
                t = t.div_ceil(f as u64);
                acc += t * d * ch * f as u64 * 2;
                ch = d;
            }
            acc
        }
        Family::EegConformer => t_in as u64 * d * c * k * 2 + t_in as u64 * d * d * 2,
    };

    let ffn = 2 * t1 * d * 4 * d * 2;
    let attn = 4 * t1 * d * d * 2 + 2 * t1 * t1 * d * 2;
    let conv_module = t1 * d * (2 * d + k + d) * 2;
    let per_block = match config.family {
        Family::Conformer => 2 * ffn + attn + conv_module,
        Family::Bendr | Family::EegConformer => ffn + attn,
    };

    let head = t1 * (d * d + d * v) * 2;
    front + config.blocks as u64 * per_block + head
}
