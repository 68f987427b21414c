//! Gumbel-softmax product quantizer over grouped latent slices.

use crate::numerics::{Graph, NodeId, Rng, Tensor};
use crate::{Error, Result};

/// Grouped codebook; group g owns rows g*entries .. (g+1)*entries of
/// `vectors`, each of width latent_dim / groups.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub groups: usize,
    pub entries: usize,
    pub vectors: Tensor,
    pub temperature: f64,
}

impl Codebook {
    pub fn init(groups: usize, entries: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if groups == 0 || entries == 0 || groups * entries < 2 {
            return Err(Error::Config(format!(
                "codebook needs groups * entries >= 2, got {groups} x {entries}"
            )));
        }
        if latent_dim == 0 || latent_dim % groups != 0 {
            return Err(Error::Config(format!(
                "latent dim {latent_dim} not divisible into {groups} groups"
            )));
        }
        let dg = latent_dim / groups;
        let mut rng = Rng::seed(seed);
        Ok(Codebook {
            groups,
            entries,
            vectors: Tensor::fan_in_uniform(vec![groups * entries, dg], dg, &mut rng),
            temperature: 2.0,
        })
    }

    pub fn group_dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.group_dim() * self.groups
    }

    fn check(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.vectors.shape() != [self.groups * self.entries, self.group_dim()] {
            return Err(Error::Shape(format!(
                "codebook vectors {:?} vs {} x {}",
                self.vectors.shape(),
                self.groups * self.entries,
                self.group_dim()
            )));
        }
        Ok(())
    }
}

/// Diversity penalty from mean soft usage: (GE - sum_g exp H(usage_g)) / GE.
fn diversity_from_usages(usages: &[Vec<f64>], entries: usize) -> f64 {
    let ge = (usages.len() * entries) as f64;
    let mut sum_exp_h = 0.0;
    for usage in usages {
        let h: f64 = -usage
            .iter()
            .map(|&u| if u > 0.0 { u * u.ln() } else { 0.0 })
            .sum::<f64>();
        sum_exp_h += h.exp();
    }
    (ge - sum_exp_h) / ge
}

/// Evaluation-mode quantization: hard argmax codes per group (no noise) and
/// the diversity loss from soft usages at the codebook temperature.
///
/// Training goes through [`quantize_on_graph`], which keeps the
/// straight-through estimator on the tape; `seed` drives the gumbel draw
/// there and is unused on this deterministic path.
pub fn quantize(latents: &Tensor, codebook: &Codebook, _seed: u64) -> Result<(Tensor, f64)> {
    codebook.check()?;
    let (t, d) = latents.dims2()?;
    if latents.rank() != 2 || d != codebook.latent_dim() {
        return Err(Error::Shape(format!(
            "latents {:?} vs codebook latent dim {}",
            latents.shape(),
            codebook.latent_dim()
        )));
    }
    let dg = codebook.group_dim();
    let e = codebook.entries;
    let mut codes = vec![0.0; t * d];
    let mut usages = Vec::with_capacity(codebook.groups);
    for g in 0..codebook.groups {
        let mut usage = vec![0.0f64; e];
        for row in 0..t {
            // logits: dot of the latent slice with each code vector
            let z = &latents.data()[row * d + g * dg..row * d + (g + 1) * dg];
            let mut logits = vec![0.0f64; e];
            for (ei, logit) in logits.iter_mut().enumerate() {
                let cb = &codebook.vectors.data()[(g * e + ei) * dg..(g * e + ei + 1) * dg];
                *logit = z.iter().zip(cb).map(|(a, b)| a * b).sum();
            }
            // soft usage at temperature
            let scaled: Vec<f64> = logits.iter().map(|l| l / codebook.temperature).collect();
            let lse = crate::numerics::kernels::logsumexp(&scaled);
            for (ei, s) in scaled.iter().enumerate() {
                usage[ei] += (s - lse).exp() / t as f64;
            }
            // hard code
            let best = crate::numerics::argmax_row(&logits);
            let cb = &codebook.vectors.data()[(g * e + best) * dg..(g * e + best + 1) * dg];
            codes[row * d + g * dg..row * d + (g + 1) * dg].copy_from_slice(cb);
        }
        usages.push(usage);
    }
    let diversity = diversity_from_usages(&usages, e);
    Ok((Tensor::new(vec![t, d], codes)?, diversity))
}

/// Tape-resident quantization with the straight-through estimator:
/// forward emits hard codes, backward flows through the gumbel-softmax.
/// Returns (codes node [T, D], diversity loss node, scalar).
pub fn quantize_on_graph(
    g: &mut Graph,
    latents: NodeId,
    vectors: NodeId,
    groups: usize,
    entries: usize,
    temperature: f64,
    seed: u64,
) -> Result<(NodeId, NodeId)> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let (t, d) = g.value(latents).dims2()?;
    if d % groups != 0 {
        return Err(Error::Shape(format!(
            "latent dim {d} not divisible into {groups} groups"
        )));
    }
    let dg = d / groups;
    if g.value(vectors).shape() != [groups * entries, dg] {
        return Err(Error::Shape(format!(
            "codebook vectors {:?} vs {} x {dg}",
            g.value(vectors).shape(),
            groups * entries
        )));
    }
    let mut rng = Rng::seed(seed);
    let mut code_parts = Vec::with_capacity(groups);
    let mut sum_exp_h: Option<NodeId> = None;
    for grp in 0..groups {
        let zg = g.slice_cols(latents, grp * dg, (grp + 1) * dg)?;
        let rows: Vec<usize> = (grp * entries..(grp + 1) * entries).collect();
        let cbg = g.gather_rows(vectors, &rows)?;
        let cbg_t = g.transpose(cbg)?;
        let logits = g.matmul(zg, cbg_t)?;
        let noise_data: Vec<f64> = (0..t * entries).map(|_| rng.gumbel()).collect();
        let noise = g.constant(Tensor::new(vec![t, entries], noise_data)?);
        let noisy = g.add(logits, noise)?;
        let scaled = g.scale(noisy, 1.0 / temperature)?;
        let soft = g.softmax(scaled)?;
        let hard = g.hard_one_hot(scaled)?;
        // straight-through: forward hard, backward soft
        let frozen = g.stop_grad(soft)?;
        let residual = g.sub(soft, frozen)?;
        let st = g.add(hard, residual)?;
        code_parts.push(g.matmul(st, cbg)?);

        // diversity term from this group's mean soft usage
        let usage = g.col_means(soft)?;
        let ln_u = g.ln(usage)?;
        let ulnu = g.mul(usage, ln_u)?;
        let neg_h = g.sum(ulnu)?;
        let h = g.scale(neg_h, -1.0)?;
        let exp_h = g.exp(h)?;
        sum_exp_h = Some(match sum_exp_h {
            Some(acc) => g.add(acc, exp_h)?,
            None => exp_h,
        });
    }
    let codes = g.concat_cols(&code_parts)?;
    let ge = (groups * entries) as f64;
    let sum_exp = sum_exp_h.expect("at least one group");
    let neg_sum = g.scale(sum_exp, -1.0)?;
    let ge_leaf = g.constant(Tensor::scalar(ge));
    let numer = g.add(ge_leaf, neg_sum)?;
    let diversity = g.scale(numer, 1.0 / ge)?;
    Ok((codes, diversity))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_usage_has_zero_diversity_loss() {
        let usages = vec![vec![0.25; 4], vec![0.25; 4]];
        assert!(diversity_from_usages(&usages, 4).abs() < 1e-12);
    }

    #[test]
    fn collapsed_usage_costs_e_minus_one_over_e() {
        let e = 4;
        let mut usage = vec![0.0; e];
        usage[0] = 1.0;
        let usages = vec![usage.clone(), usage];
        let loss = diversity_from_usages(&usages, e);
        assert!((loss - 3.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn near_zero_temperature_codes_equal_argmax_oracle() {
        let mut rng = Rng::seed(5);
        let d = 8;
        let mut cb = Codebook::init(2, 4, d, 1).unwrap();
        cb.temperature = 1e-6;
        let latents = Tensor::fan_in_uniform(vec![6, d], d, &mut rng);
        let (codes, _) = quantize(&latents, &cb, 0).unwrap();
        // oracle: direct argmax over dot products per group
        let dg = d / 2;
        for row in 0..6 {
            for g in 0..2 {
                let z = &latents.data()[row * d + g * dg..row * d + (g + 1) * dg];
                let mut best = 0;
                let mut best_dot = f64::NEG_INFINITY;
                for e in 0..4 {
                    let cbv = &cb.vectors.data()[(g * 4 + e) * dg..(g * 4 + e + 1) * dg];
                    let dot: f64 = z.iter().zip(cbv).map(|(a, b)| a * b).sum();
                    if dot > best_dot {
                        best_dot = dot;
                        best = e;
                    }
                }
                let expect = &cb.vectors.data()[(g * 4 + best) * dg..(g * 4 + best + 1) * dg];
                assert_eq!(&codes.data()[row * d + g * dg..row * d + (g + 1) * dg], expect);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let cb = Codebook::init(2, 4, 8, 1).unwrap();
        let latents = Tensor::zeros(vec![3, 6]);
        assert!(matches!(
            quantize(&latents, &cb, 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn graph_quantizer_forward_is_hard_and_grads_flow() {
        let mut g = Graph::new();
        let mut rng = Rng::seed(2);
        let d = 4;
        let latents = g.leaf(Tensor::fan_in_uniform(vec![5, d], d, &mut rng).with_grad());
        let vectors = g.leaf(Tensor::fan_in_uniform(vec![2 * 3, 2], 2, &mut rng).with_grad());
        let (codes, diversity) = quantize_on_graph(&mut g, latents, vectors, 2, 3, 1.0, 7).unwrap();
        // forward: each code slice equals some codebook row
        let cv = g.value(vectors).data().to_vec();
        let code_vals = g.value(codes).data();
        for row in 0..5 {
            for grp in 0..2 {
                let slice = &code_vals[row * d + grp * 2..row * d + (grp + 1) * 2];
                let found = (0..3).any(|e| {
                    let r = &cv[(grp * 3 + e) * 2..(grp * 3 + e + 1) * 2];
                    r == slice
                });
                assert!(found, "code row {row} group {grp} not a codebook row");
            }
        }
        // diversity in [0, 1) and differentiable into latents and vectors
        let div_val = g.value(diversity).data()[0];
        assert!((0.0..1.0).contains(&div_val));
        let total0 = g.sum(codes).unwrap();
        let scaled = g.scale(diversity, 0.5).unwrap();
        let loss = g.add(total0, scaled).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(latents).is_some());
        assert!(grads.get(vectors).is_some());
        let gl = grads.get(latents).unwrap();
        assert!(gl.data().iter().any(|&v| v != 0.0));
    }
}
