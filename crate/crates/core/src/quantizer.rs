//! Gumbel-softmax product quantization of latent frames into discrete
//! targets, plus the codebook diversity regularizer.
//!
//! Per frame and group, projected logits are perturbed with Gumbel noise
//! and pushed through a temperature softmax. Hard mode selects the argmax
//! one-hot with a straight-through gradient equal to the soft path's;
//! chosen codebook entries are concatenated across groups and linearly
//! projected to the target space.
//!
//! Noise is counter-based: the stream for frame `t`, group `g` depends
//! only on `(seed, t, g)`, so any frame can be replayed in isolation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{self, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizerConfig {
    pub input_dim: usize,
    pub groups: usize,
    pub entries: usize,
    pub entry_dim: usize,
    pub target_dim: usize,
}

impl QuantizerConfig {
    /// BASE-scale setup: 2 groups of 320 entries, 128-dim entries,
    /// 256-dim targets.
    pub fn base(input_dim: usize) -> Self {
        QuantizerConfig {
            input_dim,
            groups: 2,
            entries: 320,
            entry_dim: 128,
            target_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.groups == 0
            || self.entries < 2
            || self.entry_dim == 0
            || self.target_dim == 0
        {
            return Err(Error::Config("quantizer dims must be positive (>=2 entries)".into()));
        }
        Ok(())
    }

    pub fn logit_dim(&self) -> usize {
        self.groups * self.entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    Hard,
    Soft,
}

pub struct QuantizedSequence<S: Scalar> {
    /// `[T, target_dim]` quantized targets.
    pub targets: Tensor<S>,
    /// Chosen entry per frame and group.
    pub indices: Vec<Vec<usize>>,
    /// Noise-free softmax of the logits, `[T, groups*entries]`; feeds the
    /// diversity loss.
    pub soft_probs: Tensor<S>,
    /// `sum_g exp(H(mean_t soft_g))`, a scalar diagnostic.
    pub prob_perplexity: f64,
}

/// Register quantizer parameters under `quantizer.*`.
pub fn init_quantizer_params<S: Scalar>(
    cfg: &QuantizerConfig,
    rng: &mut ChaCha8Rng,
    ps: &mut ParameterSet<S>,
) -> Result<()> {
    cfg.validate()?;
    ps.insert(
        "quantizer.logit_proj.weight",
        params::xavier_uniform(rng, &[cfg.input_dim, cfg.logit_dim()], cfg.input_dim, cfg.logit_dim()),
    )?;
    ps.insert(
        "quantizer.logit_proj.bias",
        params::zeros_param(&[cfg.logit_dim()]),
    )?;
    ps.insert(
        "quantizer.codebook",
        params::uniform(rng, &[cfg.logit_dim(), cfg.entry_dim], -0.5, 0.5),
    )?;
    ps.insert(
        "quantizer.out_proj.weight",
        params::xavier_uniform(
            rng,
            &[cfg.groups * cfg.entry_dim, cfg.target_dim],
            cfg.groups * cfg.entry_dim,
            cfg.target_dim,
        ),
    )?;
    ps.insert(
        "quantizer.out_proj.bias",
        params::zeros_param(&[cfg.target_dim]),
    )?;
    Ok(())
}

/// Gumbel noise for one (frame, group) pair.
fn gumbel_noise<S: Scalar>(seed: u64, frame: usize, group: usize, n: usize) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix3(seed, frame as u64, group as u64));
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(0.0f64..1.0).max(1e-12);
            S::from_f64(-((-u.ln()).ln()))
        })
        .collect()
}

pub fn quantize<S: Scalar>(
    z: &Tensor<S>,
    cfg: &QuantizerConfig,
    ps: &ParameterSet<S>,
    temperature: f64,
    mode: QuantizeMode,
    seed: u64,
) -> Result<QuantizedSequence<S>> {
    cfg.validate()?;
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "quantizer temperature must be positive, got {temperature}"
        )));
    }
    if z.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "quantizer input width {} != configured {}",
            z.cols(),
            cfg.input_dim
        )));
    }
    let t = z.rows();
    let v = cfg.entries;

    let logits = z.linear(
        ps.get("quantizer.logit_proj.weight")?,
        Some(ps.get("quantizer.logit_proj.bias")?),
    );
    let codebook = ps.get("quantizer.codebook")?;

    let mut group_codes = Vec::with_capacity(cfg.groups);
    let mut group_soft = Vec::with_capacity(cfg.groups);
    let mut indices = vec![Vec::with_capacity(cfg.groups); t];
    for g in 0..cfg.groups {
        let slice = logits.slice_cols(g * v..(g + 1) * v);
        let mut noise = Vec::with_capacity(t * v);
        for frame in 0..t {
            noise.extend(gumbel_noise::<S>(seed, frame, g, v));
        }
        let noisy = slice
            .add(&Tensor::constant(&[t, v], noise))
            .scale(1.0 / temperature);
        let soft_noisy = noisy.softmax_rows(None);
        let selection = match mode {
            QuantizeMode::Hard => soft_noisy.straight_through_hard_rows(),
            QuantizeMode::Soft => soft_noisy.clone(),
        };
        // Chosen entry per frame (argmax of the noisy distribution).
        {
            let d = soft_noisy.data();
            for (frame, idx) in indices.iter_mut().enumerate() {
                let row = &d[frame * v..(frame + 1) * v];
                let mut best = 0;
                for (j, &val) in row.iter().enumerate() {
                    if val > row[best] {
                        best = j;
                    }
                }
                idx.push(best);
            }
        }
        let entries = codebook.slice_rows(g * v..(g + 1) * v);
        group_codes.push(selection.matmul(&entries));
        group_soft.push(slice.softmax_rows(None));
    }

    let concat = Tensor::concat_cols(&group_codes);
    let targets = concat.linear(
        ps.get("quantizer.out_proj.weight")?,
        Some(ps.get("quantizer.out_proj.bias")?),
    );
    let soft_probs = Tensor::concat_cols(&group_soft);

    // Diagnostic perplexity of the averaged noise-free distributions.
    let mut perp = 0.0f64;
    {
        let d = soft_probs.data();
        let cols = cfg.logit_dim();
        for g in 0..cfg.groups {
            let mut avg = vec![0.0f64; v];
            for frame in 0..t {
                for j in 0..v {
                    avg[j] += d[frame * cols + g * v + j].to_f64();
                }
            }
            let mut h = 0.0;
            for a in avg.iter_mut() {
                *a /= t as f64;
                if *a > 0.0 {
                    h -= *a * a.ln();
                }
            }
            perp += h.exp();
        }
    }

    Ok(QuantizedSequence {
        targets,
        indices,
        soft_probs,
        prob_perplexity: perp,
    })
}

/// Diversity regularizer `(G*V - sum_g exp(H(mean_t p_g))) / (G*V)`.
/// Differentiable through the soft distributions; zero when every group's
/// averaged distribution is uniform.
pub fn diversity_loss<S: Scalar>(soft_probs: &Tensor<S>, groups: usize) -> Result<Tensor<S>> {
    let cols = soft_probs.cols();
    if groups == 0 || cols % groups != 0 {
        return Err(Error::Shape(format!(
            "soft prob width {cols} not divisible by {groups} groups"
        )));
    }
    let v = cols / groups;
    // Rows must be distributions per group.
    {
        let d = soft_probs.data();
        for frame in 0..soft_probs.rows() {
            for g in 0..groups {
                let mut sum = 0.0f64;
                for j in 0..v {
                    let p = d[frame * cols + g * v + j].to_f64();
                    if p < -1e-9 {
                        return Err(Error::Numeric("negative probability in diversity input".into()));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Numeric(format!(
                        "group distribution not normalized (frame {frame}, group {g}: sum {sum})"
                    )));
                }
            }
        }
    }
    let avg = soft_probs.mean_rows(); // [1, G*V]
    let mut perplexities = Vec::with_capacity(groups);
    for g in 0..groups {
        let slice = avg.slice_cols(g * v..(g + 1) * v);
        let entropy = slice.xlogx().sum_all().neg();
        perplexities.push(entropy.exp());
    }
    let total = Tensor::add_n(&perplexities).reshape(&[1]);
    let gv = (groups * v) as f64;
    Ok(total.scale(-1.0 / gv).add_scalar(1.0))
}

/// Temperature annealing: `max(2.0 * 0.999995^step, 0.5)`.
pub fn anneal_temperature(step: u64) -> f64 {
    (2.0 * 0.999995f64.powf(step as f64)).max(0.5)
}
