//! Context encoders: stacked Transformer or Conformer blocks over latent
//! sequences.
//!
//! Both block kinds are pre-norm and purely residual, so a block with
//! zeroed branch output weights is exactly the identity. The Transformer
//! path adds a grouped convolutional positional embedding before block 1;
//! the Conformer path relies on Transformer-XL style relative-position
//! attention (content-content plus content-position scores with learned
//! per-head biases) and a depthwise convolution module.
//!
//! Padding contract: keys beyond `true_len` receive no attention weight
//! and rows are zeroed before any temporal convolution, so appending
//! padding never changes outputs at valid positions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frontend::LatentSequence;
use crate::params::{self, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const POS_CONV_KERNEL: usize = 128;
pub const POS_CONV_GROUPS: usize = 16;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// BASE-scale Transformer: 12 blocks, 768 dims, 12 heads, 3072 FFN.
    pub fn transformer_base() -> Self {
        EncoderConfig {
            kind: EncoderKind::Transformer,
            blocks: 12,
            dim: 768,
            heads: 12,
            ffn_dim: 3072,
            conv_kernel: 31,
            dropout: 0.1,
        }
    }

    /// BASE-scale Conformer: adds the kernel-31 convolution module.
    pub fn conformer_base() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conformer,
            ..Self::transformer_base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config("encoder dim must be even".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conformer conv kernel must be odd".into()));
        }
        if self.kind == EncoderKind::Transformer && self.dim % POS_CONV_GROUPS != 0 {
            return Err(Error::Config(format!(
                "transformer dim {} must be divisible by the {POS_CONV_GROUPS} positional conv groups",
                self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training-time dropout context; absent in evaluation and oracle runs.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub p: f64,
}

fn apply_dropout<S: Scalar>(x: &Tensor<S>, ctx: &mut Option<Dropout<'_>>) -> Tensor<S> {
    match ctx {
        Some(d) if d.p > 0.0 => {
            let keep = 1.0 - d.p;
            let scale = S::from_f64(1.0 / keep);
            let mask: Vec<S> = (0..x.len())
                .map(|_| {
                    if d.rng.random_range(0.0..1.0) < keep {
                        scale
                    } else {
                        S::ZERO
                    }
                })
                .collect();
            x.mul(&Tensor::constant(x.dims(), mask))
        }
        _ => x.clone(),
    }
}

/// Zero every row at or beyond `true_len` (mask-aware convolutions).
fn zero_padded_rows<S: Scalar>(x: &Tensor<S>, true_len: usize) -> Tensor<S> {
    let (t, d) = (x.rows(), x.cols());
    if true_len >= t {
        return x.clone();
    }
    let mut mask = vec![S::ONE; t * d];
    for v in mask[true_len * d..].iter_mut() {
        *v = S::ZERO;
    }
    x.mul(&Tensor::constant(&[t, d], mask))
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn init_linear<S: Scalar>(
    ps: &mut ParameterSet<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    ps.insert(
        &format!("{name}.weight"),
        params::xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
    )?;
    ps.insert(&format!("{name}.bias"), params::zeros_param(&[d_out]))
}

fn init_norm<S: Scalar>(ps: &mut ParameterSet<S>, name: &str, d: usize) -> Result<()> {
    ps.insert(&format!("{name}.weight"), params::ones_param(&[d]))?;
    ps.insert(&format!("{name}.bias"), params::zeros_param(&[d]))
}

/// Register encoder parameters under `encoder.*`.
pub fn init_encoder_params<S: Scalar>(
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
    ps: &mut ParameterSet<S>,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    ps.insert("encoder.mask_embed", params::uniform(rng, &[1, d], -0.1, 0.1))?;
    if cfg.kind == EncoderKind::Transformer {
        ps.insert(
            "encoder.pos_conv.weight",
            params::xavier_uniform(
                rng,
                &[d, d / POS_CONV_GROUPS, POS_CONV_KERNEL],
                d / POS_CONV_GROUPS * POS_CONV_KERNEL,
                d * POS_CONV_KERNEL / POS_CONV_GROUPS,
            ),
        )?;
        ps.insert("encoder.pos_conv.bias", params::zeros_param(&[d]))?;
    }
    for l in 0..cfg.blocks {
        let p = format!("encoder.block{l}");
        match cfg.kind {
            EncoderKind::Transformer => {
                init_norm(ps, &format!("{p}.attn.norm"), d)?;
                for part in ["q", "k", "v", "out"] {
                    init_linear(ps, rng, &format!("{p}.attn.{part}"), d, d)?;
                }
                init_norm(ps, &format!("{p}.ffn.norm"), d)?;
                init_linear(ps, rng, &format!("{p}.ffn.w1"), d, cfg.ffn_dim)?;
                init_linear(ps, rng, &format!("{p}.ffn.w2"), cfg.ffn_dim, d)?;
            }
            EncoderKind::Conformer => {
                for ffn in ["ffn1", "ffn2"] {
                    init_norm(ps, &format!("{p}.{ffn}.norm"), d)?;
                    init_linear(ps, rng, &format!("{p}.{ffn}.w1"), d, cfg.ffn_dim)?;
                    init_linear(ps, rng, &format!("{p}.{ffn}.w2"), cfg.ffn_dim, d)?;
                }
                init_norm(ps, &format!("{p}.attn.norm"), d)?;
                for part in ["q", "k", "v", "out"] {
                    init_linear(ps, rng, &format!("{p}.attn.{part}"), d, d)?;
                }
                ps.insert(
                    &format!("{p}.attn.pos.weight"),
                    params::xavier_uniform(rng, &[d, d], d, d),
                )?;
                ps.insert(
                    &format!("{p}.attn.pos_bias_u"),
                    params::uniform(rng, &[d], -0.05, 0.05),
                )?;
                ps.insert(
                    &format!("{p}.attn.pos_bias_v"),
                    params::uniform(rng, &[d], -0.05, 0.05),
                )?;
                init_norm(ps, &format!("{p}.conv.norm"), d)?;
                init_linear(ps, rng, &format!("{p}.conv.pw1"), d, 2 * d)?;
                ps.insert(
                    &format!("{p}.conv.dw.weight"),
                    params::xavier_uniform(rng, &[d, 1, cfg.conv_kernel], cfg.conv_kernel, cfg.conv_kernel),
                )?;
                ps.insert(&format!("{p}.conv.dw.bias"), params::zeros_param(&[d]))?;
                init_norm(ps, &format!("{p}.conv.ln"), d)?;
                init_linear(ps, rng, &format!("{p}.conv.pw2"), d, d)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

fn split_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Vec<Tensor<S>> {
    let dk = x.cols() / heads;
    (0..heads).map(|h| x.slice_cols(h * dk..(h + 1) * dk)).collect()
}

/// Plain scaled dot-product self-attention over a valid key prefix.
fn standard_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    valid_keys: usize,
) -> Tensor<S> {
    let t = q.rows();
    let dk = q.cols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let valid = vec![valid_keys.min(t); t];
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in split_heads(q, heads)
        .iter()
        .zip(split_heads(k, heads).iter())
        .zip(split_heads(v, heads).iter())
    {
        let scores = qh.matmul_nt(kh).scale(scale);
        let probs = scores.softmax_rows(Some(&valid));
        outs.push(probs.matmul(vh));
    }
    Tensor::concat_cols(&outs)
}

/// Projected relative-position parameters for one attention call.
pub struct RelAttnParams<'a, S: Scalar> {
    /// `[dim, dim]` projection applied to the sinusoidal offset table.
    pub pos_proj: &'a Tensor<S>,
    /// Global content bias, `[dim]` (u in Transformer-XL).
    pub bias_u: &'a Tensor<S>,
    /// Global position bias, `[dim]` (v in Transformer-XL).
    pub bias_v: &'a Tensor<S>,
}

pub struct AttnOutput<S: Scalar> {
    pub states: Tensor<S>,
    /// Post-softmax attention probabilities, one `[T, T]` tensor per head.
    pub probs: Vec<Tensor<S>>,
}

/// Sinusoidal embedding of signed offsets, one row per offset.
fn sinusoid_table<S: Scalar>(offsets: &[i64], dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(offsets.len() * dim);
    for &o in offsets {
        for m in 0..dim / 2 {
            let denom = 10_000f64.powf(2.0 * m as f64 / dim as f64);
            let angle = o as f64 / denom;
            data.push(S::from_f64(angle.sin()));
            data.push(S::from_f64(angle.cos()));
        }
    }
    Tensor::constant(&[offsets.len(), dim], data)
}

/// Transformer-XL style relative-position attention.
///
/// Scores combine a content-content term `(q_i + u) . k_j` and a
/// content-position term `(q_i + v) . p(i - j)` where `p` projects a
/// sinusoidal embedding of the signed offset; only position differences
/// enter, so shifting all positions by a constant cannot change the
/// output.
pub fn relative_position_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    valid_keys: usize,
    rel: &RelAttnParams<'_, S>,
    query_positions: &[usize],
    key_positions: &[usize],
) -> Result<AttnOutput<S>> {
    let (tq, d) = (q.rows(), q.cols());
    let tk = k.rows();
    if query_positions.len() != tq || key_positions.len() != tk {
        return Err(Error::Shape("relative attention: position count mismatch".into()));
    }
    if d % heads != 0 {
        return Err(Error::Shape("relative attention: dim not divisible by heads".into()));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    // Offset table covering every (i, j) difference actually used.
    let mut offset_index: BTreeMap<i64, usize> = BTreeMap::new();
    for &qp in query_positions {
        for &kp in key_positions {
            let o = qp as i64 - kp as i64;
            let next = offset_index.len();
            offset_index.entry(o).or_insert(next);
        }
    }
    let offsets: Vec<i64> = offset_index.keys().copied().collect();
    // BTreeMap iteration re-sorted the keys; rebuild the index map to row
    // numbers in that sorted order.
    let offset_row: BTreeMap<i64, usize> =
        offsets.iter().enumerate().map(|(i, &o)| (o, i)).collect();
    let table = sinusoid_table::<S>(&offsets, d);
    let projected = table.matmul(rel.pos_proj); // [n_off, d]

    let q_u = q.row_bias_add(rel.bias_u);
    let q_v = q.row_bias_add(rel.bias_v);
    let valid = vec![valid_keys.min(tk); tq];

    // Gather map aligning the per-offset scores to (i, j) pairs.
    let mut bd_index = Vec::with_capacity(tq * tk);
    for &qp in query_positions {
        for &kp in key_positions {
            let o = qp as i64 - kp as i64;
            bd_index.push(offset_row[&o]);
        }
    }

    let k_heads = split_heads(k, heads);
    let v_heads = split_heads(v, heads);
    let qu_heads = split_heads(&q_u, heads);
    let qv_heads = split_heads(&q_v, heads);
    let p_heads = split_heads(&projected, heads);

    let n_off = offsets.len();
    let mut outs = Vec::with_capacity(heads);
    let mut probs_all = Vec::with_capacity(heads);
    for h in 0..heads {
        let ac = qu_heads[h].matmul_nt(&k_heads[h]); // [tq, tk]
        let bd_all = qv_heads[h].matmul_nt(&p_heads[h]); // [tq, n_off]
        let mut index = Vec::with_capacity(tq * tk);
        for i in 0..tq {
            for j in 0..tk {
                index.push(i * n_off + bd_index[i * tk + j]);
            }
        }
        let bd = bd_all.gather(&[tq, tk], &index);
        let scores = ac.add(&bd).scale(scale);
        let probs = scores.softmax_rows(Some(&valid));
        outs.push(probs.matmul(&v_heads[h]));
        probs_all.push(probs);
    }
    Ok(AttnOutput {
        states: Tensor::concat_cols(&outs),
        probs: probs_all,
    })
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

fn norm<S: Scalar>(x: &Tensor<S>, ps: &ParameterSet<S>, name: &str) -> Result<Tensor<S>> {
    Ok(x.layer_norm_rows(
        ps.get(&format!("{name}.weight"))?,
        ps.get(&format!("{name}.bias"))?,
        LN_EPS,
    ))
}

fn linear<S: Scalar>(x: &Tensor<S>, ps: &ParameterSet<S>, name: &str) -> Result<Tensor<S>> {
    Ok(x.linear(
        ps.get(&format!("{name}.weight"))?,
        Some(ps.get(&format!("{name}.bias"))?),
    ))
}

/// Pre-norm Transformer block: `h + Attn(LN(h))` then `h + FFN(LN(h))`.
pub fn transformer_block<S: Scalar>(
    h: &Tensor<S>,
    true_len: usize,
    cfg: &EncoderConfig,
    ps: &ParameterSet<S>,
    block: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Tensor<S>> {
    if h.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "block input width {} != encoder dim {}",
            h.cols(),
            cfg.dim
        )));
    }
    let p = format!("encoder.block{block}");
    let a = norm(h, ps, &format!("{p}.attn.norm"))?;
    let q = linear(&a, ps, &format!("{p}.attn.q"))?;
    let k = linear(&a, ps, &format!("{p}.attn.k"))?;
    let v = linear(&a, ps, &format!("{p}.attn.v"))?;
    let att = standard_attention(&q, &k, &v, cfg.heads, true_len);
    let att = linear(&att, ps, &format!("{p}.attn.out"))?;
    let h = h.add(&apply_dropout(&att, dropout));

    let f = norm(&h, ps, &format!("{p}.ffn.norm"))?;
    let f = linear(&f, ps, &format!("{p}.ffn.w1"))?.gelu();
    let f = linear(&f, ps, &format!("{p}.ffn.w2"))?;
    Ok(h.add(&apply_dropout(&f, dropout)))
}

/// Conformer convolution module: pointwise-GLU, masked depthwise conv,
/// per-position channel norm, swish, pointwise.
fn conv_module<S: Scalar>(
    h: &Tensor<S>,
    true_len: usize,
    cfg: &EncoderConfig,
    ps: &ParameterSet<S>,
    prefix: &str,
) -> Result<Tensor<S>> {
    let x = norm(h, ps, &format!("{prefix}.norm"))?;
    let x = linear(&x, ps, &format!("{prefix}.pw1"))?;
    let d = cfg.dim;
    let a = x.slice_cols(0..d);
    let b = x.slice_cols(d..2 * d);
    let x = a.mul(&b.sigmoid());
    // Zero padded rows so the depthwise conv sees exactly the zero
    // padding it would see without appended frames.
    let x = zero_padded_rows(&x, true_len);
    let pad = (cfg.conv_kernel - 1) / 2;
    let x = x
        .transpose2()
        .conv1d(
            ps.get(&format!("{prefix}.dw.weight"))?,
            Some(ps.get(&format!("{prefix}.dw.bias"))?),
            1,
            pad,
            d,
        )
        .transpose2();
    let x = norm(&x, ps, &format!("{prefix}.ln"))?.swish();
    linear(&x, ps, &format!("{prefix}.pw2"))
}

/// Macaron Conformer block: half-FFN, relative-position attention,
/// convolution module, half-FFN, all as pre-norm residual branches.
pub fn conformer_block<S: Scalar>(
    h: &Tensor<S>,
    true_len: usize,
    cfg: &EncoderConfig,
    ps: &ParameterSet<S>,
    block: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Tensor<S>> {
    if h.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "block input width {} != encoder dim {}",
            h.cols(),
            cfg.dim
        )));
    }
    let p = format!("encoder.block{block}");
    let t = h.rows();

    let f1 = norm(h, ps, &format!("{p}.ffn1.norm"))?;
    let f1 = linear(&f1, ps, &format!("{p}.ffn1.w1"))?.swish();
    let f1 = linear(&f1, ps, &format!("{p}.ffn1.w2"))?;
    let h = h.add(&apply_dropout(&f1, dropout).scale(0.5));

    let a = norm(&h, ps, &format!("{p}.attn.norm"))?;
    let q = linear(&a, ps, &format!("{p}.attn.q"))?;
    let k = linear(&a, ps, &format!("{p}.attn.k"))?;
    let v = linear(&a, ps, &format!("{p}.attn.v"))?;
    let positions: Vec<usize> = (0..t).collect();
    let rel = RelAttnParams {
        pos_proj: ps.get(&format!("{p}.attn.pos.weight"))?,
        bias_u: ps.get(&format!("{p}.attn.pos_bias_u"))?,
        bias_v: ps.get(&format!("{p}.attn.pos_bias_v"))?,
    };
    let att = relative_position_attention(&q, &k, &v, cfg.heads, true_len, &rel, &positions, &positions)?;
    let att = linear(&att.states, ps, &format!("{p}.attn.out"))?;
    let h = h.add(&apply_dropout(&att, dropout));

    let c = conv_module(&h, true_len, cfg, ps, &format!("{p}.conv"))?;
    let h = h.add(&apply_dropout(&c, dropout));

    let f2 = norm(&h, ps, &format!("{p}.ffn2.norm"))?;
    let f2 = linear(&f2, ps, &format!("{p}.ffn2.w1"))?.swish();
    let f2 = linear(&f2, ps, &format!("{p}.ffn2.w2"))?;
    Ok(h.add(&apply_dropout(&f2, dropout).scale(0.5)))
}

// ---------------------------------------------------------------------------
// Full encoder
// ---------------------------------------------------------------------------

pub struct EncodeOutput<S: Scalar> {
    /// Final-block states, `[T, dim]`; rows past `true_len` are padding.
    pub context: Tensor<S>,
    /// Per-block outputs H^1..H^L.
    pub hidden: Vec<Tensor<S>>,
    pub true_len: usize,
}

/// Run the full encoder over a latent sequence, substituting the learned
/// mask embedding at `masked` positions before block 1.
pub fn encode<S: Scalar>(
    z: &LatentSequence<S>,
    masked: Option<&[usize]>,
    cfg: &EncoderConfig,
    ps: &ParameterSet<S>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<EncodeOutput<S>> {
    cfg.validate()?;
    let t = z.states.rows();
    let d = cfg.dim;
    if z.states.cols() != d {
        return Err(Error::Shape(format!(
            "latent width {} != encoder dim {}",
            z.states.cols(),
            d
        )));
    }

    let mut x = z.states.clone();
    if let Some(masked) = masked {
        if let Some(&bad) = masked.iter().find(|&&i| i >= z.true_len) {
            return Err(Error::Shape(format!(
                "masked position {bad} out of range (true length {})",
                z.true_len
            )));
        }
        if !masked.is_empty() {
            let mut keep = vec![S::ONE; t * d];
            let mut col = vec![S::ZERO; t];
            for &i in masked {
                col[i] = S::ONE;
                for v in keep[i * d..(i + 1) * d].iter_mut() {
                    *v = S::ZERO;
                }
            }
            let keep = Tensor::constant(&[t, d], keep);
            let col = Tensor::constant(&[t, 1], col);
            let fill = col.matmul(ps.get("encoder.mask_embed")?);
            x = x.mul(&keep).add(&fill);
        }
    }

    if cfg.kind == EncoderKind::Transformer {
        // Grouped positional convolution with even-kernel same padding:
        // conv length is T+1, trimmed back to T.
        let masked_x = zero_padded_rows(&x, z.true_len);
        let conv = masked_x
            .transpose2()
            .conv1d(
                ps.get("encoder.pos_conv.weight")?,
                Some(ps.get("encoder.pos_conv.bias")?),
                1,
                POS_CONV_KERNEL / 2,
                POS_CONV_GROUPS,
            )
            .slice_cols(0..t)
            .transpose2()
            .gelu();
        x = x.add(&conv);
    }

    let mut hidden = Vec::with_capacity(cfg.blocks);
    for l in 0..cfg.blocks {
        x = match cfg.kind {
            EncoderKind::Transformer => transformer_block(&x, z.true_len, cfg, ps, l, dropout)?,
            EncoderKind::Conformer => conformer_block(&x, z.true_len, cfg, ps, l, dropout)?,
        };
        hidden.push(x.clone());
    }
    Ok(EncodeOutput {
        context: x,
        hidden,
        true_len: z.true_len,
    })
}

/// Names of the parameters whose zeroing makes every block an identity
/// map (the residual branch output projections).
pub fn branch_output_names(cfg: &EncoderConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.blocks {
        let p = format!("encoder.block{l}");
        match cfg.kind {
            EncoderKind::Transformer => {
                names.push(format!("{p}.attn.out.weight"));
                names.push(format!("{p}.attn.out.bias"));
                names.push(format!("{p}.ffn.w2.weight"));
                names.push(format!("{p}.ffn.w2.bias"));
            }
            EncoderKind::Conformer => {
                for b in ["ffn1.w2", "attn.out", "conv.pw2", "ffn2.w2"] {
                    names.push(format!("{p}.{b}.weight"));
                    names.push(format!("{p}.{b}.bias"));
                }
            }
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg(kind: EncoderKind, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            kind,
            blocks,
            dim: 32,
            heads: 4,
            ffn_dim: 48,
            conv_kernel: 7,
            dropout: 0.0,
        }
    }

    fn init(cfg: &EncoderConfig, seed: u64) -> ParameterSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        init_encoder_params(cfg, &mut rng, &mut ps).unwrap();
        ps
    }

    fn zero_branches(ps: &mut ParameterSet<f64>, cfg: &EncoderConfig) {
        for name in branch_output_names(cfg) {
            let t = ps.get(&name).unwrap();
            let dims = t.dims().to_vec();
            let n = t.len();
            ps.replace(&name, Tensor::param(&dims, vec![0.0; n])).unwrap();
        }
    }

    fn random_states(seed: u64, t: usize, d: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::constant(&[t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zeroed_transformer_block_is_identity() {
        let cfg = toy_cfg(EncoderKind::Transformer, 1);
        let mut ps = init(&cfg, 1);
        zero_branches(&mut ps, &cfg);
        let h = random_states(2, 9, 32);
        let out = transformer_block(&h, 9, &cfg, &ps, 0, &mut None).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn zeroed_conformer_block_is_identity() {
        let cfg = toy_cfg(EncoderKind::Conformer, 1);
        let mut ps = init(&cfg, 3);
        zero_branches(&mut ps, &cfg);
        let h = random_states(4, 7, 32);
        let out = conformer_block(&h, 7, &cfg, &ps, 0, &mut None).unwrap();
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn shape_preserved_across_lengths() {
        let cfg = toy_cfg(EncoderKind::Transformer, 1);
        let ps = init(&cfg, 5);
        for t in [1usize, 2, 5, 17, 64] {
            let h = random_states(t as u64, t, 32);
            let out = transformer_block(&h, t, &cfg, &ps, 0, &mut None).unwrap();
            assert_eq!(out.dims(), &[t, 32]);
        }
    }

    #[test]
    fn transformer_block_is_permutation_equivariant() {
        // No positional information inside the block itself.
        let cfg = toy_cfg(EncoderKind::Transformer, 1);
        let ps = init(&cfg, 6);
        let h = random_states(7, 5, 32);
        let perm = [3usize, 0, 4, 1, 2];
        let mut index = Vec::new();
        for &p in &perm {
            for j in 0..32 {
                index.push(p * 32 + j);
            }
        }
        let h_perm = h.gather(&[5, 32], &index);
        let out = transformer_block(&h, 5, &cfg, &ps, 0, &mut None).unwrap();
        let out_perm = transformer_block(&h_perm, 5, &cfg, &ps, 0, &mut None).unwrap();
        let out_then_perm = out.gather(&[5, 32], &index);
        for (a, b) in out_perm.data().iter().zip(out_then_perm.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn single_key_attention_weight_is_exactly_one() {
        let cfg = toy_cfg(EncoderKind::Conformer, 1);
        let ps = init(&cfg, 8);
        let q = random_states(9, 1, 32);
        let rel = RelAttnParams {
            pos_proj: ps.get("encoder.block0.attn.pos.weight").unwrap(),
            bias_u: ps.get("encoder.block0.attn.pos_bias_u").unwrap(),
            bias_v: ps.get("encoder.block0.attn.pos_bias_v").unwrap(),
        };
        let out = relative_position_attention(&q, &q, &q, 4, 1, &rel, &[0], &[0]).unwrap();
        for probs in &out.probs {
            assert_eq!(probs.data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let cfg = toy_cfg(EncoderKind::Conformer, 1);
        let ps = init(&cfg, 10);
        let x = random_states(11, 6, 32);
        let rel = RelAttnParams {
            pos_proj: ps.get("encoder.block0.attn.pos.weight").unwrap(),
            bias_u: ps.get("encoder.block0.attn.pos_bias_u").unwrap(),
            bias_v: ps.get("encoder.block0.attn.pos_bias_v").unwrap(),
        };
        let positions: Vec<usize> = (0..6).collect();
        // Only 4 of 6 keys are valid.
        let out =
            relative_position_attention(&x, &x, &x, 4, 4, &rel, &positions, &positions).unwrap();
        for probs in &out.probs {
            let d = probs.data();
            for i in 0..4 {
                let row = &d[i * 6..(i + 1) * 6];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert_eq!(row[4], 0.0);
                assert_eq!(row[5], 0.0);
            }
        }
    }

    #[test]
    fn relative_attention_is_shift_invariant() {
        let cfg = toy_cfg(EncoderKind::Conformer, 1);
        let ps = init(&cfg, 12);
        let x = random_states(13, 4, 32);
        let rel = RelAttnParams {
            pos_proj: ps.get("encoder.block0.attn.pos.weight").unwrap(),
            bias_u: ps.get("encoder.block0.attn.pos_bias_u").unwrap(),
            bias_v: ps.get("encoder.block0.attn.pos_bias_v").unwrap(),
        };
        let base: Vec<usize> = vec![0, 1, 2, 3];
        let shifted: Vec<usize> = vec![3, 4, 5, 6];
        let a = relative_position_attention(&x, &x, &x, 4, 4, &rel, &base, &base).unwrap();
        let b = relative_position_attention(&x, &x, &x, 4, 4, &rel, &shifted, &shifted).unwrap();
        assert_eq!(a.states.data(), b.states.data());
    }

    #[test]
    fn depthwise_conv_respects_padding() {
        let cfg = toy_cfg(EncoderKind::Conformer, 1);
        let ps = init(&cfg, 14);
        let h = random_states(15, 10, 32);
        let clean = conformer_block(&h, 10, &cfg, &ps, 0, &mut None).unwrap();
        let junk = random_states(16, 4, 32);
        let padded_h = Tensor::concat_rows(&[h.clone(), junk]);
        let padded = conformer_block(&padded_h, 10, &cfg, &ps, 0, &mut None).unwrap();
        for i in 0..10 * 32 {
            assert_eq!(clean.data()[i], padded.data()[i], "elem {i}");
        }
    }

    #[test]
    fn identity_encoder_returns_input_embedding() {
        for kind in [EncoderKind::Transformer, EncoderKind::Conformer] {
            let cfg = toy_cfg(kind, 3);
            let mut ps = init(&cfg, 17);
            zero_branches(&mut ps, &cfg);
            if kind == EncoderKind::Transformer {
                // Zero the positional conv so the stack is exactly x -> x.
                let w = ps.get("encoder.pos_conv.weight").unwrap();
                let dims = w.dims().to_vec();
                let n = w.len();
                ps.replace("encoder.pos_conv.weight", Tensor::param(&dims, vec![0.0; n]))
                    .unwrap();
            }
            let z = LatentSequence {
                states: random_states(18, 6, 32),
                true_len: 6,
            };
            let out = encode(&z, None, &cfg, &ps, &mut None).unwrap();
            assert_eq!(out.context.data(), z.states.data(), "{kind:?}");
        }
    }

    #[test]
    fn zero_mask_embedding_with_identity_blocks_zeroes_masked_rows() {
        let cfg = toy_cfg(EncoderKind::Conformer, 2);
        let mut ps = init(&cfg, 19);
        zero_branches(&mut ps, &cfg);
        ps.replace("encoder.mask_embed", Tensor::param(&[1, 32], vec![0.0; 32]))
            .unwrap();
        let z = LatentSequence {
            states: random_states(20, 5, 32),
            true_len: 5,
        };
        let out = encode(&z, Some(&[1, 3]), &cfg, &ps, &mut None).unwrap();
        let d = out.context.data();
        for j in 0..32 {
            assert_eq!(d[32 + j], 0.0);
            assert_eq!(d[3 * 32 + j], 0.0);
            assert_eq!(d[j], z.states.data()[j]);
        }
    }

    #[test]
    fn masked_position_out_of_range_is_an_error() {
        let cfg = toy_cfg(EncoderKind::Transformer, 1);
        let ps = init(&cfg, 21);
        let z = LatentSequence {
            states: random_states(22, 4, 32),
            true_len: 4,
        };
        assert!(encode(&z, Some(&[4]), &cfg, &ps, &mut None).is_err());
    }

    #[test]
    fn full_encoder_gradcheck_at_toy_size() {
        // Two blocks at dim 32, FP64, against central differences.
        let cfg = toy_cfg(EncoderKind::Conformer, 2);
        let ps = init(&cfg, 40);
        let z = LatentSequence {
            states: random_states(41, 6, 32),
            true_len: 6,
        };
        let weights = random_states(42, 6, 32);
        let report = crate::gradcheck::gradient_check(
            &ps,
            |ps| {
                let out = encode(&z, Some(&[1, 4]), &cfg, ps, &mut None)?;
                Ok(out.context.mul(&weights).sum_all())
            },
            &crate::gradcheck::GradCheckOptions {
                h: 2e-6,
                max_coords_per_param: Some(128),
                coord_seed: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn base_scale_smoke_produces_finite_context() {
        // Production dims end to end: a short synthetic utterance through
        // the FBANK frontend and the 12-block 768-dim encoder.
        let wave = crate::dataio::synth_waveform(&[1, 2], 77);
        let fbank = crate::audio::extract_fbank(&wave).unwrap();
        let fcfg = crate::frontend::FrontendConfig::fbank();
        let ecfg = EncoderConfig::transformer_base();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut ps: ParameterSet<f32> = ParameterSet::new();
        crate::frontend::init_frontend_params(&fcfg, &mut rng, &mut ps).unwrap();
        init_encoder_params(&ecfg, &mut rng, &mut ps).unwrap();
        let x = crate::frontend::fbank_to_tensor::<f32>(&fbank);
        let z = crate::frontend::encode_fbank(&x, fbank.frames(), &fcfg, &ps).unwrap();
        let out = encode(&z, None, &ecfg, &ps, &mut None).unwrap();
        assert_eq!(out.context.dims(), &[fbank.frames().div_ceil(4), 768]);
        assert_eq!(out.hidden.len(), 12);
        assert!(out.context.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_padding_invariance_end_to_end() {
        for kind in [EncoderKind::Transformer, EncoderKind::Conformer] {
            let cfg = toy_cfg(kind, 2);
            let ps = init(&cfg, 23);
            let states = random_states(24, 8, 32);
            let clean = encode(
                &LatentSequence { states: states.clone(), true_len: 8 },
                Some(&[2]),
                &cfg,
                &ps,
                &mut None,
            )
            .unwrap();
            let junk = random_states(25, 5, 32);
            let padded = Tensor::concat_rows(&[states, junk]);
            let pad_out = encode(
                &LatentSequence { states: padded, true_len: 8 },
                Some(&[2]),
                &cfg,
                &ps,
                &mut None,
            )
            .unwrap();
            for i in 0..8 * 32 {
                let (a, b) = (clean.context.data()[i], pad_out.context.data()[i]);
                assert!(
                    (a - b).abs() < 1e-12,
                    "{kind:?} elem {i}: {a} vs {b}"
                );
            }
        }
    }
}
