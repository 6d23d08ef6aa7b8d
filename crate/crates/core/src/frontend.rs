//! Convolutional frontends mapping audio to latent sequences.
//!
//! Two variants share the output contract `[T', output_dim]`:
//!
//! - `Wav`: the 7-layer 1-D CNN stack (strides 5,2,2,2,2,2,2; kernels
//!   10,3,3,3,3,2,2; total stride 320, receptive field 400 samples).
//! - `Fbank`: two 2-D convolutions over (time, frequency), kernel 3,
//!   stride 2, padding 1, so the temporal resolution drops by exactly a
//!   factor of 4 under ceiling division.
//!
//! Each conv layer is followed by a channel layer norm and GELU; the
//! flattened features pass through a final layer norm and a linear
//! projection to `output_dim`.

use rand_chacha::ChaCha8Rng;

use crate::audio::{FbankMatrix, Waveform, NUM_MELS};
use crate::error::{Error, Result};
use crate::params::{self, ParameterSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// (kernel, stride) per layer of the waveform stack.
pub const WAV_LAYERS: [(usize, usize); 7] =
    [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];

pub const WAV_MIN_SAMPLES: usize = 400;
pub const FBANK_MIN_FRAMES: usize = 4;
const FBANK_KERNEL: usize = 3;
const FBANK_STRIDE: usize = 2;
const FBANK_PAD: usize = 1;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendKind {
    Wav,
    Fbank,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontendConfig {
    pub kind: FrontendKind,
    pub channels: usize,
    pub output_dim: usize,
}

impl FrontendConfig {
    /// Production waveform frontend: 512 channels into a 768-dim space.
    pub fn wav() -> Self {
        FrontendConfig {
            kind: FrontendKind::Wav,
            channels: 512,
            output_dim: 768,
        }
    }

    /// Production FBANK frontend: 32 channels into a 768-dim space.
    pub fn fbank() -> Self {
        FrontendConfig {
            kind: FrontendKind::Fbank,
            channels: 32,
            output_dim: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.output_dim == 0 {
            return Err(Error::Config("frontend dims must be positive".into()));
        }
        Ok(())
    }

    /// Width of the flattened per-frame feature before the projection.
    pub fn flat_dim(&self) -> usize {
        match self.kind {
            FrontendKind::Wav => self.channels,
            FrontendKind::Fbank => self.channels * (NUM_MELS / 4),
        }
    }
}

/// Output of a frontend: `states` is `[T_padded, output_dim]` and the
/// first `true_len` rows are valid.
#[derive(Clone)]
pub struct LatentSequence<S: Scalar> {
    pub states: Tensor<S>,
    pub true_len: usize,
}

/// Register frontend parameters under `frontend.*`.
pub fn init_frontend_params<S: Scalar>(
    cfg: &FrontendConfig,
    rng: &mut ChaCha8Rng,
    ps: &mut ParameterSet<S>,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    match cfg.kind {
        FrontendKind::Wav => {
            for (i, (k, _)) in WAV_LAYERS.iter().enumerate() {
                let c_in = if i == 0 { 1 } else { c };
                ps.insert(
                    &format!("frontend.layer{i}.weight"),
                    params::xavier_uniform(rng, &[c, c_in, *k], c_in * k, c * k),
                )?;
                ps.insert(&format!("frontend.layer{i}.bias"), params::zeros_param(&[c]))?;
                ps.insert(
                    &format!("frontend.layer{i}.norm.weight"),
                    params::ones_param(&[c]),
                )?;
                ps.insert(
                    &format!("frontend.layer{i}.norm.bias"),
                    params::zeros_param(&[c]),
                )?;
            }
        }
        FrontendKind::Fbank => {
            for i in 0..2 {
                let c_in = if i == 0 { 1 } else { c };
                let fan = FBANK_KERNEL * FBANK_KERNEL;
                ps.insert(
                    &format!("frontend.layer{i}.weight"),
                    params::xavier_uniform(rng, &[c, c_in, FBANK_KERNEL, FBANK_KERNEL], c_in * fan, c * fan),
                )?;
                ps.insert(&format!("frontend.layer{i}.bias"), params::zeros_param(&[c]))?;
                ps.insert(
                    &format!("frontend.layer{i}.norm.weight"),
                    params::ones_param(&[c]),
                )?;
                ps.insert(
                    &format!("frontend.layer{i}.norm.bias"),
                    params::zeros_param(&[c]),
                )?;
            }
        }
    }
    let flat = cfg.flat_dim();
    ps.insert("frontend.norm.weight", params::ones_param(&[flat]))?;
    ps.insert("frontend.norm.bias", params::zeros_param(&[flat]))?;
    ps.insert(
        "frontend.proj.weight",
        params::xavier_uniform(rng, &[flat, cfg.output_dim], flat, cfg.output_dim),
    )?;
    ps.insert("frontend.proj.bias", params::zeros_param(&[cfg.output_dim]))?;
    Ok(())
}

/// Pure arithmetic mirror of the encode ops, used for padding masks and
/// CTC admissibility checks.
pub fn frontend_output_length(cfg: &FrontendConfig, input_len: usize) -> Result<usize> {
    if input_len == 0 {
        return Err(Error::Shape("frontend input length must be positive".into()));
    }
    match cfg.kind {
        FrontendKind::Wav => {
            if input_len < WAV_MIN_SAMPLES {
                return Err(Error::Shape(format!(
                    "waveform of {input_len} samples is below the {WAV_MIN_SAMPLES}-sample receptive field"
                )));
            }
            let mut len = input_len;
            for (k, s) in WAV_LAYERS {
                len = (len - k) / s + 1;
            }
            Ok(len)
        }
        FrontendKind::Fbank => {
            if input_len < FBANK_MIN_FRAMES {
                return Err(Error::Shape(format!(
                    "FBANK input of {input_len} frames is below the minimum of {FBANK_MIN_FRAMES}"
                )));
            }
            let mut len = input_len;
            for _ in 0..2 {
                len = (len + 2 * FBANK_PAD - FBANK_KERNEL) / FBANK_STRIDE + 1;
            }
            Ok(len)
        }
    }
}

/// Channel layer norm for `[channels, positions]` data: normalize across
/// channels at each position.
fn channel_norm_gelu<S: Scalar>(
    h: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Tensor<S> {
    h.transpose2()
        .layer_norm_rows(gamma, beta, LN_EPS)
        .gelu()
        .transpose2()
}

/// Encode `true_len` samples of a `[1, n]` waveform tensor.
pub fn encode_wav<S: Scalar>(
    x: &Tensor<S>,
    true_len: usize,
    cfg: &FrontendConfig,
    ps: &ParameterSet<S>,
) -> Result<LatentSequence<S>> {
    if cfg.kind != FrontendKind::Wav {
        return Err(Error::Config("encode_wav with a non-WAV frontend config".into()));
    }
    assert_eq!(x.rows(), 1, "waveform tensor must be [1, n]");
    if true_len > x.cols() {
        return Err(Error::Shape("true_len exceeds input length".into()));
    }
    let out_len = frontend_output_length(cfg, true_len)?;
    // Appended padding never reaches the convs: truncate to true_len.
    let mut h = if true_len < x.cols() {
        x.slice_cols(0..true_len)
    } else {
        x.clone()
    };
    for (i, (_k, s)) in WAV_LAYERS.iter().enumerate() {
        let w = ps.get(&format!("frontend.layer{i}.weight"))?;
        let b = ps.get(&format!("frontend.layer{i}.bias"))?;
        h = h.conv1d(w, Some(b), *s, 0, 1);
        let gamma = ps.get(&format!("frontend.layer{i}.norm.weight"))?;
        let beta = ps.get(&format!("frontend.layer{i}.norm.bias"))?;
        h = channel_norm_gelu(&h, gamma, beta);
    }
    // [channels, T'] -> [T', channels] -> norm -> proj
    let feats = h.transpose2();
    debug_assert_eq!(feats.rows(), out_len);
    let normed = feats.layer_norm_rows(
        ps.get("frontend.norm.weight")?,
        ps.get("frontend.norm.bias")?,
        LN_EPS,
    );
    let states = normed.linear(ps.get("frontend.proj.weight")?, Some(ps.get("frontend.proj.bias")?));
    Ok(LatentSequence {
        states,
        true_len: out_len,
    })
}

/// Encode `true_len` frames of a `[t, 80]` FBANK tensor.
pub fn encode_fbank<S: Scalar>(
    x: &Tensor<S>,
    true_len: usize,
    cfg: &FrontendConfig,
    ps: &ParameterSet<S>,
) -> Result<LatentSequence<S>> {
    if cfg.kind != FrontendKind::Fbank {
        return Err(Error::Config("encode_fbank with a non-FBANK frontend config".into()));
    }
    assert_eq!(x.cols(), NUM_MELS, "FBANK tensor must be [t, {NUM_MELS}]");
    if true_len > x.rows() {
        return Err(Error::Shape("true_len exceeds input frames".into()));
    }
    let out_len = frontend_output_length(cfg, true_len)?;
    let trimmed = if true_len < x.rows() {
        x.slice_rows(0..true_len)
    } else {
        x.clone()
    };

    let mut h = trimmed.reshape(&[1, true_len, NUM_MELS]);
    let mut cur_h = true_len;
    let mut cur_w = NUM_MELS;
    for i in 0..2 {
        let w = ps.get(&format!("frontend.layer{i}.weight"))?;
        let b = ps.get(&format!("frontend.layer{i}.bias"))?;
        h = h.conv2d(w, Some(b), (FBANK_STRIDE, FBANK_STRIDE), (FBANK_PAD, FBANK_PAD));
        cur_h = (cur_h + 2 * FBANK_PAD - FBANK_KERNEL) / FBANK_STRIDE + 1;
        cur_w = (cur_w + 2 * FBANK_PAD - FBANK_KERNEL) / FBANK_STRIDE + 1;
        let gamma = ps.get(&format!("frontend.layer{i}.norm.weight"))?;
        let beta = ps.get(&format!("frontend.layer{i}.norm.bias"))?;
        // [c, h, w] -> [c, h*w] -> channel norm -> back
        let flat = h.reshape(&[cfg.channels, cur_h * cur_w]);
        h = channel_norm_gelu(&flat, gamma, beta).reshape(&[cfg.channels, cur_h, cur_w]);
    }
    debug_assert_eq!(cur_h, out_len);

    // [c, t', f'] -> [t', c*f'] with channel-major feature order.
    let c = cfg.channels;
    let mut index = Vec::with_capacity(out_len * c * cur_w);
    for t in 0..out_len {
        for ch in 0..c {
            for f in 0..cur_w {
                index.push(ch * out_len * cur_w + t * cur_w + f);
            }
        }
    }
    let feats = h.gather(&[out_len, c * cur_w], &index);
    let normed = feats.layer_norm_rows(
        ps.get("frontend.norm.weight")?,
        ps.get("frontend.norm.bias")?,
        LN_EPS,
    );
    let states = normed.linear(ps.get("frontend.proj.weight")?, Some(ps.get("frontend.proj.bias")?));
    Ok(LatentSequence {
        states,
        true_len: out_len,
    })
}

/// Dispatch on the configured frontend kind.
pub fn encode<S: Scalar>(
    x: &Tensor<S>,
    true_len: usize,
    cfg: &FrontendConfig,
    ps: &ParameterSet<S>,
) -> Result<LatentSequence<S>> {
    match cfg.kind {
        FrontendKind::Wav => encode_wav(x, true_len, cfg, ps),
        FrontendKind::Fbank => encode_fbank(x, true_len, cfg, ps),
    }
}

pub fn wave_to_tensor<S: Scalar>(w: &Waveform) -> Tensor<S> {
    let data = w.samples().iter().map(|&v| S::from_f64(v)).collect();
    Tensor::constant(&[1, w.len()], data)
}

pub fn fbank_to_tensor<S: Scalar>(f: &FbankMatrix) -> Tensor<S> {
    let data = f.data().iter().map(|&v| S::from_f64(v)).collect();
    Tensor::constant(&[f.frames(), f.dim()], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_wav_cfg() -> FrontendConfig {
        FrontendConfig {
            kind: FrontendKind::Wav,
            channels: 8,
            output_dim: 16,
        }
    }

    fn toy_fbank_cfg() -> FrontendConfig {
        FrontendConfig {
            kind: FrontendKind::Fbank,
            channels: 4,
            output_dim: 16,
        }
    }

    fn init<S: Scalar>(cfg: &FrontendConfig, seed: u64) -> ParameterSet<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        init_frontend_params(cfg, &mut rng, &mut ps).unwrap();
        ps
    }

    fn random_input(seed: u64, dims: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::constant(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Per-layer length oracle, folded independently of the library code.
    fn wav_len_oracle(mut n: usize) -> usize {
        for (k, s) in WAV_LAYERS {
            n = (n - k) / s + 1;
        }
        n
    }

    #[test]
    fn wav_16000_samples_give_49_frames() {
        assert_eq!(wav_len_oracle(16_000), 49);
        let cfg = toy_wav_cfg();
        let ps = init::<f64>(&cfg, 0);
        let x = random_input(1, &[1, 16_000]);
        let z = encode_wav(&x, 16_000, &cfg, &ps).unwrap();
        assert_eq!(z.states.dims(), &[49, 16]);
        assert_eq!(z.true_len, 49);
        assert_eq!(frontend_output_length(&cfg, 16_000).unwrap(), 49);
    }

    #[test]
    fn wav_receptive_field_minimum_gives_one_frame() {
        let cfg = toy_wav_cfg();
        let ps = init::<f64>(&cfg, 0);
        let x = random_input(2, &[1, 400]);
        let z = encode_wav(&x, 400, &cfg, &ps).unwrap();
        assert_eq!(z.states.dims(), &[1, 16]);
        assert!(encode_wav(&x, 399, &cfg, &ps).is_err());
    }

    #[test]
    fn doubling_wav_length_roughly_doubles_frames() {
        // T'(n) = floor((n-400)/320) + 1, so with x = (n-400)/320 the
        // difference T'(2n) - 2*T'(n) = floor(2x + 1.25) - 2*floor(x) - 1,
        // which lies in {0, 1, 2} depending on frac(x).
        let cfg = toy_wav_cfg();
        for n in [800usize, 1600, 4000, 9000, 16_000] {
            let t1 = frontend_output_length(&cfg, n).unwrap() as i64;
            let t2 = frontend_output_length(&cfg, 2 * n).unwrap() as i64;
            let d = t2 - 2 * t1;
            assert!((0..=2).contains(&d), "n={n}: {t1} -> {t2}");
        }
    }

    #[test]
    fn fbank_production_shape_contract() {
        // T=100 -> T'=25 with 32*20=640 flattened dims projected to 768.
        let cfg = FrontendConfig::fbank();
        assert_eq!(cfg.flat_dim(), 640);
        let ps = init::<f64>(&cfg, 3);
        let x = random_input(4, &[100, 80]);
        let z = encode_fbank(&x, 100, &cfg, &ps).unwrap();
        assert_eq!(z.states.dims(), &[25, 768]);
    }

    #[test]
    fn fbank_minimum_and_error_cases() {
        let cfg = toy_fbank_cfg();
        let ps = init::<f64>(&cfg, 5);
        let x = random_input(6, &[4, 80]);
        let z = encode_fbank(&x, 4, &cfg, &ps).unwrap();
        assert_eq!(z.states.rows(), 1);
        assert!(encode_fbank(&x, 3, &cfg, &ps).is_err());
        assert!(frontend_output_length(&cfg, 0).is_err());
    }

    #[test]
    fn fbank_factor_of_four_is_ceiling_division() {
        let cfg = toy_fbank_cfg();
        for t in 4..200 {
            let out = frontend_output_length(&cfg, t).unwrap();
            assert_eq!(out, t.div_ceil(4), "T={t}");
        }
        assert_eq!(frontend_output_length(&cfg, 8750).unwrap(), 2188);
    }

    #[test]
    fn zero_input_zero_biases_give_zero_output() {
        let cfg = toy_fbank_cfg();
        let ps = init::<f64>(&cfg, 7);
        let x = Tensor::constant(&[12, 80], vec![0.0; 12 * 80]);
        let z = encode_fbank(&x, 12, &cfg, &ps).unwrap();
        assert!(z.states.data().iter().all(|&v| v == 0.0));

        let wcfg = toy_wav_cfg();
        let wps = init::<f64>(&wcfg, 8);
        let xw = Tensor::constant(&[1, 800], vec![0.0; 800]);
        let zw = encode_wav(&xw, 800, &wcfg, &wps).unwrap();
        assert!(zw.states.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_matches_encode_for_random_lengths() {
        let wav_cfg = toy_wav_cfg();
        let wav_ps = init::<f64>(&wav_cfg, 11);
        let fb_cfg = toy_fbank_cfg();
        let fb_ps = init::<f64>(&fb_cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let n = rng.random_range(400..3000);
            let x = random_input(n as u64, &[1, n]);
            let z = encode_wav(&x, n, &wav_cfg, &wav_ps).unwrap();
            assert_eq!(z.states.rows(), frontend_output_length(&wav_cfg, n).unwrap());

            let t = rng.random_range(4..120);
            let f = random_input(t as u64, &[t, 80]);
            let z = encode_fbank(&f, t, &fb_cfg, &fb_ps).unwrap();
            assert_eq!(z.states.rows(), frontend_output_length(&fb_cfg, t).unwrap());
        }
    }

    #[test]
    fn appended_padding_never_changes_valid_outputs() {
        let cfg = toy_fbank_cfg();
        let ps = init::<f64>(&cfg, 21);
        let x = random_input(22, &[40, 80]);
        let clean = encode_fbank(&x, 40, &cfg, &ps).unwrap();
        // Append garbage rows; the first 40 stay the true input.
        let junk = random_input(23, &[13, 80]);
        let padded = Tensor::concat_rows(&[x.clone(), junk]);
        let from_padded = encode_fbank(&padded, 40, &cfg, &ps).unwrap();
        assert_eq!(clean.states.data(), from_padded.states.data());

        let wcfg = toy_wav_cfg();
        let wps = init::<f64>(&wcfg, 24);
        let xw = random_input(25, &[1, 1000]);
        let clean = encode_wav(&xw, 1000, &wcfg, &wps).unwrap();
        let junkw = random_input(26, &[1, 137]);
        let padded = Tensor::concat_cols(&[xw.clone(), junkw]);
        let from_padded = encode_wav(&padded, 1000, &wcfg, &wps).unwrap();
        assert_eq!(clean.states.data(), from_padded.states.data());
    }
}
