//! FBANK feature extraction and global cepstral mean-variance
//! normalization.
//!
//! 80 log-mel energies per frame, 25 ms Hann window, 10 ms shift,
//! pre-emphasis 0.97, HTK mel scale spanning 20 Hz - 7600 Hz, log floor
//! 1e-10, no dithering. Everything is deterministic.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400; // 25 ms
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const NUM_MELS: usize = 80;
pub const FFT_SIZE: usize = 512;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const VAR_FLOOR: f64 = 1e-8;

/// Mono 16 kHz waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate must be {SAMPLE_RATE} Hz, got {sample_rate}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::Audio(format!("sample out of [-1, 1]: {bad}")));
        }
        Ok(Waveform { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// T x 80 matrix of log-mel energies, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FbankMatrix {
    frames: usize,
    data: Vec<f64>,
}

impl FbankMatrix {
    pub fn from_vec(frames: usize, data: Vec<f64>) -> Result<Self> {
        if frames * NUM_MELS != data.len() {
            return Err(Error::Shape(format!(
                "fbank data length {} does not match {frames} x {NUM_MELS}",
                data.len()
            )));
        }
        Ok(FbankMatrix { frames, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        NUM_MELS
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * NUM_MELS..(t + 1) * NUM_MELS]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Frame count for an `n`-sample waveform: `1 + floor((n-400)/160)`.
/// `None` when the waveform is shorter than one window.
pub fn fbank_frame_count(n_samples: usize) -> Option<usize> {
    if n_samples < FRAME_LEN {
        None
    } else {
        Some(1 + (n_samples - FRAME_LEN) / FRAME_SHIFT)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Reusable extractor holding the FFT plan, window, and mel filters.
pub struct FbankExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // Per filter: (first_bin, weights over consecutive bins).
    filters: Vec<(usize, Vec<f64>)>,
}

impl Default for FbankExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FbankExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window: Vec<f64> = (0..FRAME_LEN)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LEN - 1) as f64).cos()
            })
            .collect();

        // Triangular filters with edges equally spaced on the mel scale.
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let n_bins = FFT_SIZE / 2 + 1;
        let bin_mels: Vec<f64> = (0..n_bins)
            .map(|k| hz_to_mel(k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64))
            .collect();
        let edge = |i: usize| mel_lo + (mel_hi - mel_lo) * i as f64 / (NUM_MELS + 1) as f64;
        let mut filters = Vec::with_capacity(NUM_MELS);
        for f in 0..NUM_MELS {
            let (left, center, right) = (edge(f), edge(f + 1), edge(f + 2));
            let mut first = None;
            let mut weights = Vec::new();
            for (k, &bm) in bin_mels.iter().enumerate() {
                if bm <= left || bm >= right {
                    continue;
                }
                let w = if bm <= center {
                    (bm - left) / (center - left)
                } else {
                    (right - bm) / (right - center)
                };
                if first.is_none() {
                    first = Some(k);
                }
                weights.push(w);
            }
            filters.push((first.unwrap_or(0), weights));
        }
        FbankExtractor {
            fft,
            window,
            filters,
        }
    }

    pub fn extract(&self, w: &Waveform) -> Result<FbankMatrix> {
        let n = w.len();
        let frames = fbank_frame_count(n).ok_or_else(|| {
            Error::Audio(format!(
                "waveform of {n} samples is shorter than one {FRAME_LEN}-sample window"
            ))
        })?;

        // Global pre-emphasis; y[0] keeps the Kaldi-style self-subtraction.
        let x = w.samples();
        let mut y = vec![0.0f64; n];
        y[0] = x[0] - PRE_EMPHASIS * x[0];
        for i in 1..n {
            y[i] = x[i] - PRE_EMPHASIS * x[i - 1];
        }

        let mut out = vec![0.0f64; frames * NUM_MELS];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
        for t in 0..frames {
            let start = t * FRAME_SHIFT;
            for i in 0..FRAME_LEN {
                buf[i] = Complex::new(y[start + i] * self.window[i], 0.0);
            }
            for c in buf[FRAME_LEN..].iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                *p = buf[k].norm_sqr();
            }
            for (f, (first, weights)) in self.filters.iter().enumerate() {
                let mut e = 0.0;
                for (off, &wgt) in weights.iter().enumerate() {
                    e += wgt * power[first + off];
                }
                out[t * NUM_MELS + f] = e.max(LOG_FLOOR).ln();
            }
        }
        FbankMatrix::from_vec(frames, out)
    }
}

/// One-shot convenience wrapper.
pub fn extract_fbank(w: &Waveform) -> Result<FbankMatrix> {
    FbankExtractor::new().extract(w)
}

// ---------------------------------------------------------------------------
// CMVN
// ---------------------------------------------------------------------------

/// Global per-dimension mean/variance over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub frame_count: u64,
}

/// Welford accumulator; partial accumulators merge associatively, so
/// per-utterance work can run in parallel and be combined in index order.
#[derive(Debug, Clone, Default)]
pub struct CmvnAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CmvnAccumulator {
    pub fn new() -> Self {
        CmvnAccumulator {
            count: 0,
            mean: vec![0.0; NUM_MELS],
            m2: vec![0.0; NUM_MELS],
        }
    }

    pub fn add_matrix(&mut self, f: &FbankMatrix) {
        for t in 0..f.frames() {
            self.count += 1;
            let inv = 1.0 / self.count as f64;
            for (d, &v) in f.row(t).iter().enumerate() {
                let delta = v - self.mean[d];
                self.mean[d] += delta * inv;
                self.m2[d] += delta * (v - self.mean[d]);
            }
        }
    }

    pub fn merge(mut self, other: CmvnAccumulator) -> CmvnAccumulator {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let n1 = self.count as f64;
        let n2 = other.count as f64;
        let total = n1 + n2;
        for d in 0..NUM_MELS {
            let delta = other.mean[d] - self.mean[d];
            self.mean[d] += delta * n2 / total;
            self.m2[d] += other.m2[d] + delta * delta * n1 * n2 / total;
        }
        self.count += other.count;
        self
    }

    pub fn finalize(self) -> Result<CmvnStats> {
        if self.count == 0 {
            return Err(Error::Audio("CMVN over an empty corpus".into()));
        }
        let var = self
            .m2
            .iter()
            .map(|&m| (m / self.count as f64).max(VAR_FLOOR))
            .collect();
        Ok(CmvnStats {
            mean: self.mean,
            var,
            frame_count: self.count,
        })
    }
}

pub fn estimate_cmvn<'a>(mats: impl IntoIterator<Item = &'a FbankMatrix>) -> Result<CmvnStats> {
    let mut acc = CmvnAccumulator::new();
    for m in mats {
        acc.add_matrix(m);
    }
    acc.finalize()
}

pub fn apply_cmvn(f: &FbankMatrix, s: &CmvnStats) -> Result<FbankMatrix> {
    if s.mean.len() != f.dim() || s.var.len() != f.dim() {
        return Err(Error::Shape(format!(
            "CMVN dimension {} does not match feature dimension {}",
            s.mean.len(),
            f.dim()
        )));
    }
    let inv_std: Vec<f64> = s.var.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut out = f.data().to_vec();
    for t in 0..f.frames() {
        for d in 0..NUM_MELS {
            out[t * NUM_MELS + d] = (out[t * NUM_MELS + d] - s.mean[d]) * inv_std[d];
        }
    }
    FbankMatrix::from_vec(f.frames(), out)
}

/// Inverse of [`apply_cmvn`] given the same stats.
pub fn unapply_cmvn(f: &FbankMatrix, s: &CmvnStats) -> Result<FbankMatrix> {
    if s.mean.len() != f.dim() {
        return Err(Error::Shape("CMVN dimension mismatch".into()));
    }
    let mut out = f.data().to_vec();
    for t in 0..f.frames() {
        for d in 0..NUM_MELS {
            out[t * NUM_MELS + d] = out[t * NUM_MELS + d] * s.var[d].sqrt() + s.mean[d];
        }
    }
    FbankMatrix::from_vec(f.frames(), out)
}

impl CmvnStats {
    /// Text format: line 1 = means, line 2 = variances, line 3 = frame
    /// count; 17 significant digits so values round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (i, m) in self.mean.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&format!("{m:.16e}"));
        }
        s.push('\n');
        for (i, v) in self.var.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&format!("{v:.16e}"));
        }
        s.push('\n');
        s.push_str(&format!("{}\n", self.frame_count));
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let parse_row = |line: Option<&str>, what: &str, lineno: usize| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: lineno,
                msg: format!("missing {what} line"),
            })?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    file: path.display().to_string(),
                    line: lineno,
                    msg: format!("bad {what} value: {e}"),
                })?;
            if vals.len() != NUM_MELS {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: lineno,
                    msg: format!("expected {NUM_MELS} {what} values, got {}", vals.len()),
                });
            }
            Ok(vals)
        };
        let mean = parse_row(lines.next(), "mean", 1)?;
        let var = parse_row(lines.next(), "variance", 2)?;
        let count_line = lines.next().ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: 3,
            msg: "missing frame count line".into(),
        })?;
        let frame_count: u64 = count_line.trim().parse().map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: 3,
            msg: format!("bad frame count: {e}"),
        })?;
        if frame_count == 0 {
            return Err(Error::Audio("CMVN stats with zero frames".into()));
        }
        Ok(CmvnStats {
            mean,
            var,
            frame_count,
        })
    }
}

// ---------------------------------------------------------------------------
// 16-bit PCM WAV IO
// ---------------------------------------------------------------------------

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.len() as u32;
    let data_bytes = n * 2;
    let mut out = Vec::with_capacity(44 + data_bytes as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Audio(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt_ok = false;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("truncated fmt chunk"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(bad("only 16-bit PCM mono is supported"));
                }
                if rate != SAMPLE_RATE {
                    return Err(bad(&format!("expected {SAMPLE_RATE} Hz, got {rate}")));
                }
                fmt_ok = true;
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    if !fmt_ok {
        return Err(bad("missing fmt chunk"));
    }
    let body = data.ok_or_else(|| bad("missing data chunk"))?;
    let samples: Vec<f64> = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    Waveform::new(samples, SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_wave(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = extract_fbank(&random_wave(1, 16_000)).unwrap();
        assert_eq!(f.frames(), 98);
        assert_eq!(f.dim(), 80);
    }

    #[test]
    fn exactly_one_window_gives_one_frame() {
        let f = extract_fbank(&random_wave(2, 400)).unwrap();
        assert_eq!(f.frames(), 1);
    }

    #[test]
    fn too_short_waveform_is_an_error() {
        let w = random_wave(3, 399);
        assert!(extract_fbank(&w).is_err());
    }

    #[test]
    fn zero_signal_hits_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; 1000], SAMPLE_RATE).unwrap();
        let f = extract_fbank(&w).unwrap();
        let expect = LOG_FLOOR.ln();
        assert!(f.data().iter().all(|&v| v == expect));
    }

    #[test]
    fn shifting_by_one_hop_shifts_frames() {
        let w = random_wave(4, 4000);
        let full = extract_fbank(&w).unwrap();
        let shifted = Waveform::new(w.samples()[FRAME_SHIFT..].to_vec(), SAMPLE_RATE).unwrap();
        let sh = extract_fbank(&shifted).unwrap();
        assert_eq!(sh.frames(), full.frames() - 1);
        // Interior frames (t >= 1) are unaffected by the pre-emphasis edge.
        for t in 1..sh.frames() {
            for d in 0..80 {
                let a = full.row(t + 1)[d];
                let b = sh.row(t)[d];
                assert!((a - b).abs() < 1e-6, "frame {t} dim {d}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn frame_count_formula_holds(n in 400usize..40_000) {
            // Oracle: count full windows directly.
            let mut count = 0;
            let mut start = 0;
            while start + FRAME_LEN <= n {
                count += 1;
                start += FRAME_SHIFT;
            }
            prop_assert_eq!(fbank_frame_count(n), Some(count));
        }
    }

    #[test]
    fn frame_count_matches_extraction() {
        for n in [400usize, 431, 560, 799, 800, 16_000] {
            let f = extract_fbank(&random_wave(n as u64, n)).unwrap();
            assert_eq!(Some(f.frames()), fbank_frame_count(n));
        }
    }

    #[test]
    fn cmvn_constant_matrix() {
        let f = FbankMatrix::from_vec(3, vec![2.5; 3 * 80]).unwrap();
        let s = estimate_cmvn([&f]).unwrap();
        assert!(s.mean.iter().all(|&m| (m - 2.5).abs() < 1e-12));
        assert!(s.var.iter().all(|&v| v == VAR_FLOOR));
        assert_eq!(s.frame_count, 3);
    }

    #[test]
    fn cmvn_two_frames_mean_one_var_one() {
        let a = FbankMatrix::from_vec(1, vec![0.0; 80]).unwrap();
        let b = FbankMatrix::from_vec(1, vec![2.0; 80]).unwrap();
        let s = estimate_cmvn([&a, &b]).unwrap();
        assert!(s.mean.iter().all(|&m| (m - 1.0).abs() < 1e-12));
        assert!(s.var.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cmvn_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mats: Vec<FbankMatrix> = (0..10)
            .map(|_| {
                let frames = rng.random_range(50..150);
                let data = (0..frames * 80)
                    .map(|_| rng.random_range(-5.0..5.0))
                    .collect();
                FbankMatrix::from_vec(frames, data).unwrap()
            })
            .collect();
        let s = estimate_cmvn(mats.iter()).unwrap();

        // Brute-force two-pass oracle.
        let total: usize = mats.iter().map(|m| m.frames()).sum();
        let mut mean = vec![0.0f64; 80];
        for m in &mats {
            for t in 0..m.frames() {
                for d in 0..80 {
                    mean[d] += m.row(t)[d];
                }
            }
        }
        for v in mean.iter_mut() {
            *v /= total as f64;
        }
        let mut var = vec![0.0f64; 80];
        for m in &mats {
            for t in 0..m.frames() {
                for d in 0..80 {
                    let d2 = m.row(t)[d] - mean[d];
                    var[d] += d2 * d2;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= total as f64;
        }
        for d in 0..80 {
            assert!((s.mean[d] - mean[d]).abs() < 1e-10);
            assert!((s.var[d] - var[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn cmvn_merge_equals_sequential() {
        let a = extract_fbank(&random_wave(10, 3000)).unwrap();
        let b = extract_fbank(&random_wave(11, 5000)).unwrap();
        let mut seq = CmvnAccumulator::new();
        seq.add_matrix(&a);
        seq.add_matrix(&b);
        let mut pa = CmvnAccumulator::new();
        pa.add_matrix(&a);
        let mut pb = CmvnAccumulator::new();
        pb.add_matrix(&b);
        let merged = pa.merge(pb).finalize().unwrap();
        let seq = seq.finalize().unwrap();
        for d in 0..80 {
            assert!((merged.mean[d] - seq.mean[d]).abs() < 1e-10);
            assert!((merged.var[d] - seq.var[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn apply_own_stats_standardizes() {
        let f = extract_fbank(&random_wave(20, 8000)).unwrap();
        let s = estimate_cmvn([&f]).unwrap();
        let norm = apply_cmvn(&f, &s).unwrap();
        for d in 0..80 {
            let vals: Vec<f64> = (0..norm.frames()).map(|t| norm.row(t)[d]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "dim {d} var {var}");
        }
    }

    #[test]
    fn identity_stats_are_identity() {
        let f = extract_fbank(&random_wave(21, 2000)).unwrap();
        let s = CmvnStats {
            mean: vec![0.0; 80],
            var: vec![1.0; 80],
            frame_count: 1,
        };
        let out = apply_cmvn(&f, &s).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn apply_then_unapply_recovers_input() {
        let f = extract_fbank(&random_wave(22, 6000)).unwrap();
        let s = estimate_cmvn([&f]).unwrap();
        let back = unapply_cmvn(&apply_cmvn(&f, &s).unwrap(), &s).unwrap();
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cmvn_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cmvn.txt");
        let f = extract_fbank(&random_wave(23, 4000)).unwrap();
        let s = estimate_cmvn([&f]).unwrap();
        s.save(&path).unwrap();
        let loaded = CmvnStats::load(&path).unwrap();
        assert_eq!(loaded.frame_count, s.frame_count);
        for d in 0..80 {
            assert_eq!(loaded.mean[d].to_bits(), s.mean[d].to_bits());
            assert_eq!(loaded.var[d].to_bits(), s.var[d].to_bits());
        }
    }

    #[test]
    fn wav_roundtrip_preserves_quantized_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = random_wave(30, 1234);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-9);
        }
    }

    #[test]
    fn wrong_rate_is_rejected() {
        assert!(Waveform::new(vec![0.0; 100], 8000).is_err());
    }
}
