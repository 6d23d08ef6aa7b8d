//! Python bindings for the koe speech toolkit: feature extraction,
//! CMVN, vocabularies, CTC loss/decoding, error rates, schedules, the
//! synthetic corpus generator, checkpoint averaging, and the gradient
//! check fragments.
//!
//! Build with `cargo build -p koe-py`, then import the produced cdylib
//! as `koe_py` (see `python/smoke_test.py`).

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use koe::audio;
use koe::ctc;
use koe::dataio;
use koe::fragments::Fragment;
use koe::frontend::{self, FrontendConfig};
use koe::pretrain;
use koe::quantizer;
use koe::schedule::LrSchedule;
use koe::tensor::Tensor;

fn to_py(e: koe::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> PyResult<(usize, usize, Vec<f64>)> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty matrix"));
    }
    let cols = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(PyValueError::new_err("ragged matrix"));
        }
        flat.extend_from_slice(r);
    }
    Ok((rows.len(), cols, flat))
}

/// 80-dim log-mel FBANK frames of a 16 kHz waveform.
#[pyfunction]
fn extract_fbank(samples: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let wave = audio::Waveform::new(samples, audio::SAMPLE_RATE).map_err(to_py)?;
    let f = audio::extract_fbank(&wave).map_err(to_py)?;
    Ok((0..f.frames()).map(|t| f.row(t).to_vec()).collect())
}

/// Frame count for an n-sample waveform (None below one window).
#[pyfunction]
fn fbank_frame_count(n_samples: usize) -> Option<usize> {
    audio::fbank_frame_count(n_samples)
}

/// Global (mean, variance, frame_count) over a list of FBANK matrices.
#[pyfunction]
fn estimate_cmvn(matrices: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<f64>, Vec<f64>, u64)> {
    let mut mats = Vec::with_capacity(matrices.len());
    for m in &matrices {
        let (frames, cols, flat) = rows_to_matrix(m)?;
        if cols != audio::NUM_MELS {
            return Err(PyValueError::new_err(format!(
                "expected {} mel bins, got {cols}",
                audio::NUM_MELS
            )));
        }
        mats.push(audio::FbankMatrix::from_vec(frames, flat).map_err(to_py)?);
    }
    let stats = audio::estimate_cmvn(mats.iter()).map_err(to_py)?;
    Ok((stats.mean, stats.var, stats.frame_count))
}

/// Standardize frames with precomputed stats.
#[pyfunction]
fn apply_cmvn(
    frames: Vec<Vec<f64>>,
    mean: Vec<f64>,
    var: Vec<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let (n, cols, flat) = rows_to_matrix(&frames)?;
    if cols != audio::NUM_MELS {
        return Err(PyValueError::new_err("expected 80 mel bins"));
    }
    let f = audio::FbankMatrix::from_vec(n, flat).map_err(to_py)?;
    let stats = audio::CmvnStats {
        mean,
        var,
        frame_count: 1,
    };
    let out = audio::apply_cmvn(&f, &stats).map_err(to_py)?;
    Ok((0..out.frames()).map(|t| out.row(t).to_vec()).collect())
}

/// Character vocabulary with the CTC blank at index 0.
#[pyclass(name = "Vocabulary")]
struct PyVocabulary {
    inner: dataio::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Build from transcripts: sorted unique characters, blank prepended.
    #[staticmethod]
    fn build(transcripts: Vec<String>) -> PyResult<Self> {
        let inner =
            dataio::build_vocab(transcripts.iter().map(String::as_str)).map_err(to_py)?;
        Ok(PyVocabulary { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: dataio::Vocabulary::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, transcript: &str) -> PyResult<Vec<usize>> {
        self.inner.encode(transcript).map_err(to_py)
    }

    fn decode(&self, indices: Vec<usize>) -> String {
        self.inner.decode(&indices)
    }
}

/// CTC negative log-likelihood of `target` under `[T, vocab]` logits.
#[pyfunction]
fn ctc_loss(logits: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    let (t, v, flat) = rows_to_matrix(&logits)?;
    let loss = ctc::ctc_loss(&Tensor::constant(&[t, v], flat), &target).map_err(to_py)?;
    Ok(loss.item())
}

/// Best-path decoding: per-frame argmax, collapse repeats, drop blanks.
#[pyfunction]
fn greedy_decode(logits: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let (t, v, flat) = rows_to_matrix(&logits)?;
    Ok(ctc::greedy_decode(&Tensor::constant(&[t, v], flat)))
}

/// (substitutions, insertions, deletions) between two strings at the
/// given unit ("char" or "word").
#[pyfunction]
fn edit_distance(reference: &str, hypothesis: &str, unit: &str) -> PyResult<(usize, usize, usize)> {
    let counts = match unit {
        "char" => {
            let r: Vec<char> = reference.chars().collect();
            let h: Vec<char> = hypothesis.chars().collect();
            ctc::edit_distance(&r, &h)
        }
        "word" => {
            let r: Vec<&str> = reference.split(' ').filter(|w| !w.is_empty()).collect();
            let h: Vec<&str> = hypothesis.split(' ').filter(|w| !w.is_empty()).collect();
            ctc::edit_distance(&r, &h)
        }
        other => return Err(PyValueError::new_err(format!("unknown unit `{other}`"))),
    };
    Ok((counts.substitutions, counts.insertions, counts.deletions))
}

/// Corpus-pooled error rate; returns (S, I, D, N, rate).
#[pyfunction]
#[pyo3(signature = (references, hypotheses, unit = "char", strip_space = false))]
fn error_rate(
    references: Vec<String>,
    hypotheses: Vec<String>,
    unit: &str,
    strip_space: bool,
) -> PyResult<(usize, usize, usize, usize, f64)> {
    if references.len() != hypotheses.len() {
        return Err(PyValueError::new_err("ref/hyp count mismatch"));
    }
    let unit = match unit {
        "char" => ctc::ErrorUnit::Char,
        "word" => ctc::ErrorUnit::Word,
        other => return Err(PyValueError::new_err(format!("unknown unit `{other}`"))),
    };
    let pairs: Vec<(String, String)> = references.into_iter().zip(hypotheses).collect();
    let r = ctc::error_rate(&pairs, unit, strip_space).map_err(to_py)?;
    Ok((
        r.substitutions,
        r.insertions,
        r.deletions,
        r.reference_tokens,
        r.error_rate,
    ))
}

/// Latent frame count of a frontend for a given input length.
#[pyfunction]
fn frontend_output_length(kind: &str, input_len: usize) -> PyResult<usize> {
    let cfg = match kind {
        "wav" => FrontendConfig::wav(),
        "fbank" => FrontendConfig::fbank(),
        other => return Err(PyValueError::new_err(format!("unknown frontend `{other}`"))),
    };
    frontend::frontend_output_length(&cfg, input_len).map_err(to_py)
}

/// Span mask of the pretraining rule; returns the boolean mask.
#[pyfunction]
fn sample_mask(t_len: usize, p_start: f64, span: usize, seed: u64) -> Vec<bool> {
    pretrain::sample_mask(t_len, p_start, span, seed).mask
}

/// Render the synthetic tone waveform for vocabulary indices.
#[pyfunction]
fn synth_waveform(token_indices: Vec<usize>, seed: u64) -> Vec<f64> {
    dataio::synth_waveform(&token_indices, seed).samples().to_vec()
}

/// Generate the synthetic corpus; returns (wav_manifest, fbank_manifest,
/// vocab_path).
#[pyfunction]
fn make_synth_corpus(
    n_utts: usize,
    tokens: &str,
    seed: u64,
    out_dir: PathBuf,
) -> PyResult<(String, String, String)> {
    let vocab = dataio::build_vocab([tokens]).map_err(to_py)?;
    let corpus =
        dataio::generate_synthetic_corpus(n_utts, &vocab, seed, &out_dir).map_err(to_py)?;
    Ok((
        corpus.manifest_wav.display().to_string(),
        corpus.manifest_fbank.display().to_string(),
        corpus.vocab_path.display().to_string(),
    ))
}

/// Tri-stage fine-tuning LR at a step.
#[pyfunction]
fn tri_stage_lr(peak: f64, total_steps: u64, step: u64) -> f64 {
    LrSchedule::TriStage { peak, total_steps }.lr_at(step)
}

/// Linear warmup/decay pretraining LR at a step.
#[pyfunction]
fn warmup_decay_lr(peak: f64, total_steps: u64, step: u64) -> f64 {
    LrSchedule::WarmupDecay { peak, total_steps }.lr_at(step)
}

/// Gumbel-softmax temperature at a step.
#[pyfunction]
fn anneal_temperature(step: u64) -> f64 {
    quantizer::anneal_temperature(step)
}

/// Element-wise average of checkpoint files into `out`.
#[pyfunction]
fn average_checkpoints(inputs: Vec<PathBuf>, out: PathBuf) -> PyResult<()> {
    let avg = koe::ckpt::average::<f32>(&inputs).map_err(to_py)?;
    koe::ckpt::save(
        &out,
        &avg,
        &koe::ckpt::CheckpointMeta {
            step: 0,
            dev_metric: None,
        },
    )
    .map_err(to_py)
}

/// Run one finite-difference gradient check fragment; returns
/// (max_rel_err, passed).
#[pyfunction]
#[pyo3(signature = (name, seed = 0, tolerance = 1e-4))]
fn gradcheck_fragment(name: &str, seed: u64, tolerance: f64) -> PyResult<(f64, bool)> {
    let frag = Fragment::from_name(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown fragment `{name}` (expected one of: {})",
            Fragment::ALL.map(|f| f.name()).join(", ")
        ))
    })?;
    let report = koe::fragments::check_fragment(frag, seed, tolerance).map_err(to_py)?;
    Ok((report.max_rel_err, report.passed()))
}

/// Names accepted by `gradcheck_fragment`.
#[pyfunction]
fn gradcheck_fragments() -> Vec<&'static str> {
    Fragment::ALL.iter().map(|f| f.name()).collect()
}

/// Read a 16-bit PCM mono WAV as float samples.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f64>> {
    Ok(audio::read_wav(Path::new(&path))
        .map_err(to_py)?
        .samples()
        .to_vec())
}

#[pymodule]
fn koe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_function(wrap_pyfunction!(extract_fbank, m)?)?;
    m.add_function(wrap_pyfunction!(fbank_frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_cmvn, m)?)?;
    m.add_function(wrap_pyfunction!(apply_cmvn, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(frontend_output_length, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask, m)?)?;
    m.add_function(wrap_pyfunction!(synth_waveform, m)?)?;
    m.add_function(wrap_pyfunction!(make_synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(tri_stage_lr, m)?)?;
    m.add_function(wrap_pyfunction!(warmup_decay_lr, m)?)?;
    m.add_function(wrap_pyfunction!(anneal_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_fragment, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_fragments, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    Ok(())
}
