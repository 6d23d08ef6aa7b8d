//! Manifests, character vocabularies, budget-based batching, and the
//! synthetic tone corpus used for desk-scale end-to-end tests.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{self, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::util;

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// One corpus utterance. `length` is in samples for WAV-input manifests
/// and in FBANK frames for feature-input manifests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio_path: String,
    pub length: usize,
    pub transcript: Option<String>,
}

/// TSV: `utt_id<TAB>path<TAB>length[<TAB>transcript]`, UTF-8, LF endings.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let mut entries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Parse {
                file,
                line: lineno,
                msg: format!(
                    "expected 3 or 4 tab-separated fields, got {} (transcripts must not contain tabs)",
                    fields.len()
                ),
            });
        }
        let utt_id = fields[0].to_string();
        if utt_id.is_empty() {
            return Err(Error::Parse {
                file,
                line: lineno,
                msg: "empty utterance id".into(),
            });
        }
        if !seen.insert(utt_id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate utterance id `{utt_id}` at {file}:{lineno}"
            )));
        }
        let length: usize = fields[2].parse().map_err(|e| Error::Parse {
            file: file.clone(),
            line: lineno,
            msg: format!("bad length field: {e}"),
        })?;
        if length == 0 {
            return Err(Error::Parse {
                file,
                line: lineno,
                msg: "length must be positive".into(),
            });
        }
        entries.push(ManifestEntry {
            utt_id,
            audio_path: fields[1].to_string(),
            length,
            transcript: fields.get(3).map(|s| s.to_string()),
        });
    }
    Ok(entries)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        match &e.transcript {
            Some(t) => out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.utt_id, e.audio_path, e.length, t
            )),
            None => out.push_str(&format!("{}\t{}\t{}\n", e.utt_id, e.audio_path, e.length)),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const BLANK_TOKEN: &str = "<blank>";
pub const BLANK_INDEX: usize = 0;

/// Character vocabulary with the CTC blank pinned at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>, // index 1.. (blank excluded)
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i + 1).is_some() {
                return Err(Error::Vocab(format!("duplicate token {c:?}")));
            }
        }
        Ok(Vocabulary { chars, index })
    }

    /// Total size including the blank.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn char_at(&self, index: usize) -> Option<char> {
        if index == BLANK_INDEX {
            None
        } else {
            self.chars.get(index - 1).copied()
        }
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn non_blank_chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, transcript: &str) -> Result<Vec<usize>> {
        transcript
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Vocab(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter_map(|&i| self.char_at(i))
            .collect()
    }

    /// One token per line; line 0 is literally `<blank>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from(BLANK_TOKEN);
        out.push('\n');
        for c in &self.chars {
            out.push(*c);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.split('\n');
        let first = lines.next().unwrap_or("");
        if first != BLANK_TOKEN {
            return Err(Error::Vocab(format!(
                "{}: line 0 must be `{BLANK_TOKEN}`, got `{first}`",
                path.display()
            )));
        }
        let mut chars = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue; // trailing newline
            }
            let mut it = line.chars();
            let c = it.next().unwrap();
            if it.next().is_some() {
                return Err(Error::Vocab(format!(
                    "{}: line {} holds more than one character",
                    path.display(),
                    i + 2
                )));
            }
            chars.push(c);
        }
        Vocabulary::from_chars(chars)
    }
}

/// Sorted unique characters of all transcripts, blank prepended.
pub fn build_vocab<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Result<Vocabulary> {
    let mut set: BTreeSet<char> = BTreeSet::new();
    let mut any = false;
    for t in transcripts {
        any = true;
        set.extend(t.chars());
    }
    if !any || set.is_empty() {
        return Err(Error::Vocab("no transcript characters to build from".into()));
    }
    Vocabulary::from_chars(set.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Length unit of manifest entries and batch budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthUnit {
    Samples,
    Frames,
}

/// Budget in the given unit for a per-batch duration in seconds.
/// 16 kHz sampling and the 10 ms FBANK shift make both conversions exact
/// multiplications.
pub fn budget_for_seconds(seconds: f64, unit: LengthUnit) -> usize {
    match unit {
        LengthUnit::Samples => (seconds * SAMPLE_RATE as f64).round() as usize,
        LengthUnit::Frames => (seconds * 100.0).round() as usize,
    }
}

/// Index set of one batch; summed true lengths never exceed the budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub total_length: usize,
}

#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// Utterance ids skipped because a single utterance exceeded the
    /// budget.
    pub skipped: Vec<String>,
}

/// Length-sorted bucketing then a seeded shuffle of the buckets. Every
/// entry at or under the budget appears in exactly one batch; longer
/// entries are skipped and reported.
pub fn make_batches(entries: &[ManifestEntry], budget: usize, seed: u64) -> BatchPlan {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    // Stable sort by (length, id) keeps the plan a pure function of the
    // manifest.
    order.sort_by(|&a, &b| {
        entries[a]
            .length
            .cmp(&entries[b].length)
            .then_with(|| entries[a].utt_id.cmp(&entries[b].utt_id))
    });

    let mut batches = Vec::new();
    let mut skipped = Vec::new();
    let mut current = Batch {
        indices: Vec::new(),
        total_length: 0,
    };
    for idx in order {
        let len = entries[idx].length;
        if len > budget {
            skipped.push(entries[idx].utt_id.clone());
            continue;
        }
        if current.total_length + len > budget && !current.indices.is_empty() {
            batches.push(std::mem::replace(
                &mut current,
                Batch {
                    indices: Vec::new(),
                    total_length: 0,
                },
            ));
        }
        current.indices.push(idx);
        current.total_length += len;
    }
    if !current.indices.is_empty() {
        batches.push(current);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);
    BatchPlan { batches, skipped }
}

// ---------------------------------------------------------------------------
// Synthetic tone corpus
// ---------------------------------------------------------------------------

pub const TONE_MS: usize = 120;
pub const TONE_SAMPLES: usize = SAMPLE_RATE as usize * TONE_MS / 1000; // 1920
pub const TONE_AMPLITUDE: f64 = 0.5;
pub const NOISE_SNR_DB: f64 = 30.0;
pub const SYNTH_MIN_TOKENS: usize = 2;
pub const SYNTH_MAX_TOKENS: usize = 10;

/// Pure-tone frequency for vocabulary index `k` (non-blank, so `k >= 1`).
pub fn token_frequency(k: usize) -> f64 {
    300.0 + 40.0 * k as f64
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub entries: Vec<ManifestEntry>,
    pub manifest_wav: PathBuf,
    pub manifest_fbank: PathBuf,
    pub vocab_path: PathBuf,
    pub wav_dir: PathBuf,
}

/// Render the waveform for a transcript: one 120 ms tone per token plus
/// seeded Gaussian noise at 30 dB SNR relative to the tone power.
pub fn synth_waveform(token_indices: &[usize], seed: u64) -> Waveform {
    let n = token_indices.len() * TONE_SAMPLES;
    let mut samples = vec![0.0f64; n];
    for (pos, &k) in token_indices.iter().enumerate() {
        let freq = token_frequency(k);
        for i in 0..TONE_SAMPLES {
            let t = i as f64 / SAMPLE_RATE as f64;
            samples[pos * TONE_SAMPLES + i] =
                TONE_AMPLITUDE * (2.0 * std::f64::consts::PI * freq * t).sin();
        }
    }
    let tone_power = TONE_AMPLITUDE * TONE_AMPLITUDE / 2.0;
    let noise_sigma = (tone_power * 10f64.powf(-NOISE_SNR_DB / 10.0)).sqrt();
    let normal = Normal::new(0.0, noise_sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in samples.iter_mut() {
        *s = (*s + normal.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    Waveform::new(samples, SAMPLE_RATE).unwrap()
}

/// Generate `n_utts` utterances under `out_dir`: WAV files, a sample-unit
/// manifest, a frame-unit manifest, and the vocabulary file. Fully
/// reproducible from the seed.
pub fn generate_synthetic_corpus(
    n_utts: usize,
    vocab: &Vocabulary,
    seed: u64,
    out_dir: &Path,
) -> Result<SynthCorpus> {
    if vocab.non_blank_chars().len() < 2 {
        return Err(Error::Vocab(
            "synthetic corpus needs at least 2 non-blank tokens".into(),
        ));
    }
    let wav_dir = out_dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let n_tokens = vocab.non_blank_chars().len();
    let mut entries_wav = Vec::with_capacity(n_utts);
    let mut entries_fbank = Vec::with_capacity(n_utts);
    for u in 0..n_utts {
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix3(seed, 1, u as u64));
        let len = rng.random_range(SYNTH_MIN_TOKENS..=SYNTH_MAX_TOKENS);
        let token_indices: Vec<usize> =
            (0..len).map(|_| rng.random_range(1..=n_tokens)).collect();
        let transcript: String = token_indices
            .iter()
            .map(|&k| vocab.char_at(k).unwrap())
            .collect();
        let wave = synth_waveform(&token_indices, util::mix3(seed, 2, u as u64));
        let utt_id = format!("synth_{u:04}");
        let wav_path = wav_dir.join(format!("{utt_id}.wav"));
        audio::write_wav(&wav_path, &wave)?;
        let frames = audio::fbank_frame_count(wave.len()).ok_or_else(|| {
            Error::Audio(format!("utterance {utt_id} shorter than one window"))
        })?;
        entries_wav.push(ManifestEntry {
            utt_id: utt_id.clone(),
            audio_path: wav_path.display().to_string(),
            length: wave.len(),
            transcript: Some(transcript.clone()),
        });
        entries_fbank.push(ManifestEntry {
            utt_id,
            audio_path: wav_path.display().to_string(),
            length: frames,
            transcript: Some(transcript),
        });
    }

    let manifest_wav = out_dir.join("manifest_wav.tsv");
    let manifest_fbank = out_dir.join("manifest_fbank.tsv");
    let vocab_path = out_dir.join("vocab.txt");
    save_manifest(&manifest_wav, &entries_wav)?;
    save_manifest(&manifest_fbank, &entries_fbank)?;
    vocab.save(&vocab_path)?;
    Ok(SynthCorpus {
        entries: entries_wav,
        manifest_wav,
        manifest_fbank,
        vocab_path,
        wav_dir,
    })
}
