//! The `koe` command line: feature extraction, CMVN estimation,
//! synthetic corpus generation, pretraining, fine-tuning, checkpoint
//! averaging, decoding, scoring, and the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. All
//! randomness is governed by `--seed`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::audio::{self, CmvnStats};
use crate::ckpt::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::ctc::{self, ErrorUnit};
use crate::dataio::{self, ManifestEntry, Vocabulary};
use crate::encoder::EncoderKind;
use crate::error::{Error, Result};
use crate::finetune::{self, MaskPosition};
use crate::fragments::{self, Fragment};
use crate::frontend::FrontendKind;
use crate::pretrain::{self, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FrontendArg {
    Wav,
    Fbank,
}

impl From<FrontendArg> for FrontendKind {
    fn from(v: FrontendArg) -> Self {
        match v {
            FrontendArg::Wav => FrontendKind::Wav,
            FrontendArg::Fbank => FrontendKind::Fbank,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EncoderArg {
    Transformer,
    Conformer,
}

impl From<EncoderArg> for EncoderKind {
    fn from(v: EncoderArg) -> Self {
        match v {
            EncoderArg::Transformer => EncoderKind::Transformer,
            EncoderArg::Conformer => EncoderKind::Conformer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskPositionArg {
    Pre,
    Post,
}

impl From<MaskPositionArg> for MaskPosition {
    fn from(v: MaskPositionArg) -> Self {
        match v {
            MaskPositionArg::Pre => MaskPosition::Pre,
            MaskPositionArg::Post => MaskPosition::Post,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum UnitArg {
    Char,
    Word,
}

#[derive(Debug, Args)]
struct CommonModelArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fbank")]
    frontend: FrontendArg,
    #[arg(long, value_enum, default_value = "transformer")]
    encoder: EncoderArg,
}

impl CommonModelArgs {
    fn run_config(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::from_file(p),
            None => Ok(RunConfig::empty()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "koe",
    about = "Self-supervised speech recognition toolkit: contrastive pretraining, CTC fine-tuning, decoding, scoring",
    version
)]
struct Cli {
    /// Data-parallel workers for audio preprocessing.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract FBANK features for every manifest utterance.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply these CMVN stats after extraction.
        #[arg(long)]
        cmvn: Option<PathBuf>,
    },
    /// Estimate global CMVN statistics over a manifest.
    EstimateCmvn {
        #[arg(long)]
        manifest: PathBuf,
        /// Output stats file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the deterministic synthetic tone corpus.
    MakeSynth {
        #[arg(long, short = 'n')]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Characters used as the token inventory.
        #[arg(long, default_value = "abcdefgh")]
        tokens: String,
    },
    /// Contrastive pretraining on unlabeled audio.
    Pretrain {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// CTC fine-tuning with dev-set evaluation and top-k averaging.
    Finetune {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        dev_manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pretrained checkpoint to initialize from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "post")]
        mask_position: MaskPositionArg,
    },
    /// Element-wise average of checkpoints.
    AverageCkpt {
        #[arg(long)]
        out: PathBuf,
        /// Input checkpoint files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Greedy CTC decoding of a manifest.
    Decode {
        #[command(flatten)]
        model: CommonModelArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Output hypotheses TSV.
        #[arg(long)]
        out: PathBuf,
        /// CMVN stats used during training (required for FBANK input).
        #[arg(long)]
        cmvn: Option<PathBuf>,
    },
    /// Score hypotheses against references.
    Score {
        /// Reference file: manifest TSV or 2-column `utt<TAB>text`.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_enum, default_value = "char")]
        unit: UnitArg,
        /// Drop whitespace before character-level scoring.
        #[arg(long)]
        strip_space: bool,
        /// Report file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks over the model fragments.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check a single fragment by name.
        #[arg(long)]
        fragment: Option<String>,
    },
}

/// Parse and run. Returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    if let Some(n) = cli.workers {
        // Only effective on the first call in the process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::ExtractFeatures { manifest, out, cmvn } => extract_features(&manifest, &out, cmvn.as_deref()),
        Command::EstimateCmvn { manifest, out } => {
            let entries = dataio::load_manifest(&manifest)?;
            let stats = pretrain::estimate_corpus_cmvn(&entries)?;
            stats.save(&out)?;
            println!("wrote CMVN stats over {} frames to {}", stats.frame_count, out.display());
            Ok(())
        }
        Command::MakeSynth { n, seed, out, tokens } => {
            let vocab = dataio::build_vocab([tokens.as_str()])?;
            let corpus = dataio::generate_synthetic_corpus(n, &vocab, seed, &out)?;
            println!(
                "wrote {} utterances: {} / {} / {}",
                corpus.entries.len(),
                corpus.manifest_wav.display(),
                corpus.manifest_fbank.display(),
                corpus.vocab_path.display()
            );
            Ok(())
        }
        Command::Pretrain { model, manifest, out, seed } => {
            let cfg = model
                .run_config()?
                .pretrain_config(model.frontend.into(), model.encoder.into(), seed)?;
            let entries = dataio::load_manifest(&manifest)?;
            let summary = pretrain::run_pretraining::<f32>(&entries, &cfg, &out)?;
            println!(
                "pretraining finished at step {}: {}",
                summary.steps_done,
                summary.final_model.display()
            );
            Ok(())
        }
        Command::Finetune {
            model,
            manifest,
            dev_manifest,
            vocab,
            out,
            seed,
            init,
            mask_position,
        } => {
            let cfg = model.run_config()?.finetune_config(
                model.frontend.into(),
                model.encoder.into(),
                mask_position.into(),
                seed,
            )?;
            let train = dataio::load_manifest(&manifest)?;
            let dev = dataio::load_manifest(&dev_manifest)?;
            let vocab = Vocabulary::load(&vocab)?;
            let summary =
                finetune::run_finetuning::<f32>(init.as_deref(), &train, &dev, &cfg, &vocab, &out)?;
            if let Some(last) = summary.evals.last() {
                println!(
                    "fine-tuning finished: dev loss {} dev CER {} at step {}",
                    last.dev_loss, last.dev_cer, last.step
                );
            }
            println!("averaged model: {}", summary.final_model.display());
            Ok(())
        }
        Command::AverageCkpt { out, inputs } => {
            let avg = ckpt::average::<f32>(&inputs)?;
            ckpt::save(&out, &avg, &CheckpointMeta { step: 0, dev_metric: None })?;
            println!("averaged {} checkpoints into {}", inputs.len(), out.display());
            Ok(())
        }
        Command::Decode { model, ckpt: ckpt_path, manifest, vocab, out, cmvn } => decode(
            &model,
            &ckpt_path,
            &manifest,
            &vocab,
            &out,
            cmvn.as_deref(),
        ),
        Command::Score { reference, hyp, unit, strip_space, out } => {
            let unit = match unit {
                UnitArg::Char => ErrorUnit::Char,
                UnitArg::Word => ErrorUnit::Word,
            };
            let report = score(&reference, &hyp, unit, strip_space)?;
            let text = serde_json::to_string_pretty(&report).expect("report serialization");
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Gradcheck { seeds, tol, fragment } => gradcheck(seeds, tol, fragment.as_deref()),
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"KFBK";

/// Binary feature file: magic, u32 frames, u32 dim, f64 LE data.
pub fn write_feature_file(path: &Path, f: &audio::FbankMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + f.data().len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(f.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for &v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<audio::FbankMatrix> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[0..4] != FEATURE_MAGIC {
        return Err(Error::Audio(format!("{}: not a feature file", path.display())));
    }
    let frames = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if dim != audio::NUM_MELS || buf.len() != 12 + frames * dim * 8 {
        return Err(Error::Audio(format!("{}: corrupt feature file", path.display())));
    }
    let data = buf[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    audio::FbankMatrix::from_vec(frames, data)
}

fn extract_features(manifest: &Path, out: &Path, cmvn: Option<&Path>) -> Result<()> {
    use rayon::prelude::*;
    let entries = dataio::load_manifest(manifest)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stats = match cmvn {
        Some(p) => Some(CmvnStats::load(p)?),
        None => None,
    };
    let feats: Vec<audio::FbankMatrix> = entries
        .par_iter()
        .map(|e| {
            let wave = audio::read_wav(Path::new(&e.audio_path))?;
            let f = audio::extract_fbank(&wave)?;
            match &stats {
                Some(s) => audio::apply_cmvn(&f, s),
                None => Ok(f),
            }
        })
        .collect::<Result<_>>()?;
    let mut feat_entries = Vec::with_capacity(entries.len());
    for (e, f) in entries.iter().zip(&feats) {
        let path = out.join(format!("{}.fbk", e.utt_id));
        write_feature_file(&path, f)?;
        feat_entries.push(ManifestEntry {
            utt_id: e.utt_id.clone(),
            audio_path: path.display().to_string(),
            length: f.frames(),
            transcript: e.transcript.clone(),
        });
    }
    let manifest_out = out.join("manifest_fbank.tsv");
    dataio::save_manifest(&manifest_out, &feat_entries)?;
    println!("wrote {} feature files and {}", feats.len(), manifest_out.display());
    Ok(())
}

fn decode(
    model: &CommonModelArgs,
    ckpt_path: &Path,
    manifest: &Path,
    vocab_path: &Path,
    out: &Path,
    cmvn: Option<&Path>,
) -> Result<()> {
    let run_cfg = model.run_config()?;
    let frontend_kind: FrontendKind = model.frontend.into();
    let cfg = run_cfg.finetune_config(
        frontend_kind,
        model.encoder.into(),
        MaskPosition::Post,
        0,
    )?;
    let vocab = Vocabulary::load(vocab_path)?;
    let (params, _) = ckpt::load::<f32>(ckpt_path)?;
    let head = params.get("head.proj.weight").map_err(|_| {
        Error::Checkpoint(format!(
            "{}: checkpoint has no CTC head (not a fine-tuned model?)",
            ckpt_path.display()
        ))
    })?;
    if head.dims() != [cfg.encoder.dim, vocab.len()] {
        return Err(Error::Checkpoint(format!(
            "CTC head is {:?} but config/vocab require {:?}",
            head.dims(),
            [cfg.encoder.dim, vocab.len()]
        )));
    }

    let stats = match (frontend_kind, cmvn) {
        (FrontendKind::Fbank, Some(p)) => Some(CmvnStats::load(p)?),
        (FrontendKind::Fbank, None) => {
            return Err(Error::Config(
                "--cmvn is required when decoding with the FBANK frontend (use the stats saved by training)".into(),
            ));
        }
        (FrontendKind::Wav, _) => None,
    };
    let entries = dataio::load_manifest(manifest)?;
    let corpus: Vec<Utterance<f32>> =
        pretrain::load_corpus(&entries, frontend_kind, stats.as_ref(), None)?;

    let mut text = String::new();
    for utt in &corpus {
        let logits = finetune::utterance_logits(utt, &params, &cfg, None, &mut None)?;
        let hyp = vocab.decode(&ctc::greedy_decode(&logits));
        text.push_str(&format!("{}\t{}\n", utt.id, hyp));
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!("wrote hypotheses for {} utterances to {}", corpus.len(), out.display());
    Ok(())
}

/// Read an `utt<TAB>text` file; manifests (3+ columns) contribute their
/// transcript column.
fn read_text_table(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.len() {
            2 => out.push((fields[0].to_string(), fields[1].to_string())),
            4 => out.push((fields[0].to_string(), fields[3].to_string())),
            _ => {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: format!(
                        "expected 2 columns (utt, text) or a 4-column manifest, got {}",
                        fields.len()
                    ),
                })
            }
        }
    }
    Ok(out)
}

fn score(
    reference: &Path,
    hyp: &Path,
    unit: ErrorUnit,
    strip_space: bool,
) -> Result<ctc::ErrorRateReport> {
    let refs = read_text_table(reference)?;
    let hyps = read_text_table(hyp)?;
    let hyp_map: std::collections::HashMap<&str, &str> = hyps
        .iter()
        .map(|(id, text)| (id.as_str(), text.as_str()))
        .collect();
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, ref_text) in &refs {
        let hyp_text = hyp_map.get(id.as_str()).ok_or_else(|| {
            Error::Ctc(format!("no hypothesis for utterance `{id}`"))
        })?;
        pairs.push((ref_text.clone(), hyp_text.to_string()));
    }
    ctc::error_rate(&pairs, unit, strip_space)
}

fn gradcheck(seeds: u64, tol: f64, fragment: Option<&str>) -> Result<()> {
    let frags: Vec<Fragment> = match fragment {
        Some(name) => vec![Fragment::from_name(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown fragment `{name}` (expected one of: {})",
                Fragment::ALL.map(|f| f.name()).join(", ")
            ))
        })?],
        None => Fragment::ALL.to_vec(),
    };
    let seed_list: Vec<u64> = (0..seeds).collect();
    let mut all_ok = true;
    for frag in frags {
        for &seed in &seed_list {
            let report = fragments::check_fragment(frag, seed, tol)?;
            let ok = report.passed();
            all_ok &= ok;
            println!(
                "{} seed={} max_rel_err={:.3e} {}",
                frag.name(),
                seed,
                report.max_rel_err,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        dispatch(std::iter::once("koe").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["no-such-subcommand"]), 1);
        assert_eq!(run_args(&[]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]), 0);
    }

    #[test]
    fn make_synth_is_reproducible_across_out_dirs() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let code = run_args(&[
                "make-synth",
                "-n",
                "3",
                "--seed",
                "7",
                "--out",
                d.path().to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
        }
        for i in 0..3 {
            let f = format!("wavs/synth_{i:04}.wav");
            assert_eq!(
                fs::read(d1.path().join(&f)).unwrap(),
                fs::read(d2.path().join(&f)).unwrap()
            );
        }
        assert_eq!(
            fs::read(d1.path().join("vocab.txt")).unwrap(),
            fs::read(d2.path().join("vocab.txt")).unwrap()
        );
    }

    #[test]
    fn score_identical_files_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("refs.tsv");
        fs::write(&p, "u1\tかな\nu2\thello world\n").unwrap();
        let report = score(&p, &p, ErrorUnit::Char, false).unwrap();
        assert_eq!(report.error_rate, 0.0);
        assert_eq!(run_args(&[
            "score",
            "--ref",
            p.to_str().unwrap(),
            "--hyp",
            p.to_str().unwrap(),
        ]), 0);
    }

    #[test]
    fn score_missing_hypothesis_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("refs.tsv");
        let h = dir.path().join("hyps.tsv");
        fs::write(&r, "u1\tabc\n").unwrap();
        fs::write(&h, "u2\tabc\n").unwrap();
        assert_eq!(
            run_args(&["score", "--ref", r.to_str().unwrap(), "--hyp", h.to_str().unwrap()]),
            2
        );
    }

    #[test]
    fn feature_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let wave = dataio::synth_waveform(&[1, 2], 3);
        let f = audio::extract_fbank(&wave).unwrap();
        let p = dir.path().join("x.fbk");
        write_feature_file(&p, &f).unwrap();
        let loaded = read_feature_file(&p).unwrap();
        assert_eq!(loaded.frames(), f.frames());
        assert!(loaded
            .data()
            .iter()
            .zip(f.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradcheck_single_fragment_via_cli() {
        assert_eq!(
            run_args(&["gradcheck", "--seeds", "1", "--fragment", "ctc-loss"]),
            0
        );
        assert_eq!(
            run_args(&["gradcheck", "--seeds", "1", "--fragment", "bogus"]),
            2
        );
    }
}
