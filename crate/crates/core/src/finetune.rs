//! CTC fine-tuning with two masking placements.
//!
//! Pre-CNN masking zeroes temporal/spectral spans of the (CMVN'd) FBANK
//! input, regularizing the frontend too. Post-CNN masking replaces
//! temporal spans of the latent sequence with the learned mask embedding
//! and zeroes channel spans; in that mode the frontend is frozen, which
//! is implemented by detaching the latent sequence so no gradient ever
//! reaches frontend parameters.
//!
//! Span sampling follows the pinned rule: each index is a span start
//! with probability `prob / len`, so `prob` approximates the expected
//! masked fraction before overlap. No span is ever forced; probability
//! zero is the identity.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adam::{adam_step, AdamState};
use crate::audio::{FbankMatrix, NUM_MELS};
use crate::ckpt::{self, CheckpointMeta, CheckpointStore};
use crate::ctc::{self, ErrorUnit};
use crate::dataio::{self, LengthUnit, ManifestEntry, Vocabulary};
use crate::encoder::{self, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, FrontendKind, LatentSequence};
use crate::params::{self, ParameterSet};
use crate::pretrain::{estimate_corpus_cmvn, load_corpus, Utterance};
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;
use crate::tensor::{forward_backward, Tensor};
use crate::util;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPosition {
    Pre,
    Post,
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub mask_position: MaskPosition,
    /// Post-CNN temporal masking: span length and coverage probability.
    pub post_time_len: usize,
    pub post_time_prob: f64,
    /// Post-CNN channel masking over the latent dimensions.
    pub post_channel_len: usize,
    pub post_channel_prob: f64,
    /// Pre-CNN temporal masking over FBANK frames.
    pub pre_time_len: usize,
    pub pre_time_prob: f64,
    /// Pre-CNN spectral masking over the 80 mel bins.
    pub pre_spec_len: usize,
    pub pre_spec_prob: f64,
    pub max_steps: u64,
    pub peak_lr: f64,
    pub eval_every: u64,
    pub keep_top: usize,
    pub budget_seconds: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

impl FinetuneConfig {
    /// Low-resource recipe: 80k steps, peak 3e-5, eval every 1600 steps.
    pub fn low_resource(
        frontend: FrontendConfig,
        encoder: EncoderConfig,
        mask_position: MaskPosition,
    ) -> Self {
        FinetuneConfig {
            frontend,
            encoder,
            mask_position,
            post_time_len: 10,
            post_time_prob: 0.5,
            post_channel_len: 64,
            post_channel_prob: 0.1,
            pre_time_len: 20,
            pre_time_prob: 0.65,
            pre_spec_len: 30,
            pre_spec_prob: 0.1,
            max_steps: 80_000,
            peak_lr: 3e-5,
            eval_every: 1600,
            keep_top: 5,
            budget_seconds: 87.5,
            adam_betas: (crate::adam::DEFAULT_BETA1, crate::adam::DEFAULT_BETA2),
            adam_eps: crate::adam::DEFAULT_EPS,
            seed: 0,
        }
    }

    /// High-resource cadence: evaluate every 6400 steps instead.
    pub fn high_resource(
        frontend: FrontendConfig,
        encoder: EncoderConfig,
        mask_position: MaskPosition,
    ) -> Self {
        FinetuneConfig {
            eval_every: 6400,
            ..Self::low_resource(frontend, encoder, mask_position)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        if self.frontend.output_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "frontend output dim {} != encoder dim {}",
                self.frontend.output_dim, self.encoder.dim
            )));
        }
        for (what, len, prob) in [
            ("post time", self.post_time_len, self.post_time_prob),
            ("post channel", self.post_channel_len, self.post_channel_prob),
            ("pre time", self.pre_time_len, self.pre_time_prob),
            ("pre spectral", self.pre_spec_len, self.pre_spec_prob),
        ] {
            if len == 0 {
                return Err(Error::Config(format!("{what} mask length must be positive")));
            }
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::Config(format!("{what} mask probability outside [0,1]")));
            }
        }
        if self.keep_top == 0 || self.eval_every == 0 || self.max_steps == 0 {
            return Err(Error::Config("steps/cadence/top-k must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::TriStage {
            peak: self.peak_lr,
            total_steps: self.max_steps,
        }
    }

    /// True exactly when the frontend is frozen (post-CNN masking).
    pub fn frontend_frozen(&self) -> bool {
        self.mask_position == MaskPosition::Post
    }
}

// ---------------------------------------------------------------------------
// Mask sampling (pinned rule: start probability = prob / len)
// ---------------------------------------------------------------------------

/// Expected covered fraction of the pinned rule, ignoring edge effects:
/// `1 - (1 - prob/len)^len`.
pub fn expected_masked_fraction(prob: f64, len: usize) -> f64 {
    1.0 - (1.0 - prob / len as f64).powi(len as i32)
}

/// One draw of the pinned span rule over an axis of the given length.
pub fn sample_spans(axis_len: usize, prob: f64, span: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let p_start = prob / span as f64;
    let mut mask = vec![false; axis_len];
    for i in 0..axis_len {
        if rng.random_range(0.0..1.0) < p_start {
            for m in mask.iter_mut().skip(i).take(span) {
                *m = true;
            }
        }
    }
    mask
}

/// Sampled (time, spectral) masks for a pre-CNN application.
pub fn pre_cnn_masks(frames: usize, cfg: &FinetuneConfig, seed: u64) -> (Vec<bool>, Vec<bool>) {
    let mut rng_t = ChaCha8Rng::seed_from_u64(util::mix(seed, 0));
    let mut rng_f = ChaCha8Rng::seed_from_u64(util::mix(seed, 1));
    (
        sample_spans(frames, cfg.pre_time_prob, cfg.pre_time_len, &mut rng_t),
        sample_spans(NUM_MELS, cfg.pre_spec_prob, cfg.pre_spec_len, &mut rng_f),
    )
}

/// Sampled (time, channel) masks for a post-CNN application.
pub fn post_cnn_masks(
    t_len: usize,
    dim: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> (Vec<bool>, Vec<bool>) {
    let mut rng_t = ChaCha8Rng::seed_from_u64(util::mix(seed, 2));
    let mut rng_c = ChaCha8Rng::seed_from_u64(util::mix(seed, 3));
    (
        sample_spans(t_len, cfg.post_time_prob, cfg.post_time_len, &mut rng_t),
        sample_spans(dim, cfg.post_channel_prob, cfg.post_channel_len, &mut rng_c),
    )
}

/// Zero masked frames (whole rows) and masked mel bins (whole columns)
/// of a CMVN-normalized FBANK matrix; 0 is the post-CMVN mean.
pub fn apply_pre_cnn_masking(f: &FbankMatrix, cfg: &FinetuneConfig, seed: u64) -> FbankMatrix {
    let (time_mask, spec_mask) = pre_cnn_masks(f.frames(), cfg, seed);
    apply_pre_cnn_masking_with(f, &time_mask, &spec_mask)
}

pub fn apply_pre_cnn_masking_with(
    f: &FbankMatrix,
    time_mask: &[bool],
    spec_mask: &[bool],
) -> FbankMatrix {
    let mut data = f.data().to_vec();
    for t in 0..f.frames() {
        for d in 0..NUM_MELS {
            if time_mask[t] || spec_mask[d] {
                data[t * NUM_MELS + d] = 0.0;
            }
        }
    }
    FbankMatrix::from_vec(f.frames(), data).expect("shape preserved")
}

/// Tensor variant used inside the training graph (the mask itself is
/// constant, so no gradient flows through masked cells).
pub fn apply_pre_cnn_masking_tensor<S: Scalar>(
    x: &Tensor<S>,
    time_mask: &[bool],
    spec_mask: &[bool],
) -> Tensor<S> {
    let (t, d) = (x.rows(), x.cols());
    let mut keep = vec![S::ONE; t * d];
    for ti in 0..t {
        for di in 0..d {
            if time_mask[ti] || spec_mask[di] {
                keep[ti * d + di] = S::ZERO;
            }
        }
    }
    x.mul(&Tensor::constant(&[t, d], keep))
}

/// Replace masked time frames with the learned mask embedding and zero
/// masked channels across all frames.
pub fn apply_post_cnn_masking<S: Scalar>(
    z: &LatentSequence<S>,
    cfg: &FinetuneConfig,
    ps: &ParameterSet<S>,
    seed: u64,
) -> Result<LatentSequence<S>> {
    let (time_mask, channel_mask) = post_cnn_masks(z.states.rows(), cfg.encoder.dim, cfg, seed);
    apply_post_cnn_masking_with(z, ps, &time_mask, &channel_mask)
}

pub fn apply_post_cnn_masking_with<S: Scalar>(
    z: &LatentSequence<S>,
    ps: &ParameterSet<S>,
    time_mask: &[bool],
    channel_mask: &[bool],
) -> Result<LatentSequence<S>> {
    let (t, d) = (z.states.rows(), z.states.cols());
    if time_mask.len() != t || channel_mask.len() != d {
        return Err(Error::Shape("post-CNN mask lengths disagree with latents".into()));
    }
    let mut states = z.states.clone();
    if time_mask.iter().any(|&m| m) {
        let mut keep = vec![S::ONE; t * d];
        let mut col = vec![S::ZERO; t];
        for (i, &m) in time_mask.iter().enumerate() {
            if m {
                col[i] = S::ONE;
                for v in keep[i * d..(i + 1) * d].iter_mut() {
                    *v = S::ZERO;
                }
            }
        }
        let fill = Tensor::constant(&[t, 1], col).matmul(ps.get("encoder.mask_embed")?);
        states = states.mul(&Tensor::constant(&[t, d], keep)).add(&fill);
    }
    if channel_mask.iter().any(|&m| m) {
        let mut keep = vec![S::ONE; t * d];
        for (j, &m) in channel_mask.iter().enumerate() {
            if m {
                for i in 0..t {
                    keep[i * d + j] = S::ZERO;
                }
            }
        }
        states = states.mul(&Tensor::constant(&[t, d], keep));
    }
    Ok(LatentSequence {
        states,
        true_len: z.true_len,
    })
}

// ---------------------------------------------------------------------------
// CTC head
// ---------------------------------------------------------------------------

/// Linear projection (with input layer norm) from encoder states to
/// per-frame vocabulary logits, blank included.
pub fn init_ctc_head<S: Scalar>(
    dim: usize,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
    ps: &mut ParameterSet<S>,
) -> Result<()> {
    ps.insert("head.norm.weight", params::ones_param(&[dim]))?;
    ps.insert("head.norm.bias", params::zeros_param(&[dim]))?;
    ps.insert(
        "head.proj.weight",
        params::xavier_uniform(rng, &[dim, vocab_size], dim, vocab_size),
    )?;
    ps.insert("head.proj.bias", params::zeros_param(&[vocab_size]))?;
    Ok(())
}

pub fn ctc_head_logits<S: Scalar>(context: &Tensor<S>, ps: &ParameterSet<S>) -> Result<Tensor<S>> {
    let normed = context.layer_norm_rows(
        ps.get("head.norm.weight")?,
        ps.get("head.norm.bias")?,
        LN_EPS,
    );
    Ok(normed.linear(ps.get("head.proj.weight")?, Some(ps.get("head.proj.bias")?)))
}

/// Fresh fine-tuning parameters; `pretrained` (when given) overrides the
/// frontend/encoder entries with matching names and shapes.
pub fn init_finetune_params<S: Scalar>(
    cfg: &FinetuneConfig,
    vocab_size: usize,
    seed: u64,
    pretrained: Option<&ParameterSet<S>>,
) -> Result<ParameterSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, 0xf17e));
    let mut ps = ParameterSet::new();
    frontend::init_frontend_params(&cfg.frontend, &mut rng, &mut ps)?;
    encoder::init_encoder_params(&cfg.encoder, &mut rng, &mut ps)?;
    init_ctc_head(cfg.encoder.dim, vocab_size, &mut rng, &mut ps)?;
    if let Some(src) = pretrained {
        for name in ps.names() {
            if !(name.starts_with("frontend.") || name.starts_with("encoder.")) {
                continue;
            }
            if !src.contains(&name) {
                return Err(Error::Checkpoint(format!(
                    "pretrained checkpoint is missing `{name}`"
                )));
            }
            let t = src.get(&name)?;
            ps.replace(&name, Tensor::param(t.dims(), t.data().to_vec()))?;
        }
    }
    Ok(ps)
}

/// Parameter names updated by the optimizer under this config. The
/// frontend is excluded when frozen; the mask embedding stays fixed in
/// fine-tuning because it only enters the graph on steps where a time
/// span actually fires.
pub fn trainable_names<S: Scalar>(params: &ParameterSet<S>, cfg: &FinetuneConfig) -> Vec<String> {
    params
        .names()
        .into_iter()
        .filter(|n| n != "encoder.mask_embed")
        .filter(|n| !(cfg.frontend_frozen() && n.starts_with("frontend.")))
        .collect()
}

// ---------------------------------------------------------------------------
// Steps, evaluation, loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub skipped_utterances: usize,
}

impl FinetuneStepMetrics {
    pub fn to_json_line(&self, wall_ms: u64) -> String {
        format!(
            "{{\"step\":{},\"loss\":{},\"lr\":{},\"skipped\":{},\"wall_ms\":{}}}",
            self.step, self.loss, self.lr, self.skipped_utterances, wall_ms
        )
    }
}

/// Forward pass to CTC logits; `masking_seed = None` disables masking
/// (evaluation and decoding).
pub fn utterance_logits<S: Scalar>(
    utt: &Utterance<S>,
    params: &ParameterSet<S>,
    cfg: &FinetuneConfig,
    masking_seed: Option<u64>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Tensor<S>> {
    let input = match (cfg.mask_position, masking_seed) {
        (MaskPosition::Pre, Some(seed)) if cfg.frontend.kind == FrontendKind::Fbank => {
            let (tm, sm) = pre_cnn_masks(utt.input.rows(), cfg, seed);
            apply_pre_cnn_masking_tensor(&utt.input, &tm, &sm)
        }
        _ => utt.input.clone(),
    };

    let mut z = frontend::encode(&input, utt.input_len, &cfg.frontend, params)?;
    if cfg.frontend_frozen() {
        z = LatentSequence {
            states: z.states.detach(),
            true_len: z.true_len,
        };
    }
    if let (MaskPosition::Post, Some(seed)) = (cfg.mask_position, masking_seed) {
        z = apply_post_cnn_masking(&z, cfg, params, seed)?;
    }
    let enc = encoder::encode(&z, None, &cfg.encoder, params, dropout)?;
    ctc_head_logits(&enc.context, params)
}

/// One optimizer update over a batch. Utterances whose targets are
/// inadmissible for their frame count are skipped and counted.
pub fn finetune_step<S: Scalar>(
    batch: &[&Utterance<S>],
    params: &mut ParameterSet<S>,
    adam: &mut AdamState<S>,
    cfg: &FinetuneConfig,
    step: u64,
) -> Result<FinetuneStepMetrics> {
    let lr = cfg.schedule().lr_at(step);
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let n = batch.len();
    let mut loss_sum = 0.0;
    let mut used = 0usize;
    for utt in batch {
        let targets = utt
            .targets
            .as_ref()
            .ok_or_else(|| Error::Train(format!("utterance `{}` has no transcript", utt.id)))?;
        let out_len = frontend::frontend_output_length(&cfg.frontend, utt.input_len)?;
        if out_len < ctc::min_frames_for(targets) {
            continue;
        }
        let uid = util::hash_str(&utt.id);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(util::mix3(cfg.seed.wrapping_add(4), step, uid));
        let mut dropout = (cfg.encoder.dropout > 0.0).then_some(Dropout {
            rng: &mut dropout_rng,
            p: cfg.encoder.dropout,
        });
        let logits = utterance_logits(
            utt,
            params,
            cfg,
            Some(util::mix3(cfg.seed, step, uid)),
            &mut dropout,
        )?;
        let loss = ctc::ctc_loss(&logits, targets)?.scale(1.0 / n as f64);
        let v = forward_backward(&loss)
            .map_err(|e| Error::Train(format!("step {step} utterance `{}`: {e}", utt.id)))?;
        loss_sum += v * n as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Train(format!(
            "step {step}: every utterance was skipped (targets too long?)"
        )));
    }
    adam_step(params, adam, lr)?;
    // Non-trainable parameters (frozen frontend, mask embedding) may
    // still have collected gradients; drop them so nothing accumulates
    // across steps.
    params.clear_grads();
    Ok(FinetuneStepMetrics {
        step,
        loss: loss_sum / used as f64,
        lr,
        skipped_utterances: batch.len() - used,
    })
}

/// Masking-free evaluation: mean per-utterance CTC loss and pooled
/// greedy-decode CER over the given corpus.
pub fn evaluate<S: Scalar>(
    corpus: &[Utterance<S>],
    params: &ParameterSet<S>,
    cfg: &FinetuneConfig,
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut pairs = Vec::with_capacity(corpus.len());
    for utt in corpus {
        let targets = utt
            .targets
            .as_ref()
            .ok_or_else(|| Error::Train(format!("utterance `{}` has no transcript", utt.id)))?;
        let logits = utterance_logits(utt, params, cfg, None, &mut None)?;
        if logits.rows() >= ctc::min_frames_for(targets) {
            loss_sum += ctc::ctc_loss(&logits, targets)?.item().to_f64();
            count += 1;
        }
        let hyp = vocab.decode(&ctc::greedy_decode(&logits));
        pairs.push((utt.transcript.clone().unwrap_or_default(), hyp));
    }
    if count == 0 {
        return Err(Error::Train("no admissible dev utterance".into()));
    }
    let report = ctc::error_rate(&pairs, ErrorUnit::Char, false)?;
    Ok((loss_sum / count as f64, report.error_rate))
}

/// Steps at which evaluation runs: every `eval_every`, plus the final
/// step when it is not already a multiple.
pub fn eval_steps(max_steps: u64, eval_every: u64) -> Vec<u64> {
    let mut steps: Vec<u64> = (1..=max_steps).filter(|s| s % eval_every == 0).collect();
    if max_steps % eval_every != 0 {
        steps.push(max_steps);
    }
    steps
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

#[derive(Debug, Serialize)]
struct FinetuneReport<'a> {
    evals: &'a [EvalRecord],
    final_model: String,
}

pub struct FinetuneSummary {
    pub evals: Vec<EvalRecord>,
    pub final_model: PathBuf,
    pub report_path: PathBuf,
    pub metrics_path: PathBuf,
}

/// Full fine-tuning run: optional pretrained initialization, budget
/// batching, periodic dev evaluation with top-k checkpoint retention,
/// and a final element-wise average of the retained checkpoints.
pub fn run_finetuning<S: Scalar>(
    pretrained_ckpt: Option<&Path>,
    train_entries: &[ManifestEntry],
    dev_entries: &[ManifestEntry],
    cfg: &FinetuneConfig,
    vocab: &Vocabulary,
    out_dir: &Path,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    if train_entries.is_empty() || dev_entries.is_empty() {
        return Err(Error::Manifest("empty train or dev manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let cmvn = match cfg.frontend.kind {
        FrontendKind::Fbank => {
            let stats = estimate_corpus_cmvn(train_entries)?;
            stats.save(&out_dir.join("cmvn.txt"))?;
            Some(stats)
        }
        FrontendKind::Wav => None,
    };
    let train: Vec<Utterance<S>> =
        load_corpus(train_entries, cfg.frontend.kind, cmvn.as_ref(), Some(vocab))?;
    let dev: Vec<Utterance<S>> =
        load_corpus(dev_entries, cfg.frontend.kind, cmvn.as_ref(), Some(vocab))?;

    let pretrained = match pretrained_ckpt {
        Some(p) => Some(ckpt::load::<S>(p)?.0),
        None => None,
    };
    let mut params = init_finetune_params(cfg, vocab.len(), cfg.seed, pretrained.as_ref())?;
    let trainable = trainable_names(&params, cfg);
    let mut adam = AdamState::for_names(
        &params,
        &trainable,
        cfg.adam_betas.0,
        cfg.adam_betas.1,
        cfg.adam_eps,
    );

    let unit = match cfg.frontend.kind {
        FrontendKind::Wav => LengthUnit::Samples,
        FrontendKind::Fbank => LengthUnit::Frames,
    };
    let budget = dataio::budget_for_seconds(cfg.budget_seconds, unit);
    let effective: Vec<ManifestEntry> = train
        .iter()
        .map(|u| ManifestEntry {
            utt_id: u.id.clone(),
            audio_path: String::new(),
            length: u.input_len,
            transcript: None,
        })
        .collect();
    let n_batches = {
        let plan = dataio::make_batches(&effective, budget, util::mix(cfg.seed, 0));
        if plan.batches.is_empty() {
            return Err(Error::Train("no batch fits the budget".into()));
        }
        plan.batches.len() as u64
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut store = CheckpointStore::open(&out_dir.join("top_k"), cfg.keep_top)?;
    let eval_at = eval_steps(cfg.max_steps, cfg.eval_every);
    let mut evals = Vec::new();

    for step in 0..cfg.max_steps {
        let epoch = step / n_batches;
        let batch_idx = (step % n_batches) as usize;
        let plan = dataio::make_batches(&effective, budget, util::mix(cfg.seed, epoch));
        let batch: Vec<&Utterance<S>> = plan.batches[batch_idx]
            .indices
            .iter()
            .map(|&i| &train[i])
            .collect();
        let t0 = Instant::now();
        let metrics = finetune_step(&batch, &mut params, &mut adam, cfg, step)?;
        let wall_ms = t0.elapsed().as_millis() as u64;
        writeln!(log, "{}", metrics.to_json_line(wall_ms))
            .map_err(|e| Error::io(&metrics_path, e))?;

        let completed = step + 1;
        if eval_at.contains(&completed) {
            let (dev_loss, dev_cer) = evaluate(&dev, &params, cfg, vocab)?;
            store.add(&params, completed, dev_loss)?;
            evals.push(EvalRecord {
                step: completed,
                dev_loss,
                dev_cer,
            });
        }
    }

    let averaged = ckpt::average::<S>(&store.paths())?;
    let final_model = out_dir.join("averaged_model.bin");
    ckpt::save(
        &final_model,
        &averaged,
        &CheckpointMeta {
            step: cfg.max_steps,
            dev_metric: None,
        },
    )?;
    let report_path = out_dir.join("report.json");
    let report = FinetuneReport {
        evals: &evals,
        final_model: final_model.display().to_string(),
    };
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serialization"),
    )
    .map_err(|e| Error::io(&report_path, e))?;

    Ok(FinetuneSummary {
        evals,
        final_model,
        report_path,
        metrics_path,
    })
}
