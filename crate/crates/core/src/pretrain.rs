//! Masked contrastive pretraining: span masking of encoder inputs, the
//! contrastive loss between context vectors and quantized targets, and
//! the training loop.
//!
//! Quantized targets always come from the pre-mask latents; the mask
//! embedding substitution happens only on the encoder input. Distractors
//! are drawn from other masked frames of the same utterance, seeded by
//! `(run seed, step, utterance id)` so batch order cannot change the
//! draw.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, AdamState};
use crate::audio::{self, CmvnStats};
use crate::ckpt::{self, CheckpointMeta};
use crate::dataio::{self, LengthUnit, ManifestEntry, Vocabulary};
use crate::encoder::{self, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, FrontendKind};
use crate::params::ParameterSet;
use crate::quantizer::{self, QuantizeMode, QuantizerConfig};
use crate::scalar::Scalar;
use crate::schedule::LrSchedule;
use crate::tensor::{forward_backward, Tensor};
use crate::util;

// ---------------------------------------------------------------------------
// Span masking
// ---------------------------------------------------------------------------

/// Sampled time-axis mask for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub starts: Vec<usize>,
    pub mask: Vec<bool>,
    pub span: usize,
}

impl MaskPlan {
    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Each index is a span start independently with probability `p_start`;
/// spans truncate at the sequence end and overlap freely. An empty draw
/// forces one span at a seeded position so the contrastive loss always
/// has at least one masked frame.
pub fn sample_mask(t_len: usize, p_start: f64, span: usize, seed: u64) -> MaskPlan {
    assert!(t_len >= 1, "sample_mask on empty sequence");
    assert!((0.0..=1.0).contains(&p_start), "p_start out of [0,1]");
    assert!(span >= 1, "span must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::new();
    for i in 0..t_len {
        if rng.random_range(0.0..1.0) < p_start {
            starts.push(i);
        }
    }
    if starts.is_empty() {
        starts.push(rng.random_range(0..t_len));
    }
    let mut mask = vec![false; t_len];
    for &s in &starts {
        for m in mask.iter_mut().skip(s).take(span) {
            *m = true;
        }
    }
    MaskPlan { starts, mask, span }
}

// ---------------------------------------------------------------------------
// Contrastive loss
// ---------------------------------------------------------------------------

pub struct ContrastiveOutput<S: Scalar> {
    /// Mean `-log softmax` over masked frames.
    pub loss: Tensor<S>,
    pub masked_frames: usize,
    /// Distractor frame indices drawn for each masked frame, in masked
    /// index order (for oracle replay).
    pub distractors: Vec<Vec<usize>>,
}

/// Softmax cross-entropy distinguishing each masked frame's quantized
/// target from `k` distractors drawn (with replacement) from the other
/// masked frames, at cosine similarity scale `1/kappa`.
pub fn contrastive_loss<S: Scalar>(
    context: &Tensor<S>,
    targets: &Tensor<S>,
    plan: &MaskPlan,
    k: usize,
    kappa: f64,
    seed: u64,
) -> Result<ContrastiveOutput<S>> {
    if context.dims() != targets.dims() {
        return Err(Error::Shape(format!(
            "context {:?} and targets {:?} disagree",
            context.dims(),
            targets.dims()
        )));
    }
    if kappa <= 0.0 {
        return Err(Error::Config("kappa must be positive".into()));
    }
    let masked = plan.masked_indices();
    if masked.len() < 2 {
        return Err(Error::Train(format!(
            "contrastive loss needs at least 2 masked frames, got {}",
            masked.len()
        )));
    }
    if *masked.last().unwrap() >= context.rows() {
        return Err(Error::Shape("mask plan longer than sequence".into()));
    }

    let mut per_frame = Vec::with_capacity(masked.len());
    let mut drawn = Vec::with_capacity(masked.len());
    for &t in &masked {
        let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, t as u64));
        let others: Vec<usize> = masked.iter().copied().filter(|&m| m != t).collect();
        let distractors: Vec<usize> = (0..k)
            .map(|_| others[rng.random_range(0..others.len())])
            .collect();

        let mut rows = Vec::with_capacity(k + 1);
        rows.push(t);
        rows.extend_from_slice(&distractors);
        let dim = targets.cols();
        let mut index = Vec::with_capacity(rows.len() * dim);
        for &r in &rows {
            for j in 0..dim {
                index.push(r * dim + j);
            }
        }
        let candidates = targets.gather(&[rows.len(), dim], &index);
        let c_row_index: Vec<usize> = (t * dim..(t + 1) * dim).collect();
        let c_row = context.gather(&[1, dim], &c_row_index);

        let dots = candidates.matmul_nt(&c_row); // [k+1, 1]
        let c_norm = c_row.mul(&c_row).row_sums().powf(0.5); // [1,1]
        let cand_norms = candidates.mul(&candidates).row_sums().powf(0.5); // [k+1,1]
        let cos = dots.div(&cand_norms.scale_by(&c_norm));
        let logits = cos.scale(1.0 / kappa).reshape(&[1, k + 1]);
        let lse = logits.logsumexp_rows(); // [1,1]
        let positive = logits.slice_cols(0..1);
        per_frame.push(lse.sub(&positive).reshape(&[1]));
        drawn.push(distractors);
    }
    let loss = Tensor::add_n(&per_frame).scale(1.0 / masked.len() as f64);
    Ok(ContrastiveOutput {
        loss,
        masked_frames: masked.len(),
        distractors: drawn,
    })
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub distractors: usize,
    pub kappa: f64,
    pub diversity_weight: f64,
    pub max_steps: u64,
    pub peak_lr: f64,
    pub budget_seconds: f64,
    pub checkpoint_every: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

impl PretrainConfig {
    /// BASE-scale defaults for the given frontend/encoder pair.
    pub fn base(frontend: FrontendConfig, encoder: EncoderConfig) -> Self {
        let quantizer = QuantizerConfig::base(encoder.dim);
        PretrainConfig {
            frontend,
            encoder,
            quantizer,
            mask_prob: 0.065,
            mask_span: 10,
            distractors: 100,
            kappa: 0.1,
            diversity_weight: 0.1,
            max_steps: 400_000,
            peak_lr: 5e-4,
            budget_seconds: 87.5,
            checkpoint_every: 1000,
            adam_betas: (crate::adam::DEFAULT_BETA1, crate::adam::DEFAULT_BETA2),
            adam_eps: crate::adam::DEFAULT_EPS,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.quantizer.validate()?;
        if self.frontend.output_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "frontend output dim {} != encoder dim {}",
                self.frontend.output_dim, self.encoder.dim
            )));
        }
        if self.quantizer.input_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "quantizer input dim {} != encoder dim {}",
                self.quantizer.input_dim, self.encoder.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::Config("bad masking hyperparameters".into()));
        }
        if self.distractors == 0 || self.kappa <= 0.0 {
            return Err(Error::Config("bad contrastive hyperparameters".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::WarmupDecay {
            peak: self.peak_lr,
            total_steps: self.max_steps,
        }
    }
}

/// Initialize all pretraining parameters (frontend, encoder, quantizer,
/// and the final projection of context vectors into the target space).
pub fn init_pretrain_params<S: Scalar>(cfg: &PretrainConfig, seed: u64) -> Result<ParameterSet<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, 0x9a7a));
    let mut ps = ParameterSet::new();
    frontend::init_frontend_params(&cfg.frontend, &mut rng, &mut ps)?;
    encoder::init_encoder_params(&cfg.encoder, &mut rng, &mut ps)?;
    quantizer::init_quantizer_params(&cfg.quantizer, &mut rng, &mut ps)?;
    ps.insert(
        "pretrain.final_proj.weight",
        crate::params::xavier_uniform(
            &mut rng,
            &[cfg.encoder.dim, cfg.quantizer.target_dim],
            cfg.encoder.dim,
            cfg.quantizer.target_dim,
        ),
    )?;
    ps.insert(
        "pretrain.final_proj.bias",
        crate::params::zeros_param(&[cfg.quantizer.target_dim]),
    )?;
    Ok(ps)
}

// ---------------------------------------------------------------------------
// Corpus loading
// ---------------------------------------------------------------------------

/// One loaded utterance: FBANK features `[T, 80]` or waveform `[1, N]`.
pub struct Utterance<S: Scalar> {
    pub id: String,
    pub input: Tensor<S>,
    pub input_len: usize,
    pub targets: Option<Vec<usize>>,
    pub transcript: Option<String>,
}

/// Read and featurize a manifest. For FBANK frontends CMVN stats must be
/// provided (or estimated by the caller beforehand). Extraction runs in
/// parallel; results keep manifest order.
pub fn load_corpus<S: Scalar>(
    entries: &[ManifestEntry],
    kind: FrontendKind,
    cmvn: Option<&CmvnStats>,
    vocab: Option<&Vocabulary>,
) -> Result<Vec<Utterance<S>>> {
    // Audio decoding and feature extraction are pure and run in
    // parallel; tensors are built sequentially afterwards (the graph
    // handles are not Send).
    let raw: Vec<(Vec<usize>, Vec<f64>, usize)> = entries
        .par_iter()
        .map(|e| {
            let wave = audio::read_wav(Path::new(&e.audio_path))?;
            match kind {
                FrontendKind::Wav => {
                    let n = wave.len();
                    Ok((vec![1, n], wave.samples().to_vec(), n))
                }
                FrontendKind::Fbank => {
                    let mut f = audio::extract_fbank(&wave)?;
                    if let Some(stats) = cmvn {
                        f = audio::apply_cmvn(&f, stats)?;
                    }
                    let frames = f.frames();
                    Ok((vec![frames, f.dim()], f.data().to_vec(), frames))
                }
            }
        })
        .collect::<Result<_>>()?;

    entries
        .iter()
        .zip(raw)
        .map(|(e, (dims, data, input_len))| {
            let targets = match (vocab, &e.transcript) {
                (Some(v), Some(t)) => Some(v.encode(t)?),
                _ => None,
            };
            let values: Vec<S> = data.iter().map(|&v| S::from_f64(v)).collect();
            Ok(Utterance {
                id: e.utt_id.clone(),
                input: Tensor::constant(&dims, values),
                input_len,
                targets,
                transcript: e.transcript.clone(),
            })
        })
        .collect()
}

/// Estimate corpus CMVN stats from the manifest's audio.
pub fn estimate_corpus_cmvn(entries: &[ManifestEntry]) -> Result<CmvnStats> {
    let partials: Vec<audio::CmvnAccumulator> = entries
        .par_iter()
        .map(|e| {
            let wave = audio::read_wav(Path::new(&e.audio_path))?;
            let f = audio::extract_fbank(&wave)?;
            let mut acc = audio::CmvnAccumulator::new();
            acc.add_matrix(&f);
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    partials
        .into_iter()
        .fold(audio::CmvnAccumulator::new(), |a, b| a.merge(b))
        .finalize()
}

// ---------------------------------------------------------------------------
// Training step and loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub contrastive: f64,
    pub diversity: f64,
    pub perplexity: f64,
    pub lr: f64,
    pub skipped_utterances: usize,
}

impl StepMetrics {
    /// One JSON object per line; field order pinned, wall time last so
    /// determinism checks can strip it.
    pub fn to_json_line(&self, wall_ms: u64) -> String {
        format!(
            "{{\"step\":{},\"loss\":{},\"contrastive\":{},\"diversity\":{},\"perplexity\":{},\"lr\":{},\"wall_ms\":{}}}",
            self.step, self.loss, self.contrastive, self.diversity, self.perplexity, self.lr, wall_ms
        )
    }
}

/// One optimizer update over a batch of utterances. Losses are averaged
/// over the batch; backward runs per utterance so gradients accumulate
/// additively.
pub fn pretrain_step<S: Scalar>(
    batch: &[&Utterance<S>],
    params: &mut ParameterSet<S>,
    adam: &mut AdamState<S>,
    cfg: &PretrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let lr = cfg.schedule().lr_at(step);
    let temperature = quantizer::anneal_temperature(step);
    let n = batch.len();
    if n == 0 {
        return Err(Error::Train("empty batch".into()));
    }

    let mut contrastive_sum = 0.0;
    let mut diversity_sum = 0.0;
    let mut perplexity_sum = 0.0;
    let mut used = 0usize;
    for utt in batch {
        let uid = util::hash_str(&utt.id);
        let z = frontend::encode(&utt.input, utt.input_len, &cfg.frontend, params)?;
        let plan = sample_mask(
            z.true_len,
            cfg.mask_prob,
            cfg.mask_span,
            util::mix3(cfg.seed, step, uid),
        );
        if plan.masked_count() < 2 {
            continue;
        }
        // Targets from pre-mask latents.
        let q = quantizer::quantize(
            &z.states,
            &cfg.quantizer,
            params,
            temperature,
            QuantizeMode::Hard,
            util::mix3(cfg.seed.wrapping_add(1), step, uid),
        )?;
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(util::mix3(cfg.seed.wrapping_add(2), step, uid));
        let mut dropout = (cfg.encoder.dropout > 0.0).then_some(Dropout {
            rng: &mut dropout_rng,
            p: cfg.encoder.dropout,
        });
        let enc = encoder::encode(&z, Some(&plan.masked_indices()), &cfg.encoder, params, &mut dropout)?;
        let projected = enc.context.linear(
            params.get("pretrain.final_proj.weight")?,
            Some(params.get("pretrain.final_proj.bias")?),
        );
        let contrastive = contrastive_loss(
            &projected,
            &q.targets,
            &plan,
            cfg.distractors,
            cfg.kappa,
            util::mix3(cfg.seed.wrapping_add(3), step, uid),
        )?;
        let diversity = quantizer::diversity_loss(&q.soft_probs, cfg.quantizer.groups)?;
        let utt_loss = contrastive
            .loss
            .add(&diversity.scale(cfg.diversity_weight))
            .scale(1.0 / n as f64);
        let loss_val = forward_backward(&utt_loss).map_err(|e| {
            Error::Train(format!(
                "step {step} utterance `{}`: {e} (contrastive so far {contrastive_sum}, diversity {diversity_sum})",
                utt.id
            ))
        })?;
        debug_assert!(loss_val.is_finite());
        contrastive_sum += contrastive.loss.item().to_f64();
        diversity_sum += diversity.item().to_f64();
        perplexity_sum += q.prob_perplexity;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Train(format!(
            "step {step}: every utterance in the batch was skipped"
        )));
    }
    adam_step(params, adam, lr)?;

    Ok(StepMetrics {
        step,
        loss: (contrastive_sum + cfg.diversity_weight * diversity_sum) / used as f64,
        contrastive: contrastive_sum / used as f64,
        diversity: diversity_sum / used as f64,
        perplexity: perplexity_sum / used as f64,
        lr,
        skipped_utterances: batch.len() - used,
    })
}

pub struct PretrainSummary {
    pub steps_done: u64,
    pub final_model: PathBuf,
    pub metrics_path: PathBuf,
    pub cmvn_path: Option<PathBuf>,
}

fn save_optim_state<S: Scalar>(
    path: &Path,
    params: &ParameterSet<S>,
    adam: &AdamState<S>,
) -> Result<()> {
    let mut ps = ParameterSet::new();
    for name in adam.owned_names() {
        let dims = params.get(&name)?.dims().to_vec();
        let (m, v) = adam.moments(&name).unwrap();
        ps.insert(&format!("m.{name}"), Tensor::param(&dims, m.to_vec()))?;
        ps.insert(&format!("v.{name}"), Tensor::param(&dims, v.to_vec()))?;
    }
    ckpt::save(
        path,
        &ps,
        &CheckpointMeta {
            step: adam.step_count(),
            dev_metric: None,
        },
    )
}

fn load_optim_state<S: Scalar>(path: &Path, adam: &mut AdamState<S>) -> Result<u64> {
    let (ps, meta) = ckpt::load::<S>(path)?;
    let mut moments = Vec::new();
    for name in adam.owned_names() {
        let m = ps.get(&format!("m.{name}"))?.data().to_vec();
        let v = ps.get(&format!("v.{name}"))?.data().to_vec();
        moments.push((name, m, v));
    }
    adam.restore(meta.step, moments)?;
    Ok(meta.step)
}

/// Full pretraining loop: loads and featurizes the corpus, iterates
/// seeded epochs of budget batches, checkpoints periodically, and
/// resumes bit-exactly from `out_dir` when a latest checkpoint exists.
pub fn run_pretraining<S: Scalar>(
    entries: &[ManifestEntry],
    cfg: &PretrainConfig,
    out_dir: &Path,
) -> Result<PretrainSummary> {
    run_pretraining_until::<S>(entries, cfg, out_dir, None)
}

/// As [`run_pretraining`] but stopping after `stop_step` steps (used to
/// exercise interruption/resume). The stop must land on a checkpoint
/// boundary so the resumed run replays bit-exactly.
pub fn run_pretraining_until<S: Scalar>(
    entries: &[ManifestEntry],
    cfg: &PretrainConfig,
    out_dir: &Path,
    stop_step: Option<u64>,
) -> Result<PretrainSummary> {
    if let Some(stop) = stop_step {
        if stop % cfg.checkpoint_every != 0 {
            return Err(Error::Train(format!(
                "stop step {stop} is not a checkpoint boundary (every {})",
                cfg.checkpoint_every
            )));
        }
    }
    cfg.validate()?;
    if entries.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cmvn_path = None;
    let cmvn = match cfg.frontend.kind {
        FrontendKind::Fbank => {
            let stats = estimate_corpus_cmvn(entries)?;
            let p = out_dir.join("cmvn.txt");
            stats.save(&p)?;
            cmvn_path = Some(p);
            Some(stats)
        }
        FrontendKind::Wav => None,
    };
    let corpus: Vec<Utterance<S>> = load_corpus(entries, cfg.frontend.kind, cmvn.as_ref(), None)?;

    // Batch budgets use true loaded lengths in the frontend's unit.
    let unit = match cfg.frontend.kind {
        FrontendKind::Wav => LengthUnit::Samples,
        FrontendKind::Fbank => LengthUnit::Frames,
    };
    let budget = dataio::budget_for_seconds(cfg.budget_seconds, unit);
    let effective: Vec<ManifestEntry> = corpus
        .iter()
        .map(|u| ManifestEntry {
            utt_id: u.id.clone(),
            audio_path: String::new(),
            length: u.input_len,
            transcript: None,
        })
        .collect();

    let mut params = init_pretrain_params::<S>(cfg, cfg.seed)?;
    let mut adam = AdamState::new(
        &params,
        cfg.adam_betas.0,
        cfg.adam_betas.1,
        cfg.adam_eps,
    );

    let latest_model = out_dir.join("latest_model.bin");
    let latest_optim = out_dir.join("latest_optim.bin");
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut start_step = 0u64;
    if latest_model.exists() && latest_optim.exists() {
        let (loaded, _) = ckpt::load::<S>(&latest_model)?;
        params = loaded;
        start_step = load_optim_state(&latest_optim, &mut adam)?;
    }

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(start_step > 0)
        .truncate(start_step == 0)
        .write(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let n_batches = {
        let plan = dataio::make_batches(&effective, budget, util::mix(cfg.seed, 0));
        if plan.batches.is_empty() {
            return Err(Error::Train(
                "no batch fits the budget; raise budget_seconds".into(),
            ));
        }
        plan.batches.len() as u64
    };

    let stop_at = stop_step.unwrap_or(cfg.max_steps).min(cfg.max_steps);
    let mut step = start_step;
    while step < stop_at {
        let epoch = step / n_batches;
        let batch_idx = (step % n_batches) as usize;
        let plan = dataio::make_batches(&effective, budget, util::mix(cfg.seed, epoch));
        let batch: Vec<&Utterance<S>> = plan.batches[batch_idx]
            .indices
            .iter()
            .map(|&i| &corpus[i])
            .collect();
        let t0 = Instant::now();
        let metrics = pretrain_step(&batch, &mut params, &mut adam, cfg, step)?;
        let wall_ms = t0.elapsed().as_millis() as u64;
        writeln!(log, "{}", metrics.to_json_line(wall_ms)).map_err(|e| Error::io(&metrics_path, e))?;
        step += 1;
        if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
            ckpt::save(
                &latest_model,
                &params,
                &CheckpointMeta {
                    step,
                    dev_metric: None,
                },
            )?;
            save_optim_state(&latest_optim, &params, &adam)?;
        }
    }

    // An early stop leaves only the latest checkpoint pair behind.
    let final_model = if step == cfg.max_steps {
        let p = out_dir.join("final_model.bin");
        ckpt::save(
            &p,
            &params,
            &CheckpointMeta {
                step,
                dev_metric: None,
            },
        )?;
        p
    } else {
        latest_model
    };
    Ok(PretrainSummary {
        steps_done: step,
        final_model,
        metrics_path,
        cmvn_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;

    pub(crate) fn toy_config(kind: EncoderKind) -> PretrainConfig {
        let frontend = FrontendConfig {
            kind: FrontendKind::Fbank,
            channels: 4,
            output_dim: 32,
        };
        let encoder = EncoderConfig {
            kind,
            blocks: 2,
            dim: 32,
            heads: 4,
            ffn_dim: 48,
            conv_kernel: 7,
            dropout: 0.0,
        };
        let quantizer = QuantizerConfig {
            input_dim: 32,
            groups: 2,
            entries: 12,
            entry_dim: 8,
            target_dim: 16,
        };
        PretrainConfig {
            frontend,
            encoder,
            quantizer,
            mask_prob: 0.2,
            mask_span: 3,
            distractors: 10,
            kappa: 0.1,
            diversity_weight: 0.1,
            max_steps: 100,
            peak_lr: 2e-3,
            budget_seconds: 87.5,
            checkpoint_every: 25,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-6,
            seed: 7,
        }
    }

    fn random_features(seed: u64, frames: usize) -> Utterance<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..frames * 80).map(|_| rng.random_range(-1.0..1.0)).collect();
        Utterance {
            id: format!("utt_{seed}"),
            input: Tensor::constant(&[frames, 80], data),
            input_len: frames,
            targets: None,
            transcript: None,
        }
    }

    #[test]
    fn zero_probability_forces_exactly_one_span() {
        for seed in 0..20 {
            let plan = sample_mask(50, 0.0, 5, seed);
            assert_eq!(plan.starts.len(), 1);
            let count = plan.masked_count();
            assert!(count >= 1 && count <= 5);
        }
    }

    #[test]
    fn full_probability_masks_everything() {
        let plan = sample_mask(10, 1.0, 10, 3);
        assert!(plan.starts.contains(&0));
        assert_eq!(plan.masked_count(), 10);
    }

    #[test]
    fn masked_fraction_matches_closed_form() {
        // Interior coverage probability is 1 - (1-p)^span.
        let plan = sample_mask(10_000, 0.065, 10, 11);
        let frac = plan.masked_count() as f64 / 10_000.0;
        let expect = 1.0 - 0.935f64.powi(10);
        assert!((frac - expect).abs() < 0.02, "{frac} vs {expect}");
    }

    #[test]
    fn contrastive_closed_form_orthogonal_distractors() {
        // c_t = q_t = e_t: positive cosine 1, every distractor cosine 0.
        let t = 101;
        let mut eye = vec![0.0f64; t * t];
        for i in 0..t {
            eye[i * t + i] = 1.0;
        }
        let c = Tensor::constant(&[t, t], eye.clone());
        let q = Tensor::constant(&[t, t], eye);
        let plan = MaskPlan {
            starts: vec![0],
            mask: vec![true; t],
            span: t,
        };
        let out = contrastive_loss(&c, &q, &plan, 100, 0.1, 5).unwrap();
        let expect = (1.0 + 100.0 * (-10.0f64).exp()).ln();
        assert!(
            (out.loss.item() - expect).abs() < 1e-9,
            "{} vs {expect}",
            out.loss.item()
        );
        assert_eq!(out.masked_frames, t);
    }

    #[test]
    fn identical_candidates_give_log_k_plus_one() {
        let t = 6;
        let data: Vec<f64> = (0..t).flat_map(|_| [0.3, -0.2, 0.9, 0.1]).collect();
        let c = Tensor::constant(&[t, 4], data.clone());
        let q = Tensor::constant(&[t, 4], data);
        let plan = MaskPlan {
            starts: vec![0],
            mask: vec![true; t],
            span: t,
        };
        let k = 3;
        let out = contrastive_loss(&c, &q, &plan, k, 0.1, 9).unwrap();
        let expect = ((k + 1) as f64).ln();
        assert!((out.loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_matches_bruteforce_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, d, k) = (8usize, 5usize, 3usize);
        let cdata: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qdata: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = Tensor::constant(&[t, d], cdata.clone());
        let q = Tensor::constant(&[t, d], qdata.clone());
        let plan = MaskPlan {
            starts: vec![0],
            mask: vec![true, false, true, true, false, true, true, true],
            span: 1,
        };
        let out = contrastive_loss(&c, &q, &plan, k, 0.1, 33).unwrap();

        // Explicit softmax oracle over the recorded draws.
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let masked = plan.masked_indices();
        let mut total = 0.0;
        for (mi, &t_idx) in masked.iter().enumerate() {
            let crow = &cdata[t_idx * d..(t_idx + 1) * d];
            let mut logits = vec![cos(crow, &qdata[t_idx * d..(t_idx + 1) * d]) / 0.1];
            for &dist in &out.distractors[mi] {
                logits.push(cos(crow, &qdata[dist * d..(dist + 1) * d]) / 0.1);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|&l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[0];
        }
        let expect = total / masked.len() as f64;
        assert!(
            (out.loss.item() - expect).abs() < 1e-10,
            "{} vs {expect}",
            out.loss.item()
        );
    }

    #[test]
    fn single_masked_frame_is_an_error() {
        let c = Tensor::constant(&[4, 3], vec![1.0; 12]);
        let plan = MaskPlan {
            starts: vec![0],
            mask: vec![true, false, false, false],
            span: 1,
        };
        assert!(contrastive_loss(&c, &c, &plan, 2, 0.1, 0).is_err());
    }

    #[test]
    fn quantizer_targets_ignore_mask_substitution() {
        let cfg = toy_config(EncoderKind::Transformer);
        let params = init_pretrain_params::<f32>(&cfg, 3).unwrap();
        let utt = random_features(5, 24);
        let z = frontend::encode(&utt.input, utt.input_len, &cfg.frontend, &params).unwrap();
        let q1 = quantizer::quantize(&z.states, &cfg.quantizer, &params, 2.0, QuantizeMode::Hard, 9)
            .unwrap();
        // Run the encoder with mask substitution in between.
        let plan = sample_mask(z.true_len, 0.5, 2, 1);
        let _ = encoder::encode(&z, Some(&plan.masked_indices()), &cfg.encoder, &params, &mut None)
            .unwrap();
        let q2 = quantizer::quantize(&z.states, &cfg.quantizer, &params, 2.0, QuantizeMode::Hard, 9)
            .unwrap();
        assert_eq!(q1.indices, q2.indices);
        let same = q1
            .targets
            .data()
            .iter()
            .zip(q2.targets.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let mut cfg = toy_config(EncoderKind::Transformer);
        cfg.peak_lr = 0.0;
        let mut params = init_pretrain_params::<f32>(&cfg, 0).unwrap();
        let before: Vec<(String, Vec<f32>)> = params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();
        let mut adam = AdamState::with_defaults(&params);
        let utts = [random_features(1, 20), random_features(2, 28)];
        let batch: Vec<&Utterance<f32>> = utts.iter().collect();
        pretrain_step(&batch, &mut params, &mut adam, &cfg, 0).unwrap();
        for (name, data) in before {
            let now = params.get(&name).unwrap();
            assert!(now
                .data()
                .iter()
                .zip(&data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn same_seed_steps_are_bit_identical() {
        let cfg = toy_config(EncoderKind::Transformer);
        let run = || {
            let mut params = init_pretrain_params::<f32>(&cfg, 11).unwrap();
            let mut adam = AdamState::new(&params, 0.9, 0.98, 1e-6);
            let utts = [random_features(3, 20), random_features(4, 26)];
            let batch: Vec<&Utterance<f32>> = utts.iter().collect();
            let mut out = Vec::new();
            for step in 0..10 {
                out.push(pretrain_step(&batch, &mut params, &mut adam, &cfg, step).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_order_does_not_change_the_loss() {
        let cfg = toy_config(EncoderKind::Transformer);
        let utts = [
            random_features(5, 20),
            random_features(6, 24),
            random_features(7, 30),
        ];
        let run = |order: &[usize]| {
            let mut params = init_pretrain_params::<f32>(&cfg, 13).unwrap();
            let mut adam = AdamState::new(&params, 0.9, 0.98, 1e-6);
            let batch: Vec<&Utterance<f32>> = order.iter().map(|&i| &utts[i]).collect();
            pretrain_step(&batch, &mut params, &mut adam, &cfg, 0).unwrap()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 0, 1]);
        assert!((a.loss - b.loss).abs() < 1e-5, "{} vs {}", a.loss, b.loss);
        assert!((a.contrastive - b.contrastive).abs() < 1e-5);
    }

    #[test]
    fn run_pretraining_rejects_empty_manifest() {
        let cfg = toy_config(EncoderKind::Transformer);
        let dir = tempfile::tempdir().unwrap();
        assert!(run_pretraining::<f32>(&[], &cfg, dir.path()).is_err());
    }

    #[test]
    fn smoke_run_both_frontends_and_encoders() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = dataio::build_vocab(["abcd"]).unwrap();
        let corpus = dataio::generate_synthetic_corpus(4, &vocab, 5, dir.path()).unwrap();

        for (kind, enc_kind) in [
            (FrontendKind::Fbank, EncoderKind::Transformer),
            (FrontendKind::Wav, EncoderKind::Conformer),
        ] {
            let mut cfg = toy_config(enc_kind);
            cfg.frontend.kind = kind;
            cfg.frontend.channels = 4;
            cfg.max_steps = 3;
            cfg.checkpoint_every = 2;
            let entries = dataio::load_manifest(match kind {
                FrontendKind::Wav => &corpus.manifest_wav,
                FrontendKind::Fbank => &corpus.manifest_fbank,
            })
            .unwrap();
            let out = dir.path().join(format!("run_{kind:?}_{enc_kind:?}"));
            let summary = run_pretraining::<f32>(&entries, &cfg, &out).unwrap();
            assert_eq!(summary.steps_done, 3);
            assert!(summary.final_model.exists());
            let text = fs::read_to_string(&summary.metrics_path).unwrap();
            assert_eq!(text.lines().count(), 3);
        }
    }
}
