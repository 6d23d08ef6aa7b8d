//! Named model fragments wired into the central-difference gradient
//! checker. Each fragment is a deterministic FP64 scalar loss over a
//! parameter set at toy width; structure (layer stacks, kernels,
//! strides, attention variants) matches the production configuration.
//!
//! Quantized fragments run the soft Gumbel path: the straight-through
//! hard selection is piecewise constant in the logits, so central
//! differences cannot see its estimator by construction. The estimator
//! itself is pinned by a dedicated equality test in the quantizer
//! module.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderKind};
use crate::error::Result;
use crate::finetune;
use crate::fragments;
use crate::frontend::{self, FrontendConfig, FrontendKind, LatentSequence};
use crate::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use crate::params::ParameterSet;
use crate::pretrain::{self, MaskPlan};
use crate::quantizer::{self, QuantizeMode, QuantizerConfig};
use crate::tensor::Tensor;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fragment {
    FbankFrontend,
    WavFrontend,
    TransformerBlock,
    ConformerBlock,
    Quantizer,
    ContrastiveLoss,
    CtcLoss,
    PretrainModel,
    CtcModel,
}

impl Fragment {
    pub const ALL: [Fragment; 9] = [
        Fragment::FbankFrontend,
        Fragment::WavFrontend,
        Fragment::TransformerBlock,
        Fragment::ConformerBlock,
        Fragment::Quantizer,
        Fragment::ContrastiveLoss,
        Fragment::CtcLoss,
        Fragment::PretrainModel,
        Fragment::CtcModel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Fragment::FbankFrontend => "fbank-frontend",
            Fragment::WavFrontend => "wav-frontend",
            Fragment::TransformerBlock => "transformer-block",
            Fragment::ConformerBlock => "conformer-block",
            Fragment::Quantizer => "quantizer",
            Fragment::ContrastiveLoss => "contrastive-loss",
            Fragment::CtcLoss => "ctc-loss",
            Fragment::PretrainModel => "pretrain-model",
            Fragment::CtcModel => "ctc-model",
        }
    }

    pub fn from_name(name: &str) -> Option<Fragment> {
        Fragment::ALL.iter().copied().find(|f| f.name() == name)
    }
}

fn rand_const(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    Tensor::constant(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn toy_encoder_cfg(kind: EncoderKind, blocks: usize) -> EncoderConfig {
    EncoderConfig {
        kind,
        blocks,
        dim: 16,
        heads: 2,
        ffn_dim: 24,
        conv_kernel: 31,
        dropout: 0.0,
    }
}

/// Run the central-difference check for one fragment at one seed.
pub fn check_fragment(frag: Fragment, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    // h trades truncation against roundoff; 2e-6 keeps both well under
    // the 1e-4 tolerance for the deep fragments.
    let opts = GradCheckOptions {
        h: 2e-6,
        tolerance,
        max_coords_per_param: Some(512),
        coord_seed: seed,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(util::mix(seed, 0xf4a6));
    let mut init_rng = ChaCha8Rng::seed_from_u64(util::mix(seed, 0x1217));

    match frag {
        Fragment::FbankFrontend => {
            let cfg = FrontendConfig {
                kind: FrontendKind::Fbank,
                channels: 4,
                output_dim: 16,
            };
            let mut ps = ParameterSet::new();
            frontend::init_frontend_params(&cfg, &mut init_rng, &mut ps)?;
            let x = rand_const(&mut rng, &[9, 80]);
            let w = rand_const(&mut rng, &[3, 16]);
            gradient_check(
                &ps,
                |ps| {
                    let z = frontend::encode_fbank(&x, 9, &cfg, ps)?;
                    Ok(z.states.mul(&w).sum_all())
                },
                &opts,
            )
        }
        Fragment::WavFrontend => {
            let cfg = FrontendConfig {
                kind: FrontendKind::Wav,
                channels: 8,
                output_dim: 16,
            };
            let mut ps = ParameterSet::new();
            frontend::init_frontend_params(&cfg, &mut init_rng, &mut ps)?;
            let n = 720;
            let t_out = frontend::frontend_output_length(&cfg, n)?;
            let x = rand_const(&mut rng, &[1, n]);
            let w = rand_const(&mut rng, &[t_out, 16]);
            gradient_check(
                &ps,
                |ps| {
                    let z = frontend::encode_wav(&x, n, &cfg, ps)?;
                    Ok(z.states.mul(&w).sum_all())
                },
                &opts,
            )
        }
        Fragment::TransformerBlock => {
            let cfg = toy_encoder_cfg(EncoderKind::Transformer, 1);
            let mut ps = ParameterSet::new();
            encoder::init_encoder_params(&cfg, &mut init_rng, &mut ps)?;
            let h = rand_const(&mut rng, &[6, 16]);
            let w = rand_const(&mut rng, &[6, 16]);
            gradient_check(
                &ps,
                |ps| {
                    let out = encoder::transformer_block(&h, 6, &cfg, ps, 0, &mut None)?;
                    Ok(out.mul(&w).sum_all())
                },
                &opts,
            )
        }
        Fragment::ConformerBlock => {
            let cfg = toy_encoder_cfg(EncoderKind::Conformer, 1);
            let mut ps = ParameterSet::new();
            encoder::init_encoder_params(&cfg, &mut init_rng, &mut ps)?;
            let h = rand_const(&mut rng, &[6, 16]);
            let w = rand_const(&mut rng, &[6, 16]);
            gradient_check(
                &ps,
                |ps| {
                    let out = encoder::conformer_block(&h, 6, &cfg, ps, 0, &mut None)?;
                    Ok(out.mul(&w).sum_all())
                },
                &opts,
            )
        }
        Fragment::Quantizer => {
            let cfg = QuantizerConfig {
                input_dim: 12,
                groups: 2,
                entries: 6,
                entry_dim: 4,
                target_dim: 8,
            };
            let mut ps = ParameterSet::new();
            quantizer::init_quantizer_params(&cfg, &mut init_rng, &mut ps)?;
            let z = rand_const(&mut rng, &[5, 12]);
            let w = rand_const(&mut rng, &[5, 8]);
            let noise_seed = util::mix(seed, 77);
            gradient_check(
                &ps,
                |ps| {
                    let q = quantizer::quantize(&z, &cfg, ps, 1.5, QuantizeMode::Soft, noise_seed)?;
                    let diversity = quantizer::diversity_loss(&q.soft_probs, cfg.groups)?;
                    Ok(q.targets.mul(&w).sum_all().add(&diversity.scale(0.1)))
                },
                &opts,
            )
        }
        Fragment::ContrastiveLoss => {
            let (t, d, k) = (8usize, 5usize, 3usize);
            let mut ps = ParameterSet::new();
            ps.insert("c", crate::params::uniform(&mut init_rng, &[t, d], -1.0, 1.0))?;
            ps.insert("q", crate::params::uniform(&mut init_rng, &[t, d], -1.0, 1.0))?;
            let plan = MaskPlan {
                starts: vec![0],
                mask: vec![true, false, true, true, false, true, true, true],
                span: 1,
            };
            let draw_seed = util::mix(seed, 33);
            gradient_check(
                &ps,
                |ps| {
                    let out =
                        pretrain::contrastive_loss(ps.get("c")?, ps.get("q")?, &plan, k, 0.1, draw_seed)?;
                    Ok(out.loss)
                },
                &opts,
            )
        }
        Fragment::CtcLoss => {
            let (t, v) = (6usize, 4usize);
            let mut ps = ParameterSet::new();
            ps.insert("logits", crate::params::uniform(&mut init_rng, &[t, v], -2.0, 2.0))?;
            let target = vec![1usize, 2, 1];
            gradient_check(&ps, |ps| crate::ctc::ctc_loss(ps.get("logits")?, &target), &opts)
        }
        Fragment::PretrainModel => {
            let fe = FrontendConfig {
                kind: FrontendKind::Fbank,
                channels: 2,
                output_dim: 16,
            };
            let enc = toy_encoder_cfg(EncoderKind::Transformer, 1);
            let qz = QuantizerConfig {
                input_dim: 16,
                groups: 2,
                entries: 6,
                entry_dim: 4,
                target_dim: 8,
            };
            let mut ps = ParameterSet::new();
            frontend::init_frontend_params(&fe, &mut init_rng, &mut ps)?;
            encoder::init_encoder_params(&enc, &mut init_rng, &mut ps)?;
            quantizer::init_quantizer_params(&qz, &mut init_rng, &mut ps)?;
            ps.insert(
                "pretrain.final_proj.weight",
                crate::params::xavier_uniform(&mut init_rng, &[16, 8], 16, 8),
            )?;
            ps.insert(
                "pretrain.final_proj.bias",
                crate::params::zeros_param(&[8]),
            )?;
            let x = rand_const(&mut rng, &[12, 80]);
            let noise_seed = util::mix(seed, 55);
            let draw_seed = util::mix(seed, 56);
            gradient_check(
                &ps,
                |ps| {
                    let z = frontend::encode_fbank(&x, 12, &fe, ps)?;
                    let plan = MaskPlan {
                        starts: vec![0],
                        mask: vec![true; z.true_len],
                        span: z.true_len,
                    };
                    let q = quantizer::quantize(&z.states, &qz, ps, 1.5, QuantizeMode::Soft, noise_seed)?;
                    let enc_out = encoder::encode(&z, Some(&plan.masked_indices()), &enc, ps, &mut None)?;
                    let projected = enc_out.context.linear(
                        ps.get("pretrain.final_proj.weight")?,
                        Some(ps.get("pretrain.final_proj.bias")?),
                    );
                    let contrastive =
                        pretrain::contrastive_loss(&projected, &q.targets, &plan, 2, 0.1, draw_seed)?;
                    let diversity = quantizer::diversity_loss(&q.soft_probs, qz.groups)?;
                    Ok(contrastive.loss.add(&diversity.scale(0.1)))
                },
                &opts,
            )
        }
        Fragment::CtcModel => {
            let fe = FrontendConfig {
                kind: FrontendKind::Fbank,
                channels: 2,
                output_dim: 16,
            };
            let enc = toy_encoder_cfg(EncoderKind::Conformer, 1);
            let vocab_size = 4;
            let mut ps = ParameterSet::new();
            frontend::init_frontend_params(&fe, &mut init_rng, &mut ps)?;
            encoder::init_encoder_params(&enc, &mut init_rng, &mut ps)?;
            finetune::init_ctc_head(16, vocab_size, &mut init_rng, &mut ps)?;
            let x = rand_const(&mut rng, &[12, 80]);
            let target = vec![1usize, 2];
            gradient_check(
                &ps,
                |ps| {
                    let z = frontend::encode_fbank(&x, 12, &fe, ps)?;
                    let z = LatentSequence {
                        states: z.states,
                        true_len: z.true_len,
                    };
                    let enc_out = encoder::encode(&z, None, &enc, ps, &mut None)?;
                    let logits = finetune::ctc_head_logits(&enc_out.context, ps)?;
                    crate::ctc::ctc_loss(&logits, &target)
                },
                &opts,
            )
        }
    }
}

/// Run every fragment over the given seeds.
pub fn run_fragment_suite(
    seeds: &[u64],
    tolerance: f64,
) -> Result<Vec<(Fragment, u64, GradCheckReport)>> {
    let mut out = Vec::new();
    for &frag in &Fragment::ALL {
        for &seed in seeds {
            let report = fragments::check_fragment(frag, seed, tolerance)?;
            out.push((frag, seed, report));
        }
    }
    Ok(out)
}
