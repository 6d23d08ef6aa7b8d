//! Flat key=value run configuration with a closed schema.
//!
//! Files hold one `key = value` per line (`#` comments allowed); CLI
//! flags override file values. Unknown keys are rejected up front so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, MaskPosition};
use crate::frontend::{FrontendConfig, FrontendKind};
use crate::pretrain::PretrainConfig;
use crate::quantizer::QuantizerConfig;

/// Every key the schema accepts.
pub const KNOWN_KEYS: &[&str] = &[
    "model.encoder_dim",
    "model.encoder_blocks",
    "model.heads",
    "model.ffn_dim",
    "model.conv_kernel",
    "model.dropout",
    "frontend.channels",
    "quantizer.groups",
    "quantizer.entries",
    "quantizer.entry_dim",
    "quantizer.target_dim",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "pretrain.mask_prob",
    "pretrain.mask_span",
    "pretrain.distractors",
    "pretrain.kappa",
    "pretrain.diversity_weight",
    "pretrain.max_steps",
    "pretrain.peak_lr",
    "pretrain.budget_seconds",
    "pretrain.checkpoint_every",
    "finetune.max_steps",
    "finetune.peak_lr",
    "finetune.eval_every",
    "finetune.keep_top",
    "finetune.budget_seconds",
    "finetune.post_time_len",
    "finetune.post_time_prob",
    "finetune.post_channel_len",
    "finetune.post_channel_prob",
    "finetune.pre_time_len",
    "finetune.pre_time_prob",
    "finetune.pre_spec_len",
    "finetune.pre_spec_prob",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn empty() -> Self {
        RunConfig::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{raw}`"),
                });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Error::Config(format!("bad value `{raw}` for `{key}`: {e}"))
            }),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse::<usize>(key)?.unwrap_or(default))
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse::<u64>(key)?.unwrap_or(default))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse::<f64>(key)?.unwrap_or(default))
    }

    pub fn frontend_config(&self, kind: FrontendKind) -> Result<FrontendConfig> {
        let base = match kind {
            FrontendKind::Wav => FrontendConfig::wav(),
            FrontendKind::Fbank => FrontendConfig::fbank(),
        };
        Ok(FrontendConfig {
            kind,
            channels: self.usize_or("frontend.channels", base.channels)?,
            output_dim: self.usize_or("model.encoder_dim", base.output_dim)?,
        })
    }

    pub fn encoder_config(&self, kind: EncoderKind) -> Result<EncoderConfig> {
        let base = match kind {
            EncoderKind::Transformer => EncoderConfig::transformer_base(),
            EncoderKind::Conformer => EncoderConfig::conformer_base(),
        };
        Ok(EncoderConfig {
            kind,
            blocks: self.usize_or("model.encoder_blocks", base.blocks)?,
            dim: self.usize_or("model.encoder_dim", base.dim)?,
            heads: self.usize_or("model.heads", base.heads)?,
            ffn_dim: self.usize_or("model.ffn_dim", base.ffn_dim)?,
            conv_kernel: self.usize_or("model.conv_kernel", base.conv_kernel)?,
            dropout: self.f64_or("model.dropout", base.dropout)?,
        })
    }

    fn quantizer_config(&self, input_dim: usize) -> Result<QuantizerConfig> {
        let base = QuantizerConfig::base(input_dim);
        Ok(QuantizerConfig {
            input_dim,
            groups: self.usize_or("quantizer.groups", base.groups)?,
            entries: self.usize_or("quantizer.entries", base.entries)?,
            entry_dim: self.usize_or("quantizer.entry_dim", base.entry_dim)?,
            target_dim: self.usize_or("quantizer.target_dim", base.target_dim)?,
        })
    }

    pub fn pretrain_config(
        &self,
        frontend_kind: FrontendKind,
        encoder_kind: EncoderKind,
        seed: u64,
    ) -> Result<PretrainConfig> {
        let frontend = self.frontend_config(frontend_kind)?;
        let encoder = self.encoder_config(encoder_kind)?;
        let quantizer = self.quantizer_config(encoder.dim)?;
        let base = PretrainConfig::base(frontend.clone(), encoder.clone());
        let cfg = PretrainConfig {
            frontend,
            encoder,
            quantizer,
            mask_prob: self.f64_or("pretrain.mask_prob", base.mask_prob)?,
            mask_span: self.usize_or("pretrain.mask_span", base.mask_span)?,
            distractors: self.usize_or("pretrain.distractors", base.distractors)?,
            kappa: self.f64_or("pretrain.kappa", base.kappa)?,
            diversity_weight: self.f64_or("pretrain.diversity_weight", base.diversity_weight)?,
            max_steps: self.u64_or("pretrain.max_steps", base.max_steps)?,
            peak_lr: self.f64_or("pretrain.peak_lr", base.peak_lr)?,
            budget_seconds: self.f64_or("pretrain.budget_seconds", base.budget_seconds)?,
            checkpoint_every: self.u64_or("pretrain.checkpoint_every", base.checkpoint_every)?,
            adam_betas: (
                self.f64_or("adam.beta1", base.adam_betas.0)?,
                self.f64_or("adam.beta2", base.adam_betas.1)?,
            ),
            adam_eps: self.f64_or("adam.eps", base.adam_eps)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune_config(
        &self,
        frontend_kind: FrontendKind,
        encoder_kind: EncoderKind,
        mask_position: MaskPosition,
        seed: u64,
    ) -> Result<FinetuneConfig> {
        let frontend = self.frontend_config(frontend_kind)?;
        let encoder = self.encoder_config(encoder_kind)?;
        let base = FinetuneConfig::low_resource(frontend.clone(), encoder.clone(), mask_position);
        let cfg = FinetuneConfig {
            frontend,
            encoder,
            mask_position,
            post_time_len: self.usize_or("finetune.post_time_len", base.post_time_len)?,
            post_time_prob: self.f64_or("finetune.post_time_prob", base.post_time_prob)?,
            post_channel_len: self.usize_or("finetune.post_channel_len", base.post_channel_len)?,
            post_channel_prob: self.f64_or("finetune.post_channel_prob", base.post_channel_prob)?,
            pre_time_len: self.usize_or("finetune.pre_time_len", base.pre_time_len)?,
            pre_time_prob: self.f64_or("finetune.pre_time_prob", base.pre_time_prob)?,
            pre_spec_len: self.usize_or("finetune.pre_spec_len", base.pre_spec_len)?,
            pre_spec_prob: self.f64_or("finetune.pre_spec_prob", base.pre_spec_prob)?,
            max_steps: self.u64_or("finetune.max_steps", base.max_steps)?,
            peak_lr: self.f64_or("finetune.peak_lr", base.peak_lr)?,
            eval_every: self.u64_or("finetune.eval_every", base.eval_every)?,
            keep_top: self.usize_or("finetune.keep_top", base.keep_top)?,
            budget_seconds: self.f64_or("finetune.budget_seconds", base.budget_seconds)?,
            adam_betas: (
                self.f64_or("adam.beta1", base.adam_betas.0)?,
                self.f64_or("adam.beta2", base.adam_betas.1)?,
            ),
            adam_eps: self.f64_or("adam.eps", base.adam_eps)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
