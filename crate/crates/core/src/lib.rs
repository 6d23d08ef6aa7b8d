//! koe — a desk-scale speech recognition toolkit built around masked
//! contrastive pretraining and CTC fine-tuning.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`params`], [`adam`], [`schedule`], [`gradcheck`]: a
//!   minimal reverse-mode autodiff core with Adam and LR schedules,
//!   verifiable against central finite differences.
//! - [`audio`]: FBANK extraction and global CMVN.
//! - [`dataio`]: manifests, character vocabularies, budget batching, and
//!   a deterministic synthetic tone corpus for end-to-end tests.
//! - [`frontend`]: waveform (1-D CNN) and FBANK (2-D CNN) feature
//!   encoders.
//! - [`encoder`]: Transformer and Conformer context encoders with
//!   relative-position attention.
//! - [`quantizer`]: Gumbel-softmax product quantization plus the
//!   diversity regularizer.
//! - [`pretrain`] / [`finetune`]: the two training loops.
//! - [`ctc`]: CTC loss, greedy decoding, and CER/WER scoring.
//! - [`ckpt`]: bit-exact checkpoints, top-k retention, weight averaging.
//! - [`cli`]: the `koe` command-line entry point.

pub mod adam;
pub mod audio;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod fragments;
pub mod frontend;
pub mod gradcheck;
pub mod params;
pub mod pretrain;
pub mod quantizer;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use params::ParameterSet;
pub use scalar::{DType, Scalar};
pub use tensor::{forward_backward, Tensor};
