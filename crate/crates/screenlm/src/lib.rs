//! Screenshot language models over rendered text.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`render`]: deterministic rasterization of text into fixed-height
//!   single-line screenshots, backed by a binary glyph-atlas format and a
//!   procedural builtin test font.
//! - [`codec`]: a byte-level BPE tokenizer with the special tokens both model
//!   families need.
//! - [`patch`]: patch splitting, span/uniform patch masking, text masking,
//!   per-patch target standardization, attention masks, and assembly of
//!   complete pre-training examples.
//! - [`tensor`]: a minimal reverse-mode autodiff core (f32 for training,
//!   f64 for gradient checks).
//! - [`encdec`]: the encoder-decoder screenshot model (ViT image encoder,
//!   bidirectional image decoder, cross-attending text decoder) and its
//!   joint masked-patch MSE + masked-text cross-entropy loss.
//! - [`ar`]: the decoder-only autoregressive screenshot model over mixed
//!   patch/token sequences with next-patch and next-token prediction, plus
//!   perplexity evaluation.
//! - [`train`]: AdamW, warmup + cosine/linear schedules, loss-spike and
//!   plateau monitoring, and the pre-training loop.
//! - [`tasks`]: fine-tuning heads, sequence-to-sequence label mapping,
//!   classification/regression metrics, and a grid-search harness.
//! - [`checkpoint`]: the named-tensor persistence format shared by both
//!   model families.

pub mod ar;
pub mod checkpoint;
pub mod codec;
pub mod encdec;
pub mod error;
pub mod patch;
pub mod render;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
