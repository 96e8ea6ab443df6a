//! Desk-scale decoder-transformer laboratory.
//!
//! Small enough to read end to end, complete enough to exercise the
//! mechanisms real LLM fine-tuning stacks rely on: a tape-based autodiff
//! tensor core, a toy decoder with sliding-window or ALiBi attention, a
//! rolling-buffer KV cache with chunked prefill, LoRA adapters with merge,
//! an AdamW training loop, QA metrics (EM / token F1 / ROUGE / BLEU), and a
//! synthetic QA dataset pipeline for Vietnamese regulation text.

pub mod checkpoint;
pub mod error;
pub mod fsutil;
pub mod kvcache;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{Tape, Tensor};

/// Default single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
/// Default single-precision model.
pub type Model32 = model::DecoderModel<f32>;
pub type Model64 = model::DecoderModel<f64>;
pub type KvCache32 = kvcache::RollingKVCache<f32>;
pub type KvCache64 = kvcache::RollingKVCache<f64>;
