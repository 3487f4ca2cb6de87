//! Allocation-only numeric core for a desk-scale dialogue model.
//!
//! Everything in this crate is pure computation over in-memory values: the
//! dense tensor kernel, a small pre-norm decoder transformer with a KV cache,
//! LoRA and prefix adapters (including the reverse-mode gradients used to
//! train them), group-wise INT4 quantization, nucleus sampling and the
//! dictionary-driven prompt designer. File formats, networking and the CLI
//! live in the `nglm` companion crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapters;
pub mod error;
pub mod generate;
pub mod model;
pub mod prompt;
pub mod quant;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use adapters::{Adapter, LoraAdapter, LoraTargets, PrefixAdapter};
pub use error::{Error, Result};
pub use model::{KvCache, ModelBundle, ModelConfig};
pub use tensor::{Precision, Scalar, Tensor};
