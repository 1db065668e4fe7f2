//! Desk-scale RLHF for tiny decoder-only language models.
//!
//! The pipeline: train a byte-level BPE [`tokenizer`], pretrain a causal
//! transformer ([`lm`], [`pretrain`]), generate candidate stories
//! ([`decoding`]), collect Best-Worst-Scaling judgments and expand them into
//! preference pairs ([`preference`]), fit a scalar [`reward`] model, and
//! fine-tune the policy with KL-penalized [`ppo`]. [`eval`] holds the
//! evaluation harness.

pub mod decoding;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod lm;
pub mod ppo;
pub mod preference;
pub mod pretrain;
pub mod reward;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
