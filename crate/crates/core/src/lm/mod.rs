//! Two-stage token language model: a semantic transformer over text and
//! summed code embeddings predicting the next frame embedding, and a
//! per-frame acoustic transformer predicting codes coarse to fine.

pub mod config;
pub mod generate;
pub mod model;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use config::{LmConfig, SamplingConfig};
pub use generate::{generate, Generation, PlainStepper, SemanticStepper};
pub use model::{ctx_loss, cross_entropy, factorized_nll, sum_code_embeddings, DualLm, LmExample, LmLoss};
pub use tokenizer::{ByteTokenizer, Tokenizer};
pub use train::{LmMetrics, LmTrainConfig, LmTrainer};
