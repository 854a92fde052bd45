//! Byte-level training harness.
//!
//! A run reads a corpus (bytes are tokens), splits it 90/10 into training
//! and validation parts, and minimizes `CE + 0.01·aux` with Adam. Each
//! run directory holds:
//!
//! ```text
//! config.echo   key=value lines, readable by TrainConfig::from_kv_str
//! loss.csv      step,train_loss,val_loss,grad_norm,tokens_seen,wall_ms
//! model.ckpt    final parameters
//! ```
//!
//! Identical configurations produce byte-identical `loss.csv` files.

mod ablation;
mod config;
mod corpus;
mod run;
mod sample;

pub use ablation::{ablation_suite, ablation_variants, Variant, VariantResult, ABLATION_MIXERS, DEFAULT_THRESHOLD};
pub use config::TrainConfig;
pub use corpus::{desk_corpus, load_corpus, Corpus, DESK_CORPUS_BYTES};
pub use run::{
    corpus_for, evaluate, loss_and_grads, read_loss_csv, train, train_loop, Adam, BatchGrad, LossRecord, TrainOutcome,
    LOSS_CSV_HEADER,
};
pub use sample::{sample, sample_recompute, sample_streaming, SampleConfig};
