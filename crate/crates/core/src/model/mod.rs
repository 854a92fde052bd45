//! Toy decoder language model.
//!
//! Each layer normalizes its input, runs causal attention with no
//! projections, routes the result through a mixture of gated experts and,
//! optionally, attends over the expert output with a memory lobe:
//!
//! ```text
//! x_norm  = rms_norm(x)
//! attn    = attention_causal(x_norm, x_norm, x_norm)
//! ffn_out = moe(attn)
//! lob_out = lobe(ffn_out)
//! y       = x + ffn_out + lob_out
//! ```
//!
//! With `hyper_link` off the layer is a plain pre-norm block,
//! `h = x + attn(norm(x))`, `y = h + moe(norm2(h))`, and has no lobe.

mod checkpoint;
mod config;
mod forward;
mod params;
mod stream;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use config::{parse_kv, BiasMode, LobeMode, ModelConfig, TokenMixer, VOCAB};
pub use forward::{
    decoder_layer_forward, decoder_layer_trace, flatten_tokens, gpt_forward, memory_lobe, moe_forward, rms_norm,
    routing_scores, LayerTrace, MixerConfig, AUX_WEIGHT, RMS_EPS,
};
pub use params::{gaussian, DecoderLayer, Expert, MemoryLobe, MoeLayer, ToyGpt};
pub use stream::StreamState;

pub(crate) use config::{parse_bool, parse_num};
pub(crate) use forward::{gpt_on_tape, leaves, WholeSequence};
