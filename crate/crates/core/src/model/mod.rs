//! The language model: adaptive input embedding, post-norm layers of
//! windowed relative-position attention, and an adaptive softmax whose
//! per-bin tables are shared with the input embedding.

mod config;
pub mod forward;
mod hebbian;
pub mod infer;
mod state;

pub use config::{Activation, BinSpec, ModelConfig, Site};
pub use forward::{adaptive_embed, bind, bind_values, full_logprobs, hidden, windowed_rel_attention, Bound, ForwardOptions};
pub use hebbian::{hebbian_gamma, hebbian_update, HebbianConfig};
pub use infer::{Engine, Linear, SoftmaxMode, StreamState};
pub use state::{
    relative_encoding, BinParams, LayerParams, Layout, ModelState, Param, ParamId, ParamKind, CACHE_LAMBDA_INIT,
    CACHE_THETA_INIT,
};
