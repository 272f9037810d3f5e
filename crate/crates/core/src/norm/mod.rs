//! Layer normalization and its prototype-gated generalization.
//!
//! A [`ProtoNormLayer`] owns `n` LayerNorm parameter pairs and a
//! [`PrototypeBank`] of `n` prototype vectors. Each sample is normalized by
//! the pair whose prototype lies nearest to the sample's token-averaged
//! features; prototypes drift toward the features routed to them by an
//! exponential moving average and are kept apart by an orthogonality
//! penalty.

mod layer_norm;
mod layer;
mod prototype;

pub use layer::{NormMode, ProtoNormLayer, Routing};
pub use layer_norm::{layer_norm, normalize, LayerNormParams};
pub use prototype::{
    gate, init_orthogonal, orthogonality_loss, orthogonality_loss_value, squared_distances,
    EmaOutcome, PrototypeBank,
};
