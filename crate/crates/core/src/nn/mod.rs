//! Neural layers and the named parameter registry backing them.
//!
//! Layers are plain structs holding their own tensors. They are loaded from a
//! [`ParamRegistry`] by dotted prefix (`decoder.up8.block.conv1` resolves to
//! `decoder.up8.block.conv1.weight` and `...bias`), and each layer type can
//! list the [`ParamSpec`]s it expects so a model can declare its full
//! parameter set up front.

mod attention;
mod gru;
mod layers;
mod position;
mod registry;

pub use attention::{AttentionOutput, MultiHeadAttention};
pub use gru::ConvGru;
pub use layers::{ChannelAttention, Conv2d, LayerNorm, Linear, Mlp, ResBlock};
pub use position::sinusoidal_pe_2d;
pub use registry::{Init, ParamRegistry, ParamSpec};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
