//! Graph convolution layers and the MLP blocks around them.
//!
//! Layers register their tensors in a [`ParamStore`] at construction and
//! read them back through a [`Session`] during a forward pass.

mod gcn;
mod gen;
mod gtagcn;
mod mlp;
mod params;
mod tagcn;

pub use gcn::GcnLayer;
pub use gen::{gen_message, message_norm_update, powermean_aggregate, softmax_aggregate, Aggregation, GenGtagcnLayer};
pub use gtagcn::GtagcnLayer;
pub use mlp::MlpBlock;
pub use params::{BufferId, ParamId, ParamStore, Session};
pub use tagcn::TagcnLayer;
