//! Graph convolution toolkit built around the GTAGCN layer: a sum over
//! normalized-adjacency powers of ε-shifted rectified projections, followed
//! by an MLP. TAGCN and GCN are included as parent operators and baselines.
//!
//! The crate carries its own reverse-mode differentiation engine
//! ([`autodiff`]), CSR adjacency machinery ([`sparse`]), dataset formats
//! ([`data`]), the layer math ([`layers`]), training and evaluation
//! ([`train`]) and the stroke-to-graph pipeline ([`stroke`]).

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod sparse;
pub mod stroke;
pub mod train;

pub use error::{Error, Result};
