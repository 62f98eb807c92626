//! Multimodal classifiers for the emotion a caption-and-image pair evokes.
//!
//! The crate carries its own small reverse-mode autodiff engine ([`tape`]),
//! the layers built on it ([`nn`]), five classifier families ([`models`]),
//! losses and the AdamW optimizer, the on-disk dataset format ([`data`]),
//! and evaluation plus region attribution.

pub mod attrib;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use models::{Family, Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
