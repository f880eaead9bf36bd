//! ODFormer optic-nerve-head segmentation on a small reverse-mode tensor
//! engine.
//!
//! - [`tensor`]: dense `f64` tensors, the define-by-run [`Tape`] and SGD.
//! - [`nn`]: convolution, normalization, activations, resize, windowing.
//! - [`msca`], [`encoder`], [`decoder`], [`model`]: the network.
//! - [`data`], [`checkpoint`]: image/mask codecs, manifests, augmentation,
//!   synthetic fundus images and the `ODF1` checkpoint format.
//! - [`train`]: loss, confusion counting, metrics, training and evaluation.
//! - [`gradcheck`]: finite-difference verification suite.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod msca;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use data::{FundusSample, Mask, Split};
pub use error::{Error, Result};
pub use model::OdFormer;
pub use params::{ParamId, ParamStore, Session, Sgd};
pub use tensor::{Tape, Tensor, Var};
