//! Object-centric scene decomposition on a desk-scale stack.
//!
//! The crate trains and evaluates a slot-attention pipeline extended with:
//!
//! - an unsupervised **foreground/background indicator** (teacher-student
//!   two-slot contrastive model, [`indicator`]);
//! - a **fusion stage** that injects the indicator's fg/bg vectors into the
//!   slots through cross- then self-attention before decoding ([`fusion`]);
//! - a **bootstrap branch** that trains a per-channel affine feature
//!   adaptation against the fusion stage's own predictions via
//!   Hungarian-matched segmentation loss ([`bootstrap`]).
//!
//! Everything runs on a built-in synthetic scene generator ([`scene`]) and a
//! frozen random patch encoder ([`encoder`]), in pure f64 with a small
//! reverse-mode tape ([`autodiff`]) so all gradients are finite-difference
//! checkable.

pub mod attention;
pub mod augment;
pub mod autodiff;
pub mod bootstrap;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod indicator;
pub mod matching;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
