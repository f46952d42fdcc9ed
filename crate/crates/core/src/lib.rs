//! Decoupled straight-through Gumbel-Softmax estimators and the apparatus
//! to study them: a small reverse-mode autodiff engine, categorical-latent
//! autoencoders, an exact-gradient oracle, training loops and temperature
//! grid sweeps.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod csv;
pub mod data;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod selftest;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
