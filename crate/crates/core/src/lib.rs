//! Mutual mean-teaching for unsupervised domain adaptation, on synthetic identity
//! retrieval data, with a small reverse-mode autodiff engine underneath.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
