//! Gated models of relations between image pairs: factored gated
//! autoencoders, gated Boltzmann machines, energy models, and the
//! spectral analysis of the transformations they learn.

pub mod datagen;
pub mod energy_isa;
pub mod error;
pub mod gae;
pub mod grbm;
pub mod infer;
pub mod render;
pub mod spectral;
pub mod tensor_core;
pub mod training;

pub use error::{Error, Result};
