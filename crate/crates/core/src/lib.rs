//! Multi-modal motion/video encoder pre-training: VQ concept codebooks, masked
//! reconstruction, hypernetwork informativeness losses with velocity
//! supervision, and cross-modal alignment.

pub mod alignment;
pub mod backbones;
pub mod error;
pub mod evalsuite;
pub mod export;
pub mod infolosses;
pub mod model;
pub mod quantizer;
pub mod synthkit;
pub mod trainer;

pub use error::{Error, Result};
