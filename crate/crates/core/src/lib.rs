//! Spectral prompt learning on a toy latent teacher.

pub mod config;
pub mod error;
pub mod eval;
pub mod granule_film;
pub mod latent_teacher;
pub mod linalg;
pub mod nn;
pub mod objectives;
pub mod semantic_bank;
pub mod spectral_diag;
pub mod spectral_proxy;
pub mod text_refinement;
pub mod trainer;

pub use error::{Error, Result};
