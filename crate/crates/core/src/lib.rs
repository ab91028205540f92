//! Desk-scale laboratory for surrogate-conditioned training-data extraction
//! from unconditional diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`]: MLP substrate with timestep conditioning, backprop and AdamW.
//! * [`diffusion`]: variance-preserving schedules, denoising training and
//!   (classifier-guided) implicit / ancestral samplers.
//! * [`classifier`]: label sources, teacher training, pseudo-labelled data
//!   and time-dependent distillation.
//! * [`metrics`]: similarity scoring, AMS/UMS and their expectations.
//! * [`gaussian`]: closed-form Gaussian entropy, KL and memorization theory.
//! * [`harness`]: configs, datasets, the staged pipeline and reports.
//!
//! Data-parallel loops go through [`exec::Exec`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially. Results are
//! identical either way.

pub mod classifier;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod exec;
pub mod gaussian;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
