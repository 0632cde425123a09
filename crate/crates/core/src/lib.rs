//! Phoneme-conditional diffusion speech generation on synthetic mel grids.
//!
//! The crate covers the mean-anchored forward/reverse diffusion, monotonic
//! alignment search with duration targets, a small hand-differentiated
//! acoustic model and its alternating training loop, a synthetic two-language
//! corpus with a template ASR, end-to-end synthesis, an exact checker for the
//! conditional-independence factorization behind phoneme-conditioned
//! generation, and a toy ASR -> MT -> TTS cascade.

pub mod align;
pub mod cascade;
pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod factorization;
pub mod mel;
pub mod model;
pub mod par;
pub mod rng;
pub mod sde;
pub mod synthesis;
pub mod training;

pub use error::{Error, Result};
pub use mel::MelGrid;
