//! Concept-hierarchy toolkit: exact counting and enumeration of concept
//! hierarchies, hierarchy derivation from data (top-down clustering and
//! bottom-up transfer affinity), and hierarchy-guided phased training of
//! small dense networks.
//!
//! All randomness flows through seeded [ChaCha8](rand_chacha::ChaCha8Rng)
//! generators, so every run is bitwise reproducible from its seed.

pub mod affinity;
pub mod cluster;
pub mod data;
pub mod error;
pub mod hierarchy;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use hierarchy::Hierarchy;
pub use tensor::Tensor2;
