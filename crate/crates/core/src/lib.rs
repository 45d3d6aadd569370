//! Confirmation-bias steering at desk scale: contrastive direction
//! extraction, alpha-steered expert families with prompt-adaptive gated
//! mixture decoding, a multi-agent debate harness, an exact latent-concept
//! simulator, representation diagnostics, and the corpus/evaluation plumbing
//! that ties them together on two bundled toy backends.

pub mod corpus;
pub mod debate;
pub mod error;
pub mod eval;
pub mod gate;
pub mod latentsim;
pub mod mixture;
pub mod model;
pub mod pipeline;
pub mod probes;
pub mod seed;
pub mod steering;
pub mod sweep;
pub mod textgen;

pub use error::{Error, Result};
