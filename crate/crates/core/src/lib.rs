//! Face inpainting with a domain-embedded generator and a global + patch
//! discriminator pair.
//!
//! The crate is organised bottom-up: [`tensor`] and [`graph`] provide the
//! numerical substrate, [`preprocessing`] derives the per-sample images,
//! [`domain_embedding`], [`generator`] and [`discriminators`] hold the
//! networks and their losses, [`training`] runs the alternating optimisation
//! and [`evaluation`] scores inpainted output.

pub mod archive;
pub mod checkpoint;
pub mod dataset;
pub mod domain_embedding;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod graph;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod preprocessing;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
