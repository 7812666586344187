//! One-shot face swapping in the hierarchical latent space of a style-based
//! generator.
//!
//! The crate is organised along the swap pipeline:
//!
//! * [`latent`] holds the W / W+ / W++ data model and its binary format.
//! * [`encoder`] maps a [`FaceImage`] to latent codes with a residual
//!   backbone, a feature pyramid and one mapping network per code.
//! * [`transfer`] moves identity between high codes: the face transfer
//!   module, latent code replacement and ID injection.
//! * [`generator`] is a small style-based synthesis network that accepts an
//!   external constant input.
//! * [`oracles`] defines the feature extractor, recognizer and landmark
//!   predictor seams with deterministic toy implementations.
//! * [`losses`], [`train`] and [`eval`] cover the objectives, the two
//!   training stages and the metrics.
//! * [`pipeline`] wires it all together, including PNG I/O and batch jobs.
//!
//! Everything runs on the small reverse-mode tape in `latentswap-autograd`.

pub mod checkpoint;
mod codec;
pub mod encoder;
mod error;
pub mod eval;
mod face;
pub mod generator;
pub mod latent;
pub mod losses;
pub mod oracles;
pub mod params;
pub mod pipeline;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use face::FaceImage;
pub use latent::{Encoded, HierLatent, LatentCode, LatentSpace, WPlusLatent};
pub use latentswap_autograd as autograd;
pub use params::ParamSet;
