//! Layered image models built from Laplacian convolutional VAEs.
//!
//! Each image layer (albedo, shading, shading detail) gets its own VAE trained
//! on synthetic data that shows only that phenomenon. An input image is then
//! explained as a sum of decoded log-domain layers by optimizing the latent
//! codes of every layer jointly.
//!
//! Module map:
//!
//! * [`tensor`], [`ops`], [`graph`], [`adam`]: dense arithmetic, reverse-mode
//!   differentiation, and the optimizer.
//! * [`pyramid`]: Laplacian pyramids and code-field resizing.
//! * [`vae`]: architectures, training, checkpoints.
//! * [`authoring`]: generators for the training corpora and composites.
//! * [`prior`]: spherical Gaussian code priors and image priors.
//! * [`decompose`]: the latent-code decomposition objective and optimizer.
//! * [`metrics`]: scale-invariant errors, WHDR, reconstruction error.
//! * [`bench`]: the natural-patch comparison of VAE architectures.
//! * [`imageio`]: PNG and raw float image files.

pub mod adam;
pub mod authoring;
pub mod bench;
pub mod decompose;
mod error;
mod gemm;
pub mod graph;
pub mod imageio;
pub mod metrics;
pub mod ops;
pub mod prior;
pub mod pyramid;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Tensor};
