//! Iterative pixel-dense feature upsampling with a local attention operator.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`autodiff`]: feature maps, kernels with hand-written
//!   adjoints, and a linear gradient tape.
//! - [`neighborhood`], [`attender`]: offset neighborhoods and the local
//!   attender operator with its scalar reference.
//! - [`model`], [`checkpoint`]: encoder, weight-shared 2× decoder, refiner,
//!   and the iterative inference pipeline.
//! - [`training`]: frozen surrogate backbone, synthetic data, multi-depth loss,
//!   optimizer loop, and evaluation against resize baselines.
//! - [`baselines`], [`bench`]: resize and cross-attention upsamplers, timing
//!   sweeps, and log-log slope fits.
//! - [`verify`]: the invariant/oracle/gradient suite behind `uplift verify`.

pub mod attender;
pub mod autodiff;
pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod fmap;
pub mod gradcheck;
pub mod model;
pub mod neighborhood;
pub mod ops;
pub mod tensor;
pub mod training;
pub mod verify;

pub use attender::{attend, attend_reference, AttenderParams};
pub use error::{Error, Result};
pub use neighborhood::{Neighborhood, Pattern};
pub use tensor::{memory, ConvKernel, FeatureMap, Real};
