//! Unsupervised discovery of editing directions in the latent space of a
//! frozen, differentiable image generator.
//!
//! A deformator maps a scaled one-hot direction selector `ε·e_k` to a latent
//! shift; a reconstructor looks at image pairs and recovers `k` and `ε`. Both
//! are trained jointly on two consecutive shifts, with a centroid term that
//! pulls the shifts of each direction towards their running mean. Numeric
//! code is generic over [`Scalar`] (`f32` or `f64`).

pub mod container;
pub mod deformator;
mod error;
pub mod export;
pub mod generators;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod reconstructor;
pub mod rng;
mod scalar;
pub mod training;
pub mod viz;

pub use deformator::{Deformator, DeformatorMode};
pub use error::{Error, Result};
pub use generators::{
    BlobGenerator, Generator, GeneratorHandle, GeneratorRegistry, GeneratorSpec, ImageShape, InjectionSite,
};
pub use latent::{CentroidBank, DirectionSpec, LatentCode, MagnitudeRange, ShiftRequest};
pub use reconstructor::{Backbone, PairPrediction, Reconstructor};
pub use scalar::Scalar;
pub use training::{Checkpoint, TrainConfig, Trainer};

pub type Deformator32 = Deformator<f32>;
pub type Deformator64 = Deformator<f64>;
pub type Reconstructor32 = Reconstructor<f32>;
pub type Reconstructor64 = Reconstructor<f64>;
pub type CentroidBank32 = CentroidBank<f32>;
pub type CentroidBank64 = CentroidBank<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
