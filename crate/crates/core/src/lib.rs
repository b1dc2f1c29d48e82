//! Unsupervised Bayesian segmentation with a deformable probabilistic atlas.
//!
//! The generative model pairs a probabilistic atlas, warped by the
//! exponential of a stationary velocity field, with per-class Gaussian
//! intensity likelihoods. Parameters are estimated per scan (EM without
//! deformation, or gradient-based MAP) or amortized by a small
//! encoder-decoder network trained on unlabeled scans.

pub mod autodiff;
pub mod cli;
pub mod deformation;
pub mod em;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod map_oracle;
pub mod network;
pub mod optim;
pub mod segment;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use likelihood::{GaussianParams, ModelConfig};
pub use volume::{GridShape, LabelMap, ProbAtlas, Volume};
