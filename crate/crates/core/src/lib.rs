//! Power-measurement based IRS channel estimation and passive reflection
//! optimization for coverage enhancement.
//!
//! Pipeline: synthesize (or import) a scene, take initial power measurements
//! at a few grids, characterize spatial correlation with a variogram, pick
//! typical grids, estimate their cascaded channels with a single-layer
//! network trained on measured powers, and optimize the discrete IRS phases.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix `f64`, which every artifact format and the CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geostat;
pub mod linalg;
pub mod measurement;
pub mod nnest;
pub mod num;
pub mod optimize;
pub mod propagation;
pub mod scene;
pub mod seed;
mod textio;

pub use error::{Error, Result};
pub use num::{Cplx, Real};

pub type Complex64 = Cplx<f64>;
pub type Scene = scene::SceneConfig<f64>;
pub type Grid = scene::Grid<f64>;
pub type Channels = propagation::ChannelModel<f64>;
pub type Truth = propagation::GroundTruthChannels<f64>;
pub type Experiment = eval::ExperimentConfig;
pub type Estimate = nnest::ChannelEstimate<f64>;
pub type MeasurementCampaign = measurement::Campaign<f64>;
