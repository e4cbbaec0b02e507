//! Few-shot estimation of household daily load-profile distributions.
//!
//! A fixed-weight spherical Gaussian mixture is tuned for a few EM steps on
//! a handful of daily profiles, then corrected by a parameter shift that a
//! set-input transformer encoder predicts from the same profiles. The
//! encoder is trained episodically over many source households.

pub mod checkpoint;
pub mod data;
pub mod diffable;
pub mod encoder;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod seed;
pub mod synth_bench;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{
    Domain, DomainCollection, EcpSample, PreparedDataset, Role, Scaler, ShotSet, Space,
};
pub use error::{Error, Result};
pub use gmm::{GmmFile, SphericalGmm};
pub use trainer::TrainConfig;

/// Version of this library, recorded in run provenance.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
