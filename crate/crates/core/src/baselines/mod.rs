//! Comparison models: sequential latent-variable baselines and static
//! uncertainty estimators.

pub mod dssm;
pub mod static_models;
pub mod vrnn;

pub use dssm::{DssmDims, DssmModel};
pub use static_models::{Bbb, Ensemble, FitReport, McDropout, StaticModel, StaticOptim};
pub use vrnn::{VrnnDims, VrnnModel};
