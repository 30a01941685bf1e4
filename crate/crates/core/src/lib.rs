pub mod cluster;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod explain;
pub mod matrix;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod stats;

mod rng;

pub use error::{Error, ErrorClass, Result};
pub use matrix::Matrix;
pub use scalar::Real;

pub type KMeans = cluster::KMeansModel<f64>;
pub type KMeansF32 = cluster::KMeansModel<f32>;
pub type MatrixF32 = Matrix<f32>;
pub type Validity = cluster::ValidityIndices<f64>;
pub type SweepResult = cluster::KSweepResult<f64>;
