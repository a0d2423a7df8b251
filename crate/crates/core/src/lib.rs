//! Semantic occupancy-grid sequence prediction.
//!
//! Stacked ConvLSTM / spatio-temporal LSTM predictors over bird's-eye-view
//! occupancy grids with a static-environment and a vehicle channel, trained
//! with reverse scheduled sampling on a dual static/semantic loss and scored
//! against a constant-velocity projection baseline.

pub mod baselines;
pub mod cells;
pub mod config;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod predictor;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BoxFootprint, GridSequence, GridSpec, OccupancyGrid};
pub use metrics::MetricsReport;
pub use predictor::{CellKind, Mode, Predictor, PredictorConfig};
pub use tensor::{Graph, Tensor, Var};
