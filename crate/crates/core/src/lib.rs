//! Semi-Markov processes, memory-kernel master equations and their quantum
//! generalization, with complete-positivity diagnostics.
//!
//! Everything numeric is generic over [`scalar::Real`]; the `*64` aliases
//! below fix the scalar to `f64`.

pub mod acceptance;
pub mod classical;
pub mod error;
pub mod linalg;
pub mod quantum;
pub mod scalar;
pub mod twolevel;
pub mod volterra;
pub mod waiting_time;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type CMatrix64 = linalg::CMatrix<f64>;
pub type TimeGrid64 = volterra::TimeGrid<f64>;
pub type SampledFunction64 = volterra::SampledFunction<f64>;
pub type MatrixSeries64 = volterra::MatrixSeries<f64>;
pub type WaitingTime64 = waiting_time::WaitingTime<f64>;
pub type MemoryFunction64 = waiting_time::MemoryFunction<f64>;
pub type SemiMarkovSpec64 = classical::SemiMarkovSpec<f64>;
pub type MarkovSpec64 = classical::MarkovSpec<f64>;
pub type PropagationResult64 = classical::PropagationResult<f64>;
pub type QuantumKernelSpec64 = quantum::QuantumKernelSpec<f64>;
pub type DensityMatrix64 = quantum::DensityMatrix<f64>;
pub type PropagatorGrid64 = quantum::PropagatorGrid<f64>;
pub type CpReport64 = quantum::CpReport<f64>;
pub type TwoLevelParams64 = twolevel::TwoLevelParams<f64>;
