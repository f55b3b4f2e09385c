//! Model predictive boundary control of urban traffic over a network of
//! interconnected roads (NOIR) with cyclic signal phases.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the scenario and harness layers use.

pub mod dynamics;
pub mod harness;
pub mod monitor;
pub mod mpc;
pub mod network;
pub mod qp;
pub mod scalar;
pub mod scenario;

use thiserror::Error;

pub use scalar::Scalar;

pub type FdParamsF64 = dynamics::FdParams<f64>;
pub type FdProfileF64 = dynamics::FdProfile<f64>;
pub type PhaseMatricesF64 = dynamics::PhaseMatrices<f64>;
pub type InputMatrixF64 = dynamics::InputMatrix<f64>;
pub type TrafficStateF64 = dynamics::TrafficState<f64>;
pub type HorizonPredictionF64 = mpc::HorizonPrediction<f64>;
pub type MpcControllerF64 = mpc::MpcController<f64>;
pub type QpInstanceF64 = qp::QpInstance<f64>;
pub type QpSolutionF64 = qp::QpSolution<f64>;
pub type TraceRecordF64 = monitor::TraceRecord<f64>;

/// Any error the library reports.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Network(#[from] network::NetworkError),
    #[error(transparent)]
    Schedule(#[from] network::ScheduleError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error(transparent)]
    Mpc(#[from] mpc::MpcError),
    #[error(transparent)]
    Qp(#[from] qp::QpError),
    #[error(transparent)]
    Monitor(#[from] monitor::MonitorError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
}
