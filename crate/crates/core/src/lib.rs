//! Deterministic discrete-event simulator and protocol library for Clique
//! proof-of-authority and the ExClique optimizations.

pub mod analytics;
pub mod cbf;
pub mod chain;
pub mod config;
pub mod consensus;
pub mod ids;
pub mod netsim;
pub mod pcb;
pub mod pool;
pub mod rewards;
pub mod runner;
pub mod scalar;
pub mod sim;
pub mod trace;

pub use scalar::Scalar;

pub type AnalyticsReportF64 = analytics::AnalyticsReport<f64>;
pub type AnalyticsReportF32 = analytics::AnalyticsReport<f32>;
pub type StepCostModelF64 = analytics::StepCostModel<f64>;
pub type StepCostModelF32 = analytics::StepCostModel<f32>;
pub type CaseRatesF64 = analytics::CaseRates<f64>;
