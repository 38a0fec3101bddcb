//! KPI-driven iterative weight tuning for a trajectory-tracking NMPC on a
//! simulated 6-DOF arm, plus a Gaussian-process Bayesian-optimization baseline.

pub mod bo;
pub mod geometry;
pub mod harness;
pub mod kpi;
pub mod nmpc;
pub mod robot;
pub mod tuner;
