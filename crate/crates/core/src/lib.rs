//! PID-based quality control for video coding.
//!
//! [`controller`] turns measured per-frame PSNR into per-frame QP.
//! [`plant`] provides encoder stand-ins to close the loop against,
//! [`sysid`] estimates a plant's order from its impulse response and
//! [`harness`] runs experiments and computes the summary metrics.

pub mod cli;
pub mod config;
pub mod controller;
pub mod harness;
pub mod plant;
pub mod sysid;

pub use controller::{
    clamp_round_qp, compute_error, ControlError, ControlObjective, ControllerState, FrameDecision,
    FrameKind, PidGains, QpDecision, QpRange, QualityController, WindupMode,
};
pub use harness::{
    compare, compute_metrics, run_closed_loop, run_experiment, run_fixed_qp, ExperimentConfig,
    FrameRecord, FrameSchedule, MetricsReport, Mode,
};
pub use plant::{disturbance_at, DisturbanceSpec, FrameOutcome, PlantKind, PlantModel, TraceTable};
pub use sysid::{estimate_order, run_impulse, ImpulseExperiment, OrderEstimate};
