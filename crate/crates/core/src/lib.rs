//! Core of a benchmark harness that drives vision-language models through a
//! three-stage chain-of-thought on driving scenes and scores the resulting
//! trajectories.
//!
//! - [`domain`] - actions, trajectories, frames, per-frame results, JSONL codec
//! - [`kinematics`] - unicycle integration, pose-to-action recovery, frame transforms
//! - [`ingest`] - nuScenes-style tables to scenario frames
//! - [`client`] - provider clients, retry, rate limiting, cost
//! - [`pipeline`] - prompt templates and per-frame orchestration
//! - [`parser`] - strict and corrected command parsing
//! - [`metrics`] - ADE/FDE, format-error rates, common-frame filter, summaries

pub mod client;
pub mod domain;
pub mod ingest;
pub mod kinematics;
pub mod metrics;
pub mod parser;
pub mod pipeline;

pub use domain::{ActionState, ErrorClass, Frame, FrameResult, ParseStatus, Point, Trajectory};
