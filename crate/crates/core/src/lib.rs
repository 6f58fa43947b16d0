//! Deterministic simulator for federated lifelong person re-identification.
//!
//! Edge clients learn from drifting synthetic task streams through adaptive
//! layers `theta = B * alpha + A`, rehearse stored prototypes, and receive
//! personalized base parameters `B` from a server that weighs other clients
//! by forgetting-discounted task similarity.

pub mod client;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod runner;
pub mod server;
pub mod stream;

pub use client::{ClientState, ExtractionLayer, Prototype, RehearsalMemory, TaskFeature, TrainConfig};
pub use error::{Error, Result};
pub use metrics::{AccuracyTimeline, CommLedger, Metric, MetricsLog, RunSummary};
pub use model::{AdaptiveParams, LayerShapes, ParamVector};
pub use numeric::{Matrix, ProbVector, SeededRng, Vector};
pub use runner::{ExperimentConfig, RunState, Strategy};
pub use server::{ParameterServer, ServerConfig};
pub use stream::{StreamConfig, TaskBatch, TaskStream};
