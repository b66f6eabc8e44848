//! Single static-camera road-safety pipeline.
//!
//! Converts per-frame object detections into georeferenced tracks, pairwise
//! distances, collision-risk alerts and rolling road-state metrics, published
//! over MQTT (or captured by in-memory / CSV sinks). A built-in scenario
//! simulator and a latency bench harness make the numeric behavior testable
//! without cameras or brokers.
//!
//! Module map:
//! - [`geo`] — distortion correction, four-point homography, pixel→WGS84
//!   projection with a validity region, haversine distance.
//! - [`ingest`] — detection stream parsing, ordering and filtering.
//! - [`config`] — pipeline configuration loading and validation.
//! - [`track`] — IoU association and georeferenced kinematics.
//! - [`risk`] — braking distance, closest-point-of-approach prediction,
//!   collision probability and alert decisions.
//! - [`metrics`] — rolling road-state metrics (RAS/RAD), risk zones and
//!   detector evaluation utilities.
//! - [`sim`] — scenario simulator and scripted fixtures with ground truth.
//! - [`telemetry`] — topic/payload schemas, publisher buffering, sinks.
//! - [`pipeline`] — per-frame orchestration and stage instrumentation.
//! - [`latency`] — latency statistics (CDF/PDF) and the budget bench.

pub mod cli;
pub mod config;
pub mod geo;
pub mod ingest;
pub mod latency;
pub mod metrics;
pub mod pipeline;
pub mod risk;
pub mod rng;
pub mod sim;
pub mod telemetry;
pub mod track;
