//! Per-frame pipeline orchestration with stage instrumentation.
//!
//! One frame flows: confidence filter -> anchor undistortion -> pixel to
//! geo projection (validity-gated) -> association and kinematics -> all-
//! pairs risk assessment -> road-state update -> publication. Each stage is
//! timed with the monotonic clock; the bench harness aggregates those
//! timings into per-stage statistics and a budget verdict.
//!
//! Replay mode (the default everywhere testable) takes timestamps from the
//! input stream, so identical inputs produce byte-identical outputs. Live
//! mode stamps payloads with the wall clock.

use std::time::Instant;

use thiserror::Error;

use crate::config::LoadedConfig;
use crate::geo::{ground_anchor, undistort_point, GeoPoint, LocalFrame, PixelPoint, Projection};
use crate::ingest::{filter_by_confidence, FrameBatch, IngestError, ObjectMetadata};
use crate::latency::{build_budget_report, BudgetReport, LatencyError, Stage, StageTiming};
use crate::metrics::{RoadState, RoadStateTracker, ZoneMap};
use crate::risk::{annotate, assess_all_pairs, FrictionContext, RiskError, RiskParams, VruPolicy};
use crate::sim::{run_scenario, ScenarioScript, SimError};
use crate::telemetry::{AlertRecord, CsvExporter, NullSink, PairRecord, Publisher, TelemetrySink};
use crate::track::{Track, TrackStore};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where payload timestamps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    /// Timestamps from the input stream; deterministic.
    #[default]
    Replay,
    /// Wall-clock timestamps.
    Live,
}

/// Counters for a completed run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub frames: u64,
    pub detections: u64,
    pub rejects: u64,
    pub undistort_failures: u64,
    pub outside_region: u64,
    pub tracks_created: u64,
    pub objects_published: u64,
    pub assessments: u64,
    pub skipped_pairs: u64,
    pub alerts: u64,
    pub messages_published: u64,
    pub messages_failed: u64,
    pub messages_buffered: u64,
    pub messages_dropped: u64,
}

/// Everything one frame produced.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub frame_id: u64,
    pub t: f64,
    pub objects: Vec<ObjectMetadata>,
    pub pairs: Vec<PairRecord>,
    pub alerts: Vec<AlertRecord>,
    pub road_state: RoadState,
    pub stage_timings: Vec<StageTiming>,
    pub end_to_end: f64,
    pub outside_region: u64,
    pub undistort_failures: u64,
    pub skipped_pairs: u64,
    pub tracks_created: u64,
}

/// Single-camera pipeline state.
pub struct Pipeline {
    camera_id: String,
    geoframe: crate::geo::GeoFrame,
    local: LocalFrame,
    distortion: crate::geo::DistortionModel,
    confidence_threshold: f64,
    association_iou: f64,
    max_misses: u32,
    ctx: FrictionContext,
    policy: VruPolicy,
    params: RiskParams,
    store: TrackStore,
    road_state: RoadStateTracker,
    clock: ClockMode,
}

impl Pipeline {
    pub fn new(
        cfg: &LoadedConfig,
        zone_map: Option<ZoneMap>,
        clock: ClockMode,
    ) -> Result<Self, PipelineError> {
        let t = &cfg.thresholds;
        Ok(Pipeline {
            camera_id: cfg.camera_id.clone(),
            geoframe: cfg.geoframe.clone(),
            local: LocalFrame::new(cfg.geoframe.centroid_geo()),
            distortion: cfg.distortion,
            confidence_threshold: t.confidence,
            association_iou: t.association_iou,
            max_misses: t.max_misses,
            ctx: FrictionContext::new(t.mu, t.g)?,
            policy: VruPolicy::default(),
            params: RiskParams {
                margin_m: t.margin_m,
                horizon_s: t.horizon_s,
                alert_threshold: t.alert_threshold,
            },
            store: TrackStore::new(),
            road_state: RoadStateTracker::new(t.window_s, zone_map),
            clock,
        })
    }

    pub fn tracks(&self) -> &[Track] {
        self.store.tracks()
    }

    /// Run one frame through every stage except publication.
    pub fn process_batch(&mut self, batch: &FrameBatch) -> FrameResult {
        let frame_start = Instant::now();
        let mut timings = Vec::with_capacity(7);

        // Confidence gate.
        let stage_start = Instant::now();
        let filtered = filter_by_confidence(batch, self.confidence_threshold);
        timings.push(StageTiming {
            stage: Stage::Ingest,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        // Anchor undistortion.
        let stage_start = Instant::now();
        let mut undistort_failures = 0u64;
        let mut anchored: Vec<(usize, PixelPoint)> = Vec::with_capacity(filtered.detections.len());
        for (i, det) in filtered.detections.iter().enumerate() {
            match undistort_point(ground_anchor(&det.bbox), &self.distortion) {
                Ok(ideal) => anchored.push((i, ideal)),
                Err(_) => undistort_failures += 1,
            }
        }
        timings.push(StageTiming {
            stage: Stage::Undistort,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        // Projection, restricted to the calibrated region.
        let stage_start = Instant::now();
        let mut outside_region = 0u64;
        let mut placed: Vec<(usize, PixelPoint, GeoPoint)> = Vec::with_capacity(anchored.len());
        for (i, anchor) in anchored {
            match self.geoframe.pixel_to_geo(anchor) {
                Ok(Projection::Inside(geo)) => placed.push((i, anchor, geo)),
                Ok(Projection::OutsideRegion) | Err(_) => outside_region += 1,
            }
        }
        timings.push(StageTiming {
            stage: Stage::Geo,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        // Association and kinematics.
        let stage_start = Instant::now();
        let geo_batch = FrameBatch {
            camera_id: filtered.camera_id.clone(),
            frame_id: filtered.frame_id,
            t: filtered.t,
            detections: placed
                .iter()
                .map(|(i, _, _)| filtered.detections[*i].clone())
                .collect(),
        };
        let association = self.store.associate(&geo_batch, self.association_iou);
        let mut tracks_created = 0u64;
        for &(track_id, det_idx) in &association.matched {
            let (_, pixel, geo) = placed[det_idx];
            if let Some(track) = self.store.get_mut(track_id) {
                track.last_bbox = geo_batch.detections[det_idx].bbox;
                track.misses = 0;
                track.age_frames += 1;
                // Ignore pathological duplicate timestamps; the reader
                // guarantees frame order.
                let _ = track.update_kinematics(batch.t, geo, pixel, &self.local);
            }
        }
        for &det_idx in &association.unmatched_detections {
            let det = &geo_batch.detections[det_idx];
            let (_, pixel, geo) = placed[det_idx];
            let id = self.store.spawn(det.class_label, det.bbox);
            tracks_created += 1;
            if let Some(track) = self.store.get_mut(id) {
                let _ = track.update_kinematics(batch.t, geo, pixel, &self.local);
            }
        }
        for &track_id in &association.unmatched_tracks {
            self.store.mark_missed(track_id);
        }
        self.store.prune(self.max_misses);
        timings.push(StageTiming {
            stage: Stage::Track,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        // All-pairs risk over tracks updated this frame.
        let stage_start = Instant::now();
        let fresh: Vec<&Track> = self
            .store
            .tracks()
            .iter()
            .filter(|t| t.misses == 0 && t.history_len() >= 1)
            .collect();
        let assessable: Vec<&Track> = fresh
            .iter()
            .copied()
            .filter(|t| t.history_len() >= 2)
            .collect();
        let (assessments, skipped_pairs) = assess_all_pairs(
            &assessable,
            &self.geoframe,
            &self.local,
            &self.ctx,
            &self.policy,
            &self.params,
        );
        let speeds: Vec<(u64, f64)> = fresh.iter().map(|t| (t.id, t.speed)).collect();
        let (displays, _labels) = annotate(&assessments, &speeds);
        let t_pub = match self.clock {
            ClockMode::Replay => batch.t,
            ClockMode::Live => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(batch.t),
        };
        let pairs: Vec<PairRecord> = assessments
            .iter()
            .zip(displays.iter())
            .map(|(a, d)| PairRecord::from_parts(*a, *d))
            .collect();
        let alerts: Vec<AlertRecord> = assessments
            .iter()
            .filter(|a| a.alert)
            .map(|a| AlertRecord::from_assessment(a, t_pub))
            .collect();
        timings.push(StageTiming {
            stage: Stage::Risk,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        // Road state.
        let stage_start = Instant::now();
        let speed_values: Vec<f64> = fresh.iter().map(|t| t.speed).collect();
        let distances: Vec<f64> = assessments.iter().map(|a| a.distance_now).collect();
        let road_state = self
            .road_state
            .update_road_state(&speed_values, &distances, batch.t);
        timings.push(StageTiming {
            stage: Stage::Metrics,
            duration: stage_start.elapsed().as_secs_f64(),
        });

        let objects: Vec<ObjectMetadata> = fresh
            .iter()
            .filter_map(|t| {
                t.latest().map(|s| ObjectMetadata {
                    camera_id: self.camera_id.clone(),
                    track_id: t.id,
                    class_label: t.class_label,
                    lat: s.geo.lat,
                    lon: s.geo.lon,
                    speed_mps: t.speed,
                    heading_deg: t.heading,
                    t: t_pub,
                })
            })
            .collect();

        FrameResult {
            frame_id: batch.frame_id,
            t: batch.t,
            objects,
            pairs,
            alerts,
            road_state,
            stage_timings: timings,
            end_to_end: frame_start.elapsed().as_secs_f64(),
            outside_region,
            undistort_failures,
            skipped_pairs: skipped_pairs as u64,
            tracks_created,
        }
    }
}

/// Aggregated output of [`run_batches`] / [`run_reader`].
pub struct PipelineRun {
    pub summary: RunSummary,
    pub stage_samples: Vec<(Stage, Vec<f64>)>,
    pub end_to_end: Vec<f64>,
    pub road_states: Vec<RoadState>,
}

/// Drive the pipeline over in-memory batches, publishing each frame.
pub fn run_batches<S: TelemetrySink>(
    cfg: &LoadedConfig,
    batches: &[FrameBatch],
    publisher: &mut Publisher<S>,
    mut csv: Option<&mut CsvExporter>,
    clock: ClockMode,
) -> Result<PipelineRun, PipelineError> {
    let mut pipeline = Pipeline::new(cfg, None, clock)?;
    let mut summary = RunSummary::default();
    let mut stage_samples: Vec<(Stage, Vec<f64>)> =
        Stage::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let mut end_to_end = Vec::new();
    let mut road_states = Vec::new();

    for batch in batches {
        summary.detections += batch.detections.len() as u64;
        let frame_start = Instant::now();
        let mut result = pipeline.process_batch(batch);

        let publish_start = Instant::now();
        let report = publisher.publish_metadata(
            &pipeline.camera_id,
            result.frame_id,
            result.t,
            &result.objects,
            &result.pairs,
            &result.alerts,
        );
        if let Some(exporter) = csv.as_deref_mut() {
            exporter.append_frame(result.frame_id, result.t, &result.objects, &result.pairs)?;
        }
        let publish_duration = publish_start.elapsed().as_secs_f64();
        result.stage_timings.push(StageTiming {
            stage: Stage::Publish,
            duration: publish_duration,
        });
        result.end_to_end = frame_start.elapsed().as_secs_f64();

        summary.frames += 1;
        summary.tracks_created += result.tracks_created;
        summary.undistort_failures += result.undistort_failures;
        summary.outside_region += result.outside_region;
        summary.objects_published += result.objects.len() as u64;
        summary.assessments += result.pairs.len() as u64;
        summary.skipped_pairs += result.skipped_pairs;
        summary.alerts += result.alerts.len() as u64;
        summary.messages_published += report.published;
        summary.messages_failed += report.failed;
        summary.messages_buffered = report.buffered;
        summary.messages_dropped = report.dropped_total;

        for timing in &result.stage_timings {
            if let Some((_, samples)) = stage_samples.iter_mut().find(|(s, _)| *s == timing.stage) {
                samples.push(timing.duration);
            }
        }
        end_to_end.push(result.end_to_end);
        road_states.push(result.road_state);
    }

    Ok(PipelineRun {
        summary,
        stage_samples,
        end_to_end,
        road_states,
    })
}

/// Drive the pipeline from a detection stream, counting per-record rejects.
pub fn run_reader<R: std::io::BufRead, S: TelemetrySink>(
    cfg: &LoadedConfig,
    source: R,
    publisher: &mut Publisher<S>,
    csv: Option<&mut CsvExporter>,
    clock: ClockMode,
) -> Result<PipelineRun, PipelineError> {
    let mut reader = crate::ingest::DetectionReader::new(source);
    let mut batches = Vec::new();
    for item in reader.by_ref() {
        batches.push(item?);
    }
    let rejects = reader.rejects().len() as u64;
    let mut run = run_batches(cfg, &batches, publisher, csv, clock)?;
    run.summary.rejects = rejects;
    Ok(run)
}

/// Per-repetition and pooled budget reports for a scenario.
pub struct BenchReport {
    pub per_rep: Vec<BudgetReport>,
    pub pooled: BudgetReport,
}

/// Run a scenario `repetitions` times against a null sink and report
/// per-stage and end-to-end latency against the budget.
pub fn bench(
    script: &ScenarioScript,
    repetitions: usize,
    budget_s: f64,
) -> Result<BenchReport, PipelineError> {
    assert!(repetitions >= 1);
    let cfg = script.loaded_config()?;
    let out = run_scenario(script)?;

    let mut per_rep = Vec::with_capacity(repetitions);
    let mut pooled_stage: Vec<(Stage, Vec<f64>)> =
        Stage::ALL.iter().map(|s| (*s, Vec::new())).collect();
    let mut pooled_e2e = Vec::new();
    for _ in 0..repetitions {
        let mut publisher = Publisher::new(NullSink);
        let run = run_batches(&cfg, &out.batches, &mut publisher, None, ClockMode::Replay)?;
        for (stage, samples) in &run.stage_samples {
            if let Some((_, pooled)) = pooled_stage.iter_mut().find(|(s, _)| s == stage) {
                pooled.extend_from_slice(samples);
            }
        }
        pooled_e2e.extend_from_slice(&run.end_to_end);
        per_rep.push(build_budget_report(
            &run.stage_samples,
            &run.end_to_end,
            budget_s,
        )?);
    }
    let pooled = build_budget_report(&pooled_stage, &pooled_e2e, budget_s)?;
    Ok(BenchReport { per_rep, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{crosswalk_fixture, fixture_by_name};
    use crate::telemetry::InMemorySink;

    #[test]
    fn empty_source_yields_empty_summary() {
        let cfg = crosswalk_fixture().loaded_config().unwrap();
        let mut publisher = Publisher::new(InMemorySink::connected());
        let run = run_batches(&cfg, &[], &mut publisher, None, ClockMode::Replay).unwrap();
        assert_eq!(run.summary.frames, 0);
        assert_eq!(run.summary.alerts, 0);
    }

    #[test]
    fn crosswalk_distance_is_eight_meters() {
        let script = crosswalk_fixture();
        let cfg = script.loaded_config().unwrap();
        let out = crate::sim::run_scenario(&script).unwrap();
        let mut pipeline = Pipeline::new(&cfg, None, ClockMode::Replay).unwrap();
        let mut measured = Vec::new();
        for batch in &out.batches {
            let result = pipeline.process_batch(batch);
            for pair in &result.pairs {
                measured.push(pair.assessment.distance_now);
            }
        }
        assert!(!measured.is_empty());
        for d in measured {
            assert!((d - 8.0).abs() < 0.001, "measured {d}");
        }
    }

    #[test]
    fn head_on_fixture_raises_alerts_on_alert_topic() {
        let script = fixture_by_name("collision-head-on").unwrap();
        let cfg = script.loaded_config().unwrap();
        let out = crate::sim::run_scenario(&script).unwrap();
        let mut publisher = Publisher::new(InMemorySink::connected());
        let run = run_batches(&cfg, &out.batches, &mut publisher, None, ClockMode::Replay).unwrap();
        assert!(run.summary.alerts > 0, "no alerts raised");
        let alert_messages: Vec<_> = publisher
            .sink()
            .messages
            .iter()
            .filter(|m| m.topic == "its/sim0/alerts" && m.qos == crate::telemetry::QoS::AtLeastOnce)
            .collect();
        let non_empty = alert_messages
            .iter()
            .filter(|m| {
                let v: serde_json::Value = serde_json::from_slice(&m.payload).unwrap();
                !v["alerts"].as_array().unwrap().is_empty()
            })
            .count();
        assert!(non_empty > 0);
    }

    #[test]
    fn bench_produces_stage_stats_and_passes_budget() {
        let script = crosswalk_fixture();
        let report = bench(&script, 3, 0.300).unwrap();
        assert_eq!(report.per_rep.len(), 3);
        assert_eq!(report.pooled.per_stage.len(), 7);
        assert!(report.pooled.pass, "{}", report.pooled.render());
    }
}
