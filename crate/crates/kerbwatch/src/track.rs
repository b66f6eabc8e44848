//! Frame-to-frame identity association and georeferenced kinematics.
//!
//! Greedy IoU matching with class gating keeps identity assignment
//! deterministic and cheap at single-camera scale. Velocity is an EMA of
//! the finite-difference displacement in a local tangent plane; heading is
//! degrees clockwise from north.

use std::collections::VecDeque;

use thiserror::Error;

use crate::geo::{BoundingBox, GeoPoint, LocalFrame, PixelPoint};
use crate::ingest::{ClassLabel, FrameBatch};

/// Ring-buffer capacity of per-track history samples.
pub const HISTORY_CAPACITY: usize = 64;

/// Smoothing factor for the velocity EMA.
pub const VELOCITY_EMA_ALPHA: f64 = 0.5;

/// Below this sample spacing the update is merged instead of differentiated.
pub const MIN_SAMPLE_DT_S: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("timestamp {t} not after last history sample {last}")]
    NonMonotonicTimestamp { t: f64, last: f64 },
}

/// One georeferenced history sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub t: f64,
    pub geo: GeoPoint,
    pub pixel: PixelPoint,
}

/// A persistent identity with kinematic state.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub class_label: ClassLabel,
    history: VecDeque<TrackSample>,
    /// Smoothed velocity in the local east-north frame, m/s.
    pub velocity: [f64; 2],
    pub speed: f64,
    pub acceleration: f64,
    /// Degrees clockwise from north, in [0, 360).
    pub heading: f64,
    pub age_frames: u64,
    pub misses: u32,
    pub last_bbox: BoundingBox,
}

impl Track {
    fn new(id: u64, class_label: ClassLabel, bbox: BoundingBox) -> Self {
        Track {
            id,
            class_label,
            history: VecDeque::with_capacity(HISTORY_CAPACITY),
            velocity: [0.0, 0.0],
            speed: 0.0,
            acceleration: 0.0,
            heading: 0.0,
            age_frames: 0,
            misses: 0,
            last_bbox: bbox,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &TrackSample> {
        self.history.iter()
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn latest(&self) -> Option<&TrackSample> {
        self.history.back()
    }

    /// Append a georeferenced sample and refresh velocity, speed,
    /// acceleration and heading.
    ///
    /// Samples closer than [`MIN_SAMPLE_DT_S`] to the previous one are
    /// merged (position averaged) so the finite difference never divides by
    /// a vanishing interval.
    pub fn update_kinematics(
        &mut self,
        t: f64,
        geo: GeoPoint,
        pixel: PixelPoint,
        local: &LocalFrame,
    ) -> Result<(), TrackError> {
        if let Some(last) = self.history.back().copied() {
            if t <= last.t {
                return Err(TrackError::NonMonotonicTimestamp { t, last: last.t });
            }
            let dt = t - last.t;
            if dt < MIN_SAMPLE_DT_S {
                let merged = TrackSample {
                    t: last.t,
                    geo: GeoPoint::new(
                        (last.geo.lat + geo.lat) / 2.0,
                        (last.geo.lon + geo.lon) / 2.0,
                    ),
                    pixel: PixelPoint::new(
                        (last.pixel.u + pixel.u) / 2.0,
                        (last.pixel.v + pixel.v) / 2.0,
                    ),
                };
                *self.history.back_mut().expect("history nonempty") = merged;
                return Ok(());
            }

            let prev_enu = local.to_enu(last.geo);
            let cur_enu = local.to_enu(geo);
            let raw = [
                (cur_enu[0] - prev_enu[0]) / dt,
                (cur_enu[1] - prev_enu[1]) / dt,
            ];
            let prev_speed = self.speed;
            if self.history.len() == 1 {
                // First finite difference seeds the EMA directly.
                self.velocity = raw;
            } else {
                self.velocity = [
                    VELOCITY_EMA_ALPHA * raw[0] + (1.0 - VELOCITY_EMA_ALPHA) * self.velocity[0],
                    VELOCITY_EMA_ALPHA * raw[1] + (1.0 - VELOCITY_EMA_ALPHA) * self.velocity[1],
                ];
            }
            self.speed = self.velocity[0].hypot(self.velocity[1]);
            self.acceleration = (self.speed - prev_speed) / dt;
            if self.speed > 1e-9 {
                let mut h = self.velocity[0].atan2(self.velocity[1]).to_degrees();
                if h < 0.0 {
                    h += 360.0;
                }
                // to_degrees can land exactly on 360 after the wrap.
                if h >= 360.0 {
                    h -= 360.0;
                }
                self.heading = h;
            }
        }

        if self.history.len() == HISTORY_CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back(TrackSample { t, geo, pixel });
        Ok(())
    }
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Outcome of matching a detection batch against the current tracks.
/// Every track id and detection index appears in exactly one of the three
/// sets.
#[derive(Debug, Clone, Default)]
pub struct AssociationResult {
    pub matched: Vec<(u64, usize)>,
    pub unmatched_tracks: Vec<u64>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy descending-IoU matching among same-class pairs at or above the
/// threshold. Ties break on (track id, detection input index) so replays
/// are deterministic.
pub fn associate(tracks: &[Track], batch: &FrameBatch, iou_threshold: f64) -> AssociationResult {
    let mut candidates: Vec<(f64, u64, usize, usize)> = Vec::new();
    for (ti, track) in tracks.iter().enumerate() {
        for (di, det) in batch.detections.iter().enumerate() {
            if track.class_label != det.class_label {
                continue;
            }
            let score = iou(&track.last_bbox, &det.bbox);
            if score >= iou_threshold {
                candidates.push((score, track.id, di, ti));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut track_taken = vec![false; tracks.len()];
    let mut det_taken = vec![false; batch.detections.len()];
    let mut result = AssociationResult::default();
    for (_, track_id, di, ti) in candidates {
        if track_taken[ti] || det_taken[di] {
            continue;
        }
        track_taken[ti] = true;
        det_taken[di] = true;
        result.matched.push((track_id, di));
    }
    for (ti, taken) in track_taken.iter().enumerate() {
        if !taken {
            result.unmatched_tracks.push(tracks[ti].id);
        }
    }
    for (di, taken) in det_taken.iter().enumerate() {
        if !taken {
            result.unmatched_detections.push(di);
        }
    }
    result
}

/// Owns the live track set and the never-reused id counter.
#[derive(Debug, Default)]
pub struct TrackStore {
    tracks: Vec<Track>,
    next_id: u64,
}

impl TrackStore {
    pub fn new() -> Self {
        TrackStore {
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn get_mut(&mut self, id: u64) -> Option<&mut Track> {
        self.tracks.iter_mut().find(|t| t.id == id)
    }

    pub fn associate(&self, batch: &FrameBatch, iou_threshold: f64) -> AssociationResult {
        associate(&self.tracks, batch, iou_threshold)
    }

    /// Spawn a track for an unmatched detection. Ids are monotonically
    /// increasing and never reused within a run.
    pub fn spawn(&mut self, class_label: ClassLabel, bbox: BoundingBox) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(Track::new(id, class_label, bbox));
        id
    }

    pub fn mark_missed(&mut self, id: u64) {
        if let Some(t) = self.get_mut(id) {
            t.misses += 1;
            t.age_frames += 1;
        }
    }

    /// Drop tracks that have missed more than `max_misses` frames.
    pub fn prune(&mut self, max_misses: u32) {
        self.tracks.retain(|t| t.misses <= max_misses);
    }
}
