//! Road-state metrics and detector-evaluation utilities.
//!
//! RAS (rolling average speed) and RAD (rolling average distance) are means
//! over a sliding time window: pooled speeds of all tracked objects and
//! all-pairs distances. Their joint density, accumulated over accident-free
//! operation, partitions the (RAS, RAD) plane into risk zones: combinations
//! seen often are low risk, combinations never or rarely seen are elevated.
//!
//! The evaluation side implements precision/recall/F1 curves over a
//! confidence-threshold grid and a (confidence x IoU) detection-count
//! sweep with duplicate suppression.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::BoundingBox;
use crate::ingest::{ClassLabel, FrameBatch};
use crate::track::iou;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ground-truth instances in the labeled set")]
    NoGroundTruth,
    #[error("zone map needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("csv parse error at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Time-ordered sliding window of (t, value) samples.
#[derive(Debug, Clone)]
pub struct RollingWindow {
    duration: f64,
    samples: VecDeque<(f64, f64)>,
}

impl RollingWindow {
    pub fn new(duration: f64) -> Self {
        assert!(duration > 0.0);
        RollingWindow {
            duration,
            samples: VecDeque::new(),
        }
    }

    /// Append a sample and evict everything older than `t - duration`.
    /// Timestamps are expected non-decreasing (replay order).
    pub fn push(&mut self, t: f64, value: f64) {
        self.samples.push_back((t, value));
        self.evict(t);
    }

    /// Advance the window clock without adding a sample.
    pub fn advance(&mut self, t: f64) {
        self.evict(t);
    }

    fn evict(&mut self, t_now: f64) {
        let cutoff = t_now - self.duration;
        while let Some(&(t, _)) = self.samples.front() {
            if t < cutoff {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    pub fn mean(&self) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        Some(self.samples.iter().map(|(_, v)| v).sum::<f64>() / self.samples.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.samples.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskZone {
    LowRisk,
    MediumRisk,
    ElevatedRisk,
    NoData,
}

impl RiskZone {
    pub fn as_str(&self) -> &'static str {
        match self {
            RiskZone::LowRisk => "low_risk",
            RiskZone::MediumRisk => "medium_risk",
            RiskZone::ElevatedRisk => "elevated_risk",
            RiskZone::NoData => "no_data",
        }
    }
}

/// One road-state observation. `ras`/`rad` are absent until the windows
/// hold at least one sample each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadState {
    pub t: f64,
    pub ras: Option<f64>,
    pub rad: Option<f64>,
    pub zone: RiskZone,
}

/// Maintains the speed and distance windows for one camera.
#[derive(Debug, Clone)]
pub struct RoadStateTracker {
    speed_window: RollingWindow,
    distance_window: RollingWindow,
    zone_map: Option<ZoneMap>,
}

impl RoadStateTracker {
    pub fn new(window_s: f64, zone_map: Option<ZoneMap>) -> Self {
        RoadStateTracker {
            speed_window: RollingWindow::new(window_s),
            distance_window: RollingWindow::new(window_s),
            zone_map,
        }
    }

    /// Fold one frame's speeds and pairwise distances into the windows and
    /// return the current state. The zone is `no_data` while either window
    /// is empty or when no zone map is configured.
    pub fn update_road_state(
        &mut self,
        speeds: &[f64],
        pair_distances: &[f64],
        t: f64,
    ) -> RoadState {
        for &s in speeds {
            self.speed_window.push(t, s);
        }
        for &d in pair_distances {
            self.distance_window.push(t, d);
        }
        self.speed_window.advance(t);
        self.distance_window.advance(t);

        let ras = self.speed_window.mean();
        let rad = self.distance_window.mean();
        let zone = match (ras, rad, &self.zone_map) {
            (Some(ras), Some(rad), Some(map)) => map.classify(ras, rad),
            _ => RiskZone::NoData,
        };
        RoadState { t, ras, rad, zone }
    }
}

/// 2D histogram over the (RAS, RAD) plane with mass-quantile zone cuts.
///
/// Let T be the total sample mass. `dense_cut` is the count of the last bin
/// needed for the highest-count bins to cover `low_mass_quantile * T`
/// (default one half): any bin at least that full is low risk. `sparse_cut`
/// is the largest count c such that all bins with count <= c together hold
/// at most `elevated_mass_quantile * T` (default one tenth): any bin that
/// empty is elevated risk. Everything between is medium. Queries outside
/// the histogram range clamp to the edge bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneMap {
    ras_min: f64,
    ras_max: f64,
    rad_min: f64,
    rad_max: f64,
    nx: usize,
    ny: usize,
    counts: Vec<u64>,
    dense_cut: u64,
    sparse_cut: u64,
}

/// Minimum sample count to build a zone map.
pub const ZONE_MAP_MIN_SAMPLES: usize = 100;

/// Default histogram resolution per axis.
pub const ZONE_MAP_BINS: usize = 20;

impl ZoneMap {
    pub fn build(samples: &[(f64, f64)], nx: usize, ny: usize) -> Result<Self, MetricsError> {
        Self::build_with_quantiles(samples, nx, ny, 0.5, 0.1)
    }

    pub fn build_with_quantiles(
        samples: &[(f64, f64)],
        nx: usize,
        ny: usize,
        low_mass_quantile: f64,
        elevated_mass_quantile: f64,
    ) -> Result<Self, MetricsError> {
        if samples.len() < ZONE_MAP_MIN_SAMPLES {
            return Err(MetricsError::InsufficientSamples {
                needed: ZONE_MAP_MIN_SAMPLES,
                got: samples.len(),
            });
        }
        assert!(nx > 0 && ny > 0);
        let ras_min = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let ras_max = samples
            .iter()
            .map(|s| s.0)
            .fold(f64::NEG_INFINITY, f64::max);
        let rad_min = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        let rad_max = samples
            .iter()
            .map(|s| s.1)
            .fold(f64::NEG_INFINITY, f64::max);

        let mut map = ZoneMap {
            ras_min,
            ras_max,
            rad_min,
            rad_max,
            nx,
            ny,
            counts: vec![0; nx * ny],
            dense_cut: 0,
            sparse_cut: 0,
        };
        for &(ras, rad) in samples {
            let (ix, iy) = map.bin_of(ras, rad);
            map.counts[iy * nx + ix] += 1;
        }

        // Place the two mass cuts on whole count levels so tied bins always
        // classify together.
        let total: u64 = map.counts.iter().sum();
        let mut levels: Vec<u64> = map.counts.clone();
        levels.push(0);
        levels.sort_unstable();
        levels.dedup();
        let mass_ge = |c: u64| -> u64 { map.counts.iter().filter(|&&k| k >= c).sum() };
        let mass_le = |c: u64| -> u64 { map.counts.iter().filter(|&&k| k <= c).sum() };

        // dense_cut: highest level whose at-or-above mass still covers the
        // low-risk quantile.
        let low_target = low_mass_quantile * total as f64;
        let dense_cut = levels
            .iter()
            .rev()
            .find(|&&c| mass_ge(c) as f64 >= low_target)
            .copied()
            .unwrap_or(0);
        // sparse_cut: highest level whose at-or-below mass stays within the
        // elevated quantile.
        let elevated_target = elevated_mass_quantile * total as f64;
        let mut sparse_cut = levels
            .iter()
            .rev()
            .find(|&&c| mass_le(c) as f64 <= elevated_target)
            .copied()
            .unwrap_or(0);
        // Keep the cuts ordered even on degenerate histograms.
        if sparse_cut >= dense_cut {
            sparse_cut = dense_cut.saturating_sub(1);
        }
        map.dense_cut = dense_cut;
        map.sparse_cut = sparse_cut;
        Ok(map)
    }

    fn bin_of(&self, ras: f64, rad: f64) -> (usize, usize) {
        let fx = if self.ras_max > self.ras_min {
            (ras - self.ras_min) / (self.ras_max - self.ras_min)
        } else {
            0.0
        };
        let fy = if self.rad_max > self.rad_min {
            (rad - self.rad_min) / (self.rad_max - self.rad_min)
        } else {
            0.0
        };
        let ix = ((fx * self.nx as f64) as isize).clamp(0, self.nx as isize - 1) as usize;
        let iy = ((fy * self.ny as f64) as isize).clamp(0, self.ny as isize - 1) as usize;
        (ix, iy)
    }

    pub fn classify(&self, ras: f64, rad: f64) -> RiskZone {
        let (ix, iy) = self.bin_of(ras, rad);
        let count = self.counts[iy * self.nx + ix];
        if count >= self.dense_cut {
            RiskZone::LowRisk
        } else if count <= self.sparse_cut {
            RiskZone::ElevatedRisk
        } else {
            RiskZone::MediumRisk
        }
    }

    pub fn cuts(&self) -> (u64, u64) {
        (self.dense_cut, self.sparse_cut)
    }

    pub fn count_at(&self, ras: f64, rad: f64) -> u64 {
        let (ix, iy) = self.bin_of(ras, rad);
        self.counts[iy * self.nx + ix]
    }

    /// Build from a road-state history CSV (`t,ras,rad,zone` rows, as
    /// written by [`road_state_csv`]). Rows with absent ras/rad are skipped.
    pub fn from_history_csv(text: &str) -> Result<Self, MetricsError> {
        let samples = parse_history_csv(text)?;
        Self::build(&samples, ZONE_MAP_BINS, ZONE_MAP_BINS)
    }
}

/// Parse `t,ras,rad[,zone]` CSV rows into (ras, rad) samples.
pub fn parse_history_csv(text: &str) -> Result<Vec<(f64, f64)>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("t,")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(MetricsError::Csv {
                line: i + 1,
                reason: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        if fields[1].is_empty() || fields[2].is_empty() {
            continue;
        }
        let ras: f64 = fields[1].parse().map_err(|e| MetricsError::Csv {
            line: i + 1,
            reason: format!("ras: {e}"),
        })?;
        let rad: f64 = fields[2].parse().map_err(|e| MetricsError::Csv {
            line: i + 1,
            reason: format!("rad: {e}"),
        })?;
        out.push((ras, rad));
    }
    Ok(out)
}

/// Serialize road states as `t,ras,rad,zone` rows with a header.
pub fn road_state_csv(states: &[RoadState]) -> String {
    let mut out = String::from("t,ras,rad,zone\n");
    for s in states {
        let ras = s.ras.map(|v| format!("{v:.6}")).unwrap_or_default();
        let rad = s.rad.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{:.3},{},{},{}\n", s.t, ras, rad, s.zone.as_str()));
    }
    out
}

// ---------------------------------------------------------------------------
// Detector evaluation
// ---------------------------------------------------------------------------

/// Detections and ground-truth boxes for one frame.
#[derive(Debug, Clone, Default)]
pub struct LabeledFrame {
    pub detections: Vec<(BoundingBox, ClassLabel, f64)>,
    pub truths: Vec<(BoundingBox, ClassLabel)>,
}

/// Precision/recall/F1 per confidence threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurves {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

impl EvalCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f1\n");
        for i in 0..self.thresholds.len() {
            out.push_str(&format!(
                "{:.4},{:.6},{:.6},{:.6}\n",
                self.thresholds[i], self.precision[i], self.recall[i], self.f1[i]
            ));
        }
        out
    }

    /// Threshold with the highest F1 (first on ties).
    pub fn best_f1_threshold(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (&thr, &f1) in self.thresholds.iter().zip(&self.f1) {
            if best.is_none_or(|(_, bf)| f1 > bf) {
                best = Some((thr, f1));
            }
        }
        best.map(|(t, _)| t)
    }
}

/// Harmonic mean of precision and recall; zero when both vanish.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// IoU at or above which a detection may claim a ground-truth box.
pub const EVAL_MATCH_IOU: f64 = 0.5;

/// Precision/recall/F1 over a confidence-threshold grid.
///
/// Matching is greedy by confidence: each surviving detection claims the
/// unmatched ground-truth box with the highest IoU, provided it reaches
/// [`EVAL_MATCH_IOU`]. Requires at least one ground-truth instance.
pub fn eval_curves(
    frames: &[LabeledFrame],
    thresholds: &[f64],
) -> Result<EvalCurves, MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let total_truth: usize = frames.iter().map(|f| f.truths.len()).sum();
    if total_truth == 0 {
        return Err(MetricsError::NoGroundTruth);
    }

    let mut curves = EvalCurves {
        thresholds: thresholds.to_vec(),
        precision: Vec::with_capacity(thresholds.len()),
        recall: Vec::with_capacity(thresholds.len()),
        f1: Vec::with_capacity(thresholds.len()),
    };
    for &thr in thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for frame in frames {
            let mut order: Vec<usize> = (0..frame.detections.len())
                .filter(|&i| frame.detections[i].2 >= thr)
                .collect();
            order.sort_by(|&a, &b| {
                frame.detections[b]
                    .2
                    .partial_cmp(&frame.detections[a].2)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut truth_used = vec![false; frame.truths.len()];
            for di in order {
                let dbox = &frame.detections[di].0;
                let mut best: Option<(usize, f64)> = None;
                for (ti, (tbox, _)) in frame.truths.iter().enumerate() {
                    if truth_used[ti] {
                        continue;
                    }
                    let score = iou(dbox, tbox);
                    if score >= EVAL_MATCH_IOU && best.is_none_or(|(_, bs)| score > bs) {
                        best = Some((ti, score));
                    }
                }
                match best {
                    Some((ti, _)) => {
                        truth_used[ti] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
            }
        }
        let fn_ = total_truth - tp;
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fn_) as f64;
        curves.precision.push(precision);
        curves.recall.push(recall);
        curves.f1.push(f1_score(precision, recall));
    }
    Ok(curves)
}

pub const LABELED_SCHEMA: &str = "kerbwatch/labeled";
pub const LABELED_SCHEMA_VERSION: u32 = 1;

/// Parse a labeled-data stream: a header line followed by one record per
/// line, either ground truth or a scored detection.
///
/// ```text
/// {"schema":"kerbwatch/labeled","version":1}
/// {"frame_id":0,"kind":"truth","class":"person","bbox":{"x_min":0.0,"y_min":0.0,"x_max":10.0,"y_max":10.0}}
/// {"frame_id":0,"kind":"detection","class":"person","confidence":0.83,"bbox":{"x_min":1.0,"y_min":0.0,"x_max":11.0,"y_max":10.0}}
/// ```
pub fn parse_labeled_stream(text: &str) -> Result<Vec<LabeledFrame>, MetricsError> {
    use serde::Deserialize;

    #[derive(Deserialize)]
    struct Header {
        schema: String,
        version: u32,
    }
    #[derive(Deserialize)]
    struct Record {
        frame_id: u64,
        kind: String,
        #[serde(rename = "class")]
        class_label: ClassLabel,
        bbox: BoundingBox,
        #[serde(default)]
        confidence: Option<f64>,
    }

    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(MetricsError::Csv {
        line: 1,
        reason: "empty labeled stream".into(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|e| MetricsError::Csv {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    if header.schema != LABELED_SCHEMA || header.version != LABELED_SCHEMA_VERSION {
        return Err(MetricsError::Csv {
            line: 1,
            reason: format!("expected {LABELED_SCHEMA} v{LABELED_SCHEMA_VERSION}"),
        });
    }

    let mut frames: Vec<(u64, LabeledFrame)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| MetricsError::Csv {
            line: i + 1,
            reason: e.to_string(),
        })?;
        record.bbox.validate().map_err(|e| MetricsError::Csv {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let frame = match frames.iter_mut().find(|(id, _)| *id == record.frame_id) {
            Some((_, f)) => f,
            None => {
                frames.push((record.frame_id, LabeledFrame::default()));
                &mut frames.last_mut().expect("just pushed").1
            }
        };
        match record.kind.as_str() {
            "truth" => frame.truths.push((record.bbox, record.class_label)),
            "detection" => {
                let confidence = record.confidence.ok_or(MetricsError::Csv {
                    line: i + 1,
                    reason: "detection record missing confidence".into(),
                })?;
                frame
                    .detections
                    .push((record.bbox, record.class_label, confidence));
            }
            other => {
                return Err(MetricsError::Csv {
                    line: i + 1,
                    reason: format!("unknown record kind `{other}`"),
                })
            }
        }
    }
    frames.sort_by_key(|(id, _)| *id);
    Ok(frames.into_iter().map(|(_, f)| f).collect())
}

// ---------------------------------------------------------------------------
// Confidence x IoU sweep
// ---------------------------------------------------------------------------

/// Detection counts per (confidence, IoU) grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSurface {
    pub confidence_grid: Vec<f64>,
    pub iou_grid: Vec<f64>,
    /// counts[ci][ii] = accepted detections at confidence_grid[ci],
    /// iou_grid[ii].
    pub counts: Vec<Vec<u64>>,
}

impl SweepSurface {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("confidence,iou,count\n");
        for (ci, &c) in self.confidence_grid.iter().enumerate() {
            for (ii, &i) in self.iou_grid.iter().enumerate() {
                out.push_str(&format!("{c:.4},{i:.4},{}\n", self.counts[ci][ii]));
            }
        }
        out
    }
}

/// Count detections accepted per (confidence, IoU) cell.
///
/// A detection survives a cell when its confidence reaches the cell's
/// confidence threshold and it is not suppressed as a duplicate: boxes are
/// taken in descending confidence, and a box overlapping an already-kept
/// same-class box with IoU at or above the cell's IoU threshold is dropped.
/// Counts are antitone along the confidence axis for any fixed IoU column.
pub fn threshold_sweep(
    batches: &[FrameBatch],
    confidence_grid: &[f64],
    iou_grid: &[f64],
) -> Result<SweepSurface, MetricsError> {
    #[cfg(feature = "parallel")]
    {
        threshold_sweep_impl(batches, confidence_grid, iou_grid, true)
    }
    #[cfg(not(feature = "parallel"))]
    {
        threshold_sweep_impl(batches, confidence_grid, iou_grid, false)
    }
}

/// Sequential sweep, always available for the bench comparison.
pub fn threshold_sweep_seq(
    batches: &[FrameBatch],
    confidence_grid: &[f64],
    iou_grid: &[f64],
) -> Result<SweepSurface, MetricsError> {
    threshold_sweep_impl(batches, confidence_grid, iou_grid, false)
}

fn threshold_sweep_impl(
    batches: &[FrameBatch],
    confidence_grid: &[f64],
    iou_grid: &[f64],
    parallel: bool,
) -> Result<SweepSurface, MetricsError> {
    if confidence_grid.is_empty() || iou_grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let row = |&conf: &f64| -> Vec<u64> {
        iou_grid
            .iter()
            .map(|&iou_thr| {
                batches
                    .iter()
                    .map(|b| count_after_suppression(b, conf, iou_thr))
                    .sum()
            })
            .collect()
    };

    let counts: Vec<Vec<u64>> = if parallel {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            confidence_grid.par_iter().map(row).collect()
        }
        #[cfg(not(feature = "parallel"))]
        unreachable!()
    } else {
        confidence_grid.iter().map(row).collect()
    };

    Ok(SweepSurface {
        confidence_grid: confidence_grid.to_vec(),
        iou_grid: iou_grid.to_vec(),
        counts,
    })
}

fn count_after_suppression(batch: &FrameBatch, conf_thr: f64, iou_thr: f64) -> u64 {
    let mut order: Vec<usize> = (0..batch.detections.len())
        .filter(|&i| batch.detections[i].confidence >= conf_thr)
        .collect();
    order.sort_by(|&a, &b| {
        batch.detections[b]
            .confidence
            .partial_cmp(&batch.detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    'outer: for di in order {
        let d = &batch.detections[di];
        for &ki in &kept {
            let k = &batch.detections[ki];
            if k.class_label == d.class_label && iou(&k.bbox, &d.bbox) >= iou_thr {
                continue 'outer;
            }
        }
        kept.push(di);
    }
    kept.len() as u64
}
