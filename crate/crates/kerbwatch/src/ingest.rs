//! Detection-stream ingestion: schema validation, per-record rejection
//! diagnostics, frame grouping and bounded reordering.
//!
//! The wire format is newline-delimited JSON, one detection per line,
//! preceded by a single header line:
//!
//! ```text
//! {"schema":"kerbwatch/detections","version":1}
//! {"camera_id":"cam0","frame_id":0,"t":0.0,"bbox":{"x_min":10.0,"y_min":20.0,"x_max":30.0,"y_max":60.0},"class":"person","confidence":0.95,"detector_track_id":null}
//! ```
//!
//! Records may arrive out of order by up to [`REORDER_TOLERANCE_S`]; older
//! records abort the stream with [`IngestError::StreamOrder`]. Malformed
//! records are rejected individually and reported, never fatal.

use std::collections::VecDeque;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::BoundingBox;

pub const DETECTION_SCHEMA: &str = "kerbwatch/detections";
pub const DETECTION_SCHEMA_VERSION: u32 = 1;

/// Out-of-order tolerance: a record may be at most this much older than the
/// newest timestamp already seen.
pub const REORDER_TOLERANCE_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error reading detection stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or invalid stream header: {0}")]
    Header(String),
    #[error("stream order violated: record at t={t} is more than {REORDER_TOLERANCE_S} s older than t={max_t}")]
    StreamOrder { t: f64, max_t: f64 },
}

/// Object classes the pipeline distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Person,
    Bicycle,
    Motorbike,
    Car,
    Truck,
    Bus,
    Other,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Person => "person",
            ClassLabel::Bicycle => "bicycle",
            ClassLabel::Motorbike => "motorbike",
            ClassLabel::Car => "car",
            ClassLabel::Truck => "truck",
            ClassLabel::Bus => "bus",
            ClassLabel::Other => "other",
        }
    }
}

/// One detector output for one object in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub camera_id: String,
    pub frame_id: u64,
    pub t: f64,
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    pub confidence: f64,
    #[serde(default)]
    pub detector_track_id: Option<u64>,
}

impl DetectionEvent {
    pub fn validate(&self) -> Result<(), String> {
        if !self.t.is_finite() {
            return Err(format!("timestamp is not finite: {}", self.t));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!("confidence out of [0,1]: {}", self.confidence));
        }
        self.bbox.validate().map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// All detections sharing one camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBatch {
    pub camera_id: String,
    pub frame_id: u64,
    pub t: f64,
    pub detections: Vec<DetectionEvent>,
}

/// Diagnostic for a rejected record.
#[derive(Debug, Clone)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

/// Summary of a fully-consumed stream.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: u64,
    pub frames: u64,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StreamHeader {
    schema: String,
    version: u32,
}

/// Streaming reader that groups records into [`FrameBatch`]es and emits them
/// in non-decreasing timestamp order using a watermark of
/// [`REORDER_TOLERANCE_S`].
pub struct DetectionReader<R: BufRead> {
    source: std::io::Lines<R>,
    header_checked: bool,
    // Open batches keyed by (camera_id, frame_id); flushed once the
    // watermark passes them.
    pending: Vec<FrameBatch>,
    ready: VecDeque<FrameBatch>,
    max_t_seen: f64,
    line_no: usize,
    records: u64,
    frames: u64,
    rejects: Vec<Reject>,
    finished: bool,
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(source: R) -> Self {
        DetectionReader {
            source: source.lines(),
            header_checked: false,
            pending: Vec::new(),
            ready: VecDeque::new(),
            max_t_seen: f64::NEG_INFINITY,
            line_no: 0,
            records: 0,
            frames: 0,
            rejects: Vec::new(),
            finished: false,
        }
    }

    pub fn rejects(&self) -> &[Reject] {
        &self.rejects
    }

    pub fn report(&self) -> IngestReport {
        IngestReport {
            records: self.records,
            frames: self.frames,
            rejects: self.rejects.clone(),
        }
    }

    fn reject(&mut self, reason: String) {
        self.rejects.push(Reject {
            line: self.line_no,
            reason,
        });
    }

    fn accept(&mut self, event: DetectionEvent) -> Result<(), IngestError> {
        if event.t + REORDER_TOLERANCE_S < self.max_t_seen {
            return Err(IngestError::StreamOrder {
                t: event.t,
                max_t: self.max_t_seen,
            });
        }
        self.max_t_seen = self.max_t_seen.max(event.t);
        self.records += 1;

        match self
            .pending
            .iter_mut()
            .find(|b| b.camera_id == event.camera_id && b.frame_id == event.frame_id)
        {
            Some(batch) => {
                if batch.t != event.t {
                    self.rejects.push(Reject {
                        line: self.line_no,
                        reason: format!(
                            "frame {} already has t={}, record has t={}",
                            event.frame_id, batch.t, event.t
                        ),
                    });
                    self.records -= 1;
                    return Ok(());
                }
                batch.detections.push(event);
            }
            None => self.pending.push(FrameBatch {
                camera_id: event.camera_id.clone(),
                frame_id: event.frame_id,
                t: event.t,
                detections: vec![event],
            }),
        }
        self.flush_watermarked();
        Ok(())
    }

    /// Move batches the watermark has passed into the ready queue, ordered
    /// by (t, frame_id).
    fn flush_watermarked(&mut self) {
        let cutoff = self.max_t_seen - REORDER_TOLERANCE_S;
        let mut flushed: Vec<FrameBatch> = Vec::new();
        self.pending.retain_mut(|b| {
            if b.t < cutoff {
                flushed.push(b.clone());
                false
            } else {
                true
            }
        });
        Self::sort_batches(&mut flushed);
        self.frames += flushed.len() as u64;
        self.ready.extend(flushed);
    }

    fn flush_all(&mut self) {
        let mut flushed = std::mem::take(&mut self.pending);
        Self::sort_batches(&mut flushed);
        self.frames += flushed.len() as u64;
        self.ready.extend(flushed);
    }

    fn sort_batches(batches: &mut [FrameBatch]) {
        batches.sort_by(|a, b| {
            a.t.partial_cmp(&b.t)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.frame_id.cmp(&b.frame_id))
                .then(a.camera_id.cmp(&b.camera_id))
        });
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<FrameBatch, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(batch) = self.ready.pop_front() {
                return Some(Ok(batch));
            }
            if self.finished {
                return None;
            }
            let line = match self.source.next() {
                None => {
                    self.finished = true;
                    self.flush_all();
                    continue;
                }
                Some(Err(e)) => {
                    self.finished = true;
                    return Some(Err(IngestError::Io(e)));
                }
                Some(Ok(line)) => line,
            };
            self.line_no += 1;

            if !self.header_checked {
                self.header_checked = true;
                match serde_json::from_str::<StreamHeader>(&line) {
                    Ok(h)
                        if h.schema == DETECTION_SCHEMA
                            && h.version == DETECTION_SCHEMA_VERSION =>
                    {
                        continue;
                    }
                    Ok(h) => {
                        self.finished = true;
                        return Some(Err(IngestError::Header(format!(
                            "expected {DETECTION_SCHEMA} v{DETECTION_SCHEMA_VERSION}, got {} v{}",
                            h.schema, h.version
                        ))));
                    }
                    Err(e) => {
                        self.finished = true;
                        return Some(Err(IngestError::Header(e.to_string())));
                    }
                }
            }

            if line.trim().is_empty() {
                continue;
            }
            let event: DetectionEvent = match serde_json::from_str(&line) {
                Ok(ev) => ev,
                Err(e) => {
                    self.reject(format!("parse error: {e}"));
                    continue;
                }
            };
            if let Err(reason) = event.validate() {
                self.reject(reason);
                continue;
            }
            if let Err(e) = self.accept(event) {
                self.finished = true;
                return Some(Err(e));
            }
        }
    }
}

/// Read an entire stream into memory. Convenience for replay files.
pub fn read_detection_stream<R: BufRead>(
    source: R,
) -> Result<(Vec<FrameBatch>, IngestReport), IngestError> {
    let mut reader = DetectionReader::new(source);
    let mut batches = Vec::new();
    for item in reader.by_ref() {
        batches.push(item?);
    }
    Ok((batches, reader.report()))
}

/// Serialize batches back to the wire format, header included. The output
/// parses back to the same batches (up to reordering already applied).
pub fn write_detection_stream<W: std::io::Write>(
    w: &mut W,
    batches: &[FrameBatch],
) -> std::io::Result<()> {
    let header = StreamHeader {
        schema: DETECTION_SCHEMA.to_string(),
        version: DETECTION_SCHEMA_VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for batch in batches {
        for det in &batch.detections {
            writeln!(w, "{}", serde_json::to_string(det)?)?;
        }
    }
    Ok(())
}

/// Keep detections at or above the confidence threshold.
pub fn filter_by_confidence(batch: &FrameBatch, threshold: f64) -> FrameBatch {
    debug_assert!((0.0..=1.0).contains(&threshold));
    FrameBatch {
        camera_id: batch.camera_id.clone(),
        frame_id: batch.frame_id,
        t: batch.t,
        detections: batch
            .detections
            .iter()
            .filter(|d| d.confidence >= threshold)
            .cloned()
            .collect(),
    }
}

/// Per-object metadata as published on the objects topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetadata {
    pub camera_id: String,
    pub track_id: u64,
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    pub lat: f64,
    pub lon: f64,
    pub speed_mps: f64,
    pub heading_deg: f64,
    pub t: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use std::io::Cursor;

    fn header_line() -> String {
        format!("{{\"schema\":\"{DETECTION_SCHEMA}\",\"version\":{DETECTION_SCHEMA_VERSION}}}")
    }

    fn record(frame_id: u64, t: f64, confidence: f64) -> String {
        format!(
            "{{\"camera_id\":\"cam0\",\"frame_id\":{frame_id},\"t\":{t},\"bbox\":{{\"x_min\":0.0,\"y_min\":0.0,\"x_max\":10.0,\"y_max\":10.0}},\"class\":\"person\",\"confidence\":{confidence}}}"
        )
    }

    #[test]
    fn groups_records_by_frame() {
        let input = format!(
            "{}\n{}\n{}\n",
            header_line(),
            record(1, 0.0, 0.9),
            record(1, 0.0, 0.8)
        );
        let (batches, report) = read_detection_stream(Cursor::new(input)).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].detections.len(), 2);
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn reorders_within_tolerance() {
        let input = format!(
            "{}\n{}\n{}\n",
            header_line(),
            record(3, 0.15, 0.9),
            record(2, 0.10, 0.9)
        );
        let (batches, _) = read_detection_stream(Cursor::new(input)).unwrap();
        let ids: Vec<u64> = batches.iter().map(|b| b.frame_id).collect();
        assert_eq!(ids, vec![2, 3]);
    }

    #[test]
    fn rejects_invalid_confidence_and_continues() {
        let input = format!(
            "{}\n{}\n{}\n",
            header_line(),
            record(1, 0.0, 1.7),
            record(2, 0.05, 0.5)
        );
        let (batches, report) = read_detection_stream(Cursor::new(input)).unwrap();
        assert_eq!(report.rejects.len(), 1);
        assert!(report.rejects[0].reason.contains("confidence"));
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].frame_id, 2);
    }

    #[test]
    fn regression_beyond_tolerance_is_fatal() {
        let input = format!(
            "{}\n{}\n{}\n",
            header_line(),
            record(10, 5.0, 0.9),
            record(2, 3.5, 0.9)
        );
        let err = read_detection_stream(Cursor::new(input)).unwrap_err();
        assert!(matches!(err, IngestError::StreamOrder { .. }));
    }

    #[test]
    fn missing_header_is_fatal() {
        let input = format!("{}\n", record(1, 0.0, 0.9));
        let err = read_detection_stream(Cursor::new(input)).unwrap_err();
        assert!(matches!(err, IngestError::Header(_)));
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let input = format!(
            "{}\n{}\n{}\n{}\n",
            header_line(),
            record(1, 0.0, 0.9),
            record(1, 0.0, 0.85),
            record(2, 0.05, 0.5)
        );
        let (batches, _) = read_detection_stream(Cursor::new(input)).unwrap();
        let mut out = Vec::new();
        write_detection_stream(&mut out, &batches).unwrap();
        let (again, report) = read_detection_stream(Cursor::new(out)).unwrap();
        assert_eq!(batches, again);
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn filter_keeps_at_or_above_threshold() {
        let batch = FrameBatch {
            camera_id: "cam0".into(),
            frame_id: 0,
            t: 0.0,
            detections: [0.1, 0.6, 0.9]
                .iter()
                .map(|&c| DetectionEvent {
                    camera_id: "cam0".into(),
                    frame_id: 0,
                    t: 0.0,
                    bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    class_label: ClassLabel::Person,
                    confidence: c,
                    detector_track_id: None,
                })
                .collect(),
        };
        assert_eq!(filter_by_confidence(&batch, 0.6).detections.len(), 2);
        assert_eq!(filter_by_confidence(&batch, 0.0).detections.len(), 3);
    }

    #[test]
    fn filter_is_antitone_in_threshold() {
        let mut rng = Rng64::new(21);
        for _ in 0..50 {
            let n = 1 + (rng.next_u64() % 20) as usize;
            let batch = FrameBatch {
                camera_id: "cam0".into(),
                frame_id: 0,
                t: 0.0,
                detections: (0..n)
                    .map(|_| DetectionEvent {
                        camera_id: "cam0".into(),
                        frame_id: 0,
                        t: 0.0,
                        bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                        class_label: ClassLabel::Car,
                        confidence: rng.next_f64(),
                        detector_track_id: None,
                    })
                    .collect(),
            };
            let mut prev = usize::MAX;
            for i in 0..=10 {
                let thr = i as f64 / 10.0;
                let kept = filter_by_confidence(&batch, thr).detections.len();
                assert!(kept <= prev, "kept count increased as threshold rose");
                prev = kept;
            }
        }
    }
}
