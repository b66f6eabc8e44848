//! Telemetry publication: topics, payload schemas, buffering and sinks.
//!
//! Per frame the pipeline publishes one message per topic class:
//!
//! - `its/{camera_id}/objects` (QoS 0) - per-object metadata
//! - `its/{camera_id}/pairs` (QoS 0) - pairwise assessments with display
//!   channels
//! - `its/{camera_id}/alerts` (QoS 1) - the safety channel
//!
//! Payloads are JSON with fixed field names; timestamps appear both as
//! epoch seconds and ISO-8601 UTC. While the sink is unreachable messages
//! buffer up to [`PUBLISH_BUFFER_CAPACITY`], dropping oldest beyond that;
//! the buffer drains in order on reconnect, so alerts survive a
//! disconnect/reconnect cycle with zero loss up to the bound.
//!
//! [`InMemorySink`] captures messages for tests; [`CsvExporter`] mirrors
//! the objects/pairs topics as CSV rows for offline analysis; `MqttSink`
//! (feature `mqtt`) publishes to a broker.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{ClassLabel, ObjectMetadata};
use crate::risk::{Channel, PairAssessment, PairDisplay};

pub const OBJECTS_SCHEMA: &str = "kerbwatch/objects";
pub const PAIRS_SCHEMA: &str = "kerbwatch/pairs";
pub const ALERTS_SCHEMA: &str = "kerbwatch/alerts";
pub const PAYLOAD_VERSION: u32 = 1;

/// Buffered messages while the sink is unreachable.
pub const PUBLISH_BUFFER_CAPACITY: usize = 10_000;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("sink error: {0}")]
    Sink(String),
    #[error("invalid mqtt url `{0}`")]
    BadUrl(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("payload is not valid json: {0}")]
    Json(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QoS {
    AtMostOnce,
    AtLeastOnce,
}

/// One outbound message.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink disconnected")]
    Disconnected,
    #[error("send failed: {0}")]
    Send(String),
}

/// Transport abstraction the publisher drives.
pub trait TelemetrySink {
    fn try_send(&mut self, msg: &Message) -> Result<(), SinkError>;
    fn is_connected(&self) -> bool;
}

/// Captures messages in memory; connectivity is toggled by tests.
#[derive(Debug, Default)]
pub struct InMemorySink {
    pub messages: Vec<Message>,
    connected: bool,
}

impl InMemorySink {
    pub fn connected() -> Self {
        InMemorySink {
            messages: Vec::new(),
            connected: true,
        }
    }

    pub fn disconnected() -> Self {
        InMemorySink {
            messages: Vec::new(),
            connected: false,
        }
    }

    pub fn set_connected(&mut self, connected: bool) {
        self.connected = connected;
    }

    pub fn topic_messages(&self, topic: &str) -> Vec<&Message> {
        self.messages.iter().filter(|m| m.topic == topic).collect()
    }
}

impl TelemetrySink for InMemorySink {
    fn try_send(&mut self, msg: &Message) -> Result<(), SinkError> {
        if !self.connected {
            return Err(SinkError::Disconnected);
        }
        self.messages.push(msg.clone());
        Ok(())
    }

    fn is_connected(&self) -> bool {
        self.connected
    }
}

/// Discards everything; used by the bench harness to time payload
/// construction without transport effects.
#[derive(Debug, Default)]
pub struct NullSink;

impl TelemetrySink for NullSink {
    fn try_send(&mut self, _msg: &Message) -> Result<(), SinkError> {
        Ok(())
    }

    fn is_connected(&self) -> bool {
        true
    }
}

/// `host:port` out of an mqtt://, tcp:// or bare broker URL; port
/// defaults to 1883.
pub fn parse_mqtt_url(url: &str) -> Result<(String, u16), TelemetryError> {
    let trimmed = url
        .trim_start_matches("mqtt://")
        .trim_start_matches("tcp://");
    let (host, port) = match trimmed.rsplit_once(':') {
        Some((h, p)) => (
            h.to_string(),
            p.parse::<u16>()
                .map_err(|_| TelemetryError::BadUrl(url.to_string()))?,
        ),
        None => (trimmed.to_string(), 1883),
    };
    if host.is_empty() {
        return Err(TelemetryError::BadUrl(url.to_string()));
    }
    Ok((host, port))
}

#[cfg(feature = "mqtt")]
pub use mqtt_sink::MqttSink;

#[cfg(feature = "mqtt")]
mod mqtt_sink {
    use super::*;
    use std::time::Duration;

    /// MQTT transport backed by rumqttc's synchronous client. The
    /// connection event loop runs on its own thread and reconnects on its
    /// own; the publisher's buffer covers the gaps.
    pub struct MqttSink {
        client: rumqttc::Client,
    }

    impl MqttSink {
        pub fn connect(url: &str, client_id: &str) -> Result<Self, TelemetryError> {
            let (host, port) = parse_mqtt_url(url)?;
            let mut options = rumqttc::MqttOptions::new(client_id, host, port);
            options.set_keep_alive(Duration::from_secs(5));
            let (client, mut connection) = rumqttc::Client::new(options, 100);
            std::thread::spawn(move || {
                for event in connection.iter() {
                    if event.is_err() {
                        // Back off so an unreachable broker does not spin.
                        std::thread::sleep(Duration::from_millis(500));
                    }
                }
            });
            Ok(MqttSink { client })
        }
    }

    impl TelemetrySink for MqttSink {
        fn try_send(&mut self, msg: &Message) -> Result<(), SinkError> {
            let qos = match msg.qos {
                QoS::AtMostOnce => rumqttc::QoS::AtMostOnce,
                QoS::AtLeastOnce => rumqttc::QoS::AtLeastOnce,
            };
            self.client
                .try_publish(&msg.topic, qos, false, msg.payload.clone())
                .map_err(|e| SinkError::Send(e.to_string()))
        }

        fn is_connected(&self) -> bool {
            true
        }
    }
}

pub fn topic_objects(camera_id: &str) -> String {
    format!("its/{camera_id}/objects")
}

pub fn topic_pairs(camera_id: &str) -> String {
    format!("its/{camera_id}/pairs")
}

pub fn topic_alerts(camera_id: &str) -> String {
    format!("its/{camera_id}/alerts")
}

/// Delivery counters for one publish call plus the cumulative drop count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeliveryReport {
    pub published: u64,
    pub failed: u64,
    pub buffered: u64,
    pub dropped_total: u64,
}

/// Outcome of a single publish.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Sent,
    Buffered,
}

/// Bounded store-and-forward wrapper around a sink. Single producer,
/// single consumer.
pub struct Publisher<S: TelemetrySink> {
    sink: S,
    buffer: VecDeque<Message>,
    capacity: usize,
    dropped_total: u64,
    dropped_alerts: u64,
    published_total: u64,
}

impl<S: TelemetrySink> Publisher<S> {
    pub fn new(sink: S) -> Self {
        Self::with_capacity(sink, PUBLISH_BUFFER_CAPACITY)
    }

    pub fn with_capacity(sink: S, capacity: usize) -> Self {
        Publisher {
            sink,
            buffer: VecDeque::new(),
            capacity,
            dropped_total: 0,
            dropped_alerts: 0,
            published_total: 0,
        }
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut S {
        &mut self.sink
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped_total
    }

    pub fn dropped_alerts(&self) -> u64 {
        self.dropped_alerts
    }

    pub fn published_total(&self) -> u64 {
        self.published_total
    }

    fn enqueue(&mut self, msg: Message) {
        self.buffer.push_back(msg);
        while self.buffer.len() > self.capacity {
            if let Some(old) = self.buffer.pop_front() {
                self.dropped_total += 1;
                if old.qos == QoS::AtLeastOnce {
                    self.dropped_alerts += 1;
                }
            }
        }
    }

    /// Drain as much of the backlog as the sink accepts, in order.
    pub fn flush(&mut self) -> u64 {
        let mut sent = 0;
        while let Some(msg) = self.buffer.front() {
            if !self.sink.is_connected() {
                break;
            }
            match self.sink.try_send(msg) {
                Ok(()) => {
                    self.buffer.pop_front();
                    sent += 1;
                }
                Err(_) => break,
            }
        }
        self.published_total += sent;
        sent
    }

    /// Publish one message, draining the backlog first so ordering holds.
    /// Returns whether the message went out now or joined the buffer.
    pub fn publish(&mut self, msg: Message) -> Delivery {
        self.flush();
        if self.buffer.is_empty() && self.sink.is_connected() {
            match self.sink.try_send(&msg) {
                Ok(()) => {
                    self.published_total += 1;
                    return Delivery::Sent;
                }
                Err(_) => {
                    self.enqueue(msg);
                    return Delivery::Buffered;
                }
            }
        }
        self.enqueue(msg);
        Delivery::Buffered
    }

    /// Publish one frame's metadata: one message per topic class.
    pub fn publish_metadata(
        &mut self,
        camera_id: &str,
        frame_id: u64,
        t: f64,
        objects: &[ObjectMetadata],
        pairs: &[PairRecord],
        alerts: &[AlertRecord],
    ) -> DeliveryReport {
        let mut report = DeliveryReport::default();
        let messages = [
            Message {
                topic: topic_objects(camera_id),
                payload: objects_payload(camera_id, frame_id, t, objects),
                qos: QoS::AtMostOnce,
            },
            Message {
                topic: topic_pairs(camera_id),
                payload: pairs_payload(camera_id, frame_id, t, pairs),
                qos: QoS::AtMostOnce,
            },
            Message {
                topic: topic_alerts(camera_id),
                payload: alerts_payload(camera_id, frame_id, t, alerts),
                qos: QoS::AtLeastOnce,
            },
        ];
        for msg in messages {
            match self.publish(msg) {
                Delivery::Sent => report.published += 1,
                Delivery::Buffered => report.failed += 1,
            }
        }
        report.buffered = self.buffer.len() as u64;
        report.dropped_total = self.dropped_total;
        report
    }
}

/// Pair assessment merged with its display annotation, as published.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairRecord {
    #[serde(flatten)]
    pub assessment: PairAssessment,
    pub channel: Channel,
    pub intensity: f64,
}

impl PairRecord {
    pub fn from_parts(assessment: PairAssessment, display: PairDisplay) -> Self {
        PairRecord {
            assessment,
            channel: display.channel,
            intensity: display.intensity,
        }
    }
}

/// One alert as published on the QoS-1 topic.
#[derive(Debug, Clone, Serialize)]
pub struct AlertRecord {
    pub track_a: u64,
    pub track_b: u64,
    pub class_a: ClassLabel,
    pub class_b: ClassLabel,
    pub probability: f64,
    pub distance_m: f64,
    pub braking_distance_m: f64,
    pub t_star_s: f64,
    pub t: f64,
    pub t_iso: String,
}

impl AlertRecord {
    pub fn from_assessment(a: &PairAssessment, t: f64) -> Self {
        AlertRecord {
            track_a: a.track_a,
            track_b: a.track_b,
            class_a: a.class_a,
            class_b: a.class_b,
            probability: a.probability,
            distance_m: a.distance_now,
            braking_distance_m: a.braking_distance,
            t_star_s: a.t_star,
            t,
            t_iso: iso8601_utc(t),
        }
    }
}

#[derive(Serialize)]
struct FramePayload<'a, T: Serialize> {
    schema: &'static str,
    version: u32,
    camera_id: &'a str,
    frame_id: u64,
    t: f64,
    t_iso: String,
    #[serde(flatten)]
    body: T,
}

pub fn objects_payload(
    camera_id: &str,
    frame_id: u64,
    t: f64,
    objects: &[ObjectMetadata],
) -> Vec<u8> {
    #[derive(Serialize)]
    struct Body<'a> {
        objects: &'a [ObjectMetadata],
    }
    serde_json::to_vec(&FramePayload {
        schema: OBJECTS_SCHEMA,
        version: PAYLOAD_VERSION,
        camera_id,
        frame_id,
        t,
        t_iso: iso8601_utc(t),
        body: Body { objects },
    })
    .expect("payload serializes")
}

pub fn pairs_payload(camera_id: &str, frame_id: u64, t: f64, pairs: &[PairRecord]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Body<'a> {
        pairs: &'a [PairRecord],
    }
    serde_json::to_vec(&FramePayload {
        schema: PAIRS_SCHEMA,
        version: PAYLOAD_VERSION,
        camera_id,
        frame_id,
        t,
        t_iso: iso8601_utc(t),
        body: Body { pairs },
    })
    .expect("payload serializes")
}

pub fn alerts_payload(camera_id: &str, frame_id: u64, t: f64, alerts: &[AlertRecord]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Body<'a> {
        alerts: &'a [AlertRecord],
    }
    serde_json::to_vec(&FramePayload {
        schema: ALERTS_SCHEMA,
        version: PAYLOAD_VERSION,
        camera_id,
        frame_id,
        t,
        t_iso: iso8601_utc(t),
        body: Body { alerts },
    })
    .expect("payload serializes")
}

// ---------------------------------------------------------------------------
// Schema validation
// ---------------------------------------------------------------------------

/// Validate a published payload against the documented schema for its
/// topic. Checks schema/version tags, topic-camera consistency, timestamp
/// fields and per-item field types and ranges.
pub fn validate_payload(topic: &str, payload: &[u8]) -> Result<(), SchemaError> {
    let value: serde_json::Value =
        serde_json::from_slice(payload).map_err(|e| SchemaError::Json(e.to_string()))?;
    let parts: Vec<&str> = topic.split('/').collect();
    if parts.len() != 3 || parts[0] != "its" {
        return Err(SchemaError::UnknownTopic(topic.to_string()));
    }
    let (camera_id, class) = (parts[1], parts[2]);
    let expected_schema = match class {
        "objects" => OBJECTS_SCHEMA,
        "pairs" => PAIRS_SCHEMA,
        "alerts" => ALERTS_SCHEMA,
        _ => return Err(SchemaError::UnknownTopic(topic.to_string())),
    };

    let get = |field: &str| -> Result<&serde_json::Value, SchemaError> {
        value.get(field).ok_or_else(|| SchemaError::Field {
            field: field.to_string(),
            reason: "missing".to_string(),
        })
    };
    let fail = |field: &str, reason: &str| SchemaError::Field {
        field: field.to_string(),
        reason: reason.to_string(),
    };

    if get("schema")?.as_str() != Some(expected_schema) {
        return Err(fail("schema", "wrong schema tag"));
    }
    if get("version")?.as_u64() != Some(PAYLOAD_VERSION as u64) {
        return Err(fail("version", "wrong version"));
    }
    if get("camera_id")?.as_str() != Some(camera_id) {
        return Err(fail("camera_id", "does not match topic"));
    }
    get("frame_id")?
        .as_u64()
        .ok_or_else(|| fail("frame_id", "not an unsigned integer"))?;
    let t = get("t")?
        .as_f64()
        .ok_or_else(|| fail("t", "not a number"))?;
    if !t.is_finite() {
        return Err(fail("t", "not finite"));
    }
    let t_iso = get("t_iso")?
        .as_str()
        .ok_or_else(|| fail("t_iso", "not a string"))?;
    if !(t_iso.len() == 24 && t_iso.ends_with('Z') && t_iso.as_bytes()[10] == b'T') {
        return Err(fail("t_iso", "not ISO-8601 UTC with milliseconds"));
    }

    let check_unit = |field: &str, v: f64| -> Result<(), SchemaError> {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(fail(field, "outside [0, 1]"))
        }
    };
    let arr = |field: &str| -> Result<&Vec<serde_json::Value>, SchemaError> {
        get(field)?
            .as_array()
            .ok_or_else(|| fail(field, "not an array"))
    };
    let num = |item: &serde_json::Value, field: &str| -> Result<f64, SchemaError> {
        item.get(field)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| fail(field, "missing or not a number"))
    };
    let class_ok = |item: &serde_json::Value, field: &str| -> Result<(), SchemaError> {
        let s = item
            .get(field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| fail(field, "missing or not a string"))?;
        serde_json::from_value::<ClassLabel>(serde_json::Value::String(s.to_string()))
            .map_err(|_| fail(field, "not a known class label"))?;
        Ok(())
    };

    match class {
        "objects" => {
            for item in arr("objects")? {
                item.get("track_id")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| fail("objects.track_id", "missing or invalid"))?;
                class_ok(item, "class")?;
                let lat = num(item, "lat")?;
                let lon = num(item, "lon")?;
                if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                    return Err(fail("objects.lat/lon", "outside WGS84 ranges"));
                }
                let speed = num(item, "speed_mps")?;
                if speed < 0.0 {
                    return Err(fail("objects.speed_mps", "negative"));
                }
                let heading = num(item, "heading_deg")?;
                if !(0.0..360.0).contains(&heading) {
                    return Err(fail("objects.heading_deg", "outside [0, 360)"));
                }
            }
        }
        "pairs" => {
            for item in arr("pairs")? {
                class_ok(item, "class_a")?;
                class_ok(item, "class_b")?;
                check_unit("pairs.probability", num(item, "probability")?)?;
                check_unit("pairs.intensity", num(item, "intensity")?)?;
                for field in ["distance_now", "t_star", "d_min", "braking_distance"] {
                    if num(item, field)? < 0.0 {
                        return Err(fail(field, "negative"));
                    }
                }
                item.get("alert")
                    .and_then(|v| v.as_bool())
                    .ok_or_else(|| fail("pairs.alert", "missing or not a bool"))?;
                let channel = item
                    .get("channel")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| fail("pairs.channel", "missing"))?;
                if !matches!(channel, "red" | "blue") {
                    return Err(fail("pairs.channel", "must be red or blue"));
                }
            }
        }
        "alerts" => {
            for item in arr("alerts")? {
                class_ok(item, "class_a")?;
                class_ok(item, "class_b")?;
                check_unit("alerts.probability", num(item, "probability")?)?;
                for field in ["distance_m", "braking_distance_m", "t_star_s"] {
                    if num(item, field)? < 0.0 {
                        return Err(fail(field, "negative"));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV mirror
// ---------------------------------------------------------------------------

/// Mirrors the objects and pairs topics as CSV files for offline analysis.
pub struct CsvExporter {
    objects: std::io::BufWriter<std::fs::File>,
    pairs: std::io::BufWriter<std::fs::File>,
}

impl CsvExporter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut objects = std::io::BufWriter::new(std::fs::File::create(dir.join("objects.csv"))?);
        let mut pairs = std::io::BufWriter::new(std::fs::File::create(dir.join("pairs.csv"))?);
        writeln!(
            objects,
            "t,frame_id,camera_id,track_id,class,lat,lon,speed_mps,heading_deg"
        )?;
        writeln!(
            pairs,
            "t,frame_id,track_a,track_b,class_a,class_b,cross_class,distance_m,t_star_s,d_min_m,braking_m,probability,alert,channel,intensity"
        )?;
        Ok(CsvExporter { objects, pairs })
    }

    pub fn append_frame(
        &mut self,
        frame_id: u64,
        t: f64,
        objects: &[ObjectMetadata],
        pairs: &[PairRecord],
    ) -> std::io::Result<()> {
        for o in objects {
            writeln!(
                self.objects,
                "{t:.3},{frame_id},{},{},{},{:.8},{:.8},{:.4},{:.3}",
                o.camera_id,
                o.track_id,
                o.class_label.as_str(),
                o.lat,
                o.lon,
                o.speed_mps,
                o.heading_deg
            )?;
        }
        for p in pairs {
            let a = &p.assessment;
            writeln!(
                self.pairs,
                "{t:.3},{frame_id},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.6},{},{},{:.6}",
                a.track_a,
                a.track_b,
                a.class_a.as_str(),
                a.class_b.as_str(),
                a.cross_class,
                a.distance_now,
                a.t_star,
                a.d_min,
                a.braking_distance,
                a.probability,
                a.alert,
                match p.channel {
                    Channel::Red => "red",
                    Channel::Blue => "blue",
                    Channel::Green => "green",
                },
                p.intensity
            )?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.objects.flush()?;
        self.pairs.flush()
    }
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

/// Epoch seconds to ISO-8601 UTC with millisecond precision.
pub fn iso8601_utc(epoch_s: f64) -> String {
    let total_ms = (epoch_s * 1000.0).round() as i64;
    let secs = total_ms.div_euclid(1000);
    let ms = total_ms.rem_euclid(1000);
    let days = secs.div_euclid(86_400);
    let sod = secs.rem_euclid(86_400);
    let (year, month, day) = civil_from_days(days);
    format!(
        "{year:04}-{month:02}-{day:02}T{:02}:{:02}:{:02}.{ms:03}Z",
        sod / 3600,
        (sod % 3600) / 60,
        sod % 60
    )
}

/// Days since 1970-01-01 to (year, month, day), proleptic Gregorian.
fn civil_from_days(days: i64) -> (i64, u32, u32) {
    let z = days + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}
