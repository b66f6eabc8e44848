//! Pipeline configuration: one JSON file per camera carrying the geo-frame
//! correspondences, the lens model and the runtime thresholds.
//!
//! ```text
//! {
//!   "camera_id": "cam0",
//!   "frame_width": 1920,
//!   "frame_height": 1080,
//!   "correspondences": [
//!     {"u": 310.0, "v": 980.0, "lat": 40.6400, "lon": -8.6540},
//!     {"u": 1610.0, "v": 980.0, "lat": 40.6400, "lon": -8.6537},
//!     {"u": 1190.0, "v": 310.0, "lat": 40.6404, "lon": -8.6537},
//!     {"u": 730.0, "v": 310.0, "lat": 40.6404, "lon": -8.6540}
//!   ],
//!   "distortion": {"fx": 1000.0, "fy": 1000.0, "cx": 960.0, "cy": 540.0,
//!                  "k1": 0.0, "k2": 0.0, "k3": 0.0, "p1": 0.0, "p2": 0.0}
//! }
//! ```
//!
//! Threshold fields are optional and default to the values listed on
//! [`Thresholds`]. All geo-frame invariants are checked at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{solve_geoframe, DistortionModel, GeoError, GeoFrame, GeoPoint, PixelPoint};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("config invariant `{invariant}` violated: {source}")]
    Invariant { invariant: String, source: GeoError },
}

/// One pixel↔WGS84 calibration pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Correspondence {
    pub u: f64,
    pub v: f64,
    pub lat: f64,
    pub lon: f64,
}

/// Runtime thresholds with their defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum detection confidence kept by the pipeline.
    pub confidence: f64,
    /// IoU threshold for track association (distinct from the detector
    /// validation operating point).
    pub association_iou: f64,
    /// Frames a track may miss before it is pruned.
    pub max_misses: u32,
    /// Tire-road friction coefficient.
    pub mu: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
    /// Separation below which a predicted approach counts as dangerous, m.
    pub margin_m: f64,
    /// Constant-velocity prediction horizon, s.
    pub horizon_s: f64,
    /// Collision probability at or above which an alert is raised.
    pub alert_threshold: f64,
    /// Rolling road-state window, s.
    pub window_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            confidence: 0.6,
            association_iou: 0.3,
            max_misses: 5,
            mu: 0.6,
            g: 9.8,
            margin_m: 2.0,
            horizon_s: 5.0,
            alert_threshold: 0.5,
            window_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawConfig {
    camera_id: String,
    frame_width: u32,
    frame_height: u32,
    correspondences: Vec<Correspondence>,
    distortion: DistortionModel,
    #[serde(flatten)]
    thresholds: Thresholds,
    #[serde(default)]
    mqtt_url: Option<String>,
    #[serde(default)]
    csv_dir: Option<PathBuf>,
}

/// Fully validated configuration, geo-frame solved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub camera_id: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub geoframe: GeoFrame,
    pub distortion: DistortionModel,
    pub thresholds: Thresholds,
    pub mqtt_url: Option<String>,
    pub csv_dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<LoadedConfig, ConfigError> {
    if raw.correspondences.len() != 4 {
        return Err(ConfigError::Field {
            field: "correspondences".into(),
            reason: format!(
                "expected exactly 4 entries, got {}",
                raw.correspondences.len()
            ),
        });
    }
    raw.distortion
        .validate()
        .map_err(|source| ConfigError::Invariant {
            invariant: "distortion model".into(),
            source,
        })?;

    let pairs: Vec<(PixelPoint, GeoPoint)> = raw
        .correspondences
        .iter()
        .map(|c| (PixelPoint::new(c.u, c.v), GeoPoint::new(c.lat, c.lon)))
        .collect();
    let geoframe = solve_geoframe([pairs[0], pairs[1], pairs[2], pairs[3]]).map_err(|source| {
        ConfigError::Invariant {
            invariant: "geoframe correspondences".into(),
            source,
        }
    })?;

    let t = &raw.thresholds;
    for (field, value, lo, hi) in [
        ("confidence", t.confidence, 0.0, 1.0),
        ("association_iou", t.association_iou, 0.0, 1.0),
        ("alert_threshold", t.alert_threshold, 0.0, 1.0),
        ("mu", t.mu, 1e-9, 1.5),
        ("g", t.g, 9.7, 9.9),
    ] {
        if !value.is_finite() || value < lo || value > hi {
            return Err(ConfigError::Field {
                field: field.into(),
                reason: format!("value {value} outside [{lo}, {hi}]"),
            });
        }
    }
    for (field, value) in [
        ("margin_m", t.margin_m),
        ("horizon_s", t.horizon_s),
        ("window_s", t.window_s),
    ] {
        if !value.is_finite() || value <= 0.0 {
            return Err(ConfigError::Field {
                field: field.into(),
                reason: format!("value {value} must be positive"),
            });
        }
    }

    Ok(LoadedConfig {
        camera_id: raw.camera_id,
        frame_width: raw.frame_width,
        frame_height: raw.frame_height,
        geoframe,
        distortion: raw.distortion,
        thresholds: raw.thresholds,
        mqtt_url: raw.mqtt_url,
        csv_dir: raw.csv_dir,
    })
}
