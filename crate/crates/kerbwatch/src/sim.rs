//! Scenario simulator: ground-truth world trajectories projected through
//! the inverse geo-frame into noisy pixel detections.
//!
//! Actors follow piecewise-linear geographic paths. Per frame the simulator
//! interpolates each actor, projects the ground point into the frame,
//! applies the forward lens model plus seeded Gaussian pixel noise, and
//! emits a detection bbox whose bottom-center is that anchor. The parallel
//! ground-truth stream carries exact positions, speeds and pairwise
//! distances, so every pipeline output can be checked against truth.
//!
//! [`label_with_oracle`] marks each truth frame with an alert decision from
//! a 1 ms time-stepped brute-force approach simulation - deliberately not
//! the closed-form prediction the pipeline uses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Correspondence, LoadedConfig, Thresholds};
use crate::geo::{
    distort_point, haversine, solve_geoframe, DistortionModel, GeoError, GeoFrame, GeoPoint,
    LocalFrame, PixelPoint,
};
use crate::ingest::{ClassLabel, DetectionEvent, FrameBatch};
use crate::risk::{RiskParams, VruPolicy};
use crate::rng::Rng64;

pub const GROUND_TRUTH_SCHEMA: &str = "kerbwatch/ground-truth";
pub const GROUND_TRUTH_SCHEMA_VERSION: u32 = 1;

/// Oracle time step for the brute-force approach simulation.
pub const ORACLE_DT_S: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario script: {0}")]
    InvalidScript(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub lat: f64,
    pub lon: f64,
}

/// One scripted road user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActorSpec {
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    /// At least two waypoints with strictly increasing times. The actor is
    /// visible between the first and last.
    pub path: Vec<Waypoint>,
    pub bbox_width: f64,
    pub bbox_height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceModel {
    Constant(f64),
    PerClass(BTreeMap<ClassLabel, f64>),
}

impl ConfidenceModel {
    fn confidence_for(&self, class: ClassLabel) -> f64 {
        match self {
            ConfidenceModel::Constant(c) => *c,
            ConfidenceModel::PerClass(map) => map.get(&class).copied().unwrap_or(0.5),
        }
    }
}

/// A complete scripted scenario; serializable as the scenario file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub camera_id: String,
    pub frame_width: u32,
    pub frame_height: u32,
    pub correspondences: Vec<Correspondence>,
    pub distortion: DistortionModel,
    pub actors: Vec<ActorSpec>,
    pub frame_rate: f64,
    pub pixel_noise_sigma: f64,
    pub confidence: ConfidenceModel,
    pub seed: u64,
    /// Probability that a visible actor yields no detection in a frame.
    #[serde(default)]
    pub drop_probability: f64,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.correspondences.len() != 4 {
            return Err(SimError::InvalidScript(format!(
                "expected 4 correspondences, got {}",
                self.correspondences.len()
            )));
        }
        if !self.frame_rate.is_finite() || self.frame_rate <= 0.0 {
            return Err(SimError::InvalidScript(
                "frame_rate must be positive".into(),
            ));
        }
        if self.pixel_noise_sigma < 0.0 {
            return Err(SimError::InvalidScript(
                "pixel_noise_sigma must be >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(SimError::InvalidScript(
                "drop_probability outside [0,1]".into(),
            ));
        }
        if self.actors.is_empty() {
            return Err(SimError::InvalidScript("no actors".into()));
        }
        for (i, actor) in self.actors.iter().enumerate() {
            if actor.path.len() < 2 {
                return Err(SimError::InvalidScript(format!(
                    "actor {i} needs at least 2 waypoints"
                )));
            }
            for w in actor.path.windows(2) {
                if w[1].t <= w[0].t {
                    return Err(SimError::InvalidScript(format!(
                        "actor {i} waypoint times must strictly increase"
                    )));
                }
            }
            if actor.bbox_width <= 0.0 || actor.bbox_height <= 0.0 {
                return Err(SimError::InvalidScript(format!(
                    "actor {i} bbox size must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn geoframe(&self) -> Result<GeoFrame, SimError> {
        let c = &self.correspondences;
        Ok(solve_geoframe([
            (
                PixelPoint::new(c[0].u, c[0].v),
                GeoPoint::new(c[0].lat, c[0].lon),
            ),
            (
                PixelPoint::new(c[1].u, c[1].v),
                GeoPoint::new(c[1].lat, c[1].lon),
            ),
            (
                PixelPoint::new(c[2].u, c[2].v),
                GeoPoint::new(c[2].lat, c[2].lon),
            ),
            (
                PixelPoint::new(c[3].u, c[3].v),
                GeoPoint::new(c[3].lat, c[3].lon),
            ),
        ])?)
    }

    /// Pipeline configuration for running this scenario: the script's
    /// camera plus default thresholds.
    pub fn loaded_config(&self) -> Result<LoadedConfig, SimError> {
        Ok(LoadedConfig {
            camera_id: self.camera_id.clone(),
            frame_width: self.frame_width,
            frame_height: self.frame_height,
            geoframe: self.geoframe()?,
            distortion: self.distortion,
            thresholds: Thresholds::default(),
            mqtt_url: None,
            csv_dir: None,
        })
    }

    pub fn start_time(&self) -> f64 {
        self.actors
            .iter()
            .map(|a| a.path.first().expect("validated").t)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn end_time(&self) -> f64 {
        self.actors
            .iter()
            .map(|a| a.path.last().expect("validated").t)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let script: ScenarioScript =
            serde_json::from_str(text).map_err(|e| SimError::InvalidScript(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }
}

/// True state of one actor in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthActor {
    pub actor_id: usize,
    #[serde(rename = "class")]
    pub class_label: ClassLabel,
    pub lat: f64,
    pub lon: f64,
    pub speed: f64,
    /// East-north velocity, m/s.
    pub velocity: [f64; 2],
    /// False when the actor's ground point left the validity region; no
    /// detection is emitted for such frames.
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub meters: f64,
}

/// Exact world state for one simulated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame_id: u64,
    pub t: f64,
    pub actors: Vec<GroundTruthActor>,
    pub pair_distances: Vec<PairDistance>,
    /// Filled by [`label_with_oracle`].
    pub collision_imminent: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub batches: Vec<FrameBatch>,
    pub truth: Vec<GroundTruthFrame>,
}

/// Position and segment velocity (ENU, m/s) of an actor at time `t`, or
/// `None` outside its waypoint span.
fn actor_state_at(actor: &ActorSpec, t: f64, local: &LocalFrame) -> Option<(GeoPoint, [f64; 2])> {
    let first = actor.path.first()?;
    let last = actor.path.last()?;
    if t < first.t || t > last.t {
        return None;
    }
    let mut seg = 0;
    for i in 0..actor.path.len() - 1 {
        if t >= actor.path[i].t {
            seg = i;
        }
    }
    let (w0, w1) = (&actor.path[seg], &actor.path[seg + 1]);
    let dt = w1.t - w0.t;
    let f = ((t - w0.t) / dt).clamp(0.0, 1.0);
    let geo = GeoPoint::new(
        w0.lat + f * (w1.lat - w0.lat),
        w0.lon + f * (w1.lon - w0.lon),
    );
    let e0 = local.to_enu(GeoPoint::new(w0.lat, w0.lon));
    let e1 = local.to_enu(GeoPoint::new(w1.lat, w1.lon));
    let vel = [(e1[0] - e0[0]) / dt, (e1[1] - e0[1]) / dt];
    Some((geo, vel))
}

/// Run a scenario: detections through the inverse geo-frame plus forward
/// lens model and seeded noise, ground truth exact. Byte-identical output
/// for identical scripts and seeds.
pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioOutput, SimError> {
    script.validate()?;
    let gf = script.geoframe()?;
    let local = LocalFrame::new(gf.centroid_geo());
    let mut rng = Rng64::new(script.seed);

    let t0 = script.start_time();
    let t_end = script.end_time();
    let n_frames = ((t_end - t0) * script.frame_rate).round() as u64 + 1;

    let mut batches = Vec::new();
    let mut truth = Vec::with_capacity(n_frames as usize);
    for frame_id in 0..n_frames {
        let t = t0 + frame_id as f64 / script.frame_rate;
        let mut detections = Vec::new();
        let mut actors = Vec::new();
        for (actor_id, actor) in script.actors.iter().enumerate() {
            let Some((geo, vel)) = actor_state_at(actor, t, &local) else {
                continue;
            };
            let anchor = gf.geo_to_pixel(geo)?;
            let visible = gf.contains(anchor);
            actors.push(GroundTruthActor {
                actor_id,
                class_label: actor.class_label,
                lat: geo.lat,
                lon: geo.lon,
                speed: vel[0].hypot(vel[1]),
                velocity: vel,
                visible,
            });

            // Fixed draw order per (frame, actor): drop, noise u, noise v.
            let drop_draw = rng.next_f64();
            let noise_u = rng.next_gaussian() * script.pixel_noise_sigma;
            let noise_v = rng.next_gaussian() * script.pixel_noise_sigma;
            if !visible || drop_draw < script.drop_probability {
                continue;
            }
            let observed = distort_point(anchor, &script.distortion);
            let u = observed.u + noise_u;
            let v = observed.v + noise_v;
            detections.push(DetectionEvent {
                camera_id: script.camera_id.clone(),
                frame_id,
                t,
                bbox: crate::geo::BoundingBox {
                    x_min: u - actor.bbox_width / 2.0,
                    y_min: v - actor.bbox_height,
                    x_max: u + actor.bbox_width / 2.0,
                    y_max: v,
                },
                class_label: actor.class_label,
                confidence: script.confidence.confidence_for(actor.class_label),
                detector_track_id: Some(actor_id as u64),
            });
        }

        let mut pair_distances = Vec::new();
        for i in 0..actors.len() {
            for j in (i + 1)..actors.len() {
                pair_distances.push(PairDistance {
                    a: actors[i].actor_id,
                    b: actors[j].actor_id,
                    meters: haversine(
                        GeoPoint::new(actors[i].lat, actors[i].lon),
                        GeoPoint::new(actors[j].lat, actors[j].lon),
                    ),
                });
            }
        }
        truth.push(GroundTruthFrame {
            frame_id,
            t,
            actors,
            pair_distances,
            collision_imminent: None,
        });
        if !detections.is_empty() {
            batches.push(FrameBatch {
                camera_id: script.camera_id.clone(),
                frame_id,
                t,
                detections,
            });
        }
    }
    Ok(ScenarioOutput { batches, truth })
}

/// Label each truth frame with the brute-force alert decision.
///
/// For every visible pair the relative state is stepped at [`ORACLE_DT_S`]
/// over the horizon to find the minimum separation and its time; braking
/// distance and the probability composition are evaluated inline on true
/// speeds with the same parameters the pipeline uses. The frame label is
/// the OR over pairs.
pub fn label_with_oracle(
    truth: &mut [GroundTruthFrame],
    local: &LocalFrame,
    mu: f64,
    g: f64,
    policy: &VruPolicy,
    params: &RiskParams,
) {
    for frame in truth.iter_mut() {
        let mut alert = false;
        let visible: Vec<&GroundTruthActor> = frame.actors.iter().filter(|a| a.visible).collect();
        for i in 0..visible.len() {
            for j in (i + 1)..visible.len() {
                let (a, b) = (visible[i], visible[j]);
                let a_vru = policy.is_vru(a.class_label);
                let b_vru = policy.is_vru(b.class_label);
                if a_vru && b_vru {
                    continue;
                }
                let pa = local.to_enu(GeoPoint::new(a.lat, a.lon));
                let pb = local.to_enu(GeoPoint::new(b.lat, b.lon));
                let p = [pb[0] - pa[0], pb[1] - pa[1]];
                let v = [b.velocity[0] - a.velocity[0], b.velocity[1] - a.velocity[1]];

                let steps = (params.horizon_s / ORACLE_DT_S).round() as usize;
                let mut d_min = f64::INFINITY;
                let mut t_star = 0.0;
                for k in 0..=steps {
                    let tau = k as f64 * ORACLE_DT_S;
                    let d = (p[0] + tau * v[0]).hypot(p[1] + tau * v[1]);
                    if d < d_min {
                        d_min = d;
                        t_star = tau;
                    }
                }

                let vehicle_speed = if a_vru {
                    b.speed
                } else if b_vru {
                    a.speed
                } else {
                    a.speed.max(b.speed)
                };
                let braking = vehicle_speed * vehicle_speed / (2.0 * mu * g);
                let d_now = haversine(GeoPoint::new(a.lat, a.lon), GeoPoint::new(b.lat, b.lon));
                let geometric = (1.0 - d_min / params.margin_m).max(0.0);
                let urgency = (braking / d_now.max(0.1)).min(1.0);
                let probability = geometric * urgency;
                if probability >= params.alert_threshold && t_star <= params.horizon_s {
                    alert = true;
                }
            }
        }
        frame.collision_imminent = Some(alert);
    }
}

/// Serialize ground truth as JSON lines with a header.
pub fn write_ground_truth<W: std::io::Write>(
    w: &mut W,
    truth: &[GroundTruthFrame],
) -> std::io::Result<()> {
    writeln!(
        w,
        "{{\"schema\":\"{GROUND_TRUTH_SCHEMA}\",\"version\":{GROUND_TRUTH_SCHEMA_VERSION}}}"
    )?;
    for frame in truth {
        writeln!(w, "{}", serde_json::to_string(frame)?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Reference latitude/longitude the fixture camera is anchored at.
const FIXTURE_ORIGIN: GeoPoint = GeoPoint {
    lat: 40.6405,
    lon: -8.6538,
};

/// Trapezoidal pixel quad mapped onto a 26 m x 40 m ground rectangle: the
/// road recedes from a wide near edge to a narrow far edge, so the
/// homography is genuinely projective.
fn fixture_correspondences() -> Vec<Correspondence> {
    let lf = LocalFrame::new(FIXTURE_ORIGIN);
    let corners = [
        (PixelPoint::new(310.0, 980.0), [-13.0, 0.0]),
        (PixelPoint::new(1610.0, 980.0), [13.0, 0.0]),
        (PixelPoint::new(1190.0, 310.0), [13.0, 40.0]),
        (PixelPoint::new(730.0, 310.0), [-13.0, 40.0]),
    ];
    corners
        .iter()
        .map(|(px, enu)| {
            let g = lf.from_enu(enu[0], enu[1]);
            Correspondence {
                u: px.u,
                v: px.v,
                lat: g.lat,
                lon: g.lon,
            }
        })
        .collect()
}

fn fixture_local() -> LocalFrame {
    LocalFrame::new(FIXTURE_ORIGIN)
}

/// Mild barrel distortion so the correction stage does real work in
/// end-to-end runs.
fn fixture_distortion() -> DistortionModel {
    DistortionModel {
        fx: 1000.0,
        fy: 1000.0,
        cx: 960.0,
        cy: 540.0,
        k1: -0.05,
        k2: 0.0,
        k3: 0.0,
        p1: 0.0,
        p2: 0.0,
    }
}

fn base_script(name: &str, actors: Vec<ActorSpec>) -> ScenarioScript {
    ScenarioScript {
        name: name.to_string(),
        camera_id: "sim0".to_string(),
        frame_width: 1920,
        frame_height: 1080,
        correspondences: fixture_correspondences(),
        distortion: fixture_distortion(),
        actors,
        frame_rate: 20.0,
        pixel_noise_sigma: 0.0,
        confidence: ConfidenceModel::Constant(0.9),
        seed: 7,
        drop_probability: 0.0,
    }
}

fn static_path(enu: [f64; 2], t_end: f64) -> Vec<Waypoint> {
    let g = fixture_local().from_enu(enu[0], enu[1]);
    vec![
        Waypoint {
            t: 0.0,
            lat: g.lat,
            lon: g.lon,
        },
        Waypoint {
            t: t_end,
            lat: g.lat,
            lon: g.lon,
        },
    ]
}

fn moving_path(points: &[(f64, [f64; 2])]) -> Vec<Waypoint> {
    let lf = fixture_local();
    points
        .iter()
        .map(|&(t, enu)| {
            let g = lf.from_enu(enu[0], enu[1]);
            Waypoint {
                t,
                lat: g.lat,
                lon: g.lon,
            }
        })
        .collect()
}

/// Two static markers exactly 8.000 m apart inside the geo-frame. The
/// eastern marker's longitude is solved from the haversine inverse so the
/// scripted separation is exact to floating point.
pub fn crosswalk_fixture() -> ScenarioScript {
    let lf = fixture_local();
    let a = lf.from_enu(-4.0, 12.0);
    // Same latitude, longitude offset chosen so haversine(a, b) = 8 m.
    let phi = a.lat.to_radians();
    let dlambda = 2.0 * ((8.0 / (2.0 * crate::geo::EARTH_RADIUS_M)).sin() / phi.cos()).asin();
    let b = GeoPoint::new(a.lat, a.lon + dlambda.to_degrees());

    let marker = |g: GeoPoint| ActorSpec {
        class_label: ClassLabel::Person,
        path: vec![
            Waypoint {
                t: 0.0,
                lat: g.lat,
                lon: g.lon,
            },
            Waypoint {
                t: 5.0,
                lat: g.lat,
                lon: g.lon,
            },
        ],
        bbox_width: 36.0,
        bbox_height: 80.0,
    };
    base_script("crosswalk", vec![marker(a), marker(b)])
}

fn person(path: Vec<Waypoint>) -> ActorSpec {
    ActorSpec {
        class_label: ClassLabel::Person,
        path,
        bbox_width: 36.0,
        bbox_height: 80.0,
    }
}

fn car(path: Vec<Waypoint>) -> ActorSpec {
    ActorSpec {
        class_label: ClassLabel::Car,
        path,
        bbox_width: 140.0,
        bbox_height: 90.0,
    }
}

/// Four scripted approach scenarios:
/// (a) head-on car at constant speed toward a standing pedestrian,
/// (b) car decelerating to a stop short of the pedestrian,
/// (c) fast car crossing the pedestrian's path,
/// (d) parallel non-crossing paths.
pub fn collision_fixtures() -> Vec<ScenarioScript> {
    let head_on = base_script(
        "collision-head-on",
        vec![
            person(static_path([0.0, 12.0], 5.0)),
            car(moving_path(&[(0.0, [0.0, 38.0]), (2.4, [0.0, 14.0])])),
        ],
    );

    let decelerating = base_script(
        "collision-decelerating",
        vec![
            person(static_path([0.0, 10.0], 10.0)),
            car(moving_path(&[
                (0.0, [0.0, 38.0]),
                (2.0, [0.0, 24.0]),
                (3.0, [0.0, 19.0]),
                (4.0, [0.0, 16.0]),
                (5.0, [0.0, 14.5]),
                (6.0, [0.0, 13.9]),
                (7.0, [0.0, 13.6]),
                (10.0, [0.0, 13.6]),
            ])),
        ],
    );

    let crossing = base_script(
        "collision-crossing",
        vec![
            person(moving_path(&[(0.0, [0.0, 12.5]), (6.0, [0.0, 16.0])])),
            car(moving_path(&[(0.0, [-12.0, 14.0]), (2.0, [12.0, 14.0])])),
        ],
    );

    let parallel = base_script(
        "collision-parallel",
        vec![
            person(moving_path(&[(0.0, [8.0, 30.0]), (16.0, [-8.0, 30.0])])),
            car(moving_path(&[(0.0, [-10.0, 4.0]), (4.0, [10.0, 4.0])])),
        ],
    );

    vec![head_on, decelerating, crossing, parallel]
}

/// Fixture lookup for the CLI.
pub fn fixture_by_name(name: &str) -> Option<ScenarioScript> {
    match name {
        "crosswalk" => Some(crosswalk_fixture()),
        "collision-head-on" | "collision-a" => Some(collision_fixtures().remove(0)),
        "collision-decelerating" | "collision-b" => Some(collision_fixtures().remove(1)),
        "collision-crossing" | "collision-c" => Some(collision_fixtures().remove(2)),
        "collision-parallel" | "collision-d" => Some(collision_fixtures().remove(3)),
        _ => None,
    }
}

pub const FIXTURE_NAMES: &[&str] = &[
    "crosswalk",
    "collision-head-on",
    "collision-decelerating",
    "collision-crossing",
    "collision-parallel",
];
