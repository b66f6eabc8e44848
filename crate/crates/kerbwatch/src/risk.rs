//! Collision-risk modeling: braking distance, closest point of approach
//! under constant velocity, pairwise assessment and alert decisions.
//!
//! A vulnerable road user (pedestrian, cyclist) is assumed able to stop
//! instantly, so its braking distance is zero and VRU-VRU pairs carry no
//! collision probability. For mixed pairs the vehicle party's braking
//! distance drives the urgency term; for vehicle-vehicle pairs the faster
//! party's does.
//!
//! probability = geometric * urgency, where
//!   geometric = max(0, 1 - d_min / margin)
//!   urgency   = min(1, braking_distance / max(distance_now, 0.1 m))
//!
//! The product is continuous, monotone in closing speed, and zero whenever
//! the predicted paths keep at least `margin` separation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine, GeoFrame, LocalFrame};
use crate::ingest::ClassLabel;
use crate::track::Track;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("speed must be non-negative, got {0}")]
    NegativeSpeed(f64),
    #[error("invalid friction context: {0}")]
    InvalidFriction(String),
    #[error("track {track_id} has fewer than 2 history samples")]
    InsufficientHistory { track_id: u64 },
    #[error("track {track_id} is outside the geoframe validity region")]
    OutsideRegion { track_id: u64 },
}

/// Tire-road friction coefficient and gravitational acceleration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrictionContext {
    pub mu: f64,
    pub g: f64,
}

impl FrictionContext {
    pub fn new(mu: f64, g: f64) -> Result<Self, RiskError> {
        if !mu.is_finite() || mu <= 0.0 || mu > 1.5 {
            return Err(RiskError::InvalidFriction(format!(
                "mu {mu} outside (0, 1.5]"
            )));
        }
        if !g.is_finite() || !(9.7..=9.9).contains(&g) {
            return Err(RiskError::InvalidFriction(format!(
                "g {g} outside [9.7, 9.9]"
            )));
        }
        Ok(FrictionContext { mu, g })
    }

    /// Dry-road default: mu 0.6, g 9.8 m/s^2.
    pub fn dry_default() -> Self {
        FrictionContext { mu: 0.6, g: 9.8 }
    }
}

/// Which classes stop instantly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VruPolicy {
    pub vru_classes: BTreeSet<ClassLabel>,
    pub instant_stop: bool,
}

impl Default for VruPolicy {
    fn default() -> Self {
        VruPolicy {
            vru_classes: [ClassLabel::Person, ClassLabel::Bicycle]
                .into_iter()
                .collect(),
            instant_stop: true,
        }
    }
}

impl VruPolicy {
    pub fn is_vru(&self, class: ClassLabel) -> bool {
        self.vru_classes.contains(&class)
    }
}

/// Tunables for the pairwise assessment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RiskParams {
    pub margin_m: f64,
    pub horizon_s: f64,
    pub alert_threshold: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        RiskParams {
            margin_m: 2.0,
            horizon_s: 5.0,
            alert_threshold: 0.5,
        }
    }
}

/// Stopping distance under uniform deceleration: v^2 / (2 mu g).
pub fn braking_distance(v: f64, ctx: &FrictionContext) -> Result<f64, RiskError> {
    if v < 0.0 || !v.is_finite() {
        return Err(RiskError::NegativeSpeed(v));
    }
    Ok(v * v / (2.0 * ctx.mu * ctx.g))
}

/// Closest point of approach under constant velocity.
///
/// Returns `(t_star, d_min)` with `t_star` clamped to `[0, horizon]`. A
/// relative speed below 1e-9 m/s yields `t_star = 0` and the current
/// separation.
pub fn closest_approach(p_rel: [f64; 2], v_rel: [f64; 2], horizon: f64) -> (f64, f64) {
    debug_assert!(horizon > 0.0);
    let v_sq = v_rel[0] * v_rel[0] + v_rel[1] * v_rel[1];
    let t_star = if v_sq.sqrt() < 1e-9 {
        0.0
    } else {
        (-(p_rel[0] * v_rel[0] + p_rel[1] * v_rel[1]) / v_sq).clamp(0.0, horizon)
    };
    let dx = p_rel[0] + t_star * v_rel[0];
    let dy = p_rel[1] + t_star * v_rel[1];
    (t_star, dx.hypot(dy))
}

/// Everything the alert decision for one pair rests on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairAssessment {
    pub track_a: u64,
    pub track_b: u64,
    pub class_a: ClassLabel,
    pub class_b: ClassLabel,
    pub cross_class: bool,
    pub distance_now: f64,
    pub t_star: f64,
    pub d_min: f64,
    pub braking_distance: f64,
    pub probability: f64,
    pub alert: bool,
}

/// Assess one pair of tracks. Both need at least two history samples and a
/// current position inside the geoframe validity region.
///
/// Scalar outputs are symmetric in the pair order; `track_a` always carries
/// the smaller id.
pub fn assess_pair(
    a: &Track,
    b: &Track,
    gf: &GeoFrame,
    local: &LocalFrame,
    ctx: &FrictionContext,
    policy: &VruPolicy,
    params: &RiskParams,
) -> Result<PairAssessment, RiskError> {
    let (a, b) = if a.id <= b.id { (a, b) } else { (b, a) };
    for t in [a, b] {
        if t.history_len() < 2 {
            return Err(RiskError::InsufficientHistory { track_id: t.id });
        }
    }
    let sa = a.latest().expect("history checked");
    let sb = b.latest().expect("history checked");
    for (t, s) in [(a, sa), (b, sb)] {
        if !gf.contains(s.pixel) {
            return Err(RiskError::OutsideRegion { track_id: t.id });
        }
    }

    let distance_now = haversine(sa.geo, sb.geo);
    let ea = local.to_enu(sa.geo);
    let eb = local.to_enu(sb.geo);
    let p_rel = [eb[0] - ea[0], eb[1] - ea[1]];
    let v_rel = [b.velocity[0] - a.velocity[0], b.velocity[1] - a.velocity[1]];
    let (t_star, d_min) = closest_approach(p_rel, v_rel, params.horizon_s);

    let a_vru = policy.is_vru(a.class_label);
    let b_vru = policy.is_vru(b.class_label);
    let braking = if a_vru && b_vru {
        // Both can stop instantly.
        0.0
    } else if a_vru {
        braking_distance(b.speed, ctx)?
    } else if b_vru {
        braking_distance(a.speed, ctx)?
    } else {
        // Vehicle-vehicle: the faster party's stopping distance governs.
        braking_distance(a.speed.max(b.speed), ctx)?
    };

    let probability = if a_vru && b_vru {
        0.0
    } else {
        let geometric = (1.0 - d_min / params.margin_m).max(0.0);
        let urgency = (braking / distance_now.max(0.1)).min(1.0);
        geometric * urgency
    };
    let alert = probability >= params.alert_threshold && t_star <= params.horizon_s;

    Ok(PairAssessment {
        track_a: a.id,
        track_b: b.id,
        class_a: a.class_label,
        class_b: b.class_label,
        cross_class: a.class_label != b.class_label,
        distance_now,
        t_star,
        d_min,
        braking_distance: braking,
        probability,
        alert,
    })
}

/// Assess every unordered pair of the given tracks. Pairs that cannot be
/// assessed (warm-up, outside region) are skipped and counted. Results are
/// ordered by (track_a, track_b) regardless of parallelism.
pub fn assess_all_pairs(
    tracks: &[&Track],
    gf: &GeoFrame,
    local: &LocalFrame,
    ctx: &FrictionContext,
    policy: &VruPolicy,
    params: &RiskParams,
) -> (Vec<PairAssessment>, usize) {
    #[cfg(feature = "parallel")]
    {
        assess_all_pairs_par(tracks, gf, local, ctx, policy, params)
    }
    #[cfg(not(feature = "parallel"))]
    {
        assess_all_pairs_seq(tracks, gf, local, ctx, policy, params)
    }
}

/// Sequential all-pairs assessment; always compiled so benches can compare
/// it against the rayon path.
pub fn assess_all_pairs_seq(
    tracks: &[&Track],
    gf: &GeoFrame,
    local: &LocalFrame,
    ctx: &FrictionContext,
    policy: &VruPolicy,
    params: &RiskParams,
) -> (Vec<PairAssessment>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for i in 0..tracks.len() {
        for j in (i + 1)..tracks.len() {
            match assess_pair(tracks[i], tracks[j], gf, local, ctx, policy, params) {
                Ok(a) => out.push(a),
                Err(_) => skipped += 1,
            }
        }
    }
    out.sort_by_key(|a| (a.track_a, a.track_b));
    (out, skipped)
}

/// Rayon all-pairs assessment. Pair evaluation is pure, so the split is
/// free; output order is restored by the same (track_a, track_b) sort.
#[cfg(feature = "parallel")]
pub fn assess_all_pairs_par(
    tracks: &[&Track],
    gf: &GeoFrame,
    local: &LocalFrame,
    ctx: &FrictionContext,
    policy: &VruPolicy,
    params: &RiskParams,
) -> (Vec<PairAssessment>, usize) {
    use rayon::prelude::*;

    let n = tracks.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<PairAssessment, RiskError>> = pairs
        .par_iter()
        .map(|&(i, j)| assess_pair(tracks[i], tracks[j], gf, local, ctx, policy, params))
        .collect();
    let mut out = Vec::with_capacity(results.len());
    let mut skipped = 0usize;
    for r in results {
        match r {
            Ok(a) => out.push(a),
            Err(_) => skipped += 1,
        }
    }
    out.sort_by_key(|a| (a.track_a, a.track_b));
    (out, skipped)
}

/// Renderer-agnostic display channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Red,
    Blue,
    Green,
}

/// Display metadata for a pair connection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDisplay {
    pub track_a: u64,
    pub track_b: u64,
    pub channel: Channel,
    pub intensity: f64,
}

/// Display metadata for a per-object speed label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedLabel {
    pub track_id: u64,
    pub channel: Channel,
    pub label: String,
}

/// Map assessments and object speeds to display channels: cross-class
/// connections are red with intensity equal to the collision probability,
/// same-class connections blue, speed labels green.
pub fn annotate(
    assessments: &[PairAssessment],
    object_speeds: &[(u64, f64)],
) -> (Vec<PairDisplay>, Vec<SpeedLabel>) {
    let pairs = assessments
        .iter()
        .map(|a| PairDisplay {
            track_a: a.track_a,
            track_b: a.track_b,
            channel: if a.cross_class {
                Channel::Red
            } else {
                Channel::Blue
            },
            intensity: if a.cross_class { a.probability } else { 0.0 },
        })
        .collect();
    let labels = object_speeds
        .iter()
        .map(|&(id, speed)| SpeedLabel {
            track_id: id,
            channel: Channel::Green,
            label: format!("{speed:.1} m/s"),
        })
        .collect();
    (pairs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{solve_geoframe, BoundingBox, GeoPoint, PixelPoint};
    use crate::rng::Rng64;
    use crate::track::TrackStore;

    #[test]
    fn braking_distance_zero_velocity() {
        let ctx = FrictionContext::dry_default();
        assert_eq!(braking_distance(0.0, &ctx).unwrap(), 0.0);
    }

    #[test]
    fn braking_distance_matches_direct_evaluation() {
        let ctx = FrictionContext::dry_default();
        let d10 = braking_distance(10.0, &ctx).unwrap();
        assert!((d10 - 8.5034).abs() < 1e-4, "{d10}");
        let d50kmh = braking_distance(13.89, &ctx).unwrap();
        assert!((d50kmh - 16.406).abs() < 1e-3, "{d50kmh}");
    }

    #[test]
    fn braking_distance_rejects_negative_speed() {
        let ctx = FrictionContext::dry_default();
        assert!(matches!(
            braking_distance(-1.0, &ctx),
            Err(RiskError::NegativeSpeed(_))
        ));
    }

    #[test]
    fn braking_distance_quadratic_scaling_is_exact() {
        let ctx = FrictionContext::dry_default();
        for v in [0.5, 1.0, 3.0, 8.0, 13.89, 30.0] {
            let d = braking_distance(v, &ctx).unwrap();
            let d2 = braking_distance(2.0 * v, &ctx).unwrap();
            assert_eq!(d2, 4.0 * d, "d(2v) != 4 d(v) at v={v}");
        }
    }

    #[test]
    fn friction_context_bounds() {
        assert!(FrictionContext::new(0.6, 9.8).is_ok());
        assert!(FrictionContext::new(0.0, 9.8).is_err());
        assert!(FrictionContext::new(1.6, 9.8).is_err());
        assert!(FrictionContext::new(0.6, 9.0).is_err());
    }

    #[test]
    fn cpa_head_on() {
        let (t, d) = closest_approach([20.0, 0.0], [-10.0, 0.0], 5.0);
        assert!((t - 2.0).abs() < 1e-12);
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn cpa_orthogonal_diverging() {
        let (t, d) = closest_approach([0.0, 10.0], [5.0, 0.0], 5.0);
        assert_eq!(t, 0.0);
        assert!((d - 10.0).abs() < 1e-12);
    }

    #[test]
    fn cpa_static_pair() {
        let (t, d) = closest_approach([3.0, 4.0], [0.0, 0.0], 5.0);
        assert_eq!(t, 0.0);
        assert!((d - 5.0).abs() < 1e-12);
    }

    /// Brute-force oracle: step the relative state at 1 ms and keep the
    /// minimum separation.
    fn cpa_brute(p: [f64; 2], v: [f64; 2], horizon: f64) -> (f64, f64) {
        let dt = 1e-3;
        let steps = (horizon / dt).round() as usize;
        let mut best_t = 0.0;
        let mut best_d = f64::INFINITY;
        for k in 0..=steps {
            let tau = k as f64 * dt;
            let d = (p[0] + tau * v[0]).hypot(p[1] + tau * v[1]);
            if d < best_d {
                best_d = d;
                best_t = tau;
            }
        }
        (best_t, best_d)
    }

    #[test]
    fn cpa_matches_brute_force_oracle() {
        let mut rng = Rng64::new(17);
        // At 1 ms grid resolution the brute-force minimum is within
        // |v| * dt / 2 of the continuous one; |v| <= 1.8 keeps that bound
        // inside the 1e-3 tolerance.
        for _ in 0..1000 {
            let p = [rng.next_range(-30.0, 30.0), rng.next_range(-30.0, 30.0)];
            let ang = rng.next_range(0.0, std::f64::consts::TAU);
            let speed = rng.next_range(0.0, 1.8);
            let v = [speed * ang.cos(), speed * ang.sin()];
            let (t_closed, d_closed) = closest_approach(p, v, 5.0);
            let (t_brute, d_brute) = cpa_brute(p, v, 5.0);
            assert!(
                (t_closed - t_brute).abs() <= 1e-3,
                "t: {t_closed} vs {t_brute} (p {p:?}, v {v:?})"
            );
            assert!(
                (d_closed - d_brute).abs() <= 1e-3,
                "d: {d_closed} vs {d_brute} (p {p:?}, v {v:?})"
            );
        }
        // Faster pairs: same oracle, grid-resolution tolerance.
        for _ in 0..200 {
            let p = [rng.next_range(-100.0, 100.0), rng.next_range(-100.0, 100.0)];
            let ang = rng.next_range(0.0, std::f64::consts::TAU);
            let speed = rng.next_range(0.0, 30.0);
            let v = [speed * ang.cos(), speed * ang.sin()];
            let (t_closed, d_closed) = closest_approach(p, v, 5.0);
            let (t_brute, d_brute) = cpa_brute(p, v, 5.0);
            let tol = speed * 1e-3 / 2.0 + 1e-9;
            assert!((t_closed - t_brute).abs() <= 1e-3 + 1e-9);
            assert!(
                (d_closed - d_brute).abs() <= tol,
                "d: {d_closed} vs {d_brute}"
            );
        }
    }

    #[test]
    fn dimensional_consistency_under_speed_scaling() {
        let ctx = FrictionContext::dry_default();
        let mut rng = Rng64::new(31);
        for _ in 0..200 {
            let v = rng.next_range(0.1, 20.0);
            let k = rng.next_range(1.1, 4.0);
            let d = braking_distance(v, &ctx).unwrap();
            let dk = braking_distance(k * v, &ctx).unwrap();
            assert!((dk - k * k * d).abs() <= 1e-9 * dk.max(1.0));

            let p = [rng.next_range(5.0, 50.0), rng.next_range(-20.0, 20.0)];
            let vel = [-v, rng.next_range(-0.5, 0.5)];
            let (t1, _) = closest_approach(p, vel, 1e6);
            let (tk, _) = closest_approach(p, [k * vel[0], k * vel[1]], 1e6);
            if t1 > 0.0 && t1 < 1e6 {
                assert!((tk - t1 / k).abs() <= 1e-9 * t1, "t scaling violated");
            }
        }
    }

    // -- pair assessment on synthetic tracks --------------------------------

    fn test_frame() -> (GeoFrame, LocalFrame) {
        let gf = solve_geoframe([
            (PixelPoint::new(0.0, 0.0), GeoPoint::new(40.0, -8.0)),
            (PixelPoint::new(1000.0, 0.0), GeoPoint::new(40.0, -7.999)),
            (
                PixelPoint::new(1000.0, 1000.0),
                GeoPoint::new(40.001, -7.999),
            ),
            (PixelPoint::new(0.0, 1000.0), GeoPoint::new(40.001, -8.0)),
        ])
        .unwrap();
        let local = LocalFrame::new(gf.centroid_geo());
        (gf, local)
    }

    /// Drive a track along a straight ENU path at constant velocity until
    /// its EMA has converged.
    fn make_track(
        store: &mut TrackStore,
        class: ClassLabel,
        local: &LocalFrame,
        gf: &GeoFrame,
        start_enu: [f64; 2],
        vel: [f64; 2],
        frames: usize,
    ) -> u64 {
        let id = store.spawn(class, BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        let dt = 0.1;
        for k in 0..frames {
            let t = k as f64 * dt;
            let e = start_enu[0] + vel[0] * t;
            let n = start_enu[1] + vel[1] * t;
            let geo = local.from_enu(e, n);
            let pixel = gf.geo_to_pixel(geo).unwrap();
            store
                .get_mut(id)
                .unwrap()
                .update_kinematics(t, geo, pixel, local)
                .unwrap();
        }
        id
    }

    #[test]
    fn car_bearing_down_on_pedestrian_alerts() {
        let (gf, local) = test_frame();
        // LocalFrame origin is the quad centroid; ENU coordinates within
        // roughly +-40 m stay inside the validity region.
        let mut store = TrackStore::new();
        let ped = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [0.0, 10.0],
            [0.0, 0.0],
            30,
        );
        // Car ends 5 m south of the pedestrian, closing at 10 m/s.
        let car = make_track(
            &mut store,
            ClassLabel::Car,
            &local,
            &gf,
            [0.0, -24.0],
            [0.0, 10.0],
            30,
        );
        let a = store.tracks().iter().find(|t| t.id == ped).unwrap();
        let b = store.tracks().iter().find(|t| t.id == car).unwrap();
        let out = assess_pair(
            a,
            b,
            &gf,
            &local,
            &FrictionContext::dry_default(),
            &VruPolicy::default(),
            &RiskParams::default(),
        )
        .unwrap();
        assert!(
            (out.distance_now - 5.0).abs() < 0.05,
            "{}",
            out.distance_now
        );
        assert!(out.braking_distance > 5.0);
        assert!(out.d_min < 0.1, "d_min {}", out.d_min);
        assert!((out.probability - 1.0).abs() < 1e-6, "{}", out.probability);
        assert!(out.alert);
        assert!(out.cross_class);
    }

    #[test]
    fn vru_pair_has_zero_probability() {
        let (gf, local) = test_frame();
        let mut store = TrackStore::new();
        let p1 = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [0.0, 0.0],
            [1.0, 0.0],
            10,
        );
        let p2 = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [2.0, 0.0],
            [-1.0, 0.0],
            10,
        );
        let a = store.tracks().iter().find(|t| t.id == p1).unwrap();
        let b = store.tracks().iter().find(|t| t.id == p2).unwrap();
        let out = assess_pair(
            a,
            b,
            &gf,
            &local,
            &FrictionContext::dry_default(),
            &VruPolicy::default(),
            &RiskParams::default(),
        )
        .unwrap();
        assert_eq!(out.probability, 0.0);
        assert_eq!(out.braking_distance, 0.0);
        assert!(!out.alert);
    }

    #[test]
    fn separation_beyond_margin_zeroes_probability() {
        let (gf, local) = test_frame();
        let mut store = TrackStore::new();
        let ped = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [-20.0, 30.0],
            [0.0, 0.0],
            10,
        );
        // Parallel non-crossing path 40+ m away.
        let car = make_track(
            &mut store,
            ClassLabel::Car,
            &local,
            &gf,
            [20.0, -30.0],
            [0.0, 10.0],
            10,
        );
        let a = store.tracks().iter().find(|t| t.id == ped).unwrap();
        let b = store.tracks().iter().find(|t| t.id == car).unwrap();
        let out = assess_pair(
            a,
            b,
            &gf,
            &local,
            &FrictionContext::dry_default(),
            &VruPolicy::default(),
            &RiskParams::default(),
        )
        .unwrap();
        assert!(out.d_min > RiskParams::default().margin_m);
        assert_eq!(out.probability, 0.0);
        assert!(!out.alert);
    }

    #[test]
    fn assessment_is_symmetric_in_pair_order() {
        let (gf, local) = test_frame();
        let mut store = TrackStore::new();
        let ped = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [3.0, 8.0],
            [0.3, 0.0],
            12,
        );
        let car = make_track(
            &mut store,
            ClassLabel::Car,
            &local,
            &gf,
            [0.0, -20.0],
            [0.5, 8.0],
            12,
        );
        let a = store.tracks().iter().find(|t| t.id == ped).unwrap();
        let b = store.tracks().iter().find(|t| t.id == car).unwrap();
        let args = (
            &gf,
            &local,
            FrictionContext::dry_default(),
            VruPolicy::default(),
            RiskParams::default(),
        );
        let ab = assess_pair(a, b, args.0, args.1, &args.2, &args.3, &args.4).unwrap();
        let ba = assess_pair(b, a, args.0, args.1, &args.2, &args.3, &args.4).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn probability_stays_in_unit_interval() {
        let (gf, local) = test_frame();
        let mut rng = Rng64::new(55);
        for _ in 0..200 {
            let mut store = TrackStore::new();
            let c1 = if rng.next_f64() < 0.5 {
                ClassLabel::Car
            } else {
                ClassLabel::Person
            };
            let c2 = if rng.next_f64() < 0.5 {
                ClassLabel::Truck
            } else {
                ClassLabel::Bicycle
            };
            let t1 = make_track(
                &mut store,
                c1,
                &local,
                &gf,
                [rng.next_range(-30.0, 30.0), rng.next_range(-30.0, 30.0)],
                [rng.next_range(-12.0, 12.0), rng.next_range(-12.0, 12.0)],
                8,
            );
            let t2 = make_track(
                &mut store,
                c2,
                &local,
                &gf,
                [rng.next_range(-30.0, 30.0), rng.next_range(-30.0, 30.0)],
                [rng.next_range(-12.0, 12.0), rng.next_range(-12.0, 12.0)],
                8,
            );
            let a = store.tracks().iter().find(|t| t.id == t1).unwrap();
            let b = store.tracks().iter().find(|t| t.id == t2).unwrap();
            if let Ok(out) = assess_pair(
                a,
                b,
                &gf,
                &local,
                &FrictionContext::dry_default(),
                &VruPolicy::default(),
                &RiskParams::default(),
            ) {
                assert!(
                    (0.0..=1.0).contains(&out.probability),
                    "{}",
                    out.probability
                );
                if out.d_min >= RiskParams::default().margin_m {
                    assert_eq!(out.probability, 0.0);
                }
                if out.alert {
                    assert!(out.probability >= RiskParams::default().alert_threshold);
                }
            }
        }
    }

    #[test]
    fn insufficient_history_is_skipped() {
        let (gf, local) = test_frame();
        let mut store = TrackStore::new();
        let fresh = store.spawn(
            ClassLabel::Car,
            BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        );
        let warm = make_track(
            &mut store,
            ClassLabel::Person,
            &local,
            &gf,
            [0.0, 0.0],
            [0.0, 0.0],
            5,
        );
        let a = store.tracks().iter().find(|t| t.id == fresh).unwrap();
        let b = store.tracks().iter().find(|t| t.id == warm).unwrap();
        let err = assess_pair(
            a,
            b,
            &gf,
            &local,
            &FrictionContext::dry_default(),
            &VruPolicy::default(),
            &RiskParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, RiskError::InsufficientHistory { .. }));
    }

    #[test]
    fn all_pairs_seq_ordering_is_canonical() {
        let (gf, local) = test_frame();
        let mut store = TrackStore::new();
        for i in 0..5 {
            make_track(
                &mut store,
                ClassLabel::Car,
                &local,
                &gf,
                [i as f64 * 5.0 - 10.0, 0.0],
                [0.0, 2.0],
                6,
            );
        }
        let tracks: Vec<&Track> = store.tracks().iter().collect();
        let (seq, skipped) = assess_all_pairs_seq(
            &tracks,
            &gf,
            &local,
            &FrictionContext::dry_default(),
            &VruPolicy::default(),
            &RiskParams::default(),
        );
        assert_eq!(skipped, 0);
        assert_eq!(seq.len(), 10);
        for w in seq.windows(2) {
            assert!((w[0].track_a, w[0].track_b) < (w[1].track_a, w[1].track_b));
        }
        #[cfg(feature = "parallel")]
        {
            let (par, skipped_par) = assess_all_pairs_par(
                &tracks,
                &gf,
                &local,
                &FrictionContext::dry_default(),
                &VruPolicy::default(),
                &RiskParams::default(),
            );
            assert_eq!(skipped_par, 0);
            assert_eq!(seq, par, "parallel and sequential paths must agree");
        }
    }

    #[test]
    fn annotate_maps_channels() {
        let cross = PairAssessment {
            track_a: 1,
            track_b: 2,
            class_a: ClassLabel::Person,
            class_b: ClassLabel::Car,
            cross_class: true,
            distance_now: 5.0,
            t_star: 0.5,
            d_min: 0.0,
            braking_distance: 8.5,
            probability: 0.9,
            alert: true,
        };
        let same = PairAssessment {
            cross_class: false,
            class_b: ClassLabel::Person,
            track_b: 3,
            probability: 0.0,
            ..cross
        };
        let (pairs, labels) = annotate(&[cross, same], &[(1, 3.2)]);
        assert_eq!(pairs[0].channel, Channel::Red);
        assert!((pairs[0].intensity - 0.9).abs() < 1e-12);
        assert_eq!(pairs[1].channel, Channel::Blue);
        assert_eq!(pairs[1].intensity, 0.0);
        assert_eq!(labels[0].channel, Channel::Green);
        assert_eq!(labels[0].label, "3.2 m/s");
    }
}
