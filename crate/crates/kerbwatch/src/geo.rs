//! Planar geometry for single-camera georeferencing.
//!
//! Everything the pipeline needs to go from a detection anchor in pixel
//! space to a WGS84 coordinate: Brown-Conrady distortion compensation of
//! detection points, a four-point homography solve (geo-framing), the
//! pixel→geographic projection restricted to the calibrated region, and
//! haversine distance on a spherical Earth.
//!
//! All types are immutable after construction and all operations are pure.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters for the spherical distance model.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Maximum fixed-point iterations when inverting the distortion model.
pub const UNDISTORT_MAX_ITERS: usize = 20;

/// Convergence tolerance for the distortion inversion, in normalized
/// image-plane units.
pub const UNDISTORT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error(
        "distortion correction did not converge after {iters} iterations (last iterate {last:?})"
    )]
    CorrectionFailed { iters: usize, last: PixelPoint },
    #[error("degenerate calibration: points {a}, {b}, {c} are collinear")]
    DegenerateConfiguration { a: usize, b: usize, c: usize },
    #[error("homography system is numerically singular")]
    SingularSystem,
    #[error("homography does not reproduce its correspondences (max residual {residual_deg} deg)")]
    InterpolationResidual { residual_deg: f64 },
    #[error("projection hit the horizon singularity (|w| < 1e-12)")]
    HorizonSingularity,
    #[error("bounding box invariant violated: ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBoundingBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("invalid distortion model: {0}")]
    InvalidDistortion(String),
    #[error("invalid geographic point: lat {lat}, lon {lon}")]
    InvalidGeoPoint { lat: f64, lon: f64 },
    #[error("point is not finite")]
    NonFinitePoint,
}

/// A position in the image frame, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.lat.is_finite()
            || !self.lon.is_finite()
            || !(-90.0..=90.0).contains(&self.lat)
            || !(-180.0..=180.0).contains(&self.lon)
        {
            return Err(GeoError::InvalidGeoPoint {
                lat: self.lat,
                lon: self.lon,
            });
        }
        Ok(())
    }
}

/// Brown-Conrady lens model: pinhole intrinsics plus radial (k1..k3) and
/// tangential (p1, p2) coefficients, as produced by camera calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
}

impl DistortionModel {
    /// A model with zero distortion coefficients; undistortion is the
    /// identity under it.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        DistortionModel {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            k3: 0.0,
            p1: 0.0,
            p2: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !self.fx.is_finite() || !self.fy.is_finite() || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeoError::InvalidDistortion(format!(
                "focal lengths must be positive (fx {}, fy {})",
                self.fx, self.fy
            )));
        }
        for (name, v) in [
            ("fx", self.fx),
            ("fy", self.fy),
            ("cx", self.cx),
            ("cy", self.cy),
            ("k1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("p1", self.p1),
            ("p2", self.p2),
        ] {
            if !v.is_finite() {
                return Err(GeoError::InvalidDistortion(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn is_distortion_free(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.k3 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    fn normalize(&self, p: PixelPoint) -> (f64, f64) {
        ((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy)
    }

    fn denormalize(&self, x: f64, y: f64) -> PixelPoint {
        PixelPoint::new(self.fx * x + self.cx, self.fy * y + self.cy)
    }

    /// Forward model terms at an ideal normalized point: radial scale and
    /// tangential offsets.
    fn forward_terms(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2;
        let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        (radial, dx, dy)
    }
}

/// Apply the forward Brown-Conrady model: ideal pixel position -> where the
/// lens actually images it.
pub fn distort_point(p: PixelPoint, m: &DistortionModel) -> PixelPoint {
    if m.is_distortion_free() {
        return p;
    }
    let (x, y) = m.normalize(p);
    let (radial, dx, dy) = m.forward_terms(x, y);
    m.denormalize(x * radial + dx, y * radial + dy)
}

/// Invert the Brown-Conrady model at a single observed point: returns the
/// ideal (distortion-free) pixel position.
///
/// Fixed-point iteration in normalized coordinates, at most
/// [`UNDISTORT_MAX_ITERS`] steps with tolerance [`UNDISTORT_TOL`]. With all
/// coefficients zero the input is returned exactly.
pub fn undistort_point(p: PixelPoint, m: &DistortionModel) -> Result<PixelPoint, GeoError> {
    if !p.is_finite() {
        return Err(GeoError::NonFinitePoint);
    }
    m.validate()?;
    if m.is_distortion_free() {
        return Ok(p);
    }

    let (xd, yd) = m.normalize(p);
    let (mut x, mut y) = (xd, yd);
    for _ in 0..UNDISTORT_MAX_ITERS {
        let (radial, dx, dy) = m.forward_terms(x, y);
        if radial.abs() < 1e-12 || !radial.is_finite() {
            break;
        }
        let x_next = (xd - dx) / radial;
        let y_next = (yd - dy) / radial;
        let step = (x_next - x).abs().max((y_next - y).abs());
        x = x_next;
        y = y_next;
        if step < UNDISTORT_TOL {
            return Ok(m.denormalize(x, y));
        }
    }
    Err(GeoError::CorrectionFailed {
        iters: UNDISTORT_MAX_ITERS,
        last: m.denormalize(x, y),
    })
}

/// Axis-aligned pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeoError> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let finite = self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite();
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(GeoError::InvalidBoundingBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// The bbox point assumed to touch the road plane: bottom-center. This is
/// the point that gets georeferenced.
pub fn ground_anchor(b: &BoundingBox) -> PixelPoint {
    PixelPoint::new((b.x_min + b.x_max) / 2.0, b.y_max)
}

/// Result of projecting a pixel through a [`GeoFrame`]: either a coordinate
/// or the signal that the pixel lies outside the calibrated region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Inside(GeoPoint),
    OutsideRegion,
}

impl Projection {
    pub fn inside(&self) -> Option<GeoPoint> {
        match self {
            Projection::Inside(g) => Some(*g),
            Projection::OutsideRegion => None,
        }
    }
}

/// Pixel→WGS84 homography built from four ground correspondences, together
/// with its validity region (the convex quadrilateral of the four pixel
/// points). Distances are only meaningful inside that region.
#[derive(Debug, Clone)]
pub struct GeoFrame {
    h: Matrix3<f64>,
    h_inv: Matrix3<f64>,
    correspondences: [(PixelPoint, GeoPoint); 4],
    // Validity quad corners in counterclockwise order.
    quad: [PixelPoint; 4],
}

/// Tolerance used when verifying that the solved homography reproduces its
/// own correspondences, in degrees.
pub const GEOFRAME_RESIDUAL_TOL_DEG: f64 = 1e-9;

/// Solve the pixel→geo homography from exactly four point correspondences
/// via the normalized DLT.
///
/// No three of the four pixel points may be collinear. The returned matrix
/// is scaled so `H[2][2] = 1` and is checked to reproduce every
/// correspondence within [`GEOFRAME_RESIDUAL_TOL_DEG`].
pub fn solve_geoframe(correspondences: [(PixelPoint, GeoPoint); 4]) -> Result<GeoFrame, GeoError> {
    for (px, geo) in &correspondences {
        if !px.is_finite() {
            return Err(GeoError::NonFinitePoint);
        }
        geo.validate()?;
    }
    check_no_collinear_triple(&correspondences)?;

    let pixels: Vec<(f64, f64)> = correspondences.iter().map(|(p, _)| (p.u, p.v)).collect();
    let geos: Vec<(f64, f64)> = correspondences
        .iter()
        .map(|(_, g)| (g.lat, g.lon))
        .collect();

    let (t_px, t_px_inv) = hartley_normalization(&pixels).ok_or(GeoError::SingularSystem)?;
    let (t_geo, t_geo_inv) = hartley_normalization(&geos).ok_or(GeoError::SingularSystem)?;

    // 8x9 DLT system over the normalized coordinates. Rows per pair map
    // homogeneous [u, v, 1] to [lat, lon, w].
    let mut a = SMatrix::<f64, 8, 9>::zeros();
    for (i, ((pu, pv), (gl, gn))) in pixels.iter().zip(geos.iter()).enumerate() {
        let p = t_px * Vector3::new(*pu, *pv, 1.0);
        let g = t_geo * Vector3::new(*gl, *gn, 1.0);
        let (u, v) = (p.x / p.z, p.y / p.z);
        let (x, y) = (g.x / g.z, g.y / g.z);
        let r0 = 2 * i;
        let r1 = 2 * i + 1;
        a[(r0, 0)] = -u;
        a[(r0, 1)] = -v;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = x * u;
        a[(r0, 7)] = x * v;
        a[(r0, 8)] = x;
        a[(r1, 3)] = -u;
        a[(r1, 4)] = -v;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = y * u;
        a[(r1, 7)] = y * v;
        a[(r1, 8)] = y;
    }

    // Null vector of A = eigenvector of A^T A with the smallest eigenvalue.
    let ata = a.transpose() * a;
    let eig = ata.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let hv = eig.eigenvectors.column(min_idx);
    let h_norm = Matrix3::new(
        hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8],
    );

    // Invertibility is judged in the normalized (unit-scale) frame, where
    // the eigenvector matrix has unit Frobenius norm; in raw units the
    // determinant carries the deg-per-pixel scale cubed and says nothing
    // about conditioning.
    if h_norm.determinant().abs() <= 1e-12 {
        return Err(GeoError::SingularSystem);
    }

    // Undo the normalization and fix the scale. The inverse is composed in
    // the conditioned frame too: inverting the raw-unit H directly would
    // lose several digits to its degree-per-pixel scale spread.
    let h_norm_inv = h_norm.try_inverse().ok_or(GeoError::SingularSystem)?;
    let mut h = t_geo_inv * h_norm * t_px;
    let scale = h[(2, 2)];
    if scale.abs() < 1e-15 || !scale.is_finite() {
        return Err(GeoError::SingularSystem);
    }
    h /= scale;
    let mut h_inv = t_px_inv * h_norm_inv * t_geo;
    let inv_scale = h_inv[(2, 2)];
    if inv_scale.is_finite() && inv_scale.abs() > 1e-15 {
        h_inv /= inv_scale;
    }

    // The four calibration points must reproduce exactly (to tolerance).
    let mut max_residual = 0.0f64;
    for (px, geo) in &correspondences {
        let (lat, lon) = apply_homography(&h, px.u, px.v)?;
        max_residual = max_residual
            .max((lat - geo.lat).abs())
            .max((lon - geo.lon).abs());
    }
    if max_residual > GEOFRAME_RESIDUAL_TOL_DEG {
        return Err(GeoError::InterpolationResidual {
            residual_deg: max_residual,
        });
    }

    let quad = convex_quad_order([
        correspondences[0].0,
        correspondences[1].0,
        correspondences[2].0,
        correspondences[3].0,
    ]);

    Ok(GeoFrame {
        h,
        h_inv,
        correspondences,
        quad,
    })
}

impl GeoFrame {
    /// Project a pixel to WGS84, or report that it lies outside the
    /// calibrated quadrilateral.
    pub fn pixel_to_geo(&self, p: PixelPoint) -> Result<Projection, GeoError> {
        if !p.is_finite() {
            return Err(GeoError::NonFinitePoint);
        }
        if !self.contains(p) {
            return Ok(Projection::OutsideRegion);
        }
        let (lat, lon) = apply_homography(&self.h, p.u, p.v)?;
        Ok(Projection::Inside(GeoPoint::new(lat, lon)))
    }

    /// Inverse projection, used by the simulator to place actors in the
    /// frame. Not restricted to the validity region.
    pub fn geo_to_pixel(&self, g: GeoPoint) -> Result<PixelPoint, GeoError> {
        let (u, v) = apply_homography(&self.h_inv, g.lat, g.lon)?;
        Ok(PixelPoint::new(u, v))
    }

    /// Boundary-inclusive point-in-convex-quad test.
    pub fn contains(&self, p: PixelPoint) -> bool {
        let scale = self.quad_scale();
        let eps = 1e-9 * scale * scale;
        for i in 0..4 {
            let a = self.quad[i];
            let b = self.quad[(i + 1) % 4];
            let cross = (b.u - a.u) * (p.v - a.v) - (b.v - a.v) * (p.u - a.u);
            if cross < -eps {
                return false;
            }
        }
        true
    }

    pub fn homography(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn correspondences(&self) -> &[(PixelPoint, GeoPoint); 4] {
        &self.correspondences
    }

    pub fn validity_quad(&self) -> &[PixelPoint; 4] {
        &self.quad
    }

    /// Mean of the four geographic corners; reference point for the local
    /// tangent plane.
    pub fn centroid_geo(&self) -> GeoPoint {
        let lat = self.correspondences.iter().map(|(_, g)| g.lat).sum::<f64>() / 4.0;
        let lon = self.correspondences.iter().map(|(_, g)| g.lon).sum::<f64>() / 4.0;
        GeoPoint::new(lat, lon)
    }

    fn quad_scale(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..4 {
            for j in (i + 1)..4 {
                let du = self.quad[i].u - self.quad[j].u;
                let dv = self.quad[i].v - self.quad[j].v;
                m = m.max(du.hypot(dv));
            }
        }
        m
    }
}

fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> Result<(f64, f64), GeoError> {
    let out = h * Vector3::new(x, y, 1.0);
    if out.z.abs() < 1e-12 {
        return Err(GeoError::HorizonSingularity);
    }
    Ok((out.x / out.z, out.y / out.z))
}

fn check_no_collinear_triple(
    correspondences: &[(PixelPoint, GeoPoint); 4],
) -> Result<(), GeoError> {
    // Scale-relative tolerance: an exactly collinear integer triple must
    // fail, slightly perturbed real calibrations must not.
    let pts: Vec<PixelPoint> = correspondences.iter().map(|(p, _)| *p).collect();
    let mut scale = 0.0f64;
    for i in 0..4 {
        for j in (i + 1)..4 {
            scale = scale.max((pts[i].u - pts[j].u).hypot(pts[i].v - pts[j].v));
        }
    }
    let eps = 1e-9 * scale * scale;
    for a in 0..4 {
        for b in (a + 1)..4 {
            for c in (b + 1)..4 {
                let cross = (pts[b].u - pts[a].u) * (pts[c].v - pts[a].v)
                    - (pts[b].v - pts[a].v) * (pts[c].u - pts[a].u);
                if cross.abs() <= eps {
                    return Err(GeoError::DegenerateConfiguration { a, b, c });
                }
            }
        }
    }
    Ok(())
}

/// Hartley normalization: translate the centroid to the origin and scale so
/// the mean distance from it is sqrt(2). Returns the transform and its
/// analytically-built inverse, or `None` for coincident point sets.
fn hartley_normalization(points: &[(f64, f64)]) -> Option<(Matrix3<f64>, Matrix3<f64>)> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| (p.0 - cx).hypot(p.1 - cy))
        .sum::<f64>()
        / n;
    if mean_dist < 1e-15 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let t_inv = Matrix3::new(1.0 / s, 0.0, cx, 0.0, 1.0 / s, cy, 0.0, 0.0, 1.0);
    Some((t, t_inv))
}

/// Order four points counterclockwise around their centroid.
fn convex_quad_order(pts: [PixelPoint; 4]) -> [PixelPoint; 4] {
    let cx = pts.iter().map(|p| p.u).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.v).sum::<f64>() / 4.0;
    let mut ordered = pts;
    ordered.sort_by(|a, b| {
        let aa = (a.v - cy).atan2(a.u - cx);
        let ab = (b.v - cy).atan2(b.u - cx);
        aa.partial_cmp(&ab).unwrap_or(std::cmp::Ordering::Equal)
    });
    // Ensure counterclockwise orientation (positive signed area).
    let mut area = 0.0;
    for i in 0..4 {
        let a = ordered[i];
        let b = ordered[(i + 1) % 4];
        area += a.u * b.v - b.u * a.v;
    }
    if area < 0.0 {
        ordered.reverse();
    }
    ordered
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let s = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * s.sqrt().min(1.0).asin()
}

/// Equirectangular tangent plane anchored at a reference point. Velocity
/// vectors need a plane; at sub-kilometer scene extents the approximation
/// error is far below the pixel noise floor. Haversine stays the distance
/// authority.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    lat0_rad: f64,
    lon0_rad: f64,
    cos_lat0: f64,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        let lat0_rad = origin.lat.to_radians();
        LocalFrame {
            lat0_rad,
            lon0_rad: origin.lon.to_radians(),
            cos_lat0: lat0_rad.cos(),
        }
    }

    /// (east, north) offset in meters from the frame origin.
    pub fn to_enu(&self, g: GeoPoint) -> [f64; 2] {
        let east = EARTH_RADIUS_M * self.cos_lat0 * (g.lon.to_radians() - self.lon0_rad);
        let north = EARTH_RADIUS_M * (g.lat.to_radians() - self.lat0_rad);
        [east, north]
    }

    pub fn from_enu(&self, east: f64, north: f64) -> GeoPoint {
        let lat = (self.lat0_rad + north / EARTH_RADIUS_M).to_degrees();
        let lon = (self.lon0_rad + east / (EARTH_RADIUS_M * self.cos_lat0)).to_degrees();
        GeoPoint::new(lat, lon)
    }
}
