//! Sphere and ray math for the environment sphere, plus the map projections
//! used by the heatmap.
//!
//! Axis convention, used everywhere in this crate: `y` is up, `z` is forward
//! (the viewer's initial look direction) and `x` is right.
//!
//! - longitude `lon = atan2(x, z)` in `(-π, π]`
//! - latitude `lat = asin(y / |p|)` in `[-π/2, π/2]`
//!
//! Equirectangular pixels follow `col = floor((lon + π) / 2π · W)` and
//! `row = floor((π/2 - lat) / π · H)`, clamped to the grid.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default environment-sphere radius in scene units.
pub const DEFAULT_RADIUS: f64 = 102.73;

/// Default Mercator latitude clamp (85°).
pub const DEFAULT_LAT_CLAMP: f64 = 85.0 * PI / 180.0;

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("zero-length vector")]
    ZeroVector,
    #[error("non-finite component in {0}")]
    NonFinite(Vec3),
    #[error("direction is not unit length (|d| = {0})")]
    NotUnit(f64),
    #[error("origin {origin} is not strictly inside the sphere of radius {radius}")]
    OriginOutside { origin: Vec3, radius: f64 },
    #[error("sphere radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("longitude/latitude out of range: lon {lon}, lat {lat}")]
    OutOfRange { lon: f64, lat: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector in the same direction.
    pub fn normalized(self) -> Result<Vec3, GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::NonFinite(self));
        }
        let n = self.norm();
        if n == 0.0 {
            return Err(GeometryError::ZeroVector);
        }
        Ok(self / n)
    }

    /// Rotation about the vertical (`y`) axis. Positive angles increase longitude.
    pub fn rotate_y(self, angle: f64) -> Vec3 {
        let (s, c) = angle.sin_cos();
        Vec3::new(self.x * c + self.z * s, self.y, -self.x * s + self.z * c)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        [v.x, v.y, v.z]
    }
}

impl fmt::Display for Vec3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A direction on the sphere in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Result<Self, GeometryError> {
        let c = LonLat { lon, lat };
        c.check()?;
        Ok(c)
    }

    /// Builds from degrees, wrapping longitude into `(-π, π]`.
    pub fn from_degrees(lon_deg: f64, lat_deg: f64) -> Result<Self, GeometryError> {
        LonLat::new(wrap_lon(lon_deg.to_radians()), lat_deg.to_radians())
    }

    fn check(&self) -> Result<(), GeometryError> {
        let ok = self.lon.is_finite()
            && self.lat.is_finite()
            && self.lon > -PI
            && self.lon <= PI
            && (-FRAC_PI_2..=FRAC_PI_2).contains(&self.lat);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::OutOfRange {
                lon: self.lon,
                lat: self.lat,
            })
        }
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_lon(lon: f64) -> f64 {
    let mut l = lon.rem_euclid(2.0 * PI);
    if l > PI {
        l -= 2.0 * PI;
    }
    if l <= -PI {
        l += 2.0 * PI;
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereConfig {
    pub radius: f64,
    #[serde(default)]
    pub viewer_origin: Vec3,
}

impl Default for SphereConfig {
    fn default() -> Self {
        SphereConfig {
            radius: DEFAULT_RADIUS,
            viewer_origin: Vec3::ZERO,
        }
    }
}

impl SphereConfig {
    pub fn new(radius: f64, viewer_origin: Vec3) -> Result<Self, GeometryError> {
        let cfg = SphereConfig {
            radius,
            viewer_origin,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_radius(radius: f64) -> Result<Self, GeometryError> {
        SphereConfig::new(radius, Vec3::ZERO)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(GeometryError::BadRadius(self.radius));
        }
        if !self.viewer_origin.is_finite() {
            return Err(GeometryError::NonFinite(self.viewer_origin));
        }
        if self.viewer_origin.norm() >= self.radius {
            return Err(GeometryError::OriginOutside {
                origin: self.viewer_origin,
                radius: self.radius,
            });
        }
        Ok(())
    }
}

/// Forward intersection of a gaze ray with the environment sphere (centred at
/// the world origin).
///
/// Solves `t² + 2t(o·d) + (|o|² − R²) = 0` and takes the positive root. Since the
/// origin is strictly inside, the roots have opposite signs and the larger one
/// is the only forward hit.
pub fn ray_sphere_intersect(
    origin: Vec3,
    direction: Vec3,
    cfg: &SphereConfig,
) -> Result<Vec3, GeometryError> {
    if !origin.is_finite() {
        return Err(GeometryError::NonFinite(origin));
    }
    if !direction.is_finite() {
        return Err(GeometryError::NonFinite(direction));
    }
    let dn = direction.norm();
    if dn == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    if (dn - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeometryError::NotUnit(dn));
    }
    let r = cfg.radius;
    let c = origin.norm_squared() - r * r;
    if c >= 0.0 {
        return Err(GeometryError::OriginOutside { origin, radius: r });
    }
    let b = origin.dot(direction);
    // c < 0 so the discriminant is strictly positive.
    let disc = (b * b - c).sqrt();
    // Avoid cancellation when b > 0: t = -c / (b + disc).
    let t = if b > 0.0 { -c / (b + disc) } else { disc - b };
    Ok(origin + direction * t)
}

/// Longitude/latitude of a point as seen from the sphere centre.
///
/// Latitude is evaluated as `atan2(y, hypot(x, z))`, which equals
/// `asin(y/|p|)` but stays well conditioned near the poles.
pub fn cart_to_lonlat(p: Vec3) -> Result<LonLat, GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite(p));
    }
    if p.norm_squared() == 0.0 {
        return Err(GeometryError::ZeroVector);
    }
    let mut lon = p.x.atan2(p.z);
    if lon <= -PI {
        lon = PI;
    }
    let lat = p.y.atan2(p.x.hypot(p.z));
    Ok(LonLat { lon, lat })
}

/// Point on the sphere of `cfg.radius` at the given direction.
pub fn lonlat_to_cart(c: LonLat, cfg: &SphereConfig) -> Result<Vec3, GeometryError> {
    c.check()?;
    Ok(lonlat_to_unit(c) * cfg.radius)
}

pub(crate) fn lonlat_to_unit(c: LonLat) -> Vec3 {
    let (slat, clat) = c.lat.sin_cos();
    let (slon, clon) = c.lon.sin_cos();
    Vec3::new(clat * slon, slat, clat * clon)
}

/// Mercator coordinates `(u, v)` with `u = lon` and
/// `v = ln(tan(π/4 + lat'/2))`, where `lat'` is the latitude clamped to
/// `±lat_clamp`.
///
/// `v` is computed through the identity `ln(tan(π/4 + φ/2)) = asinh(tan φ)`,
/// which is exactly odd in floating point.
pub fn lonlat_to_mercator(c: LonLat, lat_clamp: f64) -> (f64, f64) {
    (c.lon, mercator_v(c.lat, lat_clamp))
}

pub fn mercator_v(lat: f64, lat_clamp: f64) -> f64 {
    let clamp = lat_clamp.abs().min(FRAC_PI_2);
    lat.clamp(-clamp, clamp).tan().asinh()
}

/// Inverse of [`mercator_v`] (without clamping).
pub fn mercator_lat(v: f64) -> f64 {
    v.sinh().atan()
}

/// Angle between two vectors in `[0, π]`.
///
/// Evaluated as `atan2(|a × b|, a · b)`, the same angle as the clamped
/// `acos` of the normalized dot product but accurate for nearly parallel
/// vectors.
pub fn angular_distance(a: Vec3, b: Vec3) -> Result<f64, GeometryError> {
    let a = a.normalized()?;
    let b = b.normalized()?;
    Ok(unit_angle(a, b))
}

pub(crate) fn unit_angle(a: Vec3, b: Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Equirectangular pixel holding a direction, clamped to the grid.
pub fn equirect_pixel(c: LonLat, width: usize, height: usize) -> (usize, usize) {
    let col = ((c.lon + PI) / (2.0 * PI) * width as f64).floor();
    let row = ((FRAC_PI_2 - c.lat) / PI * height as f64).floor();
    let col = (col.max(0.0) as usize).min(width.saturating_sub(1));
    let row = (row.max(0.0) as usize).min(height.saturating_sub(1));
    (col, row)
}

/// Direction at the centre of an equirectangular pixel.
pub fn equirect_center(col: usize, row: usize, width: usize, height: usize) -> LonLat {
    let lon = (col as f64 + 0.5) / width as f64 * 2.0 * PI - PI;
    let lat = FRAC_PI_2 - (row as f64 + 0.5) / height as f64 * PI;
    LonLat { lon, lat }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn center_rays_exit_at_radius() {
        let cfg = SphereConfig::default();
        let p = ray_sphere_intersect(Vec3::ZERO, Vec3::Z, &cfg).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 102.73));
        let p = ray_sphere_intersect(Vec3::ZERO, Vec3::X, &cfg).unwrap();
        assert_eq!(p, Vec3::new(102.73, 0.0, 0.0));
    }

    #[test]
    fn offset_ray_matches_quadratic_root() {
        // Oracle: larger root of t² + 2t(o·d) + (|o|² − R²) = 0 via the textbook
        // formula, evaluated independently here.
        let r: f64 = 102.731;
        let (a, b, c) = (1.0, 2.0 * 0.0, 100.0 - r * r);
        let t = (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a);
        let cfg = SphereConfig::with_radius(r).unwrap();
        let p = ray_sphere_intersect(Vec3::new(10.0, 0.0, 0.0), Vec3::Z, &cfg).unwrap();
        assert!(close(p.x, 10.0, 1e-12));
        assert!(close(p.z, t, 1e-9));
        assert!(close(p.z, 102.243, 1e-3));
        assert!(close(p.norm(), r, 1e-9));
    }

    #[test]
    fn ray_errors() {
        let cfg = SphereConfig::default();
        assert_eq!(
            ray_sphere_intersect(Vec3::ZERO, Vec3::ZERO, &cfg),
            Err(GeometryError::ZeroVector)
        );
        assert!(matches!(
            ray_sphere_intersect(Vec3::new(200.0, 0.0, 0.0), Vec3::Z, &cfg),
            Err(GeometryError::OriginOutside { .. })
        ));
        assert!(matches!(
            ray_sphere_intersect(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), &cfg),
            Err(GeometryError::NotUnit(_))
        ));
    }

    #[test]
    fn lonlat_examples() {
        let c = cart_to_lonlat(Vec3::new(0.0, 0.0, 102.73)).unwrap();
        assert_eq!((c.lon, c.lat), (0.0, 0.0));
        let c = cart_to_lonlat(Vec3::new(102.73, 0.0, 0.0)).unwrap();
        assert!(close(c.lon, FRAC_PI_2, 1e-15) && c.lat == 0.0);
        // atan2(-35.4, 95.0) = -0.3566926..., asin(-16.6/|p|) = -0.1622982...
        let c = cart_to_lonlat(Vec3::new(-35.4, -16.6, 95.0)).unwrap();
        assert!(close(c.lon, -0.35672, 1e-4));
        assert!(close(c.lat, -0.16230, 1e-4));
        assert_eq!(cart_to_lonlat(Vec3::ZERO), Err(GeometryError::ZeroVector));
    }

    #[test]
    fn back_of_sphere_is_plus_pi() {
        let c = cart_to_lonlat(Vec3::new(-0.0, 0.0, -1.0)).unwrap();
        assert_eq!(c.lon, PI);
    }

    #[test]
    fn lonlat_to_cart_examples() {
        let cfg = SphereConfig::default();
        let p = lonlat_to_cart(LonLat::new(0.0, 0.0).unwrap(), &cfg).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 102.73));
        let unit = SphereConfig::with_radius(1.0).unwrap();
        let p = lonlat_to_cart(LonLat::new(FRAC_PI_2, 0.0).unwrap(), &unit).unwrap();
        assert!(close(p.x, 1.0, 1e-15) && close(p.z, 0.0, 1e-15));
        let cfg = SphereConfig::with_radius(102.731).unwrap();
        let p = lonlat_to_cart(LonLat::new(-0.35672, -0.16230).unwrap(), &cfg).unwrap();
        assert!(close(p.x, -35.40, 0.01));
        assert!(close(p.y, -16.60, 0.01));
        assert!(close(p.z, 95.00, 0.01));
        assert!(LonLat::new(4.0, 0.0).is_err());
        assert!(LonLat::new(0.0, 2.0).is_err());
    }

    #[test]
    fn mercator_examples() {
        let clamp = DEFAULT_LAT_CLAMP;
        assert_eq!(lonlat_to_mercator(LonLat { lon: 0.0, lat: 0.0 }, clamp), (0.0, 0.0));
        assert_eq!(
            lonlat_to_mercator(LonLat { lon: FRAC_PI_2, lat: 0.0 }, clamp),
            (FRAC_PI_2, 0.0)
        );
        // ln(tan(3π/8)) = 0.881373587019543...
        let (_, v) = lonlat_to_mercator(LonLat { lon: 0.0, lat: PI / 4.0 }, clamp);
        assert!(close(v, 0.881374, 1e-6));
        // Poles are clamped rather than diverging.
        let (_, vmax) = lonlat_to_mercator(LonLat { lon: 0.0, lat: FRAC_PI_2 }, clamp);
        assert!(close(vmax, 3.131301331, 1e-8));
        assert!(close(mercator_lat(v), PI / 4.0, 1e-15));
    }

    #[test]
    fn angular_distance_examples() {
        assert_eq!(angular_distance(Vec3::Z, Vec3::Z).unwrap(), 0.0);
        assert!(close(angular_distance(Vec3::Z, Vec3::Y).unwrap(), FRAC_PI_2, 1e-15));
        // Dot-product oracle: acos(a·b / |a||b|) = 0.612448651681...
        let a = Vec3::new(-35.4, -16.6, 95.0);
        let b = Vec3::new(16.4, 17.0, 100.0);
        let oracle = (a.dot(b) / (a.norm() * b.norm())).acos();
        let d = angular_distance(a, b).unwrap();
        assert!(close(d, oracle, 1e-12));
        assert!(close(d, 0.612449, 1e-6));
        assert!(close(angular_distance(Vec3::Z, -Vec3::Z).unwrap(), PI, 1e-15));
        assert!(angular_distance(Vec3::ZERO, Vec3::Z).is_err());
    }

    #[test]
    fn equirect_mapping() {
        let (c, r) = equirect_pixel(LonLat { lon: 0.0, lat: 0.0 }, 1024, 512);
        assert_eq!((c, r), (512, 256));
        let (c, r) = equirect_pixel(LonLat { lon: PI, lat: -FRAC_PI_2 }, 1024, 512);
        assert_eq!((c, r), (1023, 511));
        let center = equirect_center(512, 256, 1024, 512);
        assert_eq!(equirect_pixel(center, 1024, 512), (512, 256));
    }

    #[test]
    fn rotate_y_shifts_longitude() {
        let p = Vec3::new(0.0, 0.3, 1.0);
        let q = p.rotate_y(0.25);
        let (a, b) = (cart_to_lonlat(p).unwrap(), cart_to_lonlat(q).unwrap());
        assert!(close(b.lon - a.lon, 0.25, 1e-15));
        assert!(close(b.lat, a.lat, 1e-15));
    }

    #[test]
    fn wrap_lon_range() {
        assert_eq!(wrap_lon(-PI), PI);
        assert!(close(wrap_lon(3.0 * PI / 2.0), -FRAC_PI_2, 1e-15));
        assert_eq!(wrap_lon(0.5), 0.5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn unit_dir() -> impl Strategy<Value = Vec3> {
            (-1.0f64..1.0, -PI..PI).prop_map(|(y, phi)| {
                let r = (1.0 - y * y).sqrt();
                Vec3::new(r * phi.sin(), y, r * phi.cos())
            })
        }

        proptest! {
            #[test]
            fn intersection_lies_on_sphere(
                radius in 1.0f64..500.0,
                frac in 0.0f64..0.95,
                o in unit_dir(),
                d in unit_dir(),
            ) {
                let cfg = SphereConfig::with_radius(radius).unwrap();
                let origin = o * (frac * radius);
                let p = ray_sphere_intersect(origin, d, &cfg).unwrap();
                prop_assert!((p.norm() - radius).abs() <= 1e-9);
                prop_assert!((p - origin).dot(d) > 0.0);
            }

            #[test]
            fn mercator_is_odd_and_monotone(lat in 0.0f64..FRAC_PI_2, dl in 1e-6f64..0.1) {
                let clamp = DEFAULT_LAT_CLAMP;
                prop_assert_eq!(mercator_v(-lat, clamp), -mercator_v(lat, clamp));
                let lo = lat.min(clamp - dl);
                prop_assert!(mercator_v(lo + dl, clamp) > mercator_v(lo, clamp));
            }
        }
    }
}
