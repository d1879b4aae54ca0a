//! Signed spherical heatmap: Gaussian splatting in angular distance on an
//! equirectangular grid, diverging colour ramp, masking, background
//! compositing and the Mercator unfolding.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    equirect_center, equirect_pixel, lonlat_to_unit, mercator_lat, mercator_v, unit_angle, LonLat, SphereConfig,
    Vec3, DEFAULT_LAT_CLAMP,
};
use crate::image::{Mask, RgbImage};
use crate::ranking::RankedPoint;

pub const DEFAULT_WIDTH: usize = 1024;
pub const DEFAULT_HEIGHT: usize = 512;
pub const DEFAULT_SIGMA: f64 = 0.05;
pub const DEFAULT_OPACITY: f64 = 0.6;

/// Kernel contributions beyond this many sigmas are dropped.
pub const KERNEL_CUTOFF_SIGMAS: f64 = 4.0;

pub const MASK_GRAY: [u8; 3] = [128, 128, 128];

const FILE_MAGIC: &[u8] = b"GAHM1\n";

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("no points to splat")]
    NoPoints,
    #[error("kernel sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("grid must be non-empty with width = 2 × height, got {width}x{height}")]
    BadGrid { width: usize, height: usize },
    #[error("{what} is {actual_w}x{actual_h}, grid is {width}x{height}")]
    DimensionMismatch {
        what: &'static str,
        width: usize,
        height: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("bad colour ramp: {0}")]
    BadRamp(String),
    #[error("point {0} is not a usable direction")]
    BadPoint(Vec3),
    #[error("malformed heatmap file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub width: usize,
    pub height: usize,
    pub kernel_sigma: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            kernel_sigma: DEFAULT_SIGMA,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), HeatmapError> {
        if self.height == 0 || self.width != 2 * self.height {
            return Err(HeatmapError::BadGrid {
                width: self.width,
                height: self.height,
            });
        }
        if !(self.kernel_sigma.is_finite() && self.kernel_sigma > 0.0) {
            return Err(HeatmapError::BadSigma(self.kernel_sigma));
        }
        Ok(())
    }
}

/// Equirectangular grid of preference values in `[-100, 100]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalHeatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub kernel_sigma: f64,
    pub sphere: SphereConfig,
}

impl SphericalHeatmap {
    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Value of the cell containing a direction.
    pub fn sample(&self, c: LonLat) -> f64 {
        let (col, row) = equirect_pixel(c, self.width, self.height);
        self.value(col, row)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Binary dump: magic, one JSON header line, then little-endian `f64`
    /// values in row-major order.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        #[derive(Serialize)]
        struct Header {
            width: usize,
            height: usize,
            kernel_sigma: f64,
            sphere_radius: f64,
        }
        w.write_all(FILE_MAGIC)?;
        let header = Header {
            width: self.width,
            height: self.height,
            kernel_sigma: self.kernel_sigma,
            sphere_radius: self.sphere.radius,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, HeatmapError> {
        #[derive(Deserialize)]
        struct Header {
            width: usize,
            height: usize,
            kernel_sigma: f64,
            sphere_radius: f64,
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let rest = bytes
            .strip_prefix(FILE_MAGIC)
            .ok_or_else(|| HeatmapError::Malformed("bad magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| HeatmapError::Malformed("missing header".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| HeatmapError::Malformed(e.to_string()))?;
        let payload = &rest[nl + 1..];
        let n = header.width * header.height;
        if payload.len() != 8 * n {
            return Err(HeatmapError::Malformed(format!(
                "expected {} value bytes, found {}",
                8 * n,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let sphere = SphereConfig::with_radius(header.sphere_radius)
            .map_err(|e| HeatmapError::Malformed(e.to_string()))?;
        Ok(SphericalHeatmap {
            width: header.width,
            height: header.height,
            values,
            kernel_sigma: header.kernel_sigma,
            sphere,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HeatmapError> {
        let f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeatmapError> {
        SphericalHeatmap::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Splats signed preferences with an isotropic Gaussian in angular distance:
/// `cell = Σ_i preference_i · exp(−θ_i² / 2σ²)`, dropping terms past
/// [`KERNEL_CUTOFF_SIGMAS`]. The grid is then scaled by
/// `min(1, 100 / max|cell|)`.
///
/// Rows are computed in parallel; each cell sums its points in input order,
/// so the result does not depend on scheduling.
pub fn splat(points: &[RankedPoint], grid: &GridParams, sphere: &SphereConfig) -> Result<SphericalHeatmap, HeatmapError> {
    grid.validate()?;
    if points.is_empty() {
        return Err(HeatmapError::NoPoints);
    }
    let sources: Vec<(Vec3, f64)> = points
        .iter()
        .map(|p| {
            p.point
                .normalized()
                .map(|d| (d, p.preference))
                .map_err(|_| HeatmapError::BadPoint(p.point))
        })
        .collect::<Result<_, _>>()?;

    let sigma = grid.kernel_sigma;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let cutoff = KERNEL_CUTOFF_SIGMAS * sigma;
    let cos_cutoff = if cutoff >= PI { -2.0 } else { cutoff.cos() };
    let (w, h) = (grid.width, grid.height);

    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        for (col, cell) in out.iter_mut().enumerate() {
            let dir = lonlat_to_unit(equirect_center(col, row, w, h));
            let mut acc = 0.0;
            for &(src, pref) in &sources {
                if dir.dot(src) < cos_cutoff {
                    continue;
                }
                let theta = unit_angle(dir, src);
                acc += pref * (-theta * theta * inv_two_sigma2).exp();
            }
            *cell = acc;
        }
    });

    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs > 100.0 {
        let scale = 100.0 / max_abs;
        for v in &mut values {
            *v *= scale;
        }
    }
    Ok(SphericalHeatmap {
        width: w,
        height: h,
        values,
        kernel_sigma: sigma,
        sphere: *sphere,
    })
}

/// Piecewise-linear preference → RGB ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorRamp {
    pub stops: Vec<(f64, [u8; 3])>,
}

impl Default for ColorRamp {
    /// Blue at −100, green at 0, red at +100.
    fn default() -> Self {
        ColorRamp {
            stops: vec![(-100.0, [0, 0, 255]), (0.0, [0, 255, 0]), (100.0, [255, 0, 0])],
        }
    }
}

impl ColorRamp {
    pub fn new(stops: Vec<(f64, [u8; 3])>) -> Result<Self, HeatmapError> {
        let ramp = ColorRamp { stops };
        ramp.validate()?;
        Ok(ramp)
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        let s = &self.stops;
        if s.len() < 2 {
            return Err(HeatmapError::BadRamp("need at least two stops".into()));
        }
        if s[0].0 != -100.0 || s[s.len() - 1].0 != 100.0 {
            return Err(HeatmapError::BadRamp("endpoints must be at -100 and 100".into()));
        }
        if s.windows(2).any(|p| p[0].0.partial_cmp(&p[1].0) != Some(std::cmp::Ordering::Less)) {
            return Err(HeatmapError::BadRamp("stops must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn color(&self, value: f64) -> [u8; 3] {
        let v = value.clamp(-100.0, 100.0);
        let i = self
            .stops
            .windows(2)
            .position(|p| v <= p[1].0)
            .unwrap_or(self.stops.len() - 2);
        let (a, ca) = self.stops[i];
        let (b, cb) = self.stops[i + 1];
        let f = (v - a) / (b - a);
        let mut out = [0u8; 3];
        for k in 0..3 {
            let c = ca[k] as f64 + (cb[k] as f64 - ca[k] as f64) * f;
            out[k] = c.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

fn check_dims(what: &'static str, hm: &SphericalHeatmap, w: usize, h: usize) -> Result<(), HeatmapError> {
    if w != hm.width || h != hm.height {
        return Err(HeatmapError::DimensionMismatch {
            what,
            width: hm.width,
            height: hm.height,
            actual_w: w,
            actual_h: h,
        });
    }
    Ok(())
}

/// Colours every cell through the ramp; masked cells become neutral gray.
pub fn colorize(hm: &SphericalHeatmap, ramp: &ColorRamp, mask: Option<&Mask>) -> Result<RgbImage, HeatmapError> {
    if let Some(m) = mask {
        check_dims("mask", hm, m.width, m.height)?;
    }
    let mut img = RgbImage::new(hm.width, hm.height);
    for (i, (&v, px)) in hm.values.iter().zip(img.data.chunks_exact_mut(3)).enumerate() {
        let rgb = match mask {
            Some(m) if m.masked[i] => MASK_GRAY,
            _ => ramp.color(v),
        };
        px.copy_from_slice(&rgb);
    }
    Ok(img)
}

/// Alpha-blends a colourized heatmap over an equirectangular background of
/// the same size. Masked cells show the background unblended.
pub fn composite(
    heat: &RgbImage,
    background: &RgbImage,
    opacity: f64,
    mask: Option<&Mask>,
) -> Result<RgbImage, HeatmapError> {
    if heat.width != background.width || heat.height != background.height {
        return Err(HeatmapError::DimensionMismatch {
            what: "background",
            width: heat.width,
            height: heat.height,
            actual_w: background.width,
            actual_h: background.height,
        });
    }
    let a = opacity.clamp(0.0, 1.0);
    let mut out = background.clone();
    for (i, (o, hpx)) in out.data.chunks_exact_mut(3).zip(heat.data.chunks_exact(3)).enumerate() {
        if mask.is_some_and(|m| m.masked[i]) {
            continue;
        }
        for k in 0..3 {
            o[k] = (a * hpx[k] as f64 + (1.0 - a) * o[k] as f64).round() as u8;
        }
    }
    Ok(out)
}

/// Height of the Mercator unfolding of a `width`-wide map:
/// `2·ceil(width · v_max / 2π)` with `v_max = ln(tan(π/4 + lat_clamp/2))`.
/// Rows keep the same `2π / width` spacing in `v` as columns do in `u`.
pub fn mercator_height(width: usize, lat_clamp: f64) -> usize {
    let v_max = mercator_v(FRAC_PI_2, lat_clamp);
    2 * (width as f64 * v_max / (2.0 * PI)).ceil() as usize
}

/// Source equirectangular row for each Mercator output row (nearest
/// neighbour, sampled at row centres).
pub fn mercator_row_map(width: usize, height: usize, lat_clamp: f64) -> Vec<usize> {
    let out_h = mercator_height(width, lat_clamp);
    let half = (out_h / 2) as f64;
    let dv = 2.0 * PI / width as f64;
    let clamp = lat_clamp.abs().min(FRAC_PI_2);
    (0..out_h)
        .map(|j| {
            let v = (half - j as f64 - 0.5) * dv;
            let lat = mercator_lat(v).clamp(-clamp, clamp);
            equirect_pixel(LonLat { lon: 0.0, lat }, width, height).1
        })
        .collect()
}

/// Resamples an equirectangular image into the Mercator projection.
pub fn unfold_mercator(image: &RgbImage, lat_clamp: f64) -> RgbImage {
    let rows = mercator_row_map(image.width, image.height, lat_clamp);
    let mut out = RgbImage::new(image.width, rows.len());
    for (j, &src) in rows.iter().enumerate() {
        let dst = 3 * j * image.width;
        out.data[dst..dst + 3 * image.width].copy_from_slice(image.row(src));
    }
    out
}

/// Mercator resampling of the raw values; returns `(width, height, values)`.
pub fn unfold_mercator_values(hm: &SphericalHeatmap, lat_clamp: f64) -> (usize, usize, Vec<f64>) {
    let rows = mercator_row_map(hm.width, hm.height, lat_clamp);
    let mut values = Vec::with_capacity(rows.len() * hm.width);
    for &src in &rows {
        values.extend_from_slice(&hm.values[src * hm.width..(src + 1) * hm.width]);
    }
    (hm.width, rows.len(), values)
}

pub fn default_lat_clamp() -> f64 {
    DEFAULT_LAT_CLAMP
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cart_to_lonlat, lonlat_to_cart};

    fn point_at(lon: f64, lat: f64, preference: f64) -> RankedPoint {
        let sphere = SphereConfig::default();
        RankedPoint {
            rank: 1,
            point: lonlat_to_cart(LonLat { lon, lat }, &sphere).unwrap(),
            score: (preference + 100.0) / 200.0,
            preference,
            t: 0.0,
        }
    }

    fn small() -> GridParams {
        GridParams {
            width: 256,
            height: 128,
            kernel_sigma: 0.1,
        }
    }

    #[test]
    fn single_point_peaks_at_its_pixel() {
        let hm = splat(&[point_at(0.0, 0.0, 100.0)], &GridParams::default(), &SphereConfig::default()).unwrap();
        let peak = hm.sample(LonLat { lon: 0.0, lat: 0.0 });
        assert!((peak - 100.0).abs() <= 0.5, "peak {peak}");
        assert_eq!(peak, hm.max_abs());
        // Decreases moving away along the row.
        let (c, r) = equirect_pixel(LonLat { lon: 0.0, lat: 0.0 }, hm.width, hm.height);
        let row: Vec<f64> = (c..c + 20).map(|k| hm.value(k, r)).collect();
        assert!(row.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn cells_match_direct_kernel_evaluation() {
        let p = point_at(0.3, -0.2, 80.0);
        let hm = splat(&[p], &small(), &SphereConfig::default()).unwrap();
        let src = p.point.normalized().unwrap();
        for row in (0..128).step_by(7) {
            for col in (0..256).step_by(5) {
                let c = equirect_center(col, row, 256, 128);
                let d = lonlat_to_unit(c);
                let theta = (d.dot(src) / (d.norm() * src.norm())).clamp(-1.0, 1.0).acos();
                let expected = if theta > 0.4 { 0.0 } else { 80.0 * (-theta * theta / 0.02).exp() };
                assert!((hm.value(col, row) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn antipodal_points_are_antisymmetric() {
        let pts = [point_at(0.4, 0.3, 100.0), point_at(0.4 - PI, -0.3, -100.0)];
        let hm = splat(&pts, &small(), &SphereConfig::default()).unwrap();
        let (w, h) = (hm.width, hm.height);
        for row in 0..h {
            for col in 0..w {
                let a = hm.value(col, row);
                let b = hm.value((col + w / 2) % w, h - 1 - row);
                assert!((a + b).abs() < 1e-6, "({col},{row}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn overlapping_points_rescale_to_range() {
        let pts = vec![point_at(0.0, 0.0, 100.0); 5];
        let hm = splat(&pts, &small(), &SphereConfig::default()).unwrap();
        assert!((hm.max_abs() - 100.0).abs() < 1e-9);
        assert!(hm.values.iter().all(|v| v.abs() <= 100.0));
    }

    #[test]
    fn zero_preference_gives_zero_map() {
        let hm = splat(&[point_at(1.0, 0.2, 0.0)], &small(), &SphereConfig::default()).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn splat_errors() {
        let sphere = SphereConfig::default();
        assert!(matches!(splat(&[], &small(), &sphere), Err(HeatmapError::NoPoints)));
        let bad = GridParams { kernel_sigma: 0.0, ..small() };
        assert!(matches!(splat(&[point_at(0.0, 0.0, 1.0)], &bad, &sphere), Err(HeatmapError::BadSigma(_))));
        let bad = GridParams { width: 300, ..small() };
        assert!(matches!(splat(&[point_at(0.0, 0.0, 1.0)], &bad, &sphere), Err(HeatmapError::BadGrid { .. })));
    }

    #[test]
    fn ramp_examples() {
        let ramp = ColorRamp::default();
        assert_eq!(ramp.color(100.0), [255, 0, 0]);
        assert_eq!(ramp.color(0.0), [0, 255, 0]);
        assert_eq!(ramp.color(-100.0), [0, 0, 255]);
        // Linear interpolation between green and red at the midpoint: 127.5 per channel.
        let c = ramp.color(50.0);
        assert!((c[0] as i32 - 127).abs() <= 1 && (c[1] as i32 - 128).abs() <= 1 && c[2] == 0);
        assert_eq!(ramp.color(500.0), [255, 0, 0]);
        assert!(ColorRamp::new(vec![(0.0, [0; 3]), (100.0, [0; 3])]).is_err());
        assert!(ColorRamp::new(vec![(-100.0, [0; 3]), (100.0, [0; 3]), (50.0, [0; 3])]).is_err());
    }

    #[test]
    fn colorize_masks_and_checks_dims() {
        let hm = splat(&[point_at(0.0, 0.0, 100.0)], &small(), &SphereConfig::default()).unwrap();
        let mut mask = Mask::none(256, 128);
        mask.masked[0] = true;
        let img = colorize(&hm, &ColorRamp::default(), Some(&mask)).unwrap();
        assert_eq!(img.pixel(0, 0), MASK_GRAY);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
        let wrong = Mask::none(10, 5);
        assert!(matches!(
            colorize(&hm, &ColorRamp::default(), Some(&wrong)),
            Err(HeatmapError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn composite_blends_and_keeps_masked_background() {
        let heat = RgbImage::filled(2, 1, [200, 0, 0]);
        let bg = RgbImage::filled(2, 1, [0, 0, 100]);
        let mut mask = Mask::none(2, 1);
        mask.masked[1] = true;
        let out = composite(&heat, &bg, 0.5, Some(&mask)).unwrap();
        assert_eq!(out.pixel(0, 0), [100, 0, 50]);
        assert_eq!(out.pixel(1, 0), [0, 0, 100]);
        assert!(composite(&heat, &RgbImage::new(1, 1), 0.5, None).is_err());
    }

    #[test]
    fn mercator_height_for_default_width() {
        // v_max = ln(tan(87.5°)) = 3.131301331; 1024 · v_max / 2π = 510.3 → 2 · 511.
        assert_eq!(mercator_height(1024, DEFAULT_LAT_CLAMP), 1022);
    }

    #[test]
    fn mercator_preserves_equator_rows() {
        let mut img = RgbImage::new(64, 32);
        for row in 0..32 {
            for col in 0..64 {
                img.set_pixel(col, row, [row as u8, col as u8, 7]);
            }
        }
        let out = unfold_mercator(&img, DEFAULT_LAT_CLAMP);
        let mid = out.height / 2;
        assert_eq!(out.row(mid - 1), img.row(15));
        assert_eq!(out.row(mid), img.row(16));
        // Top and bottom rows come from the clamped latitude.
        let top_src = equirect_pixel(LonLat { lon: 0.0, lat: DEFAULT_LAT_CLAMP }, 64, 32).1;
        assert_eq!(out.row(0), img.row(top_src));
    }

    #[test]
    fn uniform_map_unfolds_uniform() {
        let img = RgbImage::filled(128, 64, [9, 8, 7]);
        let out = unfold_mercator(&img, DEFAULT_LAT_CLAMP);
        assert!(out.data.chunks_exact(3).all(|p| p == [9, 8, 7]));
        let hm = SphericalHeatmap {
            width: 128,
            height: 64,
            values: vec![42.0; 128 * 64],
            kernel_sigma: 0.05,
            sphere: SphereConfig::default(),
        };
        let (w, h, v) = unfold_mercator_values(&hm, DEFAULT_LAT_CLAMP);
        assert_eq!((w, h), (128, mercator_height(128, DEFAULT_LAT_CLAMP)));
        assert!(v.iter().all(|&x| x == 42.0));
    }

    #[test]
    fn heatmap_file_round_trip() {
        let hm = splat(&[point_at(0.5, 0.1, -70.0)], &small(), &SphereConfig::default()).unwrap();
        let mut buf = Vec::new();
        hm.write_to(&mut buf).unwrap();
        let back = SphericalHeatmap::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, hm);
        assert!(SphericalHeatmap::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(SphericalHeatmap::read_from(&b"nope"[..]).is_err());
    }

    #[test]
    fn sample_uses_equirect_mapping() {
        let hm = splat(&[point_at(-2.0, 0.6, 100.0)], &small(), &SphereConfig::default()).unwrap();
        let c = cart_to_lonlat(point_at(-2.0, 0.6, 100.0).point).unwrap();
        assert!(hm.sample(c) > 95.0);
    }
}
