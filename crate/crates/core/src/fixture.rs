//! Published ranked-coordinate table: load it and check that every point sits
//! on the common environment sphere.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Sphere radius recovered from the published coordinates.
pub const FIXTURE_RADIUS: f64 = 102.77;
pub const FIXTURE_TOLERANCE: f64 = 0.5;
pub const FIXTURE_HEADER: [&str; 6] = ["experiment", "list", "rank", "x", "y", "z"];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("fixture line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("fixture has no rows")]
    NoRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub experiment: u32,
    pub list: String,
    pub rank: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl FixtureRow {
    pub fn point(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn label(&self) -> String {
        format!(
            "experiment {} {} rank {} ({}, {}, {})",
            self.experiment, self.list, self.rank, self.x, self.y, self.z
        )
    }
}

pub fn read_fixture<R: Read>(reader: R) -> Result<Vec<FixtureRow>, FixtureError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| FixtureError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(FixtureError::NoRows);
    }
    if header.iter().ne(FIXTURE_HEADER) {
        return Err(FixtureError::Parse {
            line: 1,
            reason: format!("expected header `{}`", FIXTURE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<FixtureRow>() {
        let row = rec.map_err(|e| FixtureError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        if !row.point().is_finite() {
            return Err(FixtureError::Parse {
                line: rows.len() as u64 + 2,
                reason: "non-finite coordinate".into(),
            });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(FixtureError::NoRows);
    }
    Ok(rows)
}

pub fn load_fixture(path: &Path) -> Result<Vec<FixtureRow>, FixtureError> {
    read_fixture(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointNorm {
    pub row: FixtureRow,
    pub norm: f64,
    pub deviation: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureReport {
    pub reference_radius: f64,
    pub tolerance: f64,
    pub count: usize,
    pub mean_radius: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    /// Largest `|‖p‖ − reference_radius|`.
    pub max_deviation: f64,
    /// Largest `|‖p‖ − mean_radius|`.
    pub max_deviation_from_mean: f64,
    pub points: Vec<PointNorm>,
    pub passed: bool,
}

impl FixtureReport {
    pub fn failures(&self) -> impl Iterator<Item = &PointNorm> {
        self.points.iter().filter(|p| !p.ok)
    }
}

pub fn check_fixture(rows: &[FixtureRow], reference_radius: f64, tolerance: f64) -> Result<FixtureReport, FixtureError> {
    if rows.is_empty() {
        return Err(FixtureError::NoRows);
    }
    let points: Vec<PointNorm> = rows
        .iter()
        .map(|r| {
            let norm = r.point().norm();
            let deviation = (norm - reference_radius).abs();
            PointNorm {
                row: r.clone(),
                norm,
                deviation,
                ok: deviation <= tolerance,
            }
        })
        .collect();
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.norm).sum::<f64>() / n;
    let min_norm = points.iter().map(|p| p.norm).fold(f64::INFINITY, f64::min);
    let max_norm = points.iter().map(|p| p.norm).fold(f64::NEG_INFINITY, f64::max);
    Ok(FixtureReport {
        reference_radius,
        tolerance,
        count: points.len(),
        mean_radius: mean,
        min_norm,
        max_norm,
        max_deviation: points.iter().map(|p| p.deviation).fold(0.0, f64::max),
        max_deviation_from_mean: points.iter().map(|p| (p.norm - mean).abs()).fold(0.0, f64::max),
        passed: points.iter().all(|p| p.ok),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "experiment,list,rank,x,y,z\n1,preferred,1,-35.4,-16.6,95.0\n3,preferred,1,16.4,17,100.0\n";

    #[test]
    fn parses_and_passes() {
        let rows = read_fixture(SAMPLE.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].point(), Vec3::new(16.4, 17.0, 100.0));
        let rep = check_fixture(&rows, FIXTURE_RADIUS, FIXTURE_TOLERANCE).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn off_sphere_point_fails_and_is_named() {
        let text = format!("{SAMPLE}9,extra,1,0,0,50\n");
        let rows = read_fixture(text.as_bytes()).unwrap();
        let rep = check_fixture(&rows, FIXTURE_RADIUS, FIXTURE_TOLERANCE).unwrap();
        assert!(!rep.passed);
        let bad: Vec<_> = rep.failures().collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].row.point(), Vec3::new(0.0, 0.0, 50.0));
        assert!(bad[0].row.label().contains("(0, 0, 50)"));
    }

    #[test]
    fn empty_inputs_report_no_rows() {
        assert!(matches!(read_fixture("".as_bytes()), Err(FixtureError::NoRows)));
        assert!(matches!(
            read_fixture("experiment,list,rank,x,y,z\n".as_bytes()),
            Err(FixtureError::NoRows)
        ));
        assert!(FixtureError::NoRows.to_string().contains("no rows"));
    }

    #[test]
    fn malformed_rows_are_errors() {
        assert!(matches!(
            read_fixture("a,b\n1,2\n".as_bytes()),
            Err(FixtureError::Parse { line: 1, .. })
        ));
        assert!(read_fixture("experiment,list,rank,x,y,z\n1,p,1,abc,0,0\n".as_bytes()).is_err());
    }
}
