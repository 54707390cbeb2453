//! Plain-text 3D landmark files.
//!
//! ```text
//! landmarks3d 1
//! 68
//! <x> <y> <z> [confidence]
//! ...
//! ```
//!
//! Coordinates are written with shortest round-trip formatting, so a
//! save/load cycle reproduces the exact values. Scientific notation is
//! accepted on input.

use std::fs;
use std::path::Path;

use frontal_core::geometry::PointSet3;
use nalgebra::Vector3;

use crate::{Error, Result};

const MAGIC: &str = "landmarks3d";
const VERSION: u32 = 1;

/// Writes a landmark set, with optional per-point confidences.
pub fn save_landmarks(path: &Path, points: &PointSet3, confidence: Option<&[f64]>) -> Result<()> {
    if let Some(c) = confidence {
        assert_eq!(c.len(), points.len(), "confidence length must match landmarks");
    }
    let mut out = format!("{MAGIC} {VERSION}\n{}\n", points.len());
    for (i, p) in points.iter().enumerate() {
        match confidence {
            Some(c) => out.push_str(&format!("{:e} {:e} {:e} {:e}\n", p.x, p.y, p.z, c[i])),
            None => out.push_str(&format!("{:e} {:e} {:e}\n", p.x, p.y, p.z)),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a landmark set; returns the points and the confidences if present.
pub fn load_landmarks(path: &Path) -> Result<(PointSet3, Option<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();

    let header = lines.next().ok_or_else(|| Error::malformed(path, "missing header"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(Error::unsupported(path, "not a landmarks3d file"));
    }
    let version: u32 = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::malformed(path, "missing version"))?;
    if version != VERSION {
        return Err(Error::unsupported(path, format!("version {version}")));
    }

    let count: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| Error::malformed(path, "missing landmark count"))?;
    if count == 0 {
        return Err(Error::malformed(path, "landmark count must be positive"));
    }

    let mut points = Vec::with_capacity(count);
    let mut confidence: Option<Vec<f64>> = None;
    for (i, line) in lines.by_ref().take(count).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::malformed(path, format!("non-numeric field in record {i}")))?;
        match (vals.len(), i) {
            (3, 0) => {}
            (4, 0) => confidence = Some(Vec::with_capacity(count)),
            (3, _) if confidence.is_none() => {}
            (4, _) if confidence.is_some() => {}
            _ => return Err(Error::malformed(path, format!("record {i} has wrong field count"))),
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        if let Some(c) = confidence.as_mut() {
            c.push(vals[3]);
        }
    }
    if points.len() != count {
        return Err(Error::malformed(
            path,
            format!("expected {count} records, found {}", points.len()),
        ));
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::malformed(path, "trailing records after declared count"));
    }
    let set = PointSet3::new(points)?;
    Ok((set, confidence))
}
