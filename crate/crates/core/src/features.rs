//! The eleven per-branch graph-node features.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{AirwayGraph, BranchNode};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("branch {0} does not exist")]
    NoSuchBranch(usize),
    #[error("branch {0} has coincident endpoints")]
    ZeroLengthBranch(usize),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FeatureVector {
    /// Generation, trachea = 1.
    pub g: u32,
    /// Centroid offset from the trachea branch, per axis, over the mask extent.
    pub rp: [f64; 3],
    /// Angles (degrees) between the branch vector and the +x, +y, +z axes.
    pub theta: [f64; 3],
    /// Centerline arc length (mm).
    pub l: f64,
    /// |v . axis| per axis (mm).
    pub pl: [f64; 3],
}

fn centroid(b: &BranchNode, g: &AirwayGraph) -> [f64; 3] {
    let pts: &[usize] = if b.voxels.is_empty() { &b.centerline } else { &b.voxels };
    if pts.is_empty() {
        return [0.5 * (b.start[0] + b.end[0]), 0.5 * (b.start[1] + b.end[1]), 0.5 * (b.start[2] + b.end[2])];
    }
    let mut c = [0.0; 3];
    for &v in pts {
        let p = g.grid.position(v);
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|x| x / pts.len() as f64)
}

pub fn branch_features(g: &AirwayGraph, id: usize) -> Result<FeatureVector, FeatureError> {
    let b = g.branches.get(id).ok_or(FeatureError::NoSuchBranch(id))?;
    let v = [b.end[0] - b.start[0], b.end[1] - b.start[1], b.end[2] - b.start[2]];
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm == 0.0 {
        return Err(FeatureError::ZeroLengthBranch(id));
    }
    let c = centroid(b, g);
    let t = centroid(&g.branches[g.root()], g);
    let rp = [0, 1, 2].map(|a| if g.extent[a] > 0.0 { (c[a] - t[a]) / g.extent[a] } else { 0.0 });
    Ok(FeatureVector {
        g: b.generation,
        rp,
        theta: v.map(|x| (x / norm).clamp(-1.0, 1.0).acos().to_degrees()),
        l: b.length,
        pl: v.map(f64::abs),
    })
}

/// Features for every branch; degenerate branches get θ = 90° per axis and
/// zero lengths instead of an error.
pub fn all_features(g: &AirwayGraph) -> Vec<FeatureVector> {
    (0..g.len())
        .map(|i| match branch_features(g, i) {
            Ok(f) => f,
            Err(_) => {
                let b = &g.branches[i];
                let c = centroid(b, g);
                let t = centroid(&g.branches[g.root()], g);
                FeatureVector {
                    g: b.generation,
                    rp: [0, 1, 2].map(|a| if g.extent[a] > 0.0 { (c[a] - t[a]) / g.extent[a] } else { 0.0 }),
                    theta: [90.0; 3],
                    l: 0.0,
                    pl: [0.0; 3],
                }
            }
        })
        .collect()
}

pub const CSV_HEADER: [&str; 12] =
    ["branch", "G", "RPx", "RPy", "RPz", "theta_x", "theta_y", "theta_z", "L", "PLx", "PLy", "PLz"];

pub fn write_csv<W: Write>(features: &[FeatureVector], out: W) -> Result<(), FeatureError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| FeatureError::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for (i, f) in features.iter().enumerate() {
        let mut row = vec![i.to_string(), f.g.to_string()];
        row.extend(f.rp.iter().chain(&f.theta).chain([&f.l]).chain(&f.pl).map(|x| x.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| FeatureError::Csv(e.to_string()))
}
