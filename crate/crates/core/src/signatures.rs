//! Morphological signatures: stenosis, ectasia, tortuosity, divergence,
//! geodesic length and box-counting complexity, aggregated over the 5 lobar
//! and 18 segmental components. Absent components carry -1 in every column.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graph::BranchNode;
use crate::par::{self, Exec};
use crate::taxonomy::{BranchLabel, LabeledGraph, Lobe, Segment};
use crate::volume::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum SignatureError {
    #[error("divergence apex coincides with leaf branch {0}")]
    DegenerateApex(usize),
    #[error("pad size {0} must be a power of two and at least 8")]
    BadPadSize(usize),
    #[error("csv: {0}")]
    Csv(String),
}

pub const DESCRIPTORS: [&str; 6] = ["S", "E", "T", "D", "L", "C"];
pub const ABSENT: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Lobe(Lobe),
    Segment(Segment),
}

impl Component {
    /// The 23 components: lobes first, then segments, in canonical order.
    pub fn all() -> Vec<Component> {
        Lobe::ALL.into_iter().map(Component::Lobe).chain(Segment::ALL.into_iter().map(Component::Segment)).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Lobe(l) => l.name(),
            Component::Segment(s) => s.name(),
        }
    }

    pub fn contains(self, label: &BranchLabel) -> bool {
        match self {
            Component::Lobe(l) => label.lobe == Some(l),
            Component::Segment(s) => label.segment == Some(s),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// 1 - r_min / r_mean over the centerline radii.
pub fn branch_stenosis(b: &BranchNode) -> Option<f64> {
    if b.radii.is_empty() {
        return None;
    }
    let m = mean(&b.radii);
    let min = b.radii.iter().copied().fold(f64::INFINITY, f64::min);
    (m > 0.0).then(|| 1.0 - min / m)
}

/// r_max / r_mean over the centerline radii.
pub fn branch_ectasia(b: &BranchNode) -> Option<f64> {
    if b.radii.is_empty() {
        return None;
    }
    let m = mean(&b.radii);
    let max = b.radii.iter().copied().fold(0.0, f64::max);
    (m > 0.0).then(|| max / m)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    (n > 1e-12).then(|| a.map(|x| x / n))
}

/// Tortuosity of a path-ordered point set: S and E are the first and last
/// points, P the point farthest from line SE. Returns 1 - ∠SPE / π, or 0
/// with fewer than three points or when the path is straight.
pub fn tortuosity_of_points(points: &[[f64; 3]]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let (s, e) = (points[0], points[points.len() - 1]);
    let Some(dir) = unit(sub(e, s)) else { return 0.0 };
    let perp = |p: &[f64; 3]| norm(cross(sub(*p, s), dir));
    let p = *points.iter().max_by(|a, b| perp(a).total_cmp(&perp(b))).expect("nonempty");
    if perp(&p) <= 1e-9 {
        return 0.0;
    }
    let (Some(ps), Some(pe)) = (unit(sub(s, p)), unit(sub(e, p))) else { return 0.0 };
    let alpha = dot(ps, pe).clamp(-1.0, 1.0).acos();
    1.0 - alpha / std::f64::consts::PI
}

/// Centroids of a branch region grouped by nearest centerline voxel, in
/// centerline order. Groups without voxels are dropped.
pub fn region_centroids(b: &BranchNode, grid: &Grid) -> Vec<[f64; 3]> {
    let cl: Vec<[f64; 3]> = b.centerline.iter().map(|&v| grid.position(v)).collect();
    if b.voxels.is_empty() || cl.is_empty() {
        return cl;
    }
    let mut sums = vec![([0.0; 3], 0usize); cl.len()];
    for &v in &b.voxels {
        let p = grid.position(v);
        let k = (0..cl.len())
            .min_by(|&i, &j| dot(sub(p, cl[i]), sub(p, cl[i])).total_cmp(&dot(sub(p, cl[j]), sub(p, cl[j]))))
            .expect("nonempty");
        for a in 0..3 {
            sums[k].0[a] += p[a];
        }
        sums[k].1 += 1;
    }
    sums.into_iter().filter(|(_, k)| *k > 0).map(|(s, k)| s.map(|x| x / k as f64)).collect()
}

/// Tortuosity of one branch, on its region centroids.
pub fn branch_tortuosity(b: &BranchNode, grid: &Grid) -> f64 {
    tortuosity_of_points(&region_centroids(b, grid))
}

/// Member branches with no member child.
pub fn class_leaves(lg: &LabeledGraph, member: &[bool]) -> Vec<usize> {
    let topo = &lg.graph.topology;
    (0..lg.len()).filter(|&i| member[i] && topo.children[i].iter().all(|&c| !member[c])).collect()
}

fn lca_of(lg: &LabeledGraph, nodes: &[usize]) -> Option<usize> {
    nodes.iter().copied().reduce(|a, b| lg.graph.topology.lca(a, b))
}

/// Mean summed branch length from the class LCA to each class leaf. When
/// the LCA is outside the class, each path starts at its first member node.
pub fn geodesic_length(lg: &LabeledGraph, member: &[bool]) -> Option<f64> {
    let leaves = class_leaves(lg, member);
    let lca = lca_of(lg, &leaves)?;
    let topo = &lg.graph.topology;
    let total: f64 = leaves
        .iter()
        .map(|&leaf| {
            let path = topo.path_down(lca, leaf);
            let start = path.iter().position(|&n| member[n]).unwrap_or(path.len());
            path[start..].iter().map(|&n| lg.graph.branches[n].length).sum::<f64>()
        })
        .sum();
    Some(total / leaves.len() as f64)
}

/// Axis u maximizing min_i <u, v_i> over unit vectors, and that minimum.
/// Exact via support sets of one to three vectors for up to 12 inputs,
/// projected subgradient ascent beyond.
pub fn enclosing_cone(vs: &[[f64; 3]]) -> ([f64; 3], f64) {
    assert!(!vs.is_empty());
    let score = |u: [f64; 3]| vs.iter().map(|v| dot(u, *v)).fold(f64::INFINITY, f64::min);
    if vs.len() == 1 {
        return (vs[0], 1.0);
    }
    if vs.len() > 12 {
        return cone_ascent(vs);
    }
    let mut cands: Vec<[f64; 3]> = Vec::new();
    let n = vs.len();
    for i in 0..n {
        cands.push(vs[i]);
        for j in i + 1..n {
            if let Some(u) = unit([vs[i][0] + vs[j][0], vs[i][1] + vs[j][1], vs[i][2] + vs[j][2]]) {
                cands.push(u);
            }
            for k in j + 1..n {
                if let Some(u) = unit(cross(sub(vs[i], vs[j]), sub(vs[i], vs[k]))) {
                    cands.push(u);
                    cands.push(u.map(|x| -x));
                }
            }
        }
    }
    cands
        .into_iter()
        .map(|u| (u, score(u)))
        .fold(([0.0; 3], f64::NEG_INFINITY), |best, c| if c.1 > best.1 + 1e-15 { c } else { best })
}

fn cone_ascent(vs: &[[f64; 3]]) -> ([f64; 3], f64) {
    let score = |u: [f64; 3]| vs.iter().map(|v| dot(u, *v)).fold(f64::INFINITY, f64::min);
    let sum = vs.iter().fold([0.0; 3], |a, v| [a[0] + v[0], a[1] + v[1], a[2] + v[2]]);
    let mut u = unit(sum).unwrap_or(vs[0]);
    let mut best = (u, score(u));
    let mut step = 0.5;
    for _ in 0..20000 {
        let worst = vs.iter().copied().min_by(|a, b| dot(u, *a).total_cmp(&dot(u, *b))).expect("nonempty");
        u = unit([u[0] + step * worst[0], u[1] + step * worst[1], u[2] + step * worst[2]]).unwrap_or(u);
        let s = score(u);
        if s > best.1 {
            best = (u, s);
        }
        step *= 0.999;
    }
    best
}

/// Full cone angle θ = 2 arccos(min_i <u*, v_i>) for unit vectors.
pub fn cone_angle(vs: &[[f64; 3]]) -> f64 {
    2.0 * enclosing_cone(vs).1.clamp(-1.0, 1.0).acos()
}

/// Normalized divergence min(θ / π, 1) of the class leaves seen from the
/// class LCA. None when the class has no branches.
pub fn divergence(lg: &LabeledGraph, member: &[bool]) -> Result<Option<f64>, SignatureError> {
    let leaves = class_leaves(lg, member);
    let Some(lca) = lca_of(lg, &leaves) else { return Ok(None) };
    if leaves.len() == 1 {
        return Ok(Some(0.0));
    }
    let apex = lg.graph.branches[lca].end;
    let mut vs = Vec::with_capacity(leaves.len());
    for &l in &leaves {
        vs.push(unit(sub(lg.graph.branches[l].end, apex)).ok_or(SignatureError::DegenerateApex(l))?);
    }
    Ok(Some((cone_angle(&vs) / std::f64::consts::PI).min(1.0)))
}

/// Box-counting dimension of a voxel set: the set is cropped to its bounding
/// box inside a cube of side `pad_size` (grown to the next power of two if
/// the set is larger), boxes of side 2, 4, ..., pad/2 are counted, and the
/// least-squares slope of log N(s) against log(1/s) is returned.
pub fn box_counting_dimension(points: &[[usize; 3]], pad_size: usize) -> Option<f64> {
    if points.is_empty() {
        return None;
    }
    let lo = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).min().unwrap());
    let hi = [0, 1, 2].map(|a| points.iter().map(|p| p[a]).max().unwrap());
    let extent = (0..3).map(|a| hi[a] - lo[a] + 1).max().unwrap();
    let pad = pad_size.max(extent.next_power_of_two());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut s = 2;
    while s <= pad / 2 {
        let mut boxes: Vec<[usize; 3]> =
            points.iter().map(|p| [0, 1, 2].map(|a| (p[a] - lo[a]) / s)).collect();
        boxes.sort_unstable();
        boxes.dedup();
        xs.push((1.0 / s as f64).ln());
        ys.push((boxes.len() as f64).ln());
        s *= 2;
    }
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SignatureParams {
    pub pad_size: usize,
}

impl Default for SignatureParams {
    fn default() -> Self {
        Self { pad_size: 64 }
    }
}

impl SignatureParams {
    pub fn validate(&self) -> Result<(), SignatureError> {
        if self.pad_size < 8 || !self.pad_size.is_power_of_two() {
            return Err(SignatureError::BadPadSize(self.pad_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignatureRow {
    pub component: String,
    /// S, E, T, D, L, C.
    pub values: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignatureMatrix {
    pub rows: Vec<SignatureRow>,
}

fn component_row(lg: &LabeledGraph, comp: Component, params: &SignatureParams) -> [f64; 6] {
    let member: Vec<bool> = lg.labels.iter().map(|l| comp.contains(l)).collect();
    let ids: Vec<usize> = (0..lg.len()).filter(|&i| member[i]).collect();
    if ids.is_empty() {
        return [ABSENT; 6];
    }
    let branches = &lg.graph.branches;
    let grid = &lg.graph.grid;
    let sten: Vec<f64> = ids.iter().filter_map(|&i| branch_stenosis(&branches[i])).collect();
    let ect: Vec<f64> = ids.iter().filter_map(|&i| branch_ectasia(&branches[i])).collect();
    let tort: Vec<f64> = ids.iter().map(|&i| branch_tortuosity(&branches[i], grid)).collect();
    let d = match divergence(lg, &member) {
        Ok(d) => d.unwrap_or(0.0),
        Err(e) => {
            log::warn!("{}: {e}; divergence set to 0", comp.name());
            0.0
        }
    };
    let cl: Vec<[usize; 3]> = ids.iter().flat_map(|&i| branches[i].centerline.iter().map(|&v| grid.coords(v))).collect();
    [
        if sten.is_empty() { 0.0 } else { mean(&sten) },
        if ect.is_empty() { 1.0 } else { mean(&ect) },
        mean(&tort),
        d,
        geodesic_length(lg, &member).unwrap_or(0.0),
        box_counting_dimension(&cl, params.pad_size).unwrap_or(0.0),
    ]
}

pub fn signature_matrix(lg: &LabeledGraph, params: &SignatureParams) -> SignatureMatrix {
    signature_matrix_with(lg, params, Exec::Parallel)
}

pub fn signature_matrix_with(lg: &LabeledGraph, params: &SignatureParams, exec: Exec) -> SignatureMatrix {
    let comps = Component::all();
    let rows = par::map(exec, &comps, |&c| SignatureRow { component: c.name().to_string(), values: component_row(lg, c, params) });
    SignatureMatrix { rows }
}

impl SignatureMatrix {
    pub fn get(&self, component: &str) -> Option<&[f64; 6]> {
        self.rows.iter().find(|r| r.component == component).map(|r| &r.values)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": "bronchograph/signatures/v1",
            "columns": DESCRIPTORS,
            "rows": self.rows,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SignatureError> {
        let err = |e: csv::Error| SignatureError::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["component"];
        header.extend(DESCRIPTORS);
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![r.component.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| SignatureError::Csv(e.to_string()))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, SignatureError> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| SignatureError::Csv(e.to_string()))?;
            if rec.len() != 7 {
                return Err(SignatureError::Csv(format!("expected 7 fields, got {}", rec.len())));
            }
            let mut values = [0.0; 6];
            for (k, v) in values.iter_mut().enumerate() {
                *v = rec[k + 1].trim().parse().map_err(|e| SignatureError::Csv(format!("{e}")))?;
            }
            rows.push(SignatureRow { component: rec[0].to_string(), values });
        }
        Ok(Self { rows })
    }
}
