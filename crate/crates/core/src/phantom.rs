//! Tubular-tree phantoms with analytic ground truth.
//!
//! Each branch is a polyline with a piecewise-linear radius profile. A voxel
//! is foreground when it lies within the interpolated radius of one of the
//! polyline segments (capsules), or inside a junction sphere whose radius is
//! the largest radius meeting at that junction.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{AirwayGraph, BranchNode};
use crate::par::{self, Exec};
use crate::taxonomy::{BranchLabel, Codebook, LabelClass, LabeledGraph, Segment};
use crate::volume::{distance, Grid, GridError, Volume, VolumeKind};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("branches {0} and {1} overlap away from a shared junction")]
    SpecOverlap(usize, usize),
    #[error("branch {0} extends outside the grid")]
    OutOfBounds(usize),
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub name: String,
    pub parent: Option<usize>,
    /// Polyline vertices in mm; the first vertex is the parent's last one.
    pub points: Vec<[f64; 3]>,
    /// Radius (mm) at each vertex.
    pub radii: Vec<f64>,
    /// Anatomical class name; none means Trunk.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub name: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub branches: Vec<BranchSpec>,
}

/// Rendered phantom with its ground truth.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub mask: Volume,
    pub labels: Volume,
    pub truth: LabeledGraph,
}

impl BranchSpec {
    fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| distance(w[0], w[1])).sum()
    }

    /// Radius at arc-length fraction `s` in [0, 1].
    fn radius_at_arc(&self, arc: f64) -> f64 {
        let mut acc = 0.0;
        for (k, w) in self.points.windows(2).enumerate() {
            let l = distance(w[0], w[1]);
            if arc <= acc + l || k + 2 == self.points.len() {
                let t = if l > 0.0 { ((arc - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
                return self.radii[k] + t * (self.radii[k + 1] - self.radii[k]);
            }
            acc += l;
        }
        self.radii[0]
    }

    fn point_at_arc(&self, arc: f64) -> [f64; 3] {
        let mut acc = 0.0;
        for (k, w) in self.points.windows(2).enumerate() {
            let l = distance(w[0], w[1]);
            if arc <= acc + l || k + 2 == self.points.len() {
                let t = if l > 0.0 { ((arc - acc) / l).clamp(0.0, 1.0) } else { 0.0 };
                return lerp3(w[0], w[1], t);
            }
            acc += l;
        }
        self.points[0]
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add_scaled(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Closest-point parameter and distance from `p` to segment `ab`.
fn point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (t, distance(p, add_scaled(a, ab, t)))
}

/// Minimum distance between segments `p1q1` and `p2q2`.
fn segment_distance(p1: [f64; 3], q1: [f64; 3], p2: [f64; 3], q2: [f64; 3]) -> f64 {
    let d1 = sub(q1, p1);
    let d2 = sub(q2, p2);
    let r = sub(p1, p2);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);
    let eps = 1e-12;
    let (s, t);
    if a <= eps && e <= eps {
        return distance(p1, p2);
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    distance(add_scaled(p1, d1, s), add_scaled(p2, d2, t))
}

fn polyline_distance(a: &BranchSpec, b: &BranchSpec) -> f64 {
    let mut best = f64::INFINITY;
    for u in a.points.windows(2) {
        for v in b.points.windows(2) {
            best = best.min(segment_distance(u[0], u[1], v[0], v[1]));
        }
    }
    best
}

impl PhantomSpec {
    /// Checks tree structure, junction continuity and profile lengths.
    pub fn validate(&self) -> Result<(), PhantomError> {
        let n = self.branches.len();
        if n == 0 {
            return Err(PhantomError::Invalid("no branches".into()));
        }
        Grid::new(self.dims, self.spacing)?;
        let parents: Vec<Option<usize>> = self.branches.iter().map(|b| b.parent).collect();
        crate::graph::Topology::from_parents(&parents)
            .map_err(|e| PhantomError::Invalid(e.to_string()))?;
        for (i, b) in self.branches.iter().enumerate() {
            if b.points.len() < 2 || b.points.len() != b.radii.len() {
                return Err(PhantomError::Invalid(format!("branch {i}: need >= 2 points with one radius each")));
            }
            if b.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(PhantomError::Invalid(format!("branch {i}: radii must be positive")));
            }
            if let Some(p) = b.parent {
                let end = *self.branches[p].points.last().unwrap();
                if distance(end, b.points[0]) > 1e-6 {
                    return Err(PhantomError::Invalid(format!("branch {i} does not start at its parent's end")));
                }
            }
            if let Some(l) = &b.label {
                LabelClass::parse(l).ok_or_else(|| PhantomError::Invalid(format!("unknown label {l:?}")))?;
            }
        }
        Ok(())
    }

    /// Rejects branch pairs that come closer than their radii plus one voxel
    /// without sharing a junction (parent/child or siblings).
    pub fn check_overlap(&self) -> Result<(), PhantomError> {
        let gap = self.spacing.iter().cloned().fold(0.0, f64::max);
        for i in 0..self.branches.len() {
            for j in i + 1..self.branches.len() {
                let (a, b) = (&self.branches[i], &self.branches[j]);
                let related = a.parent == Some(j) || b.parent == Some(i) || (a.parent.is_some() && a.parent == b.parent);
                if related {
                    continue;
                }
                if polyline_distance(a, b) <= a.max_radius() + b.max_radius() + gap {
                    return Err(PhantomError::SpecOverlap(i, j));
                }
            }
        }
        Ok(())
    }

    fn junction_radius(&self, i: usize) -> Option<f64> {
        let b = &self.branches[i];
        let p = b.parent?;
        let mut r = *self.branches[p].radii.last().unwrap();
        for s in &self.branches {
            if s.parent == Some(p) {
                r = r.max(s.radii[0]);
            }
        }
        Some(r)
    }

    /// Translates the branches so the tree sits `margin` voxels inside a grid
    /// sized to fit, and sets `dims` accordingly.
    pub fn fitted(mut self, spacing: f64, margin: usize) -> Self {
        self.spacing = [spacing; 3];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in &self.branches {
            let r = b.max_radius();
            for p in &b.points {
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a] - r);
                    hi[a] = hi[a].max(p[a] + r);
                }
            }
        }
        let pad = margin as f64 * spacing;
        let shift = [0, 1, 2].map(|a| pad - lo[a]);
        for b in &mut self.branches {
            for p in &mut b.points {
                for a in 0..3 {
                    p[a] += shift[a];
                }
            }
        }
        self.dims = [0, 1, 2].map(|a| ((hi[a] - lo[a] + 2.0 * pad) / spacing).ceil() as usize + 1);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("spec serializes");
        v["schema"] = format!("bronchograph/phantom/v{}", crate::SCHEMA_VERSION).into();
        v
    }
}

/// Voxels (index, signed depth) covered by one branch: capsules, plus the
/// junction sphere at its start.
fn branch_voxels(spec: &PhantomSpec, grid: &Grid, i: usize) -> Result<Vec<(usize, f64)>, PhantomError> {
    let b = &spec.branches[i];
    let mut shapes: Vec<([f64; 3], [f64; 3], f64, f64)> = b
        .points
        .windows(2)
        .zip(b.radii.windows(2))
        .map(|(p, r)| (p[0], p[1], r[0], r[1]))
        .collect();
    if let Some(r) = spec.junction_radius(i) {
        shapes.push((b.points[0], b.points[0], r, r));
    }
    let mut out = Vec::new();
    for (a, c, ra, rc) in shapes {
        let r = ra.max(rc);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for ax in 0..3 {
            let l = (a[ax].min(c[ax]) - r) / grid.spacing[ax];
            let h = (a[ax].max(c[ax]) + r) / grid.spacing[ax];
            if l < 0.0 || h.ceil() as usize >= grid.dims[ax] {
                return Err(PhantomError::OutOfBounds(i));
            }
            lo[ax] = l.floor() as usize;
            hi[ax] = h.ceil() as usize;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let idx = grid.index(x, y, z);
                    let p = grid.position(idx);
                    let (t, d) = point_segment(p, a, c);
                    let depth = d - (ra + t * (rc - ra));
                    if depth <= 0.0 {
                        out.push((idx, depth));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Renders mask, label volume and truth graph. Voxels covered by several
/// branches belong to the one they are deepest inside (lower index on ties).
pub fn render_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    render_phantom_with(spec, Exec::Parallel)
}

pub fn render_phantom_with(spec: &PhantomSpec, exec: Exec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    spec.check_overlap()?;
    let grid = Grid::new(spec.dims, spec.spacing)?;
    let n = spec.branches.len();
    let per_branch = par::map_range(exec, n, |i| branch_voxels(spec, &grid, i));
    let mut owner = vec![u32::MAX; grid.len()];
    let mut depth = vec![f64::INFINITY; grid.len()];
    for (i, voxels) in per_branch.into_iter().enumerate() {
        for (v, d) in voxels? {
            if d < depth[v] {
                depth[v] = d;
                owner[v] = i as u32;
            }
        }
    }
    let mask = Volume {
        grid,
        kind: VolumeKind::Binary,
        data: owner.iter().map(|&o| (o != u32::MAX) as u16).collect(),
    };

    let codebook = Codebook::canonical();
    let classes: Vec<LabelClass> = spec
        .branches
        .iter()
        .map(|b| b.label.as_deref().and_then(LabelClass::parse).unwrap_or(LabelClass::Trunk))
        .collect();
    let ids: Vec<u16> = classes.iter().map(|&c| codebook.id_of(c).expect("canonical class")).collect();
    let labels = Volume {
        grid,
        kind: VolumeKind::Labels,
        data: owner.iter().map(|&o| if o == u32::MAX { 0 } else { ids[o as usize] }).collect(),
    };

    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (v, &o) in owner.iter().enumerate() {
        if o != u32::MAX {
            owned[o as usize].push(v);
        }
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in mask.foreground() {
        let p = grid.position(v);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = [0, 1, 2].map(|a| hi[a] - lo[a] + grid.spacing[a]);

    let mut branches = Vec::with_capacity(n);
    let mut last_voxel = vec![0usize; n];
    for (i, b) in spec.branches.iter().enumerate() {
        let (mut centerline, mut radii) = rasterize_centerline(&grid, b);
        let junction = b.parent.map(|p| last_voxel[p]);
        if junction.is_some() && centerline.first() == junction.as_ref() {
            centerline.remove(0);
            radii.remove(0);
        }
        if centerline.is_empty() {
            return Err(PhantomError::Invalid(format!("branch {i} is shorter than one voxel")));
        }
        last_voxel[i] = *centerline.last().unwrap();
        let mean_radius = radii.iter().sum::<f64>() / radii.len() as f64;
        branches.push(BranchNode {
            id: i,
            centerline,
            radii,
            junction,
            voxels: std::mem::take(&mut owned[i]),
            start: b.points[0],
            end: *b.points.last().unwrap(),
            generation: 1,
            parent: b.parent,
            children: Vec::new(),
            mean_radius,
            length: b.length(),
        });
    }
    let graph = AirwayGraph::from_branches(grid, branches, extent)
        .map_err(|e| PhantomError::Invalid(e.to_string()))?;
    let truth = LabeledGraph::new(graph, classes.iter().map(|c| c.label()).collect::<Vec<BranchLabel>>());
    Ok(Phantom { mask, labels, truth })
}

/// Voxels along the polyline, sampled finely enough to be 26-connected.
fn rasterize_centerline(grid: &Grid, b: &BranchSpec) -> (Vec<usize>, Vec<f64>) {
    let len = b.length();
    let step = 0.25 * grid.min_spacing();
    let samples = (len / step).ceil().max(1.0) as usize;
    let mut voxels: Vec<usize> = Vec::new();
    let mut radii = Vec::new();
    for k in 0..=samples {
        let arc = len * k as f64 / samples as f64;
        let p = b.point_at_arc(arc);
        let c = [0, 1, 2].map(|a| (p[a] / grid.spacing[a]).round().max(0.0) as usize);
        let c = [0, 1, 2].map(|a| c[a].min(grid.dims[a] - 1));
        let v = grid.index(c[0], c[1], c[2]);
        if voxels.last() != Some(&v) {
            voxels.push(v);
            radii.push(b.radius_at_arc(arc));
        }
    }
    (voxels, radii)
}

/// Tree description for building specs by direction and length.
#[derive(Clone, Debug)]
struct Sprout {
    name: &'static str,
    label: Option<String>,
    length: f64,
    radius: f64,
    /// Polar angle from the parent direction (degrees) and azimuth (degrees).
    polar: f64,
    azimuth: f64,
    children: Vec<Sprout>,
}

fn sprout(name: &'static str, label: Option<&str>, length: f64, radius: f64, polar: f64, azimuth: f64) -> Sprout {
    Sprout { name, label: label.map(str::to_string), length, radius, polar, azimuth, children: Vec::new() }
}

impl Sprout {
    fn with(mut self, children: Vec<Sprout>) -> Sprout {
        self.children = children;
        self
    }
}

/// Unit vector at `polar`/`azimuth` (radians) relative to `axis`.
fn rotate_from(axis: [f64; 3], polar: f64, azimuth: f64) -> [f64; 3] {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(axis, helper));
    let w = cross(axis, u);
    let (sp, cp) = polar.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    normalize([0, 1, 2].map(|k| cp * axis[k] + sp * (ca * u[k] + sa * w[k])))
}

fn layout(root: &Sprout) -> Vec<BranchSpec> {
    fn walk(s: &Sprout, parent: Option<usize>, start: [f64; 3], dir: [f64; 3], parent_r: f64, out: &mut Vec<BranchSpec>) {
        let d = if parent.is_none() { dir } else { rotate_from(dir, s.polar.to_radians(), s.azimuth.to_radians()) };
        let end = add_scaled(start, d, s.length);
        let id = out.len();
        out.push(BranchSpec {
            name: s.name.to_string(),
            parent,
            points: vec![start, end],
            radii: vec![s.radius.min(parent_r), s.radius],
            label: s.label.clone(),
        });
        for c in &s.children {
            walk(c, Some(id), end, d, s.radius, out);
        }
    }
    let mut out = Vec::new();
    walk(root, None, [0.0; 3], [0.0, 0.0, 1.0], root.radius, &mut out);
    out
}

fn spec_from(name: &str, branches: Vec<BranchSpec>, spacing: f64) -> PhantomSpec {
    PhantomSpec { name: name.to_string(), dims: [1; 3], spacing: [spacing; 3], seed: 0, branches }.fitted(spacing, 3)
}

fn tube(name: &str, points: Vec<[f64; 3]>, radii: Vec<f64>, spacing: f64) -> PhantomSpec {
    spec_from(name, vec![BranchSpec { name: name.to_string(), parent: None, points, radii, label: None }], spacing)
}

/// Names of the shipped fixtures.
pub const LIBRARY_NAMES: [&str; 15] = [
    "straight_tube",
    "stenotic_tube",
    "bulged_tube",
    "elbow",
    "semicircle",
    "y_tube",
    "trifurcation",
    "lb12_cotrunk_ab",
    "lb12_cotrunk_bc",
    "lb12_cotrunk_ac",
    "lb12_trifurcation",
    "lingula_b4a",
    "rmb",
    "llb",
    "lub",
];

/// Named fixture at the given isotropic spacing (mm).
pub fn library_spec(name: &str, spacing: f64) -> Option<PhantomSpec> {
    let s = spacing;
    let spec = match name {
        "straight_tube" => tube(name, vec![[0.0, 0.0, 0.0], [0.0, 0.0, 60.0]], vec![3.0, 3.0], s),
        "stenotic_tube" => tube(
            name,
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, 20.0], [0.0, 0.0, 30.0], [0.0, 0.0, 40.0], [0.0, 0.0, 60.0]],
            vec![4.0, 4.0, 2.0, 4.0, 4.0],
            s,
        ),
        "bulged_tube" => tube(
            name,
            vec![[0.0, 0.0, 0.0], [0.0, 0.0, 20.0], [0.0, 0.0, 30.0], [0.0, 0.0, 40.0], [0.0, 0.0, 60.0]],
            vec![2.0, 2.0, 4.0, 2.0, 2.0],
            s,
        ),
        "elbow" => tube(name, vec![[0.0, 0.0, 0.0], [0.0, 0.0, 30.0], [30.0, 0.0, 30.0]], vec![2.0, 2.0, 2.0], s),
        "semicircle" => {
            let r = 20.0;
            let k = 48;
            let points: Vec<[f64; 3]> = (0..=k)
                .map(|i| {
                    let a = PI * i as f64 / k as f64;
                    [r - r * a.cos(), 0.0, r * a.sin()]
                })
                .collect();
            tube(name, points, vec![2.0; k + 1], s)
        }
        "y_tube" => {
            let t = sprout("trunk", None, 30.0, 3.0, 0.0, 0.0).with(vec![
                sprout("left", None, 25.0, 2.5, 40.0, 0.0),
                sprout("right", None, 25.0, 2.5, 40.0, 180.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        "trifurcation" => {
            let t = sprout("trunk", None, 30.0, 3.0, 0.0, 0.0).with(vec![
                sprout("a", None, 25.0, 2.2, 45.0, 0.0),
                sprout("b", None, 25.0, 2.2, 45.0, 120.0),
                sprout("c", None, 25.0, 2.2, 45.0, 240.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        "lb12_cotrunk_ab" => spec_from(name, layout(&lb12_tree(Some(4))), s),
        "lb12_cotrunk_bc" => spec_from(name, layout(&lb12_tree(Some(5))), s),
        "lb12_cotrunk_ac" => spec_from(name, layout(&lb12_tree(Some(6))), s),
        "lb12_trifurcation" => spec_from(name, layout(&lb12_tree(None)), s),
        "lingula_b4a" => {
            let t = sprout("trunk", None, 20.0, 3.0, 0.0, 0.0).with(vec![
                sprout("lingular", None, 16.0, 2.6, 35.0, 0.0).with(vec![
                    sprout("B4a", Some("LB4a"), 14.0, 2.0, 50.0, 90.0),
                    sprout("division", None, 12.0, 2.4, 25.0, 270.0).with(vec![
                        sprout("B4b", Some("LB4b"), 14.0, 2.0, 45.0, 0.0),
                        sprout("B5", Some("LB5_root"), 12.0, 2.2, 40.0, 180.0).with(vec![
                            sprout("B5a", Some("LB5a"), 12.0, 1.8, 40.0, 90.0),
                            sprout("B5b", Some("LB5b"), 12.0, 1.8, 40.0, 270.0),
                        ]),
                    ]),
                ]),
                sprout("upper", None, 14.0, 2.4, 45.0, 180.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        "rmb" => {
            let t = sprout("trunk", None, 20.0, 3.0, 0.0, 0.0).with(vec![
                sprout("RMB", Some("RMB"), 14.0, 2.6, 35.0, 0.0).with(vec![
                    two_sub(Segment::RB4, 40.0, 90.0),
                    two_sub(Segment::RB5, 40.0, 270.0),
                ]),
                sprout("other", None, 16.0, 2.6, 35.0, 180.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        "llb" => {
            let t = sprout("trunk", None, 20.0, 3.0, 0.0, 0.0).with(vec![
                sprout("LLB", Some("LLB"), 14.0, 2.8, 30.0, 0.0).with(vec![
                    sprout("B6", Some("LB6"), 14.0, 2.0, 60.0, 90.0),
                    sprout("basal", None, 14.0, 2.6, 20.0, 270.0).with(vec![
                        sprout("B8", Some("LB8"), 14.0, 2.0, 45.0, 0.0),
                        sprout("B9+10", None, 12.0, 2.4, 35.0, 180.0).with(vec![
                            sprout("B9", Some("LB9"), 12.0, 1.8, 40.0, 90.0),
                            sprout("B10", Some("LB10"), 12.0, 1.8, 40.0, 270.0),
                        ]),
                    ]),
                ]),
                sprout("other", None, 16.0, 2.6, 35.0, 180.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        "lub" => {
            // Upper division (B1+2, B3) and lingular division (B4, B5).
            let t = sprout("trunk", None, 20.0, 3.0, 0.0, 0.0).with(vec![
                sprout("LUB", Some("LUB"), 14.0, 2.8, 30.0, 0.0).with(vec![
                    sprout("upper", None, 14.0, 2.4, 35.0, 90.0).with(vec![
                        sprout("B1+2", Some("LB1+2"), 14.0, 2.0, 40.0, 0.0),
                        sprout("B3", Some("LB3"), 14.0, 2.0, 40.0, 180.0),
                    ]),
                    sprout("lingular", None, 14.0, 2.4, 35.0, 270.0).with(vec![
                        sprout("B4", Some("LB4"), 14.0, 2.0, 40.0, 0.0),
                        sprout("B5", Some("LB5"), 14.0, 2.0, 40.0, 180.0),
                    ]),
                ]),
                sprout("other", None, 16.0, 2.6, 35.0, 180.0),
            ]);
            spec_from(name, layout(&t), s)
        }
        _ => return None,
    };
    Some(spec)
}

fn two_sub(seg: Segment, polar: f64, azimuth: f64) -> Sprout {
    let root = format!("{}_root", seg.name());
    let a = format!("{}a", seg.name());
    let b = format!("{}b", seg.name());
    Sprout {
        name: "segment",
        label: Some(root),
        length: 12.0,
        radius: 2.2,
        polar,
        azimuth,
        children: vec![
            Sprout { label: Some(a), ..sprout("a", None, 12.0, 1.8, 40.0, 0.0) },
            Sprout { label: Some(b), ..sprout("b", None, 12.0, 1.8, 40.0, 180.0) },
        ],
    }
}

/// LB1+2 root with subsegments a, b, c, optionally two of them on a co-trunk.
fn lb12_tree(cotrunk: Option<u8>) -> Sprout {
    let leaf = |code: u8, az: f64| {
        let l = LabelClass::Subsegment(Segment::LB1_2, code).name();
        Sprout { label: Some(l), ..sprout("sub", None, 12.0, 1.8, 45.0, az) }
    };
    let children = match cotrunk {
        None => vec![leaf(1, 0.0), leaf(2, 120.0), leaf(3, 240.0)],
        Some(c) => {
            let members = crate::taxonomy::cotrunk_members(c);
            let single = [1u8, 2, 3].into_iter().find(|x| !members.contains(x)).unwrap();
            let co = LabelClass::Subsegment(Segment::LB1_2, c).name();
            vec![
                Sprout { label: Some(co), ..sprout("cotrunk", None, 12.0, 2.0, 35.0, 0.0) }
                    .with(vec![leaf(members[0], 90.0), leaf(members[1], 270.0)]),
                leaf(single, 180.0),
            ]
        }
    };
    sprout("trunk", None, 20.0, 3.0, 0.0, 0.0).with(vec![
        Sprout { label: Some("LB1+2_root".into()), ..sprout("root", None, 14.0, 2.4, 35.0, 0.0) }.with(children),
        sprout("other", None, 16.0, 2.6, 35.0, 180.0),
    ])
}

/// All library fixtures at the given spacing.
pub fn phantom_library(spacing: f64) -> Vec<PhantomSpec> {
    LIBRARY_NAMES.iter().map(|n| library_spec(n, spacing).expect("library name")).collect()
}

/// Random bifurcating/trifurcating tree at 1 mm spacing. The target branch
/// count is drawn from 2..=30; leaves are split until the count reaches it,
/// so the result has between 3 and 32 branches. Radii stay >= 2 voxels and
/// every branch is at least four radii long.
pub fn random_tree(seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(2..=30usize);
    let spacing = 1.0;
    let mut branches = vec![BranchSpec {
        name: "b0".into(),
        parent: None,
        points: vec![[0.0; 3], [0.0, 0.0, 16.0]],
        radii: vec![3.5, 3.5],
        label: None,
    }];
    let mut dirs = vec![[0.0, 0.0, 1.0]];
    let mut open = vec![0usize];
    let mut attempts = 0;
    while branches.len() < target && !open.is_empty() && attempts < 400 {
        attempts += 1;
        let pick = rng.gen_range(0..open.len());
        let leaf = open[pick];
        let room = 30 - branches.len();
        if room < 2 {
            break;
        }
        let k = if rng.gen_bool(0.2) && room >= 3 { 3 } else { 2 };
        let parent_r = *branches[leaf].radii.last().unwrap();
        let start = *branches[leaf].points.last().unwrap();
        let az0: f64 = rng.gen_range(0.0..2.0 * PI);
        let mut added = Vec::new();
        for c in 0..k {
            let r = (parent_r * rng.gen_range(0.75..0.95)).max(2.0 * spacing);
            let length = (4.0 * r + 2.0).max(rng.gen_range(10.0..18.0));
            let polar = rng.gen_range(30.0f64..55.0).to_radians();
            let az = az0 + 2.0 * PI * c as f64 / k as f64 + rng.gen_range(-0.3..0.3);
            let d = rotate_from(dirs[leaf], polar, az);
            added.push((
                BranchSpec {
                    name: format!("b{}", branches.len() + added.len()),
                    parent: Some(leaf),
                    points: vec![start, add_scaled(start, d, length)],
                    radii: vec![r, r],
                    label: None,
                },
                d,
            ));
        }
        let mut trial = PhantomSpec { name: String::new(), dims: [1; 3], spacing: [spacing; 3], seed, branches: branches.clone() };
        trial.branches.extend(added.iter().map(|(b, _)| b.clone()));
        if trial.check_overlap().is_ok() {
            open.swap_remove(pick);
            for (b, d) in added {
                open.push(branches.len());
                branches.push(b);
                dirs.push(d);
            }
        } else if attempts % 8 == 0 {
            open.swap_remove(pick);
        }
    }
    PhantomSpec { name: format!("random_{seed}"), dims: [1; 3], spacing: [spacing; 3], seed, branches }.fitted(spacing, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edt::distance_transform;

    #[test]
    fn segment_distance_cases() {
        let d = segment_distance([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_distance([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, -1.0, 3.0], [2.0, 1.0, 3.0]);
        assert!((d - 10f64.sqrt()).abs() < 1e-12);
        let d = segment_distance([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.5], [0.0, 1.0, 0.5]);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn library_renders_at_half_millimetre() {
        for spec in phantom_library(0.5) {
            let p = render_phantom(&spec).unwrap_or_else(|e| panic!("{}: {e}", spec.name));
            assert!(p.mask.foreground_count() > 0);
            assert_eq!(p.truth.graph.betti(), (1, 0));
        }
        assert!(LIBRARY_NAMES.contains(&"stenotic_tube"));
    }

    #[test]
    fn straight_tube_edt_max_is_radius() {
        let spec = library_spec("straight_tube", 0.5).unwrap();
        let p = render_phantom(&spec).unwrap();
        let d = distance_transform(&p.mask);
        assert!((d.max() - 3.0).abs() <= 0.5 * 0.5 + 1e-9, "max {}", d.max());
    }

    #[test]
    fn y_truth_generations() {
        let p = render_phantom(&library_spec("y_tube", 0.5).unwrap()).unwrap();
        let g: Vec<u32> = p.truth.graph.branches.iter().map(|b| b.generation).collect();
        assert_eq!(g, vec![1, 2, 2]);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = random_tree(7);
        let a = render_phantom_with(&spec, Exec::Sequential).unwrap();
        let b = render_phantom_with(&spec, Exec::Parallel).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.labels, b.labels);
        assert_eq!(random_tree(7), spec);
    }

    #[test]
    fn overlap_and_bounds_errors() {
        let mut spec = library_spec("y_tube", 0.5).unwrap();
        spec.branches.push(BranchSpec {
            name: "stray".into(),
            parent: Some(1),
            points: vec![spec.branches[1].points[1], spec.branches[2].points[1]],
            radii: vec![2.0, 2.0],
            label: None,
        });
        assert!(matches!(render_phantom(&spec), Err(PhantomError::SpecOverlap(..))));
        let mut spec = library_spec("straight_tube", 0.5).unwrap();
        spec.dims[2] = 10;
        assert_eq!(render_phantom(&spec).unwrap_err(), PhantomError::OutOfBounds(0));
    }

    #[test]
    fn truth_centerlines_are_connected_and_inside() {
        for name in ["semicircle", "trifurcation", "llb"] {
            let p = render_phantom(&library_spec(name, 0.5).unwrap()).unwrap();
            let grid = p.mask.grid;
            for b in &p.truth.graph.branches {
                let chain: Vec<usize> = b.junction.into_iter().chain(b.centerline.iter().copied()).collect();
                assert!(chain.windows(2).all(|w| grid.are_adjacent26(w[0], w[1])), "{name}");
                assert!(b.centerline.iter().all(|&v| p.mask.data[v] == 1));
            }
        }
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = library_spec("lingula_b4a", 0.5).unwrap();
        let back: PhantomSpec = serde_json::from_value(spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }
}
