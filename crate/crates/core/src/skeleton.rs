//! Minimum path-cost tree skeletonization.
//!
//! A Dijkstra shortest-path tree is grown over the foreground component that
//! contains the root, with each step costing its physical length times a
//! medialness penalty `exp(-gamma * edt(target) / edt_max)`. Skeleton paths
//! are then accepted one at a time: the uncovered voxel with the largest
//! path cost beyond the current skeleton becomes a candidate leaf, its
//! shortest path is traced back to the skeleton, the tail inside the
//! candidate's end ball is trimmed off, and short additions are rejected as
//! spurs. A voxel counts as covered once it lies inside the ball of radius
//! `max(coverage_factor * edt(p), one voxel)` around some skeleton voxel `p`.
//!
//! Because every accepted path hangs off exactly one existing node, the
//! output is a single rooted tree: one component, no cycles.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edt::DistanceField;
use crate::volume::{distance, Grid, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum SkelError {
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("root voxel {0} is not foreground")]
    RootNotForeground(usize),
    #[error("mask and distance field have different grids")]
    GridMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkelParams {
    /// Sharpness of the medialness penalty.
    pub gamma: f64,
    /// Coverage ball radius as a multiple of the local distance value.
    pub coverage_factor: f64,
    /// Candidate leaves adding less than `max(spur_factor * edt(leaf), spur_min_voxels voxels)`
    /// of new centerline are rejected.
    pub spur_factor: f64,
    pub spur_min_voxels: f64,
}

impl Default for SkelParams {
    fn default() -> Self {
        Self { gamma: 6.0, coverage_factor: 2.0, spur_factor: 2.0, spur_min_voxels: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonNode {
    pub id: usize,
    pub xyz_voxel: [usize; 3],
    pub xyz_mm: [f64; 3],
    pub radius_mm: f64,
    pub parent: Option<usize>,
    /// Linear voxel index.
    #[serde(skip)]
    pub voxel: usize,
}

/// Rooted centerline tree. Node ids are positions in `nodes`; parents
/// always precede their children.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTree {
    pub grid: Grid,
    pub nodes: Vec<SkeletonNode>,
    pub root: usize,
    /// Foreground components other than the skeletonized one.
    pub stray_components: usize,
}

impl SkeletonTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            if let Some(p) = n.parent {
                ch[p].push(n.id);
            }
        }
        ch
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.children()
            .iter()
            .enumerate()
            .filter(|(i, c)| c.is_empty() && (*i != self.root || self.nodes.len() == 1))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().filter_map(|n| n.parent.map(|p| (p, n.id))).collect()
    }

    pub fn betti(&self) -> (usize, i64) {
        crate::graph::betti_numbers(self.nodes.len(), &self.edges())
    }

    pub fn voxels(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.voxel).collect()
    }

    /// Binary volume of skeleton voxels.
    pub fn to_mask(&self) -> Volume {
        let mut v = Volume::zeros(self.grid, crate::volume::VolumeKind::Binary);
        for n in &self.nodes {
            v.data[n.voxel] = 1;
        }
        v
    }

    /// Voxel-level parity check: skeleton voxels with at least three, and with
    /// more than three, skeleton voxels among their 26 neighbours.
    pub fn voxel_branch_points(&self) -> (usize, usize) {
        let mask = self.to_mask();
        let mut ge3 = 0;
        let mut gt3 = 0;
        for n in &self.nodes {
            let k = self.grid.neighbors26(n.voxel).filter(|&j| mask.data[j] != 0).count();
            ge3 += (k >= 3) as usize;
            gt3 += (k > 3) as usize;
        }
        (ge3, gt3)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (b0, b1) = self.betti();
        serde_json::json!({
            "schema": format!("bronchograph/skeleton/v{}", crate::SCHEMA_VERSION),
            "dims": self.grid.dims,
            "spacing": self.grid.spacing,
            "root": self.root,
            "beta0": b0,
            "beta1": b1,
            "stray_components": self.stray_components,
            "nodes": self.nodes,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Doc {
            dims: [usize; 3],
            spacing: [f64; 3],
            root: usize,
            #[serde(default)]
            stray_components: usize,
            nodes: Vec<SkeletonNode>,
        }
        let doc: Doc = serde_json::from_value(value.clone())?;
        let grid = Grid { dims: doc.dims, spacing: doc.spacing };
        let nodes = doc
            .nodes
            .into_iter()
            .map(|mut n| {
                let [x, y, z] = n.xyz_voxel;
                n.voxel = grid.index(x, y, z);
                n
            })
            .collect();
        Ok(Self { grid, nodes, root: doc.root, stray_components: doc.stray_components })
    }
}

/// Picks the tree root: the hint when given, otherwise the foreground voxel
/// with the largest distance value inside the top tenth of occupied z-slices
/// (lowest z indices). Distance values within half the smallest spacing of
/// the maximum count as ties, resolved by smallest linear index.
pub fn select_root(
    mask: &Volume,
    edt: &DistanceField,
    hint: Option<usize>,
) -> Result<usize, SkelError> {
    if mask.grid != edt.grid {
        return Err(SkelError::GridMismatch);
    }
    if let Some(h) = hint {
        return if h < mask.data.len() && mask.is_foreground(h) {
            Ok(h)
        } else {
            Err(SkelError::RootNotForeground(h))
        };
    }
    let [nx, ny, nz] = mask.grid.dims;
    let slice = nx * ny;
    let occupied: Vec<usize> =
        (0..nz).filter(|&z| mask.data[z * slice..(z + 1) * slice].iter().any(|&v| v != 0)).collect();
    if occupied.is_empty() {
        return Err(SkelError::EmptyMask);
    }
    let take = occupied.len().div_ceil(10);
    let candidates: Vec<usize> = occupied[..take]
        .iter()
        .flat_map(|&z| (z * slice..(z + 1) * slice).filter(|&i| mask.data[i] != 0))
        .collect();
    let best = candidates.iter().map(|&i| edt.data[i]).fold(f64::NEG_INFINITY, f64::max);
    let tol = 0.5 * mask.grid.min_spacing();
    Ok(*candidates.iter().find(|&&i| edt.data[i] >= best - tol).expect("nonempty candidates"))
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    cost: f64,
    local: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (cost, index).
        other.cost.total_cmp(&self.cost).then_with(|| other.local.cmp(&self.local))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NONE: u32 = u32::MAX;

/// Foreground component of `seed` (26-connectivity) as sorted linear indices.
fn component(mask: &Volume, seed: usize, seen: &mut [bool]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut queue = VecDeque::from([seed]);
    seen[seed] = true;
    while let Some(v) = queue.pop_front() {
        out.push(v);
        for w in mask.grid.neighbors26(v) {
            if !seen[w] && mask.data[w] != 0 {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    out.sort_unstable();
    out
}

struct Workspace<'a> {
    grid: Grid,
    edt: &'a [f64],
    voxels: Vec<usize>,
    local: Vec<u32>,
    covered: Vec<bool>,
    unit: f64,
    coverage_factor: f64,
}

impl Workspace<'_> {
    fn ball_radius(&self, voxel: usize) -> f64 {
        (self.coverage_factor * self.edt[voxel]).max(self.unit)
    }

    /// Marks every component voxel inside the coverage ball of `voxel`.
    fn cover_ball(&mut self, voxel: usize) {
        let r = self.ball_radius(voxel);
        let centre = self.grid.position(voxel);
        let c = self.grid.coords(voxel);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let k = (r / self.grid.spacing[a]).floor() as usize;
            lo[a] = c[a].saturating_sub(k);
            hi[a] = (c[a] + k).min(self.grid.dims[a] - 1);
        }
        let r2 = r * r + 1e-9;
        for z in lo[2]..=hi[2] {
            let dz = z as f64 * self.grid.spacing[2] - centre[2];
            for y in lo[1]..=hi[1] {
                let dy = y as f64 * self.grid.spacing[1] - centre[1];
                let rem = r2 - dz * dz - dy * dy;
                if rem < 0.0 {
                    continue;
                }
                for x in lo[0]..=hi[0] {
                    let dx = x as f64 * self.grid.spacing[0] - centre[0];
                    if dx * dx <= rem {
                        let l = self.local[self.grid.index(x, y, z)];
                        if l != NONE {
                            self.covered[l as usize] = true;
                        }
                    }
                }
            }
        }
    }
}

pub fn extract_skeleton(
    mask: &Volume,
    edt: &DistanceField,
    root: usize,
    params: &SkelParams,
) -> Result<SkeletonTree, SkelError> {
    if mask.grid != edt.grid {
        return Err(SkelError::GridMismatch);
    }
    let grid = mask.grid;
    if mask.foreground_count() == 0 {
        return Err(SkelError::EmptyMask);
    }
    if root >= grid.len() || !mask.is_foreground(root) {
        return Err(SkelError::RootNotForeground(root));
    }

    let mut seen = vec![false; grid.len()];
    let voxels = component(mask, root, &mut seen);
    let stray_components = count_other_components(mask, &mut seen);
    if stray_components > 0 {
        log::warn!("{stray_components} foreground component(s) not connected to the root were ignored");
    }

    let mut local = vec![NONE; grid.len()];
    for (i, &v) in voxels.iter().enumerate() {
        local[v] = i as u32;
    }
    let n = voxels.len();
    let edt_max = voxels.iter().map(|&v| edt.data[v]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let (dist, pred, order) =
        shortest_path_tree(&grid, &voxels, &local, &edt.data, local[root], params.gamma, edt_max);

    let mut ws = Workspace {
        grid,
        edt: &edt.data,
        voxels,
        local,
        covered: vec![false; n],
        unit: grid.max_spacing(),
        coverage_factor: params.coverage_factor,
    };

    // Skeleton node id per component voxel.
    let mut node_of: Vec<u32> = vec![NONE; n];
    let mut nodes: Vec<(usize, Option<usize>)> = Vec::new();
    let root_local = ws.local[root] as usize;
    node_of[root_local] = 0;
    nodes.push((root, None));
    ws.cover_ball(root);

    let trim_tol = 0.5 * ws.unit;
    let mut anchor = vec![0u32; n];
    loop {
        // Nearest skeleton ancestor along the shortest-path tree.
        for &v in &order {
            anchor[v as usize] =
                if node_of[v as usize] != NONE { v } else { anchor[pred[v as usize] as usize] };
        }
        let mut best: Option<(f64, usize)> = None;
        for v in 0..n {
            if ws.covered[v] {
                continue;
            }
            let c = dist[v] - dist[anchor[v] as usize];
            if best.is_none_or(|(bc, _)| c > bc) {
                best = Some((c, v));
            }
        }
        let Some((_, tip)) = best else { break };

        // New portion of the path, ordered from the skeleton outward.
        let mut path = Vec::new();
        let mut cur = tip;
        while node_of[cur] == NONE {
            path.push(cur);
            cur = pred[cur] as usize;
        }
        path.reverse();
        let attach = cur;

        // Trim the tail lying inside the end ball: keep up to the first node
        // (from the skeleton side) whose ball reaches the tip.
        let tip_pos = grid.position(ws.voxels[tip]);
        let end = path
            .iter()
            .position(|&l| {
                let vox = ws.voxels[l];
                distance(grid.position(vox), tip_pos) <= edt.data[vox] + trim_tol
            })
            .unwrap_or(path.len() - 1);
        let kept = &path[..=end];
        let leaf_vox = ws.voxels[kept[end]];
        let mut added = grid.step_length(ws.voxels[attach], ws.voxels[kept[0]]);
        for w in kept.windows(2) {
            added += grid.step_length(ws.voxels[w[0]], ws.voxels[w[1]]);
        }
        let threshold = (params.spur_factor * edt.data[leaf_vox]).max(params.spur_min_voxels * ws.unit);
        if added < threshold {
            for &l in &path {
                ws.cover_ball(ws.voxels[l]);
            }
            ws.covered[tip] = true;
            continue;
        }
        let mut parent = node_of[attach] as usize;
        for &l in kept {
            let id = nodes.len();
            nodes.push((ws.voxels[l], Some(parent)));
            node_of[l] = id as u32;
            parent = id;
            ws.cover_ball(ws.voxels[l]);
        }
        ws.covered[tip] = true;
    }

    let mut voxel_of: Vec<usize> = nodes.iter().map(|n| n.0).collect();
    let parents: Vec<Option<usize>> = nodes.iter().map(|n| n.1).collect();
    recenter(&grid, &edt.data, &ws.local, params.coverage_factor, ws.unit, &mut voxel_of, &parents);

    let nodes = voxel_of
        .iter()
        .zip(&parents)
        .enumerate()
        .map(|(id, (&v, &parent))| SkeletonNode {
            id,
            xyz_voxel: grid.coords(v),
            xyz_mm: grid.position(v),
            radius_mm: edt.data[v],
            parent,
            voxel: v,
        })
        .collect();
    Ok(SkeletonTree { grid, nodes, root: 0, stray_components })
}

fn count_other_components(mask: &Volume, seen: &mut [bool]) -> usize {
    let mut count = 0;
    for i in 0..mask.data.len() {
        if mask.data[i] != 0 && !seen[i] {
            component(mask, i, seen);
            count += 1;
        }
    }
    count
}

/// Dijkstra over component voxels. Returns cost, predecessor and settle order
/// (all indexed by component-local ids).
fn shortest_path_tree(
    grid: &Grid,
    voxels: &[usize],
    local: &[u32],
    edt: &[f64],
    source: u32,
    gamma: f64,
    edt_max: f64,
) -> (Vec<f64>, Vec<u32>, Vec<u32>) {
    let n = voxels.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![NONE; n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    dist[source as usize] = 0.0;
    pred[source as usize] = source;
    heap.push(HeapItem { cost: 0.0, local: source });
    while let Some(HeapItem { cost, local: u }) = heap.pop() {
        let ui = u as usize;
        if done[ui] {
            continue;
        }
        done[ui] = true;
        order.push(u);
        let uv = voxels[ui];
        for w in grid.neighbors26(uv) {
            let lw = local[w];
            if lw == NONE || done[lw as usize] {
                continue;
            }
            let step = grid.step_length(uv, w) * (-gamma * edt[w] / edt_max).exp();
            let c = cost + step;
            if c < dist[lw as usize] {
                dist[lw as usize] = c;
                pred[lw as usize] = u;
                heap.push(HeapItem { cost: c, local: lw });
            }
        }
    }
    (dist, pred, order)
}

/// Steepest-ascent re-centering of interior path nodes (exactly one child).
/// A move is taken only if the node stays 26-adjacent to its parent and
/// child, lands on an unused component voxel, and the new coverage ball
/// contains the old one, so coverage can only grow.
fn recenter(
    grid: &Grid,
    edt: &[f64],
    local: &[u32],
    coverage_factor: f64,
    unit: f64,
    voxel_of: &mut [usize],
    parents: &[Option<usize>],
) {
    let n = voxel_of.len();
    let mut children = vec![Vec::new(); n];
    for (id, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(id);
        }
    }
    let ball = |v: usize| (coverage_factor * edt[v]).max(unit);
    let mut occupied: std::collections::HashSet<usize> = voxel_of.iter().copied().collect();
    for _ in 0..16 {
        let mut moved = false;
        for id in 0..n {
            let Some(p) = parents[id] else { continue };
            if children[id].len() != 1 {
                continue;
            }
            let c = children[id][0];
            let cur = voxel_of[id];
            let mut best = cur;
            for w in grid.neighbors26(cur) {
                if local[w] == NONE || occupied.contains(&w) || edt[w] <= edt[best] {
                    continue;
                }
                if !grid.are_adjacent26(w, voxel_of[p]) || !grid.are_adjacent26(w, voxel_of[c]) {
                    continue;
                }
                if grid.step_length(cur, w) + ball(cur) > ball(w) + 1e-12 {
                    continue;
                }
                best = w;
            }
            if best != cur {
                occupied.remove(&cur);
                occupied.insert(best);
                voxel_of[id] = best;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Component voxels outside every skeleton coverage ball.
pub fn uncovered_voxels(
    tree: &SkeletonTree,
    mask: &Volume,
    edt: &DistanceField,
    params: &SkelParams,
) -> Vec<usize> {
    let grid = mask.grid;
    let mut seen = vec![false; grid.len()];
    let voxels = component(mask, tree.nodes[tree.root].voxel, &mut seen);
    let mut local = vec![NONE; grid.len()];
    for (i, &v) in voxels.iter().enumerate() {
        local[v] = i as u32;
    }
    let n = voxels.len();
    let mut ws = Workspace {
        grid,
        edt: &edt.data,
        voxels,
        local,
        covered: vec![false; n],
        unit: grid.max_spacing(),
        coverage_factor: params.coverage_factor,
    };
    for node in &tree.nodes {
        ws.cover_ball(node.voxel);
    }
    (0..n).filter(|&i| !ws.covered[i]).map(|i| ws.voxels[i]).collect()
}
