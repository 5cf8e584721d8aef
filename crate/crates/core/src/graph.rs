//! Branch-level airway graph built on top of a skeleton tree.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edt::{nearest_site_transform, DistanceField};
use crate::par::{self, Exec};
use crate::skeleton::SkeletonTree;
use crate::union_find::UnionFind;
use crate::volume::{distance, Grid, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("tree has {0} roots, expected exactly one")]
    RootCount(usize),
    #[error("parent links contain a cycle or dangling id")]
    NotATree,
}

/// Parent/child structure of a rooted tree with all-pairs LCA and a reflexive
/// descendant mask (`is_descendant(a, a)` is true).
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub parents: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    pub root: usize,
    /// Root has generation 1.
    pub generation: Vec<u32>,
    /// Breadth-first order from the root.
    pub order: Vec<usize>,
    lca: Vec<u32>,
    desc: Vec<bool>,
}

impl Topology {
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self, GraphError> {
        Self::from_parents_with(parents, Exec::Parallel)
    }

    pub fn from_parents_with(parents: &[Option<usize>], exec: Exec) -> Result<Self, GraphError> {
        let n = parents.len();
        let roots: Vec<usize> = (0..n).filter(|&i| parents[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(GraphError::RootCount(roots.len()));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(GraphError::NotATree);
                }
                children[p].push(i);
            }
        }
        let mut generation = vec![0u32; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        generation[root] = 1;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &c in &children[v] {
                generation[c] = generation[v] + 1;
                queue.push_back(c);
            }
        }
        if order.len() != n {
            return Err(GraphError::NotATree);
        }
        let (lca, desc) = lca_and_descendants(parents, &children, &order, &generation, exec);
        Ok(Self { parents: parents.to_vec(), children, root, generation, order, lca, desc })
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn lca(&self, a: usize, b: usize) -> usize {
        self.lca[a * self.len() + b] as usize
    }

    /// True iff `anc` is `node` or one of its ancestors.
    pub fn is_descendant(&self, anc: usize, node: usize) -> bool {
        self.desc[anc * self.len() + node]
    }

    /// Nodes in the subtree rooted at `anc`, including `anc`.
    pub fn descendants(&self, anc: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.is_descendant(anc, j))
    }

    /// Edge count on the path between `a` and `b`.
    pub fn hops(&self, a: usize, b: usize) -> usize {
        let l = self.lca(a, b);
        (self.generation[a] + self.generation[b] - 2 * self.generation[l]) as usize
    }

    /// Nodes from `anc` down to `node`, both included. `anc` must be an ancestor.
    pub fn path_down(&self, anc: usize, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while cur != anc {
            cur = self.parents[cur].expect("anc is an ancestor of node");
            path.push(cur);
        }
        path.reverse();
        path
    }

    pub fn lca_matrix(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.lca(i, j)).collect()).collect()
    }

    pub fn descendant_matrix(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.is_descendant(i, j)).collect()).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.len()).filter_map(|i| self.parents[i].map(|p| (p, i))).collect()
    }
}

/// Row `i` of the LCA matrix follows from its parent's row: `lca(i, j) = i`
/// when `j` lies in the subtree of `i`, otherwise `lca(parent(i), j)`. Rows are
/// filled level by level so each level can run in parallel.
fn lca_and_descendants(
    parents: &[Option<usize>],
    children: &[Vec<usize>],
    order: &[usize],
    generation: &[u32],
    exec: Exec,
) -> (Vec<u32>, Vec<bool>) {
    let n = parents.len();
    let mut desc = vec![false; n * n];
    // Subtree membership from Euler-tour entry/exit times.
    let mut tin = vec![0usize; n];
    let mut tout = vec![0usize; n];
    {
        let mut t = 0;
        let mut stack = vec![(order[0], 0usize)];
        while let Some((v, k)) = stack.pop() {
            if k == 0 {
                tin[v] = t;
                t += 1;
            }
            if k < children[v].len() {
                stack.push((v, k + 1));
                stack.push((children[v][k], 0));
            } else {
                tout[v] = t;
            }
        }
    }
    par::for_each_chunk_mut(exec, &mut desc, n.max(1), |a, row| {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = tin[a] <= tin[j] && tin[j] < tout[a];
        }
    });

    let mut lca = vec![0u32; n * n];
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for &v in order {
        let g = generation[v] as usize - 1;
        if levels.len() <= g {
            levels.push(Vec::new());
        }
        levels[g].push(v);
    }
    for level in &levels {
        let rows = par::map(exec, level, |&i| {
            (0..n)
                .map(|j| match parents[i] {
                    _ if desc[i * n + j] => i as u32,
                    Some(p) => lca[p * n + j],
                    None => i as u32,
                })
                .collect::<Vec<u32>>()
        });
        for (&i, row) in level.iter().zip(rows) {
            lca[i * n..(i + 1) * n].copy_from_slice(&row);
        }
    }
    (lca, desc)
}

/// (β0, β1) of an undirected graph: component count and cycle rank.
pub fn betti_numbers(nodes: usize, edges: &[(usize, usize)]) -> (usize, i64) {
    let mut uf = UnionFind::new(nodes);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let b0 = uf.count();
    (b0, edges.len() as i64 - nodes as i64 + b0 as i64)
}

/// Mean and population standard deviation of branch counts.
pub fn mean_branch_count(counts: &[usize]) -> Option<(f64, f64)> {
    if counts.is_empty() {
        return None;
    }
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchNode {
    pub id: usize,
    /// Linear voxel indices, proximal to distal.
    pub centerline: Vec<usize>,
    /// Distance values along the centerline (mm).
    pub radii: Vec<f64>,
    /// Junction voxel this branch leaves from; none for the root branch.
    pub junction: Option<usize>,
    /// Mask voxels nearer to this branch's centerline than to any other.
    pub voxels: Vec<usize>,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub generation: u32,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub mean_radius: f64,
    /// Centerline length in mm, including the step from the junction.
    pub length: f64,
}

impl BranchNode {
    /// Geometry-free branch, for hand-built fixtures.
    pub fn bare(id: usize) -> Self {
        Self {
            id,
            centerline: Vec::new(),
            radii: Vec::new(),
            junction: None,
            voxels: Vec::new(),
            start: [0.0; 3],
            end: [0.0; 3],
            generation: 1,
            parent: None,
            children: Vec::new(),
            mean_radius: 0.0,
            length: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AirwayGraph {
    pub grid: Grid,
    pub branches: Vec<BranchNode>,
    pub topology: Topology,
    /// Physical bounding-box extent of the skeletonized foreground (mm).
    pub extent: [f64; 3],
}

impl AirwayGraph {
    /// Assembles a graph from branches whose `parent` fields define the tree;
    /// generations and children are recomputed.
    pub fn from_branches(
        grid: Grid,
        mut branches: Vec<BranchNode>,
        extent: [f64; 3],
    ) -> Result<Self, GraphError> {
        let parents: Vec<Option<usize>> = branches.iter().map(|b| b.parent).collect();
        let topology = Topology::from_parents(&parents)?;
        for (i, b) in branches.iter_mut().enumerate() {
            b.id = i;
            b.generation = topology.generation[i];
            b.children = topology.children[i].clone();
        }
        Ok(Self { grid, branches, topology, extent })
    }

    /// Geometry-free graph from parent links.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self, GraphError> {
        let branches = parents
            .iter()
            .enumerate()
            .map(|(i, &p)| BranchNode { parent: p, ..BranchNode::bare(i) })
            .collect();
        let grid = Grid { dims: [1, 1, 1], spacing: [1.0; 3] };
        Self::from_branches(grid, branches, [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn root(&self) -> usize {
        self.topology.root
    }

    pub fn betti(&self) -> (usize, i64) {
        betti_numbers(self.len(), &self.topology.edges())
    }

    /// Centerline voxels of every branch.
    pub fn centerline_voxels(&self) -> impl Iterator<Item = usize> + '_ {
        self.branches.iter().flat_map(|b| b.centerline.iter().copied())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (b0, b1) = self.betti();
        serde_json::json!({
            "schema": format!("bronchograph/graph/v{}", crate::SCHEMA_VERSION),
            "dims": self.grid.dims,
            "spacing": self.grid.spacing,
            "extent_mm": self.extent,
            "root": self.root(),
            "metadata": { "beta0": b0, "beta1": b1, "branch_count": self.len() },
            "branches": self.branches,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Doc {
            dims: [usize; 3],
            spacing: [f64; 3],
            extent_mm: [f64; 3],
            branches: Vec<BranchNode>,
        }
        let doc: Doc = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
        let grid = Grid::new(doc.dims, doc.spacing).map_err(|e| e.to_string())?;
        Self::from_branches(grid, doc.branches, doc.extent_mm).map_err(|e| e.to_string())
    }
}

/// Splits the skeleton into maximal junction-free paths. A junction is a
/// skeleton node with at least two children; each child starts a new branch.
/// Foreground voxels of the skeletonized component are assigned to the
/// branch owning their nearest skeleton voxel.
pub fn partition_branches(skel: &SkeletonTree, mask: &Volume, edt: &DistanceField) -> AirwayGraph {
    partition_branches_with(skel, mask, edt, Exec::Parallel)
}

pub fn partition_branches_with(
    skel: &SkeletonTree,
    mask: &Volume,
    _edt: &DistanceField,
    exec: Exec,
) -> AirwayGraph {
    let grid = skel.grid;
    let children = skel.children();
    let mut branches: Vec<BranchNode> = Vec::new();
    let mut branch_of_node = vec![usize::MAX; skel.len()];
    // (first skeleton node, parent branch)
    let mut stack: Vec<(usize, Option<usize>)> = vec![(skel.root, None)];
    while let Some((first, parent)) = stack.pop() {
        let id = branches.len();
        let mut nodes = vec![first];
        let mut cur = first;
        while children[cur].len() == 1 {
            cur = children[cur][0];
            nodes.push(cur);
        }
        for &n in &nodes {
            branch_of_node[n] = id;
        }
        let junction = skel.nodes[first].parent.map(|p| skel.nodes[p].voxel);
        let centerline: Vec<usize> = nodes.iter().map(|&n| skel.nodes[n].voxel).collect();
        let radii: Vec<f64> = nodes.iter().map(|&n| skel.nodes[n].radius_mm).collect();
        let mut length = 0.0;
        if let Some(j) = junction {
            length += grid.step_length(j, centerline[0]);
        }
        for w in centerline.windows(2) {
            length += grid.step_length(w[0], w[1]);
        }
        let start = grid.position(junction.unwrap_or(centerline[0]));
        let end = grid.position(*centerline.last().unwrap());
        let mean_radius = radii.iter().sum::<f64>() / radii.len() as f64;
        branches.push(BranchNode {
            id,
            centerline,
            radii,
            junction,
            voxels: Vec::new(),
            start,
            end,
            generation: 1,
            parent,
            children: Vec::new(),
            mean_radius,
            length,
        });
        // Reverse push keeps children in increasing node order.
        for &c in children[cur].iter().rev() {
            stack.push((c, Some(id)));
        }
    }

    let mut is_site = vec![false; grid.len()];
    let mut site_branch = vec![usize::MAX; grid.len()];
    for n in &skel.nodes {
        is_site[n.voxel] = true;
        site_branch[n.voxel] = branch_of_node[n.id];
    }
    let nearest = nearest_site_transform(&grid, &is_site, exec);
    let component = component_of(mask, skel.nodes[skel.root].voxel);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &v in &component {
        let b = site_branch[nearest[v].expect("skeleton has sites")];
        branches[b].voxels.push(v);
        let p = grid.position(v);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = [0, 1, 2].map(|a| hi[a] - lo[a] + grid.spacing[a]);
    AirwayGraph::from_branches(grid, branches, extent).expect("skeleton partition is a tree")
}

/// Sorted 26-connected foreground component containing `seed`.
pub fn component_of(mask: &Volume, seed: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.data.len()];
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

/// Chord length |E - S| of a branch.
pub fn chord(b: &BranchNode) -> f64 {
    distance(b.start, b.end)
}
