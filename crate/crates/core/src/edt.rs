//! Exact Euclidean distance transform on anisotropic grids.
//!
//! Separable lower-envelope-of-parabolas transform, one 1-D pass per axis.
//! Each pass weights offsets by that axis's spacing, so the result is the
//! exact centre-to-centre distance in millimetres.
//!
//! The grid exterior counts as background: every line is extended with one
//! virtual background sample on each side, so a foreground voxel touching the
//! border sits one spacing away from the boundary.

use crate::par::{self, Exec};
use crate::volume::{Field, Grid, Volume};

/// Per-voxel distance (mm) to the nearest background voxel centre; zero on background.
pub type DistanceField = Field;

const NONE: u32 = u32::MAX;

pub fn distance_transform(mask: &Volume) -> DistanceField {
    distance_transform_with(mask, Exec::Parallel)
}

/// As [`distance_transform`] with an explicit execution strategy.
pub fn distance_transform_with(mask: &Volume, exec: Exec) -> DistanceField {
    let grid = mask.grid;
    let sq: Vec<f64> =
        mask.data.iter().map(|&v| if v != 0 { f64::INFINITY } else { 0.0 }).collect();
    let mut state = Pass { sq, site: None };
    for axis in 0..3 {
        state = run_pass(&grid, axis, state, true, exec);
    }
    Field { grid, data: state.sq.into_iter().map(f64::sqrt).collect() }
}

/// Squared distances, without the final square root.
pub fn squared_distance_transform(mask: &Volume, exec: Exec) -> Vec<f64> {
    let grid = mask.grid;
    let sq: Vec<f64> =
        mask.data.iter().map(|&v| if v != 0 { f64::INFINITY } else { 0.0 }).collect();
    let mut state = Pass { sq, site: None };
    for axis in 0..3 {
        state = run_pass(&grid, axis, state, true, exec);
    }
    state.sq
}

/// For every voxel, the linear index of the nearest site voxel (Euclidean,
/// spacing-weighted). Returns `None` entries only when there are no sites.
/// No virtual boundary is involved here.
pub fn nearest_site_transform(grid: &Grid, is_site: &[bool], exec: Exec) -> Vec<Option<usize>> {
    assert_eq!(is_site.len(), grid.len());
    let sq = is_site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let site = (0..grid.len()).map(|i| if is_site[i] { i as u32 } else { NONE }).collect();
    let mut state = Pass { sq, site: Some(site) };
    for axis in 0..3 {
        state = run_pass(grid, axis, state, false, exec);
    }
    state
        .site
        .expect("site labels tracked")
        .into_iter()
        .map(|s| (s != NONE).then_some(s as usize))
        .collect()
}

struct Pass {
    sq: Vec<f64>,
    site: Option<Vec<u32>>,
}

/// Linear index of element `k` on line `line` running along `axis`.
fn line_index(grid: &Grid, axis: usize, line: usize, k: usize) -> usize {
    let [nx, ny, _] = grid.dims;
    match axis {
        0 => k + nx * line,
        1 => {
            let (x, z) = (line % nx, line / nx);
            x + nx * (k + ny * z)
        }
        _ => line + nx * ny * k,
    }
}

fn run_pass(grid: &Grid, axis: usize, input: Pass, pad: bool, exec: Exec) -> Pass {
    let n = grid.dims[axis];
    let lines = grid.len() / n;
    let spacing = grid.spacing[axis];
    let track = input.site.is_some();
    let results = par::map_range(exec, lines, |line| {
        let mut f = Vec::with_capacity(n);
        for k in 0..n {
            f.push(input.sq[line_index(grid, axis, line, k)]);
        }
        let mut d = vec![0.0; n];
        let mut arg = vec![0usize; n];
        envelope_1d(&f, spacing, pad, &mut d, &mut arg);
        let labels: Option<Vec<u32>> = input.site.as_ref().map(|site| {
            arg.iter()
                .map(|&q| if q == usize::MAX { NONE } else { site[line_index(grid, axis, line, q)] })
                .collect()
        });
        (d, labels)
    });
    let mut sq = vec![0.0; grid.len()];
    let mut site = track.then(|| vec![NONE; grid.len()]);
    for (line, (d, labels)) in results.into_iter().enumerate() {
        for k in 0..n {
            let idx = line_index(grid, axis, line, k);
            sq[idx] = d[k];
            if let (Some(out), Some(l)) = (site.as_mut(), labels.as_ref()) {
                out[idx] = l[k];
            }
        }
    }
    Pass { sq, site }
}

/// 1-D squared distance transform of sampled function `f` on a line with
/// sample spacing `spacing`: `d[p] = min_q f[q] + ((p - q) * spacing)^2`.
///
/// With `pad`, two extra zero-valued samples sit at positions -1 and n.
/// `arg[p]` receives the minimizing sample, or `usize::MAX` for a virtual one.
pub(crate) fn envelope_1d(f: &[f64], spacing: f64, pad: bool, d: &mut [f64], arg: &mut [usize]) {
    let n = f.len();
    // Sites in increasing position: (position in mm, value, sample index).
    let mut sites: Vec<(f64, f64, usize)> = Vec::with_capacity(n + 2);
    if pad {
        sites.push((-spacing, 0.0, usize::MAX));
    }
    for (q, &v) in f.iter().enumerate() {
        if v.is_finite() {
            sites.push((q as f64 * spacing, v, q));
        }
    }
    if pad {
        sites.push((n as f64 * spacing, 0.0, usize::MAX));
    }
    if sites.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        arg.iter_mut().for_each(|a| *a = usize::MAX);
        return;
    }

    // Lower envelope: hull[i] is a site, bounds[i]..bounds[i+1] its region.
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    hull.push(0);
    bounds.push(f64::NEG_INFINITY);
    bounds.push(f64::INFINITY);
    let intersect = |a: (f64, f64, usize), b: (f64, f64, usize)| {
        ((b.1 + b.0 * b.0) - (a.1 + a.0 * a.0)) / (2.0 * (b.0 - a.0))
    };
    for s in 1..sites.len() {
        // bounds[0] is -inf, so the bottom site is never popped.
        let mut x = intersect(sites[*hull.last().unwrap()], sites[s]);
        while x <= bounds[hull.len() - 1] {
            hull.pop();
            bounds.pop();
            x = intersect(sites[*hull.last().unwrap()], sites[s]);
        }
        *bounds.last_mut().unwrap() = x;
        hull.push(s);
        bounds.push(f64::INFINITY);
    }

    let mut h = 0;
    for p in 0..n {
        let x = p as f64 * spacing;
        while bounds[h + 1] < x {
            h += 1;
        }
        let (pos, val, idx) = sites[hull[h]];
        let dx = x - pos;
        d[p] = val + dx * dx;
        arg[p] = idx;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Brute force over every background voxel of the one-voxel padded grid.
    pub(crate) fn brute_force(mask: &Volume) -> Vec<f64> {
        let g = mask.grid;
        let [nx, ny, nz] = g.dims;
        let mut bg = Vec::new();
        for z in -1..=nz as i64 {
            for y in -1..=ny as i64 {
                for x in -1..=nx as i64 {
                    let inside = x >= 0 && y >= 0 && z >= 0 && (x as usize) < nx && (y as usize) < ny && (z as usize) < nz;
                    if !inside || mask.data[g.index(x as usize, y as usize, z as usize)] == 0 {
                        bg.push([x as f64 * g.spacing[0], y as f64 * g.spacing[1], z as f64 * g.spacing[2]]);
                    }
                }
            }
        }
        (0..g.len())
            .map(|i| {
                if mask.data[i] == 0 {
                    return 0.0;
                }
                let p = g.position(i);
                bg.iter()
                    .map(|b| crate::volume::distance(p, *b))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn random_mask(seed: u64, dims: [usize; 3], spacing: [f64; 3], density: f64) -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new(dims, spacing).unwrap();
        Volume::mask_from_fn(g, |_| rng.gen_bool(density))
    }

    #[test]
    fn all_background_is_zero() {
        let g = Grid::new([4, 3, 2], [1.0; 3]).unwrap();
        let d = distance_transform(&Volume::zeros(g, VolumeKind::Binary));
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_voxel_is_one() {
        let g = Grid::new([3, 3, 3], [1.0; 3]).unwrap();
        let c = g.index(1, 1, 1);
        let d = distance_transform(&Volume::mask_from_fn(g, |i| i == c));
        assert_eq!(d.data[c], 1.0);
    }

    #[test]
    fn all_foreground_measures_to_boundary() {
        let g = Grid::new([5, 1, 1], [2.0, 1.0, 1.0]).unwrap();
        let d = distance_transform(&Volume::mask_from_fn(g, |_| true));
        // y and z exteriors are one spacing away everywhere.
        assert_eq!(d.data, vec![1.0; 5]);
        let g = Grid::new([5, 9, 9], [1.0, 1.0, 1.0]).unwrap();
        let d = distance_transform(&Volume::mask_from_fn(g, |_| true));
        assert_eq!(d.data[g.index(2, 4, 4)], 3.0);
    }

    #[test]
    fn matches_brute_force_anisotropic() {
        for seed in 0..6 {
            let m = random_mask(seed, [9, 7, 6], [0.5, 0.8, 1.3], 0.8);
            let fast = distance_transform(&m);
            let slow = brute_force(&m);
            for (a, b) in fast.data.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let m = random_mask(7, [12, 10, 8], [0.7, 0.7, 1.1], 0.85);
        assert_eq!(
            distance_transform_with(&m, Exec::Sequential),
            distance_transform_with(&m, Exec::Parallel)
        );
    }

    #[test]
    fn nearest_site_matches_brute_force() {
        let g = Grid::new([8, 6, 5], [0.6, 1.0, 1.4]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sites: Vec<bool> = (0..g.len()).map(|_| rng.gen_bool(0.05)).collect();
        let nearest = nearest_site_transform(&g, &sites, Exec::Parallel);
        let site_list: Vec<usize> = (0..g.len()).filter(|&i| sites[i]).collect();
        for i in 0..g.len() {
            let got = nearest[i].unwrap();
            assert!(sites[got]);
            let best = site_list
                .iter()
                .map(|&s| crate::volume::distance(g.position(i), g.position(s)))
                .fold(f64::INFINITY, f64::min);
            let d = crate::volume::distance(g.position(i), g.position(got));
            assert!((d - best).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn lipschitz_per_axis(seed in 0u64..1000, sx in 0.3f64..2.0, sy in 0.3f64..2.0, sz in 0.3f64..2.0) {
            let m = random_mask(seed, [7, 6, 5], [sx, sy, sz], 0.7);
            let d = distance_transform(&m);
            let g = m.grid;
            for i in 0..g.len() {
                let [x, y, z] = g.coords(i);
                let steps = [(x + 1 < 7, g.index(x + 1, y, z), sx), (y + 1 < 6, g.index(x, y + 1, z), sy), (z + 1 < 5, g.index(x, y, z + 1), sz)];
                for (ok, j, s) in steps {
                    if ok && m.data[i] != 0 && m.data[j] != 0 {
                        prop_assert!((d.data[i] - d.data[j]).abs() <= s + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn doubling_spacing_doubles_distances(seed in 0u64..1000) {
            let m = random_mask(seed, [6, 6, 6], [0.5, 0.75, 1.0], 0.75);
            let mut m2 = m.clone();
            m2.grid.spacing = [1.0, 1.5, 2.0];
            let a = distance_transform(&m);
            let b = distance_transform(&m2);
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((2.0 * x - y).abs() <= 1e-9);
            }
        }
    }
}
