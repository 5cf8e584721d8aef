use bronchograph::edt::distance_transform;
use bronchograph::graph::partition_branches;
use bronchograph::phantom::{library_spec, random_tree, render_phantom, Phantom, LIBRARY_NAMES};
use bronchograph::signatures::{branch_ectasia, branch_stenosis, branch_tortuosity};
use bronchograph::skeleton::{extract_skeleton, select_root, uncovered_voxels, SkelParams};
use bronchograph::{AirwayGraph, SkeletonTree};

fn run(name: &str, spacing: f64) -> (Phantom, SkeletonTree, AirwayGraph) {
    let p = render_phantom(&library_spec(name, spacing).unwrap()).unwrap();
    let edt = distance_transform(&p.mask);
    let root = select_root(&p.mask, &edt, None).unwrap();
    let t = extract_skeleton(&p.mask, &edt, root, &SkelParams::default()).unwrap();
    let g = partition_branches(&t, &p.mask, &edt);
    (p, t, g)
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn library_skeletons_are_trees_covering_the_mask() {
    for name in LIBRARY_NAMES {
        let (p, t, _) = run(name, 0.5);
        let truth_leaves = p.truth.graph.branches.iter().filter(|b| b.children.is_empty()).count();
        assert_eq!(t.betti(), (1, 0), "{name}");
        assert_eq!(t.leaves().len(), truth_leaves, "{name}");
        let edt = distance_transform(&p.mask);
        assert!(uncovered_voxels(&t, &p.mask, &edt, &SkelParams::default()).is_empty(), "{name}");
    }
}

#[test]
fn straight_tube_is_one_path_of_tube_length() {
    let (p, t, g) = run("straight_tube", 0.5);
    assert_eq!(t.leaves().len(), 1);
    assert_eq!(g.len(), 1);
    let path: f64 = t.nodes.iter().filter_map(|n| n.parent.map(|q| dist(n.xyz_mm, t.nodes[q].xyz_mm))).sum();
    assert!((path - 60.0).abs() <= 2.0 * p.mask.grid.spacing[0], "path {path}");
}

#[test]
fn y_tube_has_one_junction() {
    let (_, t, g) = run("y_tube", 0.5);
    assert_eq!(t.leaves().len(), 2);
    assert_eq!(t.children().iter().filter(|c| c.len() >= 2).count(), 1);
    assert_eq!(g.len(), 3);
    let mut gens: Vec<u32> = g.branches.iter().map(|b| b.generation).collect();
    gens.sort();
    assert_eq!(gens, [1, 2, 2]);
}

#[test]
fn random_trees_are_acyclic_and_connected() {
    for seed in 0..20 {
        let p = render_phantom(&random_tree(seed)).unwrap();
        let edt = distance_transform(&p.mask);
        let root = select_root(&p.mask, &edt, None).unwrap();
        let t = extract_skeleton(&p.mask, &edt, root, &SkelParams::default()).unwrap();
        assert_eq!(t.betti(), (1, 0), "seed {seed}");
    }
}

#[test]
fn tube_descriptors_track_the_edt_profile() {
    for sp in [0.5, 1.0] {
        let (_, _, g) = run("straight_tube", sp);
        let b = &g.branches[0];
        assert!(branch_stenosis(b).unwrap() <= 0.05 && branch_ectasia(b).unwrap() <= 1.05);
        assert!(branch_tortuosity(b, &g.grid) <= 0.05);

        for name in ["stenotic_tube", "bulged_tube"] {
            let (p, _, g) = run(name, sp);
            let edt = distance_transform(&p.mask);
            let r: Vec<f64> = p.truth.graph.branches[0].centerline.iter().map(|&v| edt.data[v]).collect();
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let rmin = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let rmax = r.iter().cloned().fold(0.0, f64::max);
            let b = &g.branches[0];
            assert!((branch_stenosis(b).unwrap() - (1.0 - rmin / mean)).abs() <= 0.05, "{name} {sp}");
            assert!((branch_ectasia(b).unwrap() - rmax / mean).abs() <= 0.05, "{name} {sp}");
        }

        for name in ["elbow", "semicircle"] {
            let (_, _, g) = run(name, sp);
            let t = branch_tortuosity(&g.branches[0], &g.grid);
            assert!((t - 0.5).abs() <= 0.05, "{name} {sp}: {t}");
        }
    }
}
