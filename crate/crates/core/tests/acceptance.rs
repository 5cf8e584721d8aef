//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use bronchograph::edt::distance_transform;
use bronchograph::graph::Topology;
use bronchograph::metrics::{cl_dice, detection_rates, label_metrics, loss_value, overlap_metrics, Level, LossKind, LossParams};
use bronchograph::par::Exec;
use bronchograph::patterns::analyze_patterns;
use bronchograph::phantom::{library_spec, random_tree, render_phantom, Phantom, LIBRARY_NAMES};
use bronchograph::pipeline::{analyze_mask, run_batch, run_case, CaseInput, PipelineParams};
use bronchograph::signatures::{
    box_counting_dimension, branch_ectasia, branch_stenosis, branch_tortuosity, cone_angle, divergence, SignatureMatrix,
    SignatureRow, Component,
};
use bronchograph::skeleton::{extract_skeleton, select_root, SkelParams};
use bronchograph::stats::{build_reference, flag_significant, welch_t_test};
use bronchograph::taxonomy::{assign_labels, Codebook, LabelClass, LabeledGraph, Segment};
use bronchograph::{Field, Grid, Volume, VolumeKind};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn labeled_from_mask(p: &Phantom) -> LabeledGraph {
    let (_, _, g) = analyze_mask(&p.mask, &PipelineParams::default(), Exec::Parallel).expect("phantom skeletonizes");
    assign_labels(&g, &p.labels, &Codebook::canonical()).expect("labels align")
}

fn topology_guarantee() -> Check {
    let mut sizes = (usize::MAX, 0);
    for seed in 0..200 {
        let spec = random_tree(seed);
        let n = spec.branches.len();
        sizes = (sizes.0.min(n), sizes.1.max(n));
        ensure((2..=30).contains(&n), || format!("seed {seed}: {n} branches"))?;
        let p = render_phantom(&spec).map_err(|e| format!("seed {seed}: {e}"))?;
        let edt = distance_transform(&p.mask);
        let root = select_root(&p.mask, &edt, None).map_err(|e| e.to_string())?;
        let t = extract_skeleton(&p.mask, &edt, root, &SkelParams::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(t.betti() == (1, 0), || format!("seed {seed}: betti {:?}", t.betti()))?;
    }
    Ok(format!("200/200 trees with b0=1, b1=0; {}-{} branches", sizes.0, sizes.1))
}

/// Distance to the nearest background voxel centre, with a one-voxel
/// background shell around the grid.
fn brute_edt(mask: &Volume) -> Vec<f64> {
    let g = mask.grid;
    let [nx, ny, nz] = g.dims.map(|d| d as i64);
    let mut bg = Vec::new();
    for z in -1..=nz {
        for y in -1..=ny {
            for x in -1..=nx {
                let inside = (0..nx).contains(&x) && (0..ny).contains(&y) && (0..nz).contains(&z);
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
            let [x, y, z] = g.coords(i);
            let p = [x as f64 * g.spacing[0], y as f64 * g.spacing[1], z as f64 * g.spacing[2]];
            bg.iter().map(|b| (0..3).map(|a| (p[a] - b[a]).powi(2)).sum::<f64>()).fold(f64::INFINITY, f64::min).sqrt()
        })
        .collect()
}

fn edt_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
        let grid = Grid::new([16, 16, 16], spacing).unwrap();
        let density = rng.gen_range(0.5..0.99);
        let mask = Volume::mask_from_fn(grid, |_| rng.gen_bool(density));
        let got = distance_transform(&mask);
        let want = brute_edt(&mask);
        let err = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("mask {k}: max error {err:e}"))?;
    }
    Ok(format!("50 masks, max |error| {worst:.1e}"))
}

fn random_parents(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut parents = vec![None; n];
    for i in 1..n {
        parents[order[i]] = Some(order[rng.gen_range(0..i)]);
    }
    parents
}

fn lca_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = 0usize;
    for k in 0..50 {
        let n = rng.gen_range(1..=64);
        let parents = random_parents(&mut rng, n);
        let topo = Topology::from_parents(&parents).map_err(|e| e.to_string())?;
        let ancestors = |mut i: usize| {
            let mut chain = vec![i];
            while let Some(p) = parents[i] {
                chain.push(p);
                i = p;
            }
            chain
        };
        let chains: Vec<Vec<usize>> = (0..n).map(ancestors).collect();
        let lca = topo.lca_matrix();
        let desc = topo.descendant_matrix();
        for a in 0..n {
            for b in 0..n {
                let want = *chains[a].iter().find(|x| chains[b].contains(x)).unwrap();
                ensure(lca[a][b] == want, || format!("tree {k}: lca({a},{b}) = {} want {want}", lca[a][b]))?;
                ensure(desc[a][b] == chains[b].contains(&a), || format!("tree {k}: descendant({a},{b})"))?;
                pairs += 1;
            }
        }
    }
    Ok(format!("50 trees, {pairs} pairs agree"))
}

fn cone_fixture() -> Result<f64, String> {
    use LabelClass::Subsegment;
    let parents = [None, Some(0), Some(1), Some(1)];
    let classes = [LabelClass::Trunk, Subsegment(Segment::RB4, 0), Subsegment(Segment::RB4, 1), Subsegment(Segment::RB4, 2)];
    let mut lg = LabeledGraph::from_classes(&parents, &classes);
    lg.graph.branches[1].end = [1.0, 2.0, 3.0];
    lg.graph.branches[2].end = [1.0 + 10.0, 2.0, 3.0];
    lg.graph.branches[3].end = [1.0, 2.0 + 7.0, 3.0];
    let member: Vec<bool> = lg.labels.iter().map(|l| Component::Segment(Segment::RB4).contains(l)).collect();
    divergence(&lg, &member).map_err(|e| e.to_string())?.ok_or_else(|| "no divergence".to_string())
}

fn signature_phantoms() -> Check {
    let run = |name: &str| {
        let p = render_phantom(&library_spec(name, 0.5).unwrap()).unwrap();
        let (_, _, g) = analyze_mask(&p.mask, &PipelineParams::default(), Exec::Parallel).unwrap();
        (p, g)
    };
    let (_, g) = run("straight_tube");
    let b = &g.branches[0];
    let (s, e, t) = (branch_stenosis(b).unwrap(), branch_ectasia(b).unwrap(), branch_tortuosity(b, &g.grid));
    ensure(s <= 0.05 && e <= 1.05 && t <= 0.05, || format!("straight tube S {s} E {e} T {t}"))?;

    let (p, g) = run("stenotic_tube");
    let edt = distance_transform(&p.mask);
    let r: Vec<f64> = p.truth.graph.branches[0].centerline.iter().map(|&v| edt.data[v]).collect();
    let oracle = 1.0 - r.iter().cloned().fold(f64::INFINITY, f64::min) / (r.iter().sum::<f64>() / r.len() as f64);
    let sten = branch_stenosis(&g.branches[0]).unwrap();
    ensure((sten - oracle).abs() <= 0.05, || format!("stenotic tube S {sten} vs oracle {oracle}"))?;

    let (_, g) = run("elbow");
    let elbow = branch_tortuosity(&g.branches[0], &g.grid);
    ensure((elbow - 0.5).abs() <= 0.05, || format!("elbow T {elbow}"))?;

    let d = cone_fixture()?;
    ensure((d - 0.5).abs() <= 0.02, || format!("90 degree cone D {d}"))?;

    let line: Vec<[usize; 3]> = (0..64).map(|i| [i, 0, 0]).collect();
    let plane: Vec<[usize; 3]> = (0..64 * 64).map(|i| [i % 64, i / 64, 0]).collect();
    let cube: Vec<[usize; 3]> = (0..64 * 64 * 64).map(|i| [i % 64, (i / 64) % 64, i / 4096]).collect();
    let dims = [line, plane, cube].map(|pts| box_counting_dimension(&pts, 64).unwrap());
    for (k, (tol, want)) in [(0.15, 1.0), (0.2, 2.0), (0.2, 3.0)].into_iter().enumerate() {
        ensure((dims[k] - want).abs() <= tol, || format!("box counting dimension {} want {want}", dims[k]))?;
    }
    Ok(format!(
        "S {s:.3} E {e:.3} T {t:.3}; stenosis {sten:.3} vs {oracle:.3}; elbow {elbow:.3}; D {d:.3}; box {:.2}/{:.2}/{:.2}",
        dims[0], dims[1], dims[2]
    ))
}

fn pattern_fixtures() -> Check {
    let lobe = |name: &str, lobe: &str, config: &str, fur: &str| -> Result<(), String> {
        let p = render_phantom(&library_spec(name, 0.5).unwrap()).unwrap();
        for (source, lg) in [("truth", p.truth.clone()), ("pipeline", labeled_from_mask(&p))] {
            let r = analyze_patterns(&lg);
            let got = r.lobes.iter().find(|l| l.lobe == lobe).ok_or_else(|| format!("{name}/{source}: {lobe} missing"))?;
            ensure(got.configuration == config && got.furcation == fur, || {
                format!("{name}/{source}: {} {} want {config} {fur}", got.configuration, got.furcation)
            })?;
            ensure(r.lobes.len() == 1 && r.skipped_lobes.len() == 4, || format!("{name}/{source}: skipped {:?}", r.skipped_lobes))?;
        }
        Ok(())
    };
    lobe("rmb", "RMB", "B4,B5", "Bi")?;
    lobe("llb", "LLB", "B6,B8,B9+10", "Tri")?;
    lobe("lub", "LUB", "B1+2+3,B4+5", "Bi")?;

    for (name, config, fur) in [
        ("lb12_cotrunk_ab", "B1+2a+b,B1+2c", "Bi"),
        ("lb12_cotrunk_bc", "B1+2a,B1+2b+c", "Bi"),
        ("lb12_cotrunk_ac", "B1+2a+c,B1+2b", "Bi"),
        ("lb12_trifurcation", "B1+2a,B1+2b,B1+2c", "Tri"),
    ] {
        let p = render_phantom(&library_spec(name, 0.5).unwrap()).unwrap();
        for (source, lg) in [("truth", p.truth.clone()), ("pipeline", labeled_from_mask(&p))] {
            let r = analyze_patterns(&lg);
            let s = r.segments.iter().find(|s| s.segment == "LB1+2").ok_or_else(|| format!("{name}/{source}: no LB1+2"))?;
            ensure(s.valid && s.stem_number == 1 && s.configuration == config && s.furcation == fur, || {
                format!("{name}/{source}: {}-stem {} {} valid {}", s.stem_number, s.configuration, s.furcation, s.valid)
            })?;
            let others_invalid = r.segments.iter().filter(|s| s.segment != "LB1+2").all(|s| !s.valid);
            ensure(others_invalid, || format!("{name}/{source}: an absent segment was analysed"))?;
        }
    }

    let p = render_phantom(&library_spec("lingula_b4a", 0.5).unwrap()).unwrap();
    for (source, lg) in [("truth", p.truth.clone()), ("pipeline", labeled_from_mask(&p))] {
        let r = analyze_patterns(&lg);
        let b = r.blocks.iter().find(|b| b.block == "LB4-LB5").ok_or_else(|| format!("lingula/{source}: no LB4-LB5 block"))?;
        let want = vec![vec!["B4a".to_string()], vec!["B4b".to_string(), "B5".to_string()]];
        ensure(b.clusters == want && b.furcation == "Bi", || format!("lingula/{source}: {:?} {}", b.clusters, b.furcation))?;
        ensure(r.skipped_blocks.len() == 5, || format!("lingula/{source}: skipped blocks {:?}", r.skipped_blocks))?;
    }
    Ok("3 lobar, 4 LB1+2 and 1 lingular fixture match on truth and pipeline graphs".into())
}

fn metric_identities() -> Check {
    let cb = Codebook::canonical();
    for name in LIBRARY_NAMES {
        let p = render_phantom(&library_spec(name, 0.5).unwrap()).unwrap();
        let (_, skel, g) = analyze_mask(&p.mask, &PipelineParams::default(), Exec::Parallel).map_err(|e| e.to_string())?;
        let (dsc, _, _) = overlap_metrics(&p.mask, &p.mask).map_err(|e| e.to_string())?;
        let cl = cl_dice(&p.mask, &p.mask, &skel, &skel).map_err(|e| e.to_string())?;
        let det = detection_rates(&p.mask, &g, 0.8).map_err(|e| e.to_string())?;
        ensure(dsc == 1.0 && cl == 1.0 && det.tld == 100.0 && det.bnd == 100.0, || {
            format!("{name}: DSC {dsc} clDice {cl} TLD {} BND {}", det.tld, det.bnd)
        })?;
        let lg = assign_labels(&g, &p.labels, &cb).map_err(|e| e.to_string())?;
        for level in [Level::Lobar, Level::Segmental, Level::Subsegmental] {
            let r = label_metrics(&lg, &lg, level).map_err(|e| e.to_string())?;
            ensure(r.accuracy == 1.0 && r.tree_cons == 100.0 && r.topo_dist == 0.0, || {
                format!("{name} {level:?}: acc {} TreeCons {} TopoDist {}", r.accuracy, r.tree_cons, r.topo_dist)
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..20u64 {
        let spec = if k % 2 == 0 { random_tree(1000 + k) } else { library_spec(LIBRARY_NAMES[k as usize % LIBRARY_NAMES.len()], 1.0).unwrap() };
        let p = render_phantom(&spec).unwrap();
        let (_, _, g) = analyze_mask(&p.mask, &PipelineParams::default(), Exec::Parallel).map_err(|e| e.to_string())?;
        let mut fg: Vec<usize> = p.mask.foreground().collect();
        fg.shuffle(&mut rng);
        let mut pred = p.mask.clone();
        let mut last = detection_rates(&pred, &g, 0.8).unwrap();
        for chunk in fg.chunks(fg.len() / 25 + 1) {
            for &v in chunk {
                pred.data[v] = 0;
            }
            let now = detection_rates(&pred, &g, 0.8).unwrap();
            ensure(now.tld <= last.tld && now.bnd <= last.bnd, || format!("sequence {k}: detection rose after erosion"))?;
            last = now;
        }
        ensure(last.tld == 0.0 && last.bnd == 0.0, || format!("sequence {k}: empty prediction still detects"))?;
    }
    Ok(format!("{} phantoms at identity; 20 erosion sequences monotone", LIBRARY_NAMES.len()))
}

fn min_dot(u: [f64; 3], vs: &[[f64; 3]]) -> f64 {
    vs.iter().map(|v| u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).fold(f64::INFINITY, f64::min)
}

fn sph(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// 1 degree grid over the sphere, then a shrinking-step search over 64
/// tangent directions around the best few grid cells.
fn grid_cone(vs: &[[f64; 3]]) -> f64 {
    let deg = PI / 180.0;
    let mut cells: Vec<(f64, [f64; 3])> = Vec::new();
    for i in 0..=180 {
        for j in 0..360 {
            let u = sph(i as f64 * deg, j as f64 * deg);
            cells.push((min_dot(u, vs), u));
        }
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let norm = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        a.map(|x| x / n)
    };
    let mut best = f64::NEG_INFINITY;
    for &(mut s, mut u) in cells.iter().take(16) {
        let mut step = deg;
        while step > 1e-10 {
            let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let e1 = norm([u[1] * helper[2] - u[2] * helper[1], u[2] * helper[0] - u[0] * helper[2], u[0] * helper[1] - u[1] * helper[0]]);
            let e2 = [u[1] * e1[2] - u[2] * e1[1], u[2] * e1[0] - u[0] * e1[2], u[0] * e1[1] - u[1] * e1[0]];
            let mut moved = false;
            for k in 0..64 {
                let a = 2.0 * PI * k as f64 / 64.0;
                let cand = norm([0, 1, 2].map(|i| u[i] + step * (a.cos() * e1[i] + a.sin() * e2[i])));
                let cs = min_dot(cand, vs);
                if cs > s {
                    (s, u, moved) = (cs, cand, true);
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        best = best.max(s);
    }
    2.0 * best.clamp(-1.0, 1.0).acos()
}

fn cone_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = rng.gen_range(2..=6);
        let axis = sph(rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI));
        let spread = if k % 4 == 0 { PI } else { rng.gen_range(0.1..1.4) };
        let vs: Vec<[f64; 3]> = (0..n)
            .map(|_| loop {
                let v = sph(rng.gen_range(0.0..PI), rng.gen_range(0.0..2.0 * PI));
                let c = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
                if c.acos() <= spread {
                    break v;
                }
            })
            .collect();
        let exact = cone_angle(&vs);
        let oracle = grid_cone(&vs);
        worst = worst.max((exact - oracle).abs());
        ensure((exact - oracle).abs() <= 1e-3, || format!("set {k}: exact {exact} grid {oracle}"))?;
    }
    Ok(format!("100 sets, max |dtheta| {worst:.1e} rad"))
}

#[derive(serde::Deserialize)]
struct WelchPair {
    a: Vec<f64>,
    b: Vec<f64>,
    t: f64,
    p: f64,
}

fn welch() -> Check {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/welch_pairs.json")).map_err(|e| e.to_string())?;
    let pairs: Vec<WelchPair> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(pairs.len() == 20, || format!("{} pairs in fixture", pairs.len()))?;
    let (mut dt, mut dp) = (0.0f64, 0.0f64);
    for (i, pair) in pairs.iter().enumerate() {
        let r = welch_t_test(&pair.a, &pair.b).map_err(|e| e.to_string())?;
        dt = dt.max((r.t - pair.t).abs());
        dp = dp.max((r.p - pair.p).abs());
        ensure((r.t - pair.t).abs() <= 1e-8 && (r.p - pair.p).abs() <= 1e-6, || format!("pair {i}: t {} p {}", r.t, r.p))?;
    }
    let same = welch_t_test(&pairs[0].a, &pairs[0].a).map_err(|e| e.to_string())?;
    ensure(same.p == 1.0, || format!("identical samples give p {}", same.p))?;
    Ok(format!("20 pairs, max |dt| {dt:.1e}, max |dp| {dp:.1e}; identical p = 1"))
}

fn significance_rule() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let comps = Component::all();
    let controls: Vec<SignatureMatrix> = (0..12)
        .map(|_| SignatureMatrix {
            rows: comps
                .iter()
                .map(|c| SignatureRow { component: c.name().to_string(), values: std::array::from_fn(|_| rng.gen_range(0.1..2.0)) })
                .collect(),
        })
        .collect();
    let reference = build_reference(&controls).map_err(|e| e.to_string())?;
    let target = 7;
    let mut case = SignatureMatrix {
        rows: comps
            .iter()
            .enumerate()
            .map(|(r, c)| SignatureRow { component: c.name().to_string(), values: std::array::from_fn(|d| reference.mean[r][d].unwrap()) })
            .collect(),
    };
    for d in [0, 2, 5] {
        case.rows[target].values[d] = reference.mean[target][d].unwrap() + 3.0 * reference.std[target][d].unwrap();
    }
    let flags = flag_significant(&case, &reference).map_err(|e| e.to_string())?;
    let flagged: Vec<&str> = flags.iter().filter(|f| f.significant).map(|f| f.component.as_str()).collect();
    ensure(flagged == [comps[target].name()], || format!("flagged {flagged:?}"))?;
    case.rows[target].values[5] = reference.mean[target][5].unwrap();
    let two = flag_significant(&case, &reference).map_err(|e| e.to_string())?;
    ensure(two.iter().all(|f| !f.significant), || "two outliers flagged".into())?;
    Ok(format!("only {} flagged with 3 of 6 at mu + 3 sigma; 2 of 6 not flagged", comps[target].name()))
}

fn losses() -> Check {
    let p = render_phantom(&library_spec("y_tube", 1.0).unwrap()).unwrap();
    let gt = p.mask.clone();
    let crisp = Field::from_volume(&gt);
    let centerline = Field::from_volume(&p.truth.graph.branches.iter().fold(Volume::zeros(gt.grid, VolumeKind::Binary), |mut v, b| {
        for &c in &b.centerline {
            v.data[c] = 1;
        }
        v
    }));
    let params = LossParams { centerline: Some(&centerline), ..LossParams::default() };
    let df = loss_value(LossKind::DiceFocal, &crisp, &gt, &params).map_err(|e| e.to_string())?;
    let bs = loss_value(LossKind::Bs, &crisp, &gt, &params).map_err(|e| e.to_string())?;
    let gu = loss_value(LossKind::Gu, &crisp, &gt, &params).map_err(|e| e.to_string())?;
    ensure((df + 1.0).abs() <= 1e-9, || format!("DiceFocal {df}"))?;
    ensure(bs.abs() <= 1e-6, || format!("BS {bs}"))?;
    ensure((gu - (1.0 - 1.0 / 0.9)).abs() <= 1e-9, || format!("GU {gu}"))?;

    // Direct plug-ins on a soft prediction.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let soft = Field::new(gt.grid, (0..gt.grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let g: Vec<f64> = gt.data.iter().map(|&v| (v != 0) as u8 as f64).collect();
    let n = g.len() as f64;
    let (mut pg, mut ps, mut gs, mut focal, mut ce, mut gun, mut gud, mut bsn) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..g.len() {
        let (pi, gi) = (soft.data[i], g[i]);
        pg += pi * gi;
        ps += pi;
        gs += gi;
        focal += gi * (1.0 - pi).powi(2) * pi.ln() + (1.0 - gi) * pi * pi * (1.0 - pi).ln();
        ce -= gi * pi.ln() + (1.0 - gi) * (1.0 - pi).ln();
        gun += pi.powf(0.7) * gi;
        gud += 0.2 * pi + 0.7 * gi;
        bsn += pi * centerline.data[i];
    }
    let want = [
        (LossKind::DiceFocal, -2.0 * pg / (ps + gs) - focal / n),
        (LossKind::Cal, 1.0 - pg / (0.1 * ps + 0.9 * gs) + ce),
        (LossKind::Gu, 1.0 - gun / gud),
        (LossKind::Bs, 1.0 - bsn / (centerline.data.iter().sum::<f64>() + 1e-7)),
    ];
    for (kind, w) in want {
        let got = loss_value(kind, &soft, &gt, &params).map_err(|e| e.to_string())?;
        ensure((got - w).abs() <= 1e-9 * w.abs().max(1.0), || format!("{kind:?}: {got} vs plug-in {w}"))?;
    }
    Ok(format!("crisp DiceFocal {df:.6}, BS {bs:.1e}, GU {gu:.6}; soft plug-ins agree"))
}

fn determinism() -> Check {
    let cases: Vec<CaseInput> = LIBRARY_NAMES
        .iter()
        .map(|n| {
            let p = render_phantom(&library_spec(n, 0.5).unwrap()).unwrap();
            CaseInput { id: n.to_string(), mask: p.mask, labels: Some(p.labels) }
        })
        .collect();
    let params = PipelineParams::default();
    let cb = Codebook::canonical();
    let render = |workers: usize| -> Result<Vec<String>, String> {
        run_batch(&cases, &params, &cb, workers).into_iter().map(|r| r.map(|o| o.to_json().to_string()).map_err(|e| e.to_string())).collect()
    };
    let base = render(1)?;
    for w in [1, 2, 4, 8] {
        ensure(render(w)? == base, || format!("output differs with {w} workers"))?;
    }
    for (case, want) in cases.iter().zip(&base) {
        let seq = run_case(case, &params, &cb, Exec::Sequential).map_err(|e| e.to_string())?.to_json().to_string();
        ensure(&seq == want, || format!("{}: sequential run differs", case.id))?;
    }
    let bytes: usize = base.iter().map(String::len).sum();
    Ok(format!("{} cases, {bytes} bytes identical across runs, 1/2/4/8 workers and sequential", cases.len()))
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Check); 11] = [
        ("topology guarantee", Duration::from_secs(300), topology_guarantee),
        ("EDT exactness", Duration::from_secs(10), edt_exactness),
        ("LCA/descendant oracle", Duration::from_secs(5), lca_oracle),
        ("signature phantoms", Duration::from_secs(60), signature_phantoms),
        ("pattern fixtures", Duration::from_secs(300), pattern_fixtures),
        ("metric identities", Duration::from_secs(300), metric_identities),
        ("enclosing-cone oracle", Duration::from_secs(300), cone_oracle),
        ("Welch t-test", Duration::from_secs(10), welch),
        ("significance rule", Duration::from_secs(10), significance_rule),
        ("loss evaluators", Duration::from_secs(60), losses),
        ("end-to-end determinism", Duration::from_secs(600), determinism),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if secs > budget => Err(format!("{msg}; took {:.1}s, budget {}s", secs.as_secs_f64(), budget.as_secs())),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg} ({:.1}s)", secs.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} ({:.1}s)", secs.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
