//! Overlap, topology detection and labeling metrics, plus scalar
//! evaluations of the segmentation loss formulas.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::edt::distance_transform;
use crate::graph::AirwayGraph;
use crate::skeleton::SkeletonTree;
use crate::taxonomy::{LabelClass, LabeledGraph};
use crate::volume::{Field, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dims differ: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("predicted and reference graphs differ in structure")]
    GraphMismatch,
    #[error("probability {0} outside [0, 1]")]
    ProbOutOfRange(f64),
    #[error("loss {0} needs a centerline map")]
    MissingCenterline(&'static str),
    #[error("csv: {0}")]
    Csv(String),
}

fn check_dims(a: &[usize; 3], b: &[usize; 3]) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::DimsMismatch(*a, *b));
    }
    Ok(())
}

/// `num / den`, with an empty denominator giving 1 when `other_empty`, else 0.
fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty { 1.0 } else { 0.0 }
    } else {
        num as f64 / den as f64
    }
}

/// (DSC, sensitivity, precision) of two binary masks.
pub fn overlap_metrics(pred: &Volume, gt: &Volume) -> Result<(f64, f64, f64), MetricsError> {
    check_dims(&pred.grid.dims, &gt.grid.dims)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    let dsc = if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 };
    Ok((dsc, ratio(both, g, p == 0), ratio(both, p, g == 0)))
}

/// Centerline Dice: harmonic mean of the fraction of predicted skeleton
/// inside the reference mask and of reference skeleton inside the prediction.
pub fn cl_dice(
    pred: &Volume,
    gt: &Volume,
    skel_pred: &SkeletonTree,
    skel_gt: &SkeletonTree,
) -> Result<f64, MetricsError> {
    check_dims(&pred.grid.dims, &gt.grid.dims)?;
    check_dims(&skel_pred.grid.dims, &gt.grid.dims)?;
    check_dims(&skel_gt.grid.dims, &gt.grid.dims)?;
    let frac = |skel: &SkeletonTree, vol: &Volume| {
        let inside = skel.nodes.iter().filter(|n| vol.data[n.voxel] != 0).count();
        ratio(inside, skel.nodes.len(), true)
    };
    let tprec = frac(skel_pred, gt);
    let tsens = frac(skel_gt, pred);
    Ok(if tprec + tsens == 0.0 { 0.0 } else { 2.0 * tprec * tsens / (tprec + tsens) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub tld: f64,
    pub bnd: f64,
    pub t_det: f64,
    pub t_ref: f64,
    pub b_det: usize,
    pub b_ref: usize,
}

/// Tree length and branch detection against a reference graph. Each
/// centerline step (junction to first voxel, then voxel to voxel) counts as
/// detected when its distal voxel lies inside `pred`. A branch is detected
/// when more than `coverage_threshold` of its centerline voxels are inside.
pub fn detection_rates(
    pred: &Volume,
    gt_graph: &AirwayGraph,
    coverage_threshold: f64,
) -> Result<DetectionReport, MetricsError> {
    check_dims(&pred.grid.dims, &gt_graph.grid.dims)?;
    let grid = gt_graph.grid;
    let (mut t_det, mut t_ref, mut b_det) = (0.0, 0.0, 0usize);
    for b in &gt_graph.branches {
        let mut prev = b.junction;
        let mut inside = 0usize;
        for &v in &b.centerline {
            let hit = pred.data[v] != 0;
            inside += hit as usize;
            if let Some(p) = prev {
                let step = grid.step_length(p, v);
                t_ref += step;
                if hit {
                    t_det += step;
                }
            }
            prev = Some(v);
        }
        if !b.centerline.is_empty() && inside as f64 > coverage_threshold * b.centerline.len() as f64 {
            b_det += 1;
        }
    }
    let b_ref = gt_graph.len();
    Ok(DetectionReport {
        tld: if t_ref > 0.0 { 100.0 * t_det / t_ref } else { 100.0 },
        bnd: if b_ref > 0 { 100.0 * b_det as f64 / b_ref as f64 } else { 100.0 },
        t_det,
        t_ref,
        b_det,
        b_ref,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Lobar,
    Segmental,
    Subsegmental,
}

/// Class of a branch at one hierarchy level; Trunk when unlabeled there.
pub fn class_at(lg: &LabeledGraph, i: usize, level: Level) -> LabelClass {
    let l = &lg.labels[i];
    match level {
        Level::Lobar => l.lobe.map_or(LabelClass::Trunk, LabelClass::Lobe),
        Level::Segmental => l.segment.map_or(LabelClass::Trunk, LabelClass::Segment),
        Level::Subsegmental => match (l.segment, l.subsegment) {
            (Some(s), Some(c)) => LabelClass::Subsegment(s, c),
            _ => LabelClass::Trunk,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelMetricsReport {
    pub level: Level,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_sensitivity: f64,
    pub tree_cons: f64,
    pub topo_dist: f64,
    pub n_s: usize,
    pub n_cs: usize,
    /// (gt class, predicted class) -> node count.
    #[serde(skip)]
    pub confusion: BTreeMap<(LabelClass, LabelClass), usize>,
}

pub fn label_metrics(pred: &LabeledGraph, gt: &LabeledGraph, level: Level) -> Result<LabelMetricsReport, MetricsError> {
    if pred.len() != gt.len() || pred.graph.topology.parents != gt.graph.topology.parents {
        return Err(MetricsError::GraphMismatch);
    }
    let n = gt.len();
    let topo = &gt.graph.topology;
    let y: Vec<LabelClass> = (0..n).map(|i| class_at(gt, i, level)).collect();
    let yh: Vec<LabelClass> = (0..n).map(|i| class_at(pred, i, level)).collect();

    let mut confusion = BTreeMap::new();
    for i in 0..n {
        *confusion.entry((y[i], yh[i])).or_insert(0) += 1;
    }
    let correct = (0..n).filter(|&i| y[i] == yh[i]).count();
    let gt_classes: BTreeSet<LabelClass> = y.iter().copied().collect();
    let (mut prec, mut sens) = (0.0, 0.0);
    for &c in &gt_classes {
        let tp = (0..n).filter(|&i| y[i] == c && yh[i] == c).count();
        let pc = yh.iter().filter(|&&x| x == c).count();
        let gc = y.iter().filter(|&&x| x == c).count();
        prec += if pc > 0 { tp as f64 / pc as f64 } else { 0.0 };
        sens += tp as f64 / gc as f64;
    }
    let k = gt_classes.len().max(1) as f64;

    // Subtrees: connected pieces of each non-Trunk reference class.
    let (mut n_s, mut n_cs) = (0usize, 0usize);
    let mut uf = crate::union_find::UnionFind::new(n);
    for i in 0..n {
        if let Some(p) = topo.parents[i] {
            if y[p] == y[i] {
                uf.union(p, i);
            }
        }
    }
    for group in uf.groups() {
        if y[group[0]] == LabelClass::Trunk {
            continue;
        }
        n_s += 1;
        if group.iter().all(|&i| yh[i] == yh[group[0]]) {
            n_cs += 1;
        }
    }

    let diameter = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| topo.hops(a, b)).max().unwrap_or(0);
    let mut total = 0.0;
    for i in 0..n {
        let d = (0..n).filter(|&j| y[j] == yh[i]).map(|j| topo.hops(i, j)).min().unwrap_or(diameter + 1);
        total += d as f64;
    }

    Ok(LabelMetricsReport {
        level,
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 1.0 },
        macro_precision: prec / k,
        macro_sensitivity: sens / k,
        tree_cons: if n_s > 0 { 100.0 * n_cs as f64 / n_s as f64 } else { 100.0 },
        topo_dist: if n > 0 { total / n as f64 } else { 0.0 },
        n_s,
        n_cs,
        confusion,
    })
}

/// Confusion matrix as CSV: rows are reference classes, columns predicted.
pub fn write_confusion_csv<W: Write>(report: &LabelMetricsReport, out: W) -> Result<(), MetricsError> {
    let classes: BTreeSet<LabelClass> = report.confusion.keys().flat_map(|&(a, b)| [a, b]).collect();
    let err = |e: csv::Error| MetricsError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["gt\\pred".to_string()];
    header.extend(classes.iter().map(|c| c.name()));
    w.write_record(&header).map_err(err)?;
    for &g in &classes {
        let mut row = vec![g.name()];
        row.extend(classes.iter().map(|&p| report.confusion.get(&(g, p)).copied().unwrap_or(0).to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| MetricsError::Csv(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LossKind {
    DiceFocal,
    Cal,
    CalLsd,
    Gu,
    Bs,
}

#[derive(Clone, Debug)]
pub struct LossParams<'a> {
    /// Weight of the focal term in DiceFocal.
    pub focal_weight: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
    pub r_l: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Per-voxel α_x weights (CAL and GU denominators); 1 when absent.
    pub voxel_alpha: Option<&'a Field>,
    /// Per-voxel w_x weights (GU numerator); 1 when absent.
    pub voxel_w: Option<&'a Field>,
    /// Centerline map c for BS.
    pub centerline: Option<&'a Field>,
}

impl Default for LossParams<'_> {
    fn default() -> Self {
        Self {
            focal_weight: 1.0,
            alpha_t: 0.1,
            beta_t: 0.9,
            r_l: 0.7,
            alpha: 0.2,
            beta: 0.7,
            epsilon: 1e-7,
            voxel_alpha: None,
            voxel_w: None,
            centerline: None,
        }
    }
}

const LOG_FLOOR: f64 = 1e-7;

/// `w * ln(x)` with the 0·log 0 = 0 convention and the log clamped at 1e-7.
fn wlog(w: f64, x: f64) -> f64 {
    if w == 0.0 { 0.0 } else { w * x.max(LOG_FLOOR).ln() }
}

fn cross_entropy(p: f64, g: f64) -> f64 {
    -(wlog(g, p) + wlog(1.0 - g, 1.0 - p))
}

/// Scalar value of a segmentation loss for probabilities `pred` against the
/// binary reference `gt`.
pub fn loss_value(kind: LossKind, pred: &Field, gt: &Volume, params: &LossParams) -> Result<f64, MetricsError> {
    check_dims(&pred.grid.dims, &gt.grid.dims)?;
    for f in [params.voxel_alpha, params.voxel_w, params.centerline].into_iter().flatten() {
        check_dims(&f.grid.dims, &gt.grid.dims)?;
    }
    if let Some(&p) = pred.data.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(MetricsError::ProbOutOfRange(p));
    }
    let n = pred.data.len();
    let g = |i: usize| (gt.data[i] != 0) as u8 as f64;
    let ax = |i: usize| params.voxel_alpha.map_or(1.0, |f| f.data[i]);
    let value = match kind {
        LossKind::DiceFocal => {
            let (mut pg, mut s) = (0.0, 0.0);
            let mut focal = 0.0;
            for (i, &p) in pred.data.iter().enumerate() {
                let gi = g(i);
                pg += p * gi;
                s += p + gi;
                focal += wlog(gi * (1.0 - p).powi(2), p) + wlog((1.0 - gi) * p * p, 1.0 - p);
            }
            let dice = if s == 0.0 { 1.0 } else { 2.0 * pg / s };
            -dice - params.focal_weight * focal / n as f64
        }
        LossKind::Cal | LossKind::CalLsd => {
            let (mut pg, mut sp, mut sg, mut ce) = (0.0, 0.0, 0.0, 0.0);
            for (i, &p) in pred.data.iter().enumerate() {
                let gi = g(i);
                pg += p * gi;
                sp += p;
                sg += gi;
                ce += ax(i) * cross_entropy(p, gi);
            }
            let den = params.alpha_t * sp + params.beta_t * sg;
            let tversky = if den == 0.0 { 1.0 } else { pg / den };
            let mut v = 1.0 - tversky + ce;
            if kind == LossKind::CalLsd {
                let bin = Volume::mask_from_fn(pred.grid, |i| pred.data[i] > 0.5);
                let dp = distance_transform(&bin);
                let dg = distance_transform(&gt.to_binary());
                let l2 = dg.data.iter().zip(&dp.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                v += l2 / n as f64;
            }
            v
        }
        LossKind::Gu => {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, &p) in pred.data.iter().enumerate() {
                let gi = g(i);
                let w = params.voxel_w.map_or(1.0, |f| f.data[i]);
                num += w * p.powf(params.r_l) * gi;
                den += ax(i) * (params.alpha * p + params.beta * gi);
            }
            if den == 0.0 { 0.0 } else { 1.0 - num / den }
        }
        LossKind::Bs => {
            let c = params.centerline.ok_or(MetricsError::MissingCenterline("BS"))?;
            let num: f64 = pred.data.iter().zip(&c.data).map(|(p, c)| p * c).sum();
            let den: f64 = c.data.iter().sum::<f64>() + params.epsilon;
            1.0 - num / den
        }
    };
    Ok(value)
}
