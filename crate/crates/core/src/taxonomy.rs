//! Anatomical label hierarchy: lobes, the 18 algorithmic segment classes,
//! subsegment annotation codes, and assignment of labels to branches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::AirwayGraph;
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("label volume dims {labels:?} differ from graph dims {graph:?}")]
    DimsMismatch { labels: [usize; 3], graph: [usize; 3] },
    #[error("label id {0} is not in the codebook")]
    UnknownLabelId(u16),
    #[error("unknown class name {0:?}")]
    UnknownClassName(String),
    #[error("malformed codebook: {0}")]
    MalformedCodebook(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Lobe {
    LUB,
    LLB,
    RUB,
    RMB,
    RLB,
}

impl Lobe {
    pub const ALL: [Lobe; 5] = [Lobe::LUB, Lobe::LLB, Lobe::RUB, Lobe::RMB, Lobe::RLB];

    pub fn name(self) -> &'static str {
        match self {
            Lobe::LUB => "LUB",
            Lobe::LLB => "LLB",
            Lobe::RUB => "RUB",
            Lobe::RMB => "RMB",
            Lobe::RLB => "RLB",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn segments(self) -> &'static [Segment] {
        use Segment::*;
        match self {
            Lobe::LUB => &[LB1_2, LB3, LB4, LB5],
            Lobe::LLB => &[LB6, LB8, LB9, LB10],
            Lobe::RUB => &[RB1, RB2, RB3],
            Lobe::RMB => &[RB4, RB5],
            Lobe::RLB => &[RB6, RB7, RB8, RB9, RB10],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Segment {
    LB1_2,
    LB3,
    LB4,
    LB5,
    LB6,
    LB8,
    LB9,
    LB10,
    RB1,
    RB2,
    RB3,
    RB4,
    RB5,
    RB6,
    RB7,
    RB8,
    RB9,
    RB10,
}

impl Segment {
    pub const ALL: [Segment; 18] = {
        use Segment::*;
        [LB1_2, LB3, LB4, LB5, LB6, LB8, LB9, LB10, RB1, RB2, RB3, RB4, RB5, RB6, RB7, RB8, RB9, RB10]
    };

    pub fn name(self) -> &'static str {
        use Segment::*;
        match self {
            LB1_2 => "LB1+2",
            LB3 => "LB3",
            LB4 => "LB4",
            LB5 => "LB5",
            LB6 => "LB6",
            LB8 => "LB8",
            LB9 => "LB9",
            LB10 => "LB10",
            RB1 => "RB1",
            RB2 => "RB2",
            RB3 => "RB3",
            RB4 => "RB4",
            RB5 => "RB5",
            RB6 => "RB6",
            RB7 => "RB7",
            RB8 => "RB8",
            RB9 => "RB9",
            RB10 => "RB10",
        }
    }

    /// Name without the side prefix, as used in pattern keys ("B1+2").
    pub fn short_name(self) -> &'static str {
        &self.name()[1..]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn lobe(self) -> Lobe {
        use Segment::*;
        match self {
            LB1_2 | LB3 | LB4 | LB5 => Lobe::LUB,
            LB6 | LB8 | LB9 | LB10 => Lobe::LLB,
            RB1 | RB2 | RB3 => Lobe::RUB,
            RB4 | RB5 => Lobe::RMB,
            RB6 | RB7 | RB8 | RB9 | RB10 => Lobe::RLB,
        }
    }

    /// Segments annotated with subsegments a, b and c; all others have a and b.
    pub fn has_three_subsegments(self) -> bool {
        use Segment::*;
        matches!(self, LB1_2 | LB3 | LB6 | LB10 | RB6 | RB10)
    }

    /// Basic subsegment codes present in this segment's annotation.
    pub fn basic_codes(self) -> &'static [u8] {
        if self.has_three_subsegments() {
            &[1, 2, 3]
        } else {
            &[1, 2]
        }
    }

    pub fn from_name(s: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|seg| seg.name() == s)
    }
}

/// Subsegment annotation codes: 0 root, 1-3 basic a/b/c, 4-6 co-trunks
/// a+b, b+c, a+c. Code 7 is the a+b+c trunk used only by LB1+2.
pub const CODE_ROOT: u8 = 0;
pub const CODE_ABC: u8 = 7;

pub fn code_suffix(code: u8) -> &'static str {
    match code {
        0 => "_root",
        1 => "a",
        2 => "b",
        3 => "c",
        4 => "a+b",
        5 => "b+c",
        6 => "a+c",
        7 => "a+b+c",
        _ => "?",
    }
}

/// Basic codes a co-trunk code stands for.
pub fn cotrunk_members(code: u8) -> &'static [u8] {
    match code {
        4 => &[1, 2],
        5 => &[2, 3],
        6 => &[1, 3],
        7 => &[1, 2, 3],
        _ => &[],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelClass {
    Trunk,
    Lobe(Lobe),
    Segment(Segment),
    Subsegment(Segment, u8),
}

impl LabelClass {
    pub fn name(&self) -> String {
        match *self {
            LabelClass::Trunk => "Trunk".to_string(),
            LabelClass::Lobe(l) => l.name().to_string(),
            LabelClass::Segment(s) => s.name().to_string(),
            LabelClass::Subsegment(s, c) => format!("{}{}", s.name(), code_suffix(c)),
        }
    }

    pub fn parse(name: &str) -> Option<LabelClass> {
        if name == "Trunk" {
            return Some(LabelClass::Trunk);
        }
        if let Some(l) = Lobe::ALL.into_iter().find(|l| l.name() == name) {
            return Some(LabelClass::Lobe(l));
        }
        if let Some(s) = Segment::from_name(name) {
            return Some(LabelClass::Segment(s));
        }
        // Longest segment-name prefix first so "LB10a" is not read as "LB1".
        let mut segs = Segment::ALL;
        segs.sort_by_key(|s| std::cmp::Reverse(s.name().len()));
        for s in segs {
            if let Some(rest) = name.strip_prefix(s.name()) {
                if let Some(code) = (0..=CODE_ABC).find(|&c| code_suffix(c) == rest) {
                    if code == CODE_ABC && s != Segment::LB1_2 {
                        return None;
                    }
                    return Some(LabelClass::Subsegment(s, code));
                }
            }
        }
        None
    }

    pub fn label(&self) -> BranchLabel {
        match *self {
            LabelClass::Trunk => BranchLabel::default(),
            LabelClass::Lobe(l) => BranchLabel { lobe: Some(l), ..Default::default() },
            LabelClass::Segment(s) => {
                BranchLabel { lobe: Some(s.lobe()), segment: Some(s), subsegment: None }
            }
            LabelClass::Subsegment(s, c) => {
                BranchLabel { lobe: Some(s.lobe()), segment: Some(s), subsegment: Some(c) }
            }
        }
    }
}

/// The 127 subsegmental classes in canonical order: every segment with codes
/// 0-6, plus LB1+2a+b+c right after LB1+2's own codes.
pub fn subsegment_classes() -> Vec<LabelClass> {
    let mut out = Vec::with_capacity(127);
    for s in Segment::ALL {
        for c in 0..=6 {
            out.push(LabelClass::Subsegment(s, c));
        }
        if s == Segment::LB1_2 {
            out.push(LabelClass::Subsegment(s, CODE_ABC));
        }
    }
    out
}

/// Per-branch labels at the three levels; `None` means Trunk at that level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchLabel {
    pub lobe: Option<Lobe>,
    pub segment: Option<Segment>,
    pub subsegment: Option<u8>,
}

impl BranchLabel {
    /// Most specific class carried.
    pub fn class(&self) -> LabelClass {
        match (self.lobe, self.segment, self.subsegment) {
            (_, Some(s), Some(c)) => LabelClass::Subsegment(s, c),
            (_, Some(s), None) => LabelClass::Segment(s),
            (Some(l), None, _) => LabelClass::Lobe(l),
            (None, None, _) => LabelClass::Trunk,
        }
    }

    pub fn is_trunk(&self) -> bool {
        self.lobe.is_none() && self.segment.is_none() && self.subsegment.is_none()
    }
}

/// Integer label id to class mapping. Id 0 is always background.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub classes: BTreeMap<u16, LabelClass>,
}

impl Codebook {
    /// 1-127 subsegmental, 128-145 segmental, 146-150 lobar, 151 Trunk.
    pub fn canonical() -> Self {
        let all = subsegment_classes()
            .into_iter()
            .chain(Segment::ALL.map(LabelClass::Segment))
            .chain(Lobe::ALL.map(LabelClass::Lobe))
            .chain([LabelClass::Trunk]);
        Self { classes: (1u16..).zip(all).collect() }
    }

    pub fn get(&self, id: u16) -> Option<LabelClass> {
        self.classes.get(&id).copied()
    }

    pub fn id_of(&self, class: LabelClass) -> Option<u16> {
        self.classes.iter().find(|(_, c)| **c == class).map(|(&id, _)| id)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let classes: BTreeMap<String, String> =
            self.classes.iter().map(|(id, c)| (id.to_string(), c.name())).collect();
        serde_json::json!({
            "schema": format!("bronchograph/codebook/v{}", crate::SCHEMA_VERSION),
            "classes": classes,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, TaxonomyError> {
        let obj = value
            .get("classes")
            .and_then(|c| c.as_object())
            .ok_or_else(|| TaxonomyError::MalformedCodebook("missing \"classes\" object".into()))?;
        let mut classes = BTreeMap::new();
        for (k, v) in obj {
            let id: u16 = k
                .parse()
                .map_err(|_| TaxonomyError::MalformedCodebook(format!("bad id {k:?}")))?;
            if id == 0 {
                return Err(TaxonomyError::MalformedCodebook("id 0 is reserved".into()));
            }
            let name = v
                .as_str()
                .ok_or_else(|| TaxonomyError::MalformedCodebook(format!("id {id}: not a string")))?;
            let class = LabelClass::parse(name)
                .ok_or_else(|| TaxonomyError::UnknownClassName(name.to_string()))?;
            classes.insert(id, class);
        }
        Ok(Self { classes })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGraph {
    pub graph: AirwayGraph,
    pub labels: Vec<BranchLabel>,
}

impl LabeledGraph {
    pub fn new(graph: AirwayGraph, labels: Vec<BranchLabel>) -> Self {
        assert_eq!(graph.len(), labels.len());
        Self { graph, labels }
    }

    /// Hand-built fixture from parent links and class per branch.
    pub fn from_classes(parents: &[Option<usize>], classes: &[LabelClass]) -> Self {
        let graph = AirwayGraph::from_parents(parents).expect("fixture is a tree");
        Self::new(graph, classes.iter().map(|c| c.label()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class(&self, i: usize) -> LabelClass {
        self.labels[i].class()
    }

    pub fn is_trunk(&self, i: usize) -> bool {
        self.labels[i].is_trunk()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::json!({
                    "branch": i,
                    "lobe": l.lobe.map(Lobe::name),
                    "segment": l.segment.map(Segment::name),
                    "subsegment": l.subsegment,
                    "class": l.class().name(),
                })
            })
            .collect();
        serde_json::json!({
            "schema": format!("bronchograph/labels/v{}", crate::SCHEMA_VERSION),
            "labels": rows,
            "violations": check_hierarchy(self).len(),
        })
    }
}

/// Strict-majority vote over each branch's centerline voxels, level by level:
/// lobe, then segment, then subsegment code. A level without a value held by
/// more than half of the voxels (background included) stops the descent, so
/// the result is hierarchy-consistent by construction.
pub fn assign_labels(
    g: &AirwayGraph,
    labels: &Volume,
    codebook: &Codebook,
) -> Result<LabeledGraph, TaxonomyError> {
    if labels.grid.dims != g.grid.dims {
        return Err(TaxonomyError::DimsMismatch { labels: labels.grid.dims, graph: g.grid.dims });
    }
    let mut out = Vec::with_capacity(g.len());
    for b in &g.branches {
        let mut classes = Vec::with_capacity(b.centerline.len());
        for &v in &b.centerline {
            let id = labels.data[v];
            if id == 0 {
                classes.push(None);
            } else {
                classes.push(Some(codebook.get(id).ok_or(TaxonomyError::UnknownLabelId(id))?));
            }
        }
        out.push(vote(&classes));
    }
    Ok(LabeledGraph::new(g.clone(), out))
}

fn majority<T: Ord + Copy>(items: impl Iterator<Item = Option<T>>, total: usize) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for t in items.flatten() {
        *counts.entry(t).or_default() += 1;
    }
    counts.into_iter().find(|&(_, n)| 2 * n > total).map(|(t, _)| t)
}

fn vote(classes: &[Option<LabelClass>]) -> BranchLabel {
    let n = classes.len();
    let labels: Vec<BranchLabel> = classes.iter().map(|c| c.map(|c| c.label()).unwrap_or_default()).collect();
    let mut out = BranchLabel::default();
    let Some(lobe) = majority(labels.iter().map(|l| l.lobe), n) else { return out };
    out.lobe = Some(lobe);
    let Some(seg) = majority(labels.iter().map(|l| l.segment), n) else { return out };
    out.segment = Some(seg);
    out.subsegment =
        majority(labels.iter().map(|l| l.segment.filter(|&s| s == seg).and(l.subsegment)), n);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub branch: usize,
    pub reason: String,
}

/// One entry per branch whose labels contradict the hierarchy.
pub fn check_hierarchy(lg: &LabeledGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, l) in lg.labels.iter().enumerate() {
        let reason = match (l.lobe, l.segment, l.subsegment) {
            (_, None, Some(c)) => Some(format!("subsegment code {c} without a segment")),
            (lobe, Some(s), _) if lobe != Some(s.lobe()) => Some(format!(
                "segment {} implies lobe {}, found {}",
                s.name(),
                s.lobe().name(),
                lobe.map_or("none", Lobe::name)
            )),
            (_, Some(s), Some(c)) if c > 6 && !(c == CODE_ABC && s == Segment::LB1_2) => {
                Some(format!("code {c} not defined for {}", s.name()))
            }
            _ => None,
        };
        if let Some(reason) = reason {
            out.push(Violation { branch: i, reason });
        }
    }
    out
}

/// Paints every branch's voxel set with the id of its most specific class.
pub fn render_labels(lg: &LabeledGraph, codebook: &Codebook) -> Result<Volume, TaxonomyError> {
    let mut vol = Volume::zeros(lg.graph.grid, VolumeKind::Labels);
    for (b, l) in lg.graph.branches.iter().zip(&lg.labels) {
        let class = l.class();
        let id = codebook
            .id_of(class)
            .ok_or_else(|| TaxonomyError::UnknownClassName(class.name()))?;
        for &v in b.voxels.iter().chain(&b.centerline) {
            vol.data[v] = id;
        }
    }
    Ok(vol)
}
