//! Branching-pattern classification at three levels: segments within a
//! lobe, subsegments within a segment, and subsegments across neighbouring
//! segments.
//!
//! Clusters are sets of classes that share a common trunk. A configuration
//! key lists the clusters, members joined by `+` and clusters by `,`, as in
//! "B1+2+3,B4+5" or "B1+2a+b,B1+2c".

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::taxonomy::{code_suffix, cotrunk_members, LabeledGraph, Lobe, Segment, CODE_ABC, CODE_ROOT};
use crate::union_find::UnionFind;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("no reports to aggregate")]
    Empty,
    #[error("csv: {0}")]
    Csv(String),
}

/// Name for a cluster count: 1 is Mono, 2 Bi, up to 5 Quint.
pub fn furcation_name(clusters: usize) -> String {
    match clusters {
        1 => "Mono".into(),
        2 => "Bi".into(),
        3 => "Tri".into(),
        4 => "Quadri".into(),
        5 => "Quint".into(),
        n => format!("{n}-furcation"),
    }
}

/// One member of a cluster: a whole segment or one of its subsegments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Member {
    Segment(Segment),
    Sub(Segment, u8),
}

impl Ord for Member {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for Member {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Member {
    fn sort_key(self) -> (Segment, u8) {
        match self {
            Member::Segment(s) => (s, 0),
            Member::Sub(s, c) => (s, c),
        }
    }

    fn segment(self) -> Segment {
        match self {
            Member::Segment(s) | Member::Sub(s, _) => s,
        }
    }

    pub fn name(self) -> String {
        match self {
            Member::Segment(s) => s.short_name().to_string(),
            Member::Sub(s, c) => format!("{}{}", s.short_name(), code_suffix(c)),
        }
    }
}

/// Joins a sorted cluster into one key: "B1+2" + "B3" gives "B1+2+3",
/// "B1+2a" + "B1+2b" gives "B1+2a+b".
fn cluster_key(members: &[Member]) -> String {
    let mut out = String::new();
    let mut prev: Option<Member> = None;
    for &m in members {
        match (prev, m) {
            (None, _) => out.push_str(&m.name()),
            (Some(Member::Sub(ps, _)), Member::Sub(s, c)) if ps == s => {
                out.push('+');
                out.push_str(code_suffix(c));
            }
            _ => {
                out.push('+');
                out.push_str(&m.name()[1..]);
            }
        }
        prev = Some(m);
    }
    out
}

fn configuration(clusters: &[Vec<Member>]) -> String {
    clusters.iter().map(|c| cluster_key(c)).collect::<Vec<_>>().join(",")
}

/// Sorts members within clusters and clusters by their first member.
fn canonical(mut clusters: Vec<Vec<Member>>) -> Vec<Vec<Member>> {
    for c in &mut clusters {
        c.sort();
    }
    clusters.sort();
    clusters
}

fn names(clusters: &[Vec<Member>]) -> Vec<Vec<String>> {
    clusters.iter().map(|c| c.iter().map(|m| m.name()).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LobePattern {
    pub lobe: String,
    pub clusters: Vec<Vec<String>>,
    pub configuration: String,
    pub furcation: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CoTrunk {
    #[serde(rename = "mono")]
    Mono,
    #[serde(rename = "a+b")]
    AB,
    #[serde(rename = "b+c")]
    BC,
    #[serde(rename = "a+c")]
    AC,
    #[serde(rename = "a+b+c")]
    ABC,
    #[serde(rename = "trifurcation")]
    Trifurcation,
}

impl CoTrunk {
    fn from_code(code: u8) -> CoTrunk {
        match code {
            4 => CoTrunk::AB,
            5 => CoTrunk::BC,
            6 => CoTrunk::AC,
            _ => CoTrunk::ABC,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentPattern {
    pub segment: String,
    #[serde(skip)]
    pub seg: Segment,
    pub valid: bool,
    /// 1 when the code-0 root subsegment is present, else 2.
    pub stem_number: u8,
    pub cotrunk: CoTrunk,
    pub clusters: Vec<Vec<String>>,
    pub configuration: String,
    pub furcation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockPattern {
    pub block: String,
    pub clusters: Vec<Vec<String>>,
    pub configuration: String,
    pub furcation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatternReport {
    pub schema: &'static str,
    pub lobes: Vec<LobePattern>,
    pub skipped_lobes: Vec<String>,
    pub segments: Vec<SegmentPattern>,
    pub blocks: Vec<BlockPattern>,
    pub skipped_blocks: Vec<String>,
}

impl PatternReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Groups of neighbouring segments analysed together for inter-subsegment
/// patterns.
pub const BLOCKS: [(&str, &[Segment]); 6] = {
    use Segment::*;
    [
        ("LB1+2-LB3", &[LB1_2, LB3]),
        ("LB4-LB5", &[LB4, LB5]),
        ("LB6-LB10", &[LB6, LB8, LB9, LB10]),
        ("RB1-RB3", &[RB1, RB2, RB3]),
        ("RB4-RB5", &[RB4, RB5]),
        ("RB6-RB10", &[RB6, RB7, RB8, RB9, RB10]),
    ]
};

/// Node of minimum generation among `nodes`. Ties are resolved to the lca
/// of the tied nodes so the choice does not depend on branch numbering.
fn representative(lg: &LabeledGraph, nodes: &[usize]) -> Option<usize> {
    let topo = &lg.graph.topology;
    let min = nodes.iter().map(|&n| topo.generation[n]).min()?;
    nodes.iter().copied().filter(|&n| topo.generation[n] == min).reduce(|a, b| topo.lca(a, b))
}

/// Segment-level pairwise test: the lca of the two representatives is Trunk
/// and every node under it is Trunk or belongs to one of the two segments.
fn segments_cotrunk(lg: &LabeledGraph, reps: &[Option<usize>; 18], i: Segment, j: Segment) -> bool {
    let (Some(ri), Some(rj)) = (reps[i.index()], reps[j.index()]) else { return false };
    let topo = &lg.graph.topology;
    let lca = topo.lca(ri, rj);
    lg.is_trunk(lca)
        && topo.descendants(lca).all(|d| {
            let l = &lg.labels[d];
            l.is_trunk() || l.segment == Some(i) || l.segment == Some(j)
        })
}

fn segment_reps(lg: &LabeledGraph) -> [Option<usize>; 18] {
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); 18];
    for (n, l) in lg.labels.iter().enumerate() {
        if let Some(s) = l.segment {
            nodes[s.index()].push(n);
        }
    }
    std::array::from_fn(|k| representative(lg, &nodes[k]))
}

/// Segment clusters per lobe. Lobes with any absent segment are skipped.
pub fn intra_segment_patterns(lg: &LabeledGraph) -> (Vec<LobePattern>, Vec<Lobe>) {
    let reps = segment_reps(lg);
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for lobe in Lobe::ALL {
        let segs = lobe.segments();
        if segs.iter().any(|s| reps[s.index()].is_none()) {
            skipped.push(lobe);
            continue;
        }
        let mut uf = UnionFind::new(segs.len());
        for a in 0..segs.len() {
            for b in a + 1..segs.len() {
                if segments_cotrunk(lg, &reps, segs[a], segs[b]) {
                    uf.union(a, b);
                }
            }
        }
        let clusters = canonical(
            uf.groups().into_iter().map(|g| g.into_iter().map(|k| Member::Segment(segs[k])).collect()).collect(),
        );
        out.push(LobePattern {
            lobe: lobe.name().to_string(),
            clusters: names(&clusters),
            configuration: configuration(&clusters),
            furcation: furcation_name(clusters.len()),
        });
    }
    (out, skipped)
}

/// Subsegment configuration of every segment, in canonical segment order.
pub fn intra_subsegment_patterns(lg: &LabeledGraph) -> Vec<SegmentPattern> {
    Segment::ALL
        .into_iter()
        .map(|seg| {
            let present = |code: u8| {
                lg.labels.iter().any(|l| l.segment == Some(seg) && l.subsegment == Some(code))
            };
            let stem_number = if present(CODE_ROOT) { 1 } else { 2 };
            let basic = seg.basic_codes();
            let all_basic = basic.iter().all(|&c| present(c));
            let (valid, cotrunk, code_clusters): (bool, CoTrunk, Vec<Vec<u8>>) = if !seg.has_three_subsegments() {
                let clusters = if stem_number == 1 { vec![vec![1, 2]] } else { vec![vec![1], vec![2]] };
                (all_basic, CoTrunk::Mono, clusters)
            } else {
                let cos: Vec<u8> = (4..=CODE_ABC).filter(|&c| present(c)).collect();
                match cos.as_slice() {
                    [] => (all_basic, CoTrunk::Trifurcation, vec![vec![1], vec![2], vec![3]]),
                    &[c] => {
                        let members = cotrunk_members(c).to_vec();
                        let mut clusters = vec![members.clone()];
                        clusters.extend(basic.iter().filter(|x| !members.contains(x)).map(|&x| vec![x]));
                        (all_basic, CoTrunk::from_code(c), clusters)
                    }
                    _ => (false, CoTrunk::Trifurcation, Vec::new()),
                }
            };
            let clusters = if valid {
                canonical(code_clusters.into_iter().map(|g| g.into_iter().map(|c| Member::Sub(seg, c)).collect()).collect())
            } else {
                Vec::new()
            };
            SegmentPattern {
                segment: seg.name().to_string(),
                seg,
                valid,
                stem_number,
                cotrunk,
                clusters: names(&clusters),
                configuration: configuration(&clusters),
                furcation: if valid { furcation_name(clusters.len()) } else { String::new() },
            }
        })
        .collect()
}

/// Pairwise merge relation between basic subsegments, over the whole graph.
/// Pairs are returned with the smaller member first.
pub fn subsegment_merges(lg: &LabeledGraph) -> Vec<(Member, Member)> {
    let topo = &lg.graph.topology;
    let mut by_class: BTreeMap<(Segment, u8), Vec<usize>> = BTreeMap::new();
    let mut by_seg: BTreeMap<Segment, Vec<usize>> = BTreeMap::new();
    for (n, l) in lg.labels.iter().enumerate() {
        if let Some(s) = l.segment {
            by_seg.entry(s).or_default().push(n);
            if let Some(c) = l.subsegment {
                by_class.entry((s, c)).or_default().push(n);
            }
        }
    }
    let rep = |k: &(Segment, u8)| by_class.get(k).and_then(|v| representative(lg, v));
    let basics: Vec<(Segment, u8)> =
        by_class.keys().copied().filter(|&(s, c)| s.basic_codes().contains(&c)).collect();

    let mut pairs = Vec::new();
    let mut push = |a: Member, b: Member| {
        if a != b {
            pairs.push(if a < b { (a, b) } else { (b, a) });
        }
    };
    for (&(s, c), _) in by_class.iter().filter(|(&(_, c), _)| (4..=CODE_ABC).contains(&c)) {
        let m = cotrunk_members(c);
        for w in m.windows(2) {
            push(Member::Sub(s, w[0]), Member::Sub(s, w[1]));
        }
    }
    for (ii, &i) in basics.iter().enumerate() {
        let ri = rep(&i).expect("present");
        for &j in &basics[..ii] {
            let rj = rep(&j).expect("present");
            let lca = topo.lca(ri, rj);
            let ok = lg.is_trunk(lca)
                && topo.descendants(lca).all(|d| {
                    let l = &lg.labels[d];
                    l.is_trunk() || matches!((l.segment, l.subsegment), (Some(s), Some(c)) if (s, c) == i || (s, c) == j)
                });
            if ok {
                push(Member::Sub(i.0, i.1), Member::Sub(j.0, j.1));
            }
        }
        for (&k, nodes) in &by_seg {
            if k == i.0 {
                continue;
            }
            let rk = representative(lg, nodes).expect("nonempty");
            let lca = topo.lca(ri, rk);
            let ok = topo.descendants(lca).all(|d| {
                let l = &lg.labels[d];
                l.is_trunk() || l.segment == Some(k) || (l.segment == Some(i.0) && l.subsegment == Some(i.1))
            });
            if ok {
                for &c in k.basic_codes() {
                    push(Member::Sub(i.0, i.1), Member::Sub(k, c));
                }
            }
        }
    }
    pairs.sort();
    pairs.dedup();
    pairs
}

/// Replaces the subsegments of a segment by the segment itself when a
/// cluster spans several segments and holds all of that segment's subsegments.
fn collapse(cluster: Vec<Member>) -> Vec<Member> {
    let mut segs: Vec<Segment> = cluster.iter().map(|m| m.segment()).collect();
    segs.dedup();
    if segs.len() < 2 {
        return cluster;
    }
    let mut out = Vec::new();
    for s in segs {
        let subs: Vec<Member> = cluster.iter().copied().filter(|m| m.segment() == s).collect();
        if s.basic_codes().iter().all(|&c| subs.contains(&Member::Sub(s, c))) {
            out.push(Member::Segment(s));
        } else {
            out.extend(subs);
        }
    }
    out
}

/// Subsegment clusters per block; blocks with an invalid segment are skipped.
pub fn inter_subsegment_patterns(lg: &LabeledGraph, segments: &[SegmentPattern]) -> (Vec<BlockPattern>, Vec<String>) {
    let merges = subsegment_merges(lg);
    let valid = |s: Segment| segments.iter().any(|p| p.seg == s && p.valid);
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (name, segs) in BLOCKS {
        if !segs.iter().all(|&s| valid(s)) {
            skipped.push(name.to_string());
            continue;
        }
        let members: Vec<Member> =
            segs.iter().flat_map(|&s| s.basic_codes().iter().map(move |&c| Member::Sub(s, c))).collect();
        let pos = |m: &Member| members.iter().position(|x| x == m);
        let mut uf = UnionFind::new(members.len());
        for (a, b) in &merges {
            if let (Some(x), Some(y)) = (pos(a), pos(b)) {
                uf.union(x, y);
            }
        }
        let clusters = canonical(
            uf.groups().into_iter().map(|g| collapse(canonical(vec![g.into_iter().map(|k| members[k]).collect()]).remove(0))).collect(),
        );
        out.push(BlockPattern {
            block: name.to_string(),
            clusters: names(&clusters),
            configuration: configuration(&clusters),
            furcation: furcation_name(clusters.len()),
        });
    }
    (out, skipped)
}

/// All three analyses on one labeled graph.
pub fn analyze_patterns(lg: &LabeledGraph) -> PatternReport {
    let (lobes, skipped_lobes) = intra_segment_patterns(lg);
    let segments = intra_subsegment_patterns(lg);
    let (blocks, skipped_blocks) = inter_subsegment_patterns(lg, &segments);
    PatternReport {
        schema: "bronchograph/patterns/v1",
        lobes,
        skipped_lobes: skipped_lobes.iter().map(|l| l.name().to_string()).collect(),
        segments,
        blocks,
        skipped_blocks,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatternFrequency {
    pub group: String,
    pub configuration: String,
    pub furcation: String,
    pub count: usize,
    /// Valid cases for the group.
    pub total: usize,
    pub percentage: f64,
}

/// Per-group configuration frequencies. Percentages use the number of cases
/// in which the group was valid as denominator.
pub fn aggregate_pattern_stats(reports: &[PatternReport]) -> Result<Vec<PatternFrequency>, PatternError> {
    if reports.is_empty() {
        return Err(PatternError::Empty);
    }
    // (group rank, group, configuration) -> (furcation, count)
    let mut counts: BTreeMap<(usize, String, String), (String, usize)> = BTreeMap::new();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |rank: usize, group: &str, config: String, furcation: &str| {
        counts.entry((rank, group.to_string(), config)).or_insert_with(|| (furcation.to_string(), 0)).1 += 1;
        *totals.entry(group.to_string()).or_insert(0) += 1;
    };
    for r in reports {
        for l in &r.lobes {
            let rank = Lobe::ALL.iter().position(|x| x.name() == l.lobe).unwrap_or(0);
            add(rank, &l.lobe, l.configuration.clone(), &l.furcation);
        }
        for s in r.segments.iter().filter(|s| s.valid) {
            let config = format!("{} ({}-stem)", s.configuration, s.stem_number);
            add(5 + s.seg.index(), &s.segment, config, &s.furcation);
        }
        for b in &r.blocks {
            let rank = BLOCKS.iter().position(|(n, _)| *n == b.block).unwrap_or(0);
            add(23 + rank, &b.block, b.configuration.clone(), &b.furcation);
        }
    }
    Ok(counts
        .into_iter()
        .map(|((_, group, configuration), (furcation, count))| {
            let total = totals[&group];
            PatternFrequency { percentage: 100.0 * count as f64 / total as f64, group, configuration, furcation, count, total }
        })
        .collect())
}

pub fn write_frequency_csv<W: Write>(rows: &[PatternFrequency], out: W) -> Result<(), PatternError> {
    let err = |e: csv::Error| PatternError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "configuration", "furcation", "count", "total", "percentage"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.configuration.clone(),
            r.furcation.clone(),
            r.count.to_string(),
            r.total.to_string(),
            format!("{:.4}", r.percentage),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| PatternError::Csv(e.to_string()))
}
