//! End-to-end case processing: mask to skeleton, graph, features and, when
//! a label volume is given, labels, patterns and signatures.

use serde_json::json;
use thiserror::Error;

use crate::edt::{distance_transform_with, DistanceField};
use crate::features::{all_features, FeatureVector};
use crate::graph::{partition_branches_with, AirwayGraph};
use crate::par::{self, Exec};
use crate::patterns::{analyze_patterns, PatternReport};
use crate::signatures::{signature_matrix_with, SignatureMatrix, SignatureParams};
use crate::skeleton::{extract_skeleton, select_root, SkelError, SkelParams, SkeletonTree};
use crate::taxonomy::{assign_labels, Codebook, LabeledGraph, TaxonomyError};
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Skeleton(#[from] SkelError),
    #[error(transparent)]
    Labels(#[from] TaxonomyError),
}

#[derive(Clone, Debug, Default)]
pub struct PipelineParams {
    pub skel: SkelParams,
    pub signatures: SignatureParams,
    pub root_hint: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct CaseInput {
    pub id: String,
    pub mask: Volume,
    pub labels: Option<Volume>,
}

#[derive(Clone, Debug)]
pub struct CaseOutput {
    pub id: String,
    pub edt: DistanceField,
    pub skeleton: SkeletonTree,
    pub graph: AirwayGraph,
    pub features: Vec<FeatureVector>,
    pub labeled: Option<LabeledGraph>,
    pub patterns: Option<PatternReport>,
    pub signatures: Option<SignatureMatrix>,
}

/// Distance transform, skeleton and branch graph of one mask.
pub fn analyze_mask(
    mask: &Volume,
    params: &PipelineParams,
    exec: Exec,
) -> Result<(DistanceField, SkeletonTree, AirwayGraph), SkelError> {
    let edt = distance_transform_with(mask, exec);
    let root = select_root(mask, &edt, params.root_hint)?;
    let skeleton = extract_skeleton(mask, &edt, root, &params.skel)?;
    let graph = partition_branches_with(&skeleton, mask, &edt, exec);
    Ok((edt, skeleton, graph))
}

pub fn run_case(case: &CaseInput, params: &PipelineParams, codebook: &Codebook, exec: Exec) -> Result<CaseOutput, PipelineError> {
    let (edt, skeleton, graph) = analyze_mask(&case.mask, params, exec)?;
    let features = all_features(&graph);
    let labeled = match &case.labels {
        Some(l) => Some(assign_labels(&graph, l, codebook)?),
        None => None,
    };
    let patterns = labeled.as_ref().map(analyze_patterns);
    let signatures = labeled.as_ref().map(|lg| signature_matrix_with(lg, &params.signatures, exec));
    Ok(CaseOutput { id: case.id.clone(), edt, skeleton, graph, features, labeled, patterns, signatures })
}

/// Processes every case on `workers` threads. Results come back in input
/// order whatever the worker count.
pub fn run_batch(
    cases: &[CaseInput],
    params: &PipelineParams,
    codebook: &Codebook,
    workers: usize,
) -> Vec<Result<CaseOutput, PipelineError>> {
    par::with_workers(workers, || par::map(Exec::Parallel, cases, |c| run_case(c, params, codebook, Exec::Parallel)))
}

impl CaseOutput {
    /// Summary document holding every derived artifact except the EDT.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "schema": "bronchograph/case/v1",
            "id": self.id,
            "skeleton": self.skeleton.to_json(),
            "graph": self.graph.to_json(),
            "features": self.features,
            "labels": self.labeled.as_ref().map(|l| l.to_json()),
            "patterns": self.patterns.as_ref().map(|p| p.to_json()),
            "signatures": self.signatures.as_ref().map(|s| s.to_json()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{library_spec, render_phantom};

    #[test]
    fn batch_order_and_worker_independence() {
        let cases: Vec<CaseInput> = ["y_tube", "rmb", "elbow"]
            .iter()
            .map(|n| {
                let p = render_phantom(&library_spec(n, 1.0).unwrap()).unwrap();
                CaseInput { id: n.to_string(), mask: p.mask, labels: Some(p.labels) }
            })
            .collect();
        let params = PipelineParams::default();
        let cb = Codebook::canonical();
        let render = |w| -> Vec<String> {
            run_batch(&cases, &params, &cb, w).into_iter().map(|r| r.unwrap().to_json().to_string()).collect()
        };
        let one = render(1);
        assert_eq!(one, render(3));
        let ids: Vec<String> =
            one.iter().map(|s| serde_json::from_str::<serde_json::Value>(s).unwrap()["id"].as_str().unwrap().to_string()).collect();
        assert_eq!(ids, ["y_tube", "rmb", "elbow"]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let p = render_phantom(&library_spec("y_tube", 1.0).unwrap()).unwrap();
        let mask = Volume::zeros(p.mask.grid, crate::volume::VolumeKind::Binary);
        let case = CaseInput { id: "empty".into(), mask, labels: None };
        assert!(run_case(&case, &PipelineParams::default(), &Codebook::canonical(), Exec::Sequential).is_err());
    }
}
