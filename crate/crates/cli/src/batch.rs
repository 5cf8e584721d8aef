use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bronchograph::patterns::{aggregate_pattern_stats, write_frequency_csv};
use bronchograph::pipeline::{run_batch, CaseInput, CaseOutput};
use bronchograph::signatures::{SignatureMatrix, ABSENT, DESCRIPTORS};
use bronchograph::stats::{
    build_reference, flag_significant, rank_top_k, write_flags_csv, write_ranked_csv, FeatureTable, Group,
};
use bronchograph::SCHEMA_VERSION;
use serde_json::{json, Value};

use crate::{pretty, write_text, Options, Report};

const VOLUME_EXTS: [&str; 3] = ["nrrd", "nhdr", "json"];

fn find_volume(dir: &Path, stem: &str) -> Result<PathBuf> {
    VOLUME_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .with_context(|| format!("{}: no {stem}.nrrd, {stem}.nhdr or {stem}.json", dir.display()))
}

fn case_id(dir: &Path) -> Result<String> {
    let name = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
    name.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .with_context(|| format!("{}: cannot derive a case id", dir.display()))
}

fn load_case(opts: &Options, dir: &Path, id: String) -> Result<CaseInput> {
    let mask = opts.load_mask(&find_volume(dir, "mask")?)?;
    let labels = opts.load(&find_volume(dir, "labels")?)?;
    Ok(CaseInput { id, mask, labels: Some(labels) })
}

/// Runs the pipeline over case directories in case-id order. Cases that fail
/// to load or process are logged and returned by id in the second slot.
fn run_cases(opts: &Options, dirs: &[PathBuf]) -> Result<(Vec<CaseOutput>, Vec<String>)> {
    let params = opts.pipeline_params()?;
    let codebook = opts.codebook()?;
    let mut ids = BTreeMap::new();
    for dir in dirs {
        let id = case_id(dir)?;
        if ids.insert(id.clone(), dir.clone()).is_some() {
            bail!("case id {id:?} appears twice");
        }
    }
    let mut skipped = Vec::new();
    let mut inputs = Vec::new();
    for (id, dir) in ids {
        match load_case(opts, &dir, id.clone()) {
            Ok(c) => inputs.push(c),
            Err(e) => {
                log::error!("skipping {id}: {e:#}");
                skipped.push(id);
            }
        }
    }
    let mut done = Vec::new();
    for (case, result) in inputs.iter().zip(run_batch(&inputs, &params, &codebook, opts.workers())) {
        match result {
            Ok(out) => done.push(out),
            Err(e) => {
                log::error!("skipping {}: {e}", case.id);
                skipped.push(case.id.clone());
            }
        }
    }
    skipped.sort();
    Ok((done, skipped))
}

fn out_dir(opts: &Options) -> Result<Option<&Path>> {
    match opts.out.as_deref() {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

pub fn patterns(opts: &Options, dirs: &[PathBuf]) -> Result<Report> {
    let (done, skipped) = run_cases(opts, dirs)?;
    let reports: Vec<_> = done.iter().map(|c| c.patterns.clone().expect("labels were given")).collect();
    let frequencies = if reports.is_empty() { Vec::new() } else { aggregate_pattern_stats(&reports)? };
    let cases: serde_json::Map<String, Value> = done.iter().zip(&reports).map(|(c, r)| (c.id.clone(), r.to_json())).collect();
    let doc = json!({
        "schema": format!("bronchograph/pattern-batch/v{SCHEMA_VERSION}"),
        "cases": cases,
        "frequencies": frequencies,
        "skipped": skipped,
    });
    let text = match out_dir(opts)? {
        Some(dir) => {
            for (c, r) in done.iter().zip(&reports) {
                write_text(&dir.join(format!("{}.patterns.json", c.id)), &pretty(&r.to_json()))?;
            }
            let mut csv = Vec::new();
            write_frequency_csv(&frequencies, &mut csv)?;
            write_text(&dir.join("frequencies.csv"), &String::from_utf8(csv).expect("csv is utf-8"))?;
            let mut text = String::new();
            for (c, r) in done.iter().zip(&reports) {
                let lobes: Vec<String> = r.lobes.iter().map(|l| format!("{} {}", l.lobe, l.configuration)).collect();
                let valid = r.segments.iter().filter(|s| s.valid).count();
                text += &format!("{}: {} valid segments; {}\n", c.id, valid, lobes.join("; "));
            }
            text
        }
        None => pretty(&doc),
    };
    Ok(Report { doc, text, skipped: !skipped.is_empty() })
}

pub fn signatures(opts: &Options, dirs: &[PathBuf]) -> Result<Report> {
    let (done, skipped) = run_cases(opts, dirs)?;
    let cases: serde_json::Map<String, Value> =
        done.iter().map(|c| (c.id.clone(), c.signatures.as_ref().expect("labels were given").to_json())).collect();
    let doc = json!({
        "schema": format!("bronchograph/signature-batch/v{SCHEMA_VERSION}"),
        "cases": cases,
        "skipped": skipped,
    });
    let text = match out_dir(opts)? {
        Some(dir) => {
            for c in &done {
                let mut csv = Vec::new();
                c.signatures.as_ref().expect("labels were given").write_csv(&mut csv)?;
                write_text(&dir.join(format!("{}.csv", c.id)), &String::from_utf8(csv).expect("csv is utf-8"))?;
            }
            format!("{} signature matrices written to {}\n", done.len(), dir.display())
        }
        None => pretty(&doc),
    };
    Ok(Report { doc, text, skipped: !skipped.is_empty() })
}

/// One feature per signature cell present in every case.
fn derived_features(cases: &BTreeMap<String, (Group, SignatureMatrix)>) -> FeatureTable {
    let first = &cases.values().next().expect("nonempty cohort").1;
    let mut cells = Vec::new();
    for (r, row) in first.rows.iter().enumerate() {
        for (d, name) in DESCRIPTORS.iter().enumerate() {
            if cases.values().all(|(_, m)| m.rows[r].values[d] != ABSENT) {
                cells.push((r, d, format!("{}:{name}", row.component)));
            }
        }
    }
    FeatureTable {
        features: cells.iter().map(|c| c.2.clone()).collect(),
        samples: cases
            .iter()
            .map(|(id, (g, m))| (id.clone(), *g, cells.iter().map(|&(r, d, _)| m.rows[r].values[d]).collect()))
            .collect(),
    }
}

pub fn cohort(
    opts: &Options,
    sig_dir: &Path,
    groups: &Path,
    features: Option<&Path>,
    top_k: usize,
    alpha: f64,
) -> Result<Report> {
    let text = fs::read_to_string(groups).with_context(|| format!("reading {}", groups.display()))?;
    let manifest: BTreeMap<String, String> = serde_json::from_str(&text).with_context(|| format!("parsing {}", groups.display()))?;
    let mut skipped = Vec::new();
    let mut controls = Vec::new();
    let mut loaded: BTreeMap<String, (bool, SignatureMatrix)> = BTreeMap::new();
    for (id, group) in &manifest {
        let control = match group.as_str() {
            "control" => true,
            "experimental" => false,
            other => bail!("case {id}: group must be \"control\" or \"experimental\", got {other:?}"),
        };
        let path = sig_dir.join(format!("{id}.csv"));
        let matrix = fs::File::open(&path)
            .with_context(|| format!("opening {}", path.display()))
            .and_then(|f| SignatureMatrix::read_csv(f).with_context(|| format!("parsing {}", path.display())));
        match matrix {
            Ok(m) => {
                if control {
                    controls.push(m.clone());
                }
                loaded.insert(id.clone(), (control, m));
            }
            Err(e) => {
                log::error!("skipping {id}: {e:#}");
                skipped.push(id.clone());
            }
        }
    }
    let reference = build_reference(&controls).context("building the control reference")?;
    let mut flags = BTreeMap::new();
    for (id, (_, m)) in &loaded {
        flags.insert(id.clone(), flag_significant(m, &reference).with_context(|| format!("case {id}"))?);
    }

    let table = match features {
        Some(path) => {
            let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Some(FeatureTable::read_csv(f).with_context(|| format!("parsing {}", path.display()))?)
        }
        None if loaded.is_empty() => None,
        None => {
            let grouped = loaded
                .iter()
                .map(|(id, (control, m))| {
                    let g = if *control {
                        Group::Control
                    } else if flags[id].iter().any(|f| f.significant) {
                        Group::Significant
                    } else {
                        Group::Insignificant
                    };
                    (id.clone(), (g, m.clone()))
                })
                .collect();
            Some(derived_features(&grouped))
        }
    };
    let ranked = match table.as_ref().map(|t| rank_top_k(t, top_k, alpha)) {
        Some(Ok(r)) => Some(r),
        Some(Err(e)) if features.is_some() => return Err(e).context("ranking features"),
        Some(Err(e)) => {
            log::warn!("no feature ranking: {e}");
            None
        }
        None => None,
    };

    let n_flagged: usize = flags.values().filter(|f| f.iter().any(|c| c.significant)).count();
    let doc = json!({
        "schema": format!("bronchograph/cohort/v{SCHEMA_VERSION}"),
        "controls": controls.len(),
        "cases": loaded.len(),
        "reference": reference,
        "flags": flags,
        "ranked": ranked,
        "skipped": skipped,
    });
    let text = match out_dir(opts)? {
        Some(dir) => {
            let mut buf = Vec::new();
            reference.write_csv(&mut buf)?;
            write_text(&dir.join("reference.csv"), &String::from_utf8(std::mem::take(&mut buf)).expect("utf-8"))?;
            write_flags_csv(&flags, &mut buf)?;
            write_text(&dir.join("flags.csv"), &String::from_utf8(std::mem::take(&mut buf)).expect("utf-8"))?;
            if let Some(r) = &ranked {
                write_ranked_csv(r, &mut buf)?;
                write_text(&dir.join("ranked.csv"), &String::from_utf8(buf).expect("utf-8"))?;
            }
            format!(
                "{} controls, {} cases with a significant component, {} ranked features -> {}\n",
                controls.len(),
                n_flagged,
                ranked.as_ref().map_or(0, Vec::len),
                dir.display()
            )
        }
        None => pretty(&doc),
    };
    Ok(Report { doc, text, skipped: !skipped.is_empty() })
}
