mod batch;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bronchograph::edt::distance_transform;
use bronchograph::features::{all_features, write_csv as write_features_csv};
use bronchograph::graph::partition_branches;
use bronchograph::io::{load_volume_auto, save_field, save_volume, Format};
use bronchograph::metrics::{cl_dice, detection_rates, label_metrics, overlap_metrics, Level};
use bronchograph::phantom::{library_spec, random_tree, render_phantom, PhantomSpec, LIBRARY_NAMES};
use bronchograph::pipeline::PipelineParams;
use bronchograph::signatures::SignatureParams;
use bronchograph::skeleton::{extract_skeleton, select_root, SkelParams};
use bronchograph::taxonomy::{assign_labels, Codebook};
use bronchograph::{AirwayGraph, DistanceField, SkeletonTree, Volume, SCHEMA_VERSION};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "bronchograph", version, about = "Airway tree skeletons, branch graphs, patterns and morphology signatures")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    opts: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Options {
    /// Print the machine-readable JSON document on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace the spacing read from input volumes: "s" or "sx,sy,sz" in mm.
    #[arg(long, global = true, value_parser = parse_spacing)]
    spacing_override: Option<[f64; 3]>,
    /// Fraction of a reference branch's centerline that must lie inside the prediction.
    #[arg(long, global = true, default_value_t = 0.8)]
    coverage_threshold: f64,
    /// Medialness penalty exponent of the skeleton path cost.
    #[arg(long, global = true, default_value_t = 6.0)]
    gamma: f64,
    /// Coverage ball radius as a multiple of the local distance value.
    #[arg(long, global = true, default_value_t = 2.0)]
    coverage_factor: f64,
    /// Cube side for box counting (power of two, at least 8).
    #[arg(long, global = true, default_value_t = 64)]
    pad_size: usize,
    /// Worker threads for batch commands.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    /// Label codebook JSON; the built-in 151-class codebook otherwise.
    #[arg(long, global = true)]
    codebook: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Euclidean distance transform of a mask.
    Edt { mask: PathBuf },
    /// Minimum path-cost skeleton of a mask.
    Skeletonize {
        mask: PathBuf,
        /// Root voxel as x,y,z; chosen automatically otherwise.
        #[arg(long, value_parser = parse_voxel)]
        root: Option<[usize; 3]>,
    },
    /// Branch graph of a mask.
    Graph { mask: PathBuf },
    /// Per-branch feature table (CSV).
    Features { mask: PathBuf },
    /// Anatomical labels of each branch from a label volume.
    Labels {
        mask: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Overlap, centerline, detection and label metrics of a prediction.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, requires = "gt_labels")]
        pred_labels: Option<PathBuf>,
        #[arg(long, requires = "pred_labels")]
        gt_labels: Option<PathBuf>,
    },
    /// Branching patterns of case directories holding mask and labels volumes.
    Patterns {
        #[arg(required = true)]
        cases: Vec<PathBuf>,
    },
    /// Morphological signature matrices of case directories.
    Signatures {
        #[arg(required = true)]
        cases: Vec<PathBuf>,
    },
    /// Control reference, significance flags and ranked features for a cohort.
    Cohort {
        /// Directory of signature CSVs named <case>.csv.
        #[arg(long)]
        signatures: PathBuf,
        /// JSON object mapping case id to "control" or "experimental".
        #[arg(long)]
        groups: PathBuf,
        /// Feature table CSV (sample, group, features...); derived from the signatures otherwise.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Render a phantom to a case directory.
    Synth {
        /// Library fixture name.
        #[arg(long, conflicts_with_all = ["random", "spec"])]
        name: Option<String>,
        /// Seed of a randomized tree.
        #[arg(long, conflicts_with = "spec")]
        random: Option<u64>,
        /// Phantom spec JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Isotropic spacing in mm for library fixtures.
        #[arg(long, default_value_t = 0.5)]
        spacing: f64,
        /// List the library fixtures and exit.
        #[arg(long)]
        list: bool,
    },
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"))).collect::<Result<_, _>>()?;
    let v = match v.as_slice() {
        [a] => [*a; 3],
        [a, b, c] => [*a, *b, *c],
        _ => return Err("expected one or three values".into()),
    };
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err("spacing must be positive".into());
    }
    Ok(v)
}

fn parse_voxel(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"))).collect::<Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| "expected x,y,z".to_string())
}

/// What a subcommand produced: the JSON document, the default text for
/// stdout and whether some batch cases were skipped.
struct Report {
    doc: Value,
    text: String,
    skipped: bool,
}

impl Report {
    fn new(doc: Value, text: impl Into<String>) -> Self {
        Self { doc, text: text.into(), skipped: false }
    }
}

impl Options {
    fn skel_params(&self) -> SkelParams {
        SkelParams { gamma: self.gamma, coverage_factor: self.coverage_factor, ..SkelParams::default() }
    }

    fn pipeline_params(&self) -> Result<PipelineParams> {
        let signatures = SignatureParams { pad_size: self.pad_size };
        signatures.validate()?;
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            bail!("--coverage-threshold must lie in [0, 1]");
        }
        Ok(PipelineParams { skel: self.skel_params(), signatures, root_hint: None })
    }

    fn codebook(&self) -> Result<Codebook> {
        match &self.codebook {
            None => Ok(Codebook::canonical()),
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                Codebook::from_json(&value).with_context(|| format!("codebook {}", path.display()))
            }
        }
    }

    fn workers(&self) -> usize {
        self.workers.map_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()), usize::from)
    }

    fn load(&self, path: &Path) -> Result<Volume> {
        let mut v = load_volume_auto(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(s) = self.spacing_override {
            v.grid = bronchograph::Grid::new(v.grid.dims, s)?;
        }
        Ok(v)
    }

    fn load_mask(&self, path: &Path) -> Result<Volume> {
        Ok(self.load(path)?.to_binary())
    }
}

fn skeletonize(opts: &Options, mask: &Volume, root: Option<usize>) -> Result<(DistanceField, SkeletonTree, AirwayGraph)> {
    let edt = distance_transform(mask);
    let root = select_root(mask, &edt, root)?;
    let skel = extract_skeleton(mask, &edt, root, &opts.skel_params())?;
    let graph = partition_branches(&skel, mask, &edt);
    Ok((edt, skel, graph))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

/// JSON-native commands: the document goes to --out when given, stdout otherwise.
fn json_output(opts: &Options, doc: Value, summary: String) -> Result<Report> {
    match &opts.out {
        Some(path) => {
            write_text(path, &pretty(&doc))?;
            Ok(Report::new(doc, summary))
        }
        None => {
            let text = pretty(&doc);
            Ok(Report::new(doc, text))
        }
    }
}

fn cmd_edt(opts: &Options, mask: &Path) -> Result<Report> {
    let mask = opts.load_mask(mask)?;
    let edt = distance_transform(&mask);
    if let Some(out) = &opts.out {
        save_field(&edt, out).with_context(|| format!("writing {}", out.display()))?;
    }
    let max = edt.max();
    let doc = json!({
        "schema": format!("bronchograph/edt/v{SCHEMA_VERSION}"),
        "dims": mask.grid.dims,
        "spacing": mask.grid.spacing,
        "foreground": mask.foreground_count(),
        "max_distance_mm": max,
    });
    Ok(Report::new(doc, format!("{} foreground voxels, max distance {max:.4} mm\n", mask.foreground_count())))
}

fn cmd_skeletonize(opts: &Options, mask: &Path, root: Option<[usize; 3]>) -> Result<Report> {
    let mask = opts.load_mask(mask)?;
    let root = match root {
        Some([x, y, z]) => {
            if x >= mask.grid.dims[0] || y >= mask.grid.dims[1] || z >= mask.grid.dims[2] {
                bail!("--root {x},{y},{z} is outside the volume");
            }
            Some(mask.grid.index(x, y, z))
        }
        None => None,
    };
    let (_, skel, _) = skeletonize(opts, &mask, root)?;
    let (b0, b1) = skel.betti();
    let summary = format!("{} nodes, {} leaves, betti ({b0}, {b1})\n", skel.len(), skel.leaves().len());
    json_output(opts, skel.to_json(), summary)
}

fn cmd_graph(opts: &Options, mask: &Path) -> Result<Report> {
    let mask = opts.load_mask(mask)?;
    let (_, _, graph) = skeletonize(opts, &mask, None)?;
    let summary = format!("{} branches, max generation {}\n", graph.len(), graph.topology.generation.iter().max().unwrap_or(&0));
    json_output(opts, graph.to_json(), summary)
}

fn cmd_features(opts: &Options, mask: &Path) -> Result<Report> {
    let mask = opts.load_mask(mask)?;
    let (_, _, graph) = skeletonize(opts, &mask, None)?;
    let features = all_features(&graph);
    let mut csv = Vec::new();
    write_features_csv(&features, &mut csv)?;
    let csv = String::from_utf8(csv).expect("csv is utf-8");
    let doc = json!({ "schema": format!("bronchograph/features/v{SCHEMA_VERSION}"), "features": features });
    match &opts.out {
        Some(path) => {
            write_text(path, &csv)?;
            Ok(Report::new(doc, format!("{} branches written to {}\n", features.len(), path.display())))
        }
        None => Ok(Report::new(doc, csv)),
    }
}

fn cmd_labels(opts: &Options, mask: &Path, labels: &Path) -> Result<Report> {
    let mask = opts.load_mask(mask)?;
    let labels = opts.load(labels)?;
    let (_, _, graph) = skeletonize(opts, &mask, None)?;
    let lg = assign_labels(&graph, &labels, &opts.codebook()?)?;
    let doc = lg.to_json();
    let summary = format!("{} branches labeled, {} hierarchy violations\n", lg.len(), doc["violations"]);
    json_output(opts, doc, summary)
}

fn cmd_metrics(opts: &Options, pred: &Path, gt: &Path, labels: Option<(&Path, &Path)>) -> Result<Report> {
    opts.pipeline_params()?;
    let pred = opts.load_mask(pred)?;
    let gt = opts.load_mask(gt)?;
    if pred.grid.dims != gt.grid.dims {
        bail!("prediction dims {:?} differ from reference dims {:?}", pred.grid.dims, gt.grid.dims);
    }
    let (dsc, sens, prec) = overlap_metrics(&pred, &gt)?;
    let (_, skel_gt, graph_gt) = skeletonize(opts, &gt, None)?;
    let cl = if pred.foreground_count() == 0 {
        0.0
    } else {
        let (_, skel_pred, _) = skeletonize(opts, &pred, None)?;
        cl_dice(&pred, &gt, &skel_pred, &skel_gt)?
    };
    let det = detection_rates(&pred, &graph_gt, opts.coverage_threshold)?;
    let mut label_reports = Vec::new();
    if let Some((pl, gl)) = labels {
        let cb = opts.codebook()?;
        let lp = assign_labels(&graph_gt, &opts.load(pl)?, &cb)?;
        let lgt = assign_labels(&graph_gt, &opts.load(gl)?, &cb)?;
        for level in [Level::Lobar, Level::Segmental, Level::Subsegmental] {
            label_reports.push(label_metrics(&lp, &lgt, level)?);
        }
    }
    let doc = json!({
        "schema": format!("bronchograph/metrics/v{SCHEMA_VERSION}"),
        "dsc": dsc,
        "sensitivity": sens,
        "precision": prec,
        "cl_dice": cl,
        "detection": det,
        "coverage_threshold": opts.coverage_threshold,
        "labels": label_reports,
    });
    let mut text = format!("DSC {dsc:.4}  sensitivity {sens:.4}  precision {prec:.4}  clDice {cl:.4}  TLD {:.2}  BND {:.2}\n", det.tld, det.bnd);
    for r in &label_reports {
        text += &format!("{:?}: accuracy {:.4}  TreeCons {:.2}  TopoDist {:.4}\n", r.level, r.accuracy, r.tree_cons, r.topo_dist);
    }
    match &opts.out {
        Some(path) => {
            write_text(path, &pretty(&doc))?;
            Ok(Report::new(doc, text))
        }
        None => Ok(Report::new(doc, text)),
    }
}

fn cmd_synth(opts: &Options, name: Option<&str>, random: Option<u64>, spec: Option<&Path>, spacing: f64, list: bool) -> Result<Report> {
    if list {
        let doc = json!({ "schema": format!("bronchograph/phantom-library/v{SCHEMA_VERSION}"), "names": LIBRARY_NAMES });
        return Ok(Report::new(doc, LIBRARY_NAMES.join("\n") + "\n"));
    }
    let spec: PhantomSpec = match (name, random, spec) {
        (Some(n), _, _) => library_spec(n, spacing).with_context(|| format!("unknown fixture {n:?}; see --list"))?,
        (_, Some(seed), _) => random_tree(seed),
        (_, _, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => bail!("one of --name, --random or --spec is required"),
    };
    let Some(out) = &opts.out else { bail!("synth needs --out <dir>") };
    let p = render_phantom(&spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_volume(&p.mask, &out.join("mask.nrrd"), Format::Nrrd)?;
    save_volume(&p.labels, &out.join("labels.nrrd"), Format::Nrrd)?;
    write_text(&out.join("truth.json"), &pretty(&json!({ "graph": p.truth.graph.to_json(), "labels": p.truth.to_json() })))?;
    write_text(&out.join("spec.json"), &pretty(&spec.to_json()))?;
    let doc = json!({
        "schema": format!("bronchograph/synth/v{SCHEMA_VERSION}"),
        "name": spec.name,
        "dims": p.mask.grid.dims,
        "spacing": p.mask.grid.spacing,
        "branches": p.truth.len(),
        "foreground": p.mask.foreground_count(),
    });
    Ok(Report::new(doc, format!("{}: {} branches, {} voxels -> {}\n", spec.name, p.truth.len(), p.mask.foreground_count(), out.display())))
}

fn run(cli: Cli) -> Result<Report> {
    let o = &cli.opts;
    match &cli.command {
        Command::Edt { mask } => cmd_edt(o, mask),
        Command::Skeletonize { mask, root } => cmd_skeletonize(o, mask, *root),
        Command::Graph { mask } => cmd_graph(o, mask),
        Command::Features { mask } => cmd_features(o, mask),
        Command::Labels { mask, labels } => cmd_labels(o, mask, labels),
        Command::Metrics { pred, gt, pred_labels, gt_labels } => {
            let labels = pred_labels.as_deref().zip(gt_labels.as_deref());
            cmd_metrics(o, pred, gt, labels)
        }
        Command::Patterns { cases } => batch::patterns(o, cases),
        Command::Signatures { cases } => batch::signatures(o, cases),
        Command::Cohort { signatures, groups, features, top_k, alpha } => {
            batch::cohort(o, signatures, groups, features.as_deref(), *top_k, *alpha)
        }
        Command::Synth { name, random, spec, spacing, list } => {
            cmd_synth(o, name.as_deref(), *random, spec.as_deref(), *spacing, *list)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BRONCHOGRAPH_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::from(1)
                }
                _ => {
                    let msg = e.to_string();
                    eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
                    ExitCode::from(1)
                }
            };
        }
    };
    let json = cli.opts.json;
    match run(cli) {
        Ok(report) => {
            let text = if json { pretty(&report.doc) } else { report.text };
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(1);
            }
            if report.skipped { ExitCode::from(2) } else { ExitCode::SUCCESS }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_forms() {
        assert_eq!(parse_spacing("0.5"), Ok([0.5; 3]));
        assert_eq!(parse_spacing("0.5, 0.5,1.25"), Ok([0.5, 0.5, 1.25]));
        assert!(parse_spacing("0.5,1").is_err());
        assert!(parse_spacing("0,1,1").is_err());
        assert!(parse_spacing("nan").is_err());
    }

    #[test]
    fn voxel_form() {
        assert_eq!(parse_voxel("1,2,3"), Ok([1, 2, 3]));
        assert!(parse_voxel("1,2").is_err());
        assert!(parse_voxel("1,-2,3").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn workers_flag_rejects_zero() {
        assert!(Cli::try_parse_from(["bronchograph", "edt", "m.nrrd", "--workers", "0"]).is_err());
        let cli = Cli::try_parse_from(["bronchograph", "edt", "m.nrrd", "--workers", "3"]).unwrap();
        assert_eq!(cli.opts.workers(), 3);
    }
}
