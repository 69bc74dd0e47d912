//! `evb` command line. Exit codes: 0 ok, 1 usage, 2 input, 3 internal.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotationStore;
use crate::colmap::{read_sparse_model, scene_points, write_sparse_model, ModelFormat, SparseScene};
use crate::config::{known_keys, ToolConfig};
use crate::depth::{evaluate_frame, read_manifest, DepthFrame, DepthScores};
use crate::loss::LossRow;
use crate::pairs::{curate, read_pairs_jsonl, write_pairs_jsonl, CurationStats, ExclusionList, VerificationTable};
use crate::pose_metrics::{evaluate_pairs, read_predictions, write_records_csv, PoseReport};
use crate::recon::{evaluate_recon, PointCloud, ReconOutcome, ReconSummary};
use crate::repr::{
    cross_view_attention, fixed_layer_set, layer_similarity, load_traces, mask_manifest, select_layers, AttentionInput, LayerKind, ModelFamily,
    SimilarityCurve,
};
use crate::sampler::{build_covis_graph, greedy_sample};
use crate::service::{discover_scenes, find_model_dir, AppState};
use crate::tensor::{read_tensor, write_tensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Internal(_) => "internal",
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "evb", version, about = "Extreme-view benchmark curation and evaluation")]
#[command(after_help = "Any config key can be overridden as `--section.key value`, or through `EVB_SECTION_KEY`.")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pair-set curation.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Evaluate predictions.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Greedy covisibility sampling of evaluation images.
    Sample(SampleArgs),
    /// Backbone representation analysis.
    #[command(subcommand)]
    Repr(ReprCmd),
    /// Rotation alignment objective and gradients per JSONL row.
    Loss(LossArgs),
    /// Convert a COLMAP model between binary and text.
    Convert(ConvertArgs),
    /// Annotation service.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
    /// Effective configuration.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Subcommand, Debug)]
pub enum PairsCmd {
    Curate(CurateArgs),
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// COLMAP model directory (or a scene directory with `sparse/`).
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to the model directory name.
    #[arg(long)]
    pub scene_id: Option<String>,
    /// CSV `image_a,image_b,match_count,coverage`.
    #[arg(long)]
    pub verification: Option<PathBuf>,
    /// Lines `scene_id,image_a,image_b`.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    Pose(PoseArgs),
    Recon(ReconArgs),
    Depth(DepthArgs),
}

#[derive(Args, Debug)]
pub struct PoseArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-pair error CSV.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    /// CSV `scene,pred,gt[,scale]`; paths relative to the manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Annotation store consulted when a row has no scale.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DepthArgs {
    /// CSV `scene,image,pred_path,gt_path`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scene_id: Option<String>,
    /// Model units to meters; otherwise read from the annotation store.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum ReprCmd {
    /// Mean input/output cosine similarity per layer.
    Similarity {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Layers at local similarity minima plus their neighborhoods.
    Select {
        #[arg(long, conflicts_with = "curve")]
        traces: Option<PathBuf>,
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Use the fixed set for this model family.
        #[arg(long)]
        family: Option<ModelFamily>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bias-parameter mask manifest for selected layers.
    Mask {
        /// Output of `repr select` or a JSON array of layer indices.
        #[arg(long, conflicts_with = "family")]
        layers: Option<PathBuf>,
        #[arg(long)]
        family: Option<ModelFamily>,
        #[arg(long, default_value = "global")]
        kind: LayerKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-view attention map of one query token.
    Attention {
        #[arg(long)]
        q: PathBuf,
        #[arg(long)]
        k: PathBuf,
        /// `HxW` patch grid of image 1.
        #[arg(long)]
        grid1: String,
        #[arg(long)]
        grid2: String,
        #[arg(long, default_value_t = 0)]
        special_tokens: usize,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub format: ModelFormat,
}

#[derive(Subcommand, Debug)]
pub enum AnnotateCmd {
    Serve {
        /// Scene directory or directory of scenes; repeatable.
        #[arg(long = "root", required = true)]
        roots: Vec<PathBuf>,
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConfigCmd {
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Splits `--section.key value` and `--section.key=value` out of `args`.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let keys = known_keys();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(a.clone());
            continue;
        }
        if !keys.iter().any(|k| k == name) {
            return Err(CliError::Usage(format!("unknown config key --{name}")));
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().cloned().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

#[derive(Serialize)]
pub struct Report<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config_hash: String,
    pub result: T,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn emit(out: Option<&Path>, bytes: &[u8], stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
        None => stdout.write_all(bytes).map_err(|e| CliError::Internal(e.to_string())),
    }
}

fn emit_report<T: Serialize>(cfg: &ToolConfig, command: &str, result: T, out: Option<&Path>, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let r = Report {
        tool: "evb",
        version: VERSION,
        command,
        config_hash: cfg.hash(),
        result,
    };
    emit(out, &json_bytes(&r)?, stdout)
}

fn dir_name(p: &Path) -> String {
    p.canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| p.display().to_string())
}

fn load_model(p: &Path) -> Result<SparseScene, CliError> {
    let dir = find_model_dir(p).unwrap_or_else(|| p.to_path_buf());
    read_sparse_model(&dir, ModelFormat::Auto).map_err(input)
}

fn stored_scale(state_dir: Option<&Path>, scene_id: &str) -> Result<Option<f64>, CliError> {
    let Some(dir) = state_dir else { return Ok(None) };
    let store = AnnotationStore::open(dir).map_err(input)?;
    Ok(store.load(scene_id).map_err(input)?.and_then(|r| r.scale_to_meters))
}

/// A `.evbt` cloud, or every `.evbt` in a directory in name order.
fn load_cloud(p: &Path) -> Result<PointCloud, CliError> {
    let files = if p.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|f| f.extension().is_some_and(|x| x == "evbt"))
            .collect();
        v.sort();
        v
    } else {
        vec![p.to_path_buf()]
    };
    let mut points = Vec::new();
    for f in files {
        let t = read_tensor(&f).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?;
        points.extend(PointCloud::from_tensor(&t).map_err(|e| CliError::Input(format!("{}: {e}", f.display())))?.points);
    }
    PointCloud::new(points).map_err(input)
}

fn load_gt_cloud(p: &Path) -> Result<PointCloud, CliError> {
    if p.is_dir() && find_model_dir(p).is_some() {
        PointCloud::new(scene_points(&load_model(p)?)).map_err(input)
    } else {
        load_cloud(p)
    }
}

#[derive(Debug, Deserialize)]
struct ReconRow {
    scene: String,
    pred: PathBuf,
    gt: PathBuf,
    #[serde(default)]
    scale: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ReconSceneReport {
    pub scene: String,
    pub scale_to_meters: Option<f64>,
    pub outcome: Option<ReconOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ReconReport {
    pub icp: crate::recon::ReconConfig,
    pub scenes: Vec<ReconSceneReport>,
    /// Mean over scenes that evaluated.
    pub aggregate: Option<ReconSummary>,
    pub n_failed: usize,
}

fn cmd_eval_recon(cfg: &ToolConfig, a: &ReconArgs) -> Result<ReconReport, CliError> {
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(&a.manifest)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.manifest.display())))?;
    let mut rows = Vec::new();
    for (i, r) in rdr.deserialize::<ReconRow>().enumerate() {
        let mut r = r.map_err(|e| CliError::Input(format!("{}:{}: {e}", a.manifest.display(), i + 2)))?;
        r.pred = base.join(&r.pred);
        r.gt = base.join(&r.gt);
        rows.push(r);
    }
    let scales: Vec<Option<f64>> = rows
        .iter()
        .map(|r| match r.scale {
            Some(s) => Ok(Some(s)),
            None => stored_scale(a.state_dir.as_deref(), &r.scene),
        })
        .collect::<Result<_, _>>()?;
    let scenes: Vec<ReconSceneReport> = rows
        .par_iter()
        .zip(scales.par_iter())
        .map(|(r, &scale)| {
            let run = || -> Result<ReconOutcome, String> {
                let s = scale.ok_or("no metric scale for scene")?;
                let pred = load_cloud(&r.pred).map_err(|e| e.to_string())?;
                let gt = load_gt_cloud(&r.gt).map_err(|e| e.to_string())?;
                evaluate_recon(&pred, &gt, s, &cfg.recon).map_err(|e| e.to_string())
            };
            let (outcome, error) = match run() {
                Ok(o) => (Some(o), None),
                Err(e) => (None, Some(e)),
            };
            ReconSceneReport {
                scene: r.scene.clone(),
                scale_to_meters: scale,
                outcome,
                error,
            }
        })
        .collect();
    let ok: Vec<&ReconSummary> = scenes.iter().filter_map(|s| s.outcome.as_ref().map(|o| &o.summary)).collect();
    let aggregate = (!ok.is_empty()).then(|| {
        let n = ok.len() as f64;
        ReconSummary {
            acc_mean: ok.iter().map(|s| s.acc_mean).sum::<f64>() / n,
            acc_median: ok.iter().map(|s| s.acc_median).sum::<f64>() / n,
            cmp_mean: ok.iter().map(|s| s.cmp_mean).sum::<f64>() / n,
            cmp_median: ok.iter().map(|s| s.cmp_median).sum::<f64>() / n,
        }
    });
    Ok(ReconReport {
        icp: cfg.recon.clone(),
        n_failed: scenes.len() - ok.len(),
        scenes,
        aggregate,
    })
}

#[derive(Debug, Serialize)]
pub struct DepthFrameReport {
    pub scene: String,
    pub image: String,
    pub scale: Option<f64>,
    pub scores: Option<DepthScores>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct DepthAggregate {
    pub frames: usize,
    pub abs_rel: f64,
    pub delta1: f64,
}

#[derive(Debug, Serialize)]
pub struct DepthReport {
    pub frames: Vec<DepthFrameReport>,
    /// Frame means per scene.
    pub scenes: BTreeMap<String, DepthAggregate>,
    /// Frame mean over all scenes.
    pub all: Option<DepthAggregate>,
    pub n_failed: usize,
}

fn aggregate_depth<'a>(scores: impl Iterator<Item = &'a DepthScores>) -> Option<DepthAggregate> {
    let v: Vec<&DepthScores> = scores.collect();
    let n = v.len();
    (n > 0).then(|| DepthAggregate {
        frames: n,
        abs_rel: v.iter().map(|s| s.abs_rel).sum::<f64>() / n as f64,
        delta1: v.iter().map(|s| s.delta1).sum::<f64>() / n as f64,
    })
}

fn cmd_eval_depth(a: &DepthArgs) -> Result<DepthReport, CliError> {
    let entries = read_manifest(&a.manifest).map_err(input)?;
    let frames: Vec<DepthFrameReport> = entries
        .par_iter()
        .map(|e| {
            let run = || -> Result<(DepthScores, f64), String> {
                let pred = read_tensor(&e.pred_path).map_err(|x| format!("{}: {x}", e.pred_path.display()))?;
                let gt = read_tensor(&e.gt_path).map_err(|x| format!("{}: {x}", e.gt_path.display()))?;
                let frame = DepthFrame::from_tensors(&pred, &gt).map_err(|x| x.to_string())?;
                evaluate_frame(&frame).map_err(|x| x.to_string())
            };
            let (scale, scores, error) = match run() {
                Ok((s, k)) => (Some(k), Some(s), None),
                Err(x) => (None, None, Some(x)),
            };
            DepthFrameReport {
                scene: e.scene.clone(),
                image: e.image.clone(),
                scale,
                scores,
                error,
            }
        })
        .collect();
    let mut scenes = BTreeMap::new();
    let names: std::collections::BTreeSet<&str> = frames.iter().map(|f| f.scene.as_str()).collect();
    for s in names {
        if let Some(agg) = aggregate_depth(frames.iter().filter(|f| f.scene == s).filter_map(|f| f.scores.as_ref())) {
            scenes.insert(s.to_string(), agg);
        }
    }
    let all = aggregate_depth(frames.iter().filter_map(|f| f.scores.as_ref()));
    Ok(DepthReport {
        n_failed: frames.iter().filter(|f| f.error.is_some()).count(),
        frames,
        scenes,
        all,
    })
}

#[derive(Debug, Serialize)]
pub struct CurateResult {
    pub scene_id: String,
    pub n_pairs: usize,
    pub stats: CurationStats,
}

fn cmd_curate(cfg: &ToolConfig, a: &CurateArgs, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let scene = load_model(&a.model)?;
    let scene_id = a.scene_id.clone().unwrap_or_else(|| dir_name(&a.model));
    let verification = a.verification.as_deref().map(VerificationTable::read_csv).transpose().map_err(input)?;
    let exclusions = a.exclude.as_deref().map(ExclusionList::read).transpose().map_err(input)?;
    let c = curate(&scene_id, &scene, &cfg.curation, verification.as_ref(), exclusions.as_ref()).map_err(input)?;
    let mut buf = Vec::new();
    write_pairs_jsonl(&mut buf, &c.pairs).map_err(|e| CliError::Internal(e.to_string()))?;
    emit(Some(&a.out), &buf, stdout)?;
    let result = CurateResult {
        scene_id,
        n_pairs: c.pairs.len(),
        stats: c.stats,
    };
    emit_report(cfg, "pairs curate", result, a.stats.as_deref(), stdout)
}

fn cmd_eval_pose(cfg: &ToolConfig, a: &PoseArgs, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let pairs = read_pairs_jsonl(&a.pairs).map_err(input)?;
    let preds = read_predictions(&a.preds).map_err(input)?;
    let report: PoseReport = evaluate_pairs(&pairs, &preds, &cfg.pose).map_err(input)?;
    if let Some(p) = &a.records {
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &report.records).map_err(|e| CliError::Internal(e.to_string()))?;
        emit(Some(p), &buf, stdout)?;
    }
    emit_report(cfg, "eval pose", report, a.out.as_deref(), stdout)
}

fn cmd_sample(cfg: &ToolConfig, a: &SampleArgs, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let scene = load_model(&a.model)?;
    let scene_id = a.scene_id.clone().unwrap_or_else(|| dir_name(&a.model));
    let scale = match a.scale {
        Some(s) => Some(s),
        None => stored_scale(a.state_dir.as_deref(), &scene_id)?,
    };
    let g = build_covis_graph(&scene, cfg.sampler.min_shared, cfg.sampler.min_trans_m, scale).map_err(input)?;
    let s = greedy_sample(&g, &cfg.sampler).map_err(input)?;
    let names: Vec<&str> = s.images.iter().map(|id| scene.images[id].name.as_str()).collect();
    emit(a.out.as_deref(), &json_bytes(&names)?, stdout)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CurveResult {
    pub kind: Option<LayerKind>,
    pub curve: SimilarityCurve,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectResult {
    pub layers: Vec<usize>,
    pub threshold: Option<f64>,
    pub delta: usize,
    pub family: Option<ModelFamily>,
}

fn read_curve(traces: Option<&Path>, curve: Option<&Path>) -> Result<Option<(Option<LayerKind>, SimilarityCurve)>, CliError> {
    if let Some(t) = traces {
        let (kind, tr) = load_traces(t).map_err(input)?;
        return Ok(Some((Some(kind), layer_similarity(&tr).map_err(input)?)));
    }
    if let Some(c) = curve {
        let text = std::fs::read_to_string(c).map_err(|e| CliError::Input(format!("{}: {e}", c.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", c.display())))?;
        // accept a bare curve or a `repr similarity` report
        let inner = v.pointer("/result/curve").cloned().unwrap_or(v);
        let curve: SimilarityCurve = serde_json::from_value(inner).map_err(|e| CliError::Input(format!("{}: {e}", c.display())))?;
        return Ok(Some((None, curve)));
    }
    Ok(None)
}

fn read_layers(p: &Path) -> Result<Vec<usize>, CliError> {
    let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
    let inner = v.pointer("/result/layers").cloned().unwrap_or(v);
    serde_json::from_value(inner).map_err(|e| CliError::Input(format!("{}: expected a list of layer indices: {e}", p.display())))
}

fn parse_grid(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("grid {s:?} is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn cmd_repr(cfg: &ToolConfig, c: &ReprCmd, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match c {
        ReprCmd::Similarity { traces, out } => {
            let (kind, curve) = read_curve(Some(traces), None)?.expect("traces given");
            emit_report(cfg, "repr similarity", CurveResult { kind, curve }, out.as_deref(), stdout)
        }
        ReprCmd::Select { traces, curve, family, out } => {
            let curve = read_curve(traces.as_deref(), curve.as_deref())?.map(|(_, c)| c);
            let delta = cfg.repr.delta;
            let layers = match family {
                Some(f) => fixed_layer_set(*f, curve.as_ref(), delta).map_err(input)?,
                None => select_layers(curve.as_ref().ok_or_else(|| CliError::Usage("select needs --traces, --curve or --family".into()))?, delta),
            };
            let result = SelectResult {
                layers: layers.into_iter().collect(),
                threshold: curve.as_ref().map(SimilarityCurve::threshold),
                delta,
                family: *family,
            };
            emit_report(cfg, "repr select", result, out.as_deref(), stdout)
        }
        ReprCmd::Mask { layers, family, kind, out } => {
            let set = match (layers, family) {
                (Some(p), _) => read_layers(p)?.into_iter().collect(),
                (None, Some(f)) => fixed_layer_set(*f, None, cfg.repr.delta).map_err(input)?,
                (None, None) => return Err(CliError::Usage("mask needs --layers or --family".into())),
            };
            emit(out.as_deref(), &json_bytes(&mask_manifest(*kind, &set))?, stdout)
        }
        ReprCmd::Attention {
            q,
            k,
            grid1,
            grid2,
            special_tokens,
            query,
            out,
        } => {
            let inp = AttentionInput {
                q: read_tensor(q).map_err(|e| CliError::Input(format!("{}: {e}", q.display())))?,
                k: read_tensor(k).map_err(|e| CliError::Input(format!("{}: {e}", k.display())))?,
                grid1: parse_grid(grid1)?,
                grid2: parse_grid(grid2)?,
                special_tokens: *special_tokens,
            };
            let map = cross_view_attention(&inp, *query, cfg.repr.scope).map_err(input)?;
            write_tensor(out, &map).map_err(|e| CliError::Input(format!("{}: {e}", out.display())))
        }
    }
}

fn cmd_loss(cfg: &ToolConfig, a: &LossArgs, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| CliError::Input(format!("{}: {e}", a.input.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| CliError::Input(format!("{}:{}: {e}", a.input.display(), i + 1));
        let row: LossRow = serde_json::from_str(line).map_err(|e| at(&e))?;
        let res = row.evaluate(cfg.loss.lambda_t, cfg.loss.translation_mode).map_err(|e| at(&e))?;
        serde_json::to_writer(&mut out, &res).map_err(|e| CliError::Internal(e.to_string()))?;
        out.push(b'\n');
    }
    emit(a.out.as_deref(), &out, stdout)
}

fn cmd_convert(a: &ConvertArgs) -> Result<(), CliError> {
    if a.format == ModelFormat::Auto {
        return Err(CliError::Usage("--format must be binary or text".into()));
    }
    let scene = read_sparse_model(&a.input, ModelFormat::Auto).map_err(input)?;
    write_sparse_model(&scene, &a.output, a.format).map_err(input)
}

fn cmd_serve(cfg: &ToolConfig, roots: &[PathBuf], state_dir: &Path, bind: Option<&str>) -> Result<(), CliError> {
    let scenes = discover_scenes(roots).map_err(input)?;
    let state = Arc::new(AppState::new(scenes, state_dir, cfg.service.clone()).map_err(input)?);
    let bind = bind.unwrap_or(&cfg.service.bind).to_string();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    rt.block_on(crate::service::serve(state, &bind)).map_err(|e| CliError::Input(format!("{bind}: {e}")))
}

fn dispatch(cfg: &ToolConfig, cmd: &Command, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    match cmd {
        Command::Pairs(PairsCmd::Curate(a)) => cmd_curate(cfg, a, stdout),
        Command::Eval(EvalCmd::Pose(a)) => cmd_eval_pose(cfg, a, stdout),
        Command::Eval(EvalCmd::Recon(a)) => {
            let r = cmd_eval_recon(cfg, a)?;
            emit_report(cfg, "eval recon", r, a.out.as_deref(), stdout)
        }
        Command::Eval(EvalCmd::Depth(a)) => {
            let r = cmd_eval_depth(a)?;
            emit_report(cfg, "eval depth", r, a.out.as_deref(), stdout)
        }
        Command::Sample(a) => cmd_sample(cfg, a, stdout),
        Command::Repr(c) => cmd_repr(cfg, c, stdout),
        Command::Loss(a) => cmd_loss(cfg, a, stdout),
        Command::Convert(a) => cmd_convert(a),
        Command::Annotate(AnnotateCmd::Serve { roots, state_dir, bind }) => cmd_serve(cfg, roots, state_dir, bind.as_deref()),
        Command::Config(ConfigCmd::Dump { out }) => emit(out.as_deref(), cfg.dump().as_bytes(), stdout),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I>(args: &[String], env: I, stdout: &mut (dyn Write + Send)) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let (rest, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            return stdout.write_all(e.to_string().as_bytes()).map_err(|e| CliError::Internal(e.to_string()));
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let cfg = ToolConfig::resolve(cli.config.as_deref(), env, &overrides).map_err(input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.runtime.threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| dispatch(&cfg, &cli.command, stdout))
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

/// `run` with diagnostics as one JSON line on stderr; returns the exit code.
pub fn main_with(args: Vec<String>, env: Vec<(String, String)>) -> i32 {
    let outcome = std::panic::catch_unwind(|| {
        let mut stdout = std::io::stdout();
        run(&args, env, &mut stdout)
    });
    let err = match outcome {
        Ok(Ok(())) => return 0,
        Ok(Err(e)) => e,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            CliError::Internal(msg)
        }
    };
    let d = Diagnostic {
        error: err.kind(),
        message: err.to_string(),
        exit_code: err.exit_code(),
    };
    eprintln!("{}", serde_json::to_string(&d).unwrap_or_else(|_| err.to_string()));
    err.exit_code()
}
