//! `fgs`: command-line front end for the feature-Gaussian engine.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use fgs::attention::AttentionWeights;
use fgs::bench::{run_bench, BenchConfig};
use fgs::densify::{base_init, densify_layer, DensifyConfig, SelectMode};
use fgs::io::{self, PointSet};
use fgs::losses::{scene_losses, LossWeights};
use fgs::metrics::{eval_map, eval_miou};
use fgs::pipeline::{run_pipeline, LabelledPoints, PipelineConfig, PipelineInputs};
use fgs::sampling::{refine_layer, DecodeHeads, HeadConfig, RefineScope, TensorMap};
use fgs::synth::{gen_scene, SynthSpec};
use fgs::voxel::{query_points, retrieval_scores, voxelize, GridSpec, TextBank, VoxelGrid, VoxelizeConfig, EMPTY_LABEL};
use fgs::{par, CameraView, DepthMap, GaussianScene, Plane};

#[derive(Parser)]
#[command(name = "fgs", version, about = "Feature-Gaussian scenes: render, densify, refine, voxelize, evaluate")]
struct Cli {
    /// Seed for every randomized step; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "FGS_THREADS")]
    threads: Option<usize>,
    /// Only log errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene, rig, ground truth and text bank.
    Synth(SynthArgs),
    /// Build the base Gaussian layer from reference depth.
    Init(InitArgs),
    /// Append one progressive layer.
    Densify(DensifyArgs),
    /// Run one sampling and decode pass.
    Refine(RefineArgs),
    /// Render depth and feature maps.
    Render(RenderArgs),
    /// Accumulate Gaussians into a labelled voxel grid.
    Voxelize(VoxelizeArgs),
    /// Score query points against every text class.
    Retrieve(RetrieveArgs),
    /// Evaluate the rendering losses.
    Loss(LossArgs),
    /// Per-class IoU between two voxel grids.
    EvalMiou(EvalMiouArgs),
    /// Retrieval mAP over labelled query points.
    EvalMap(EvalMapArgs),
    /// Time the render, voxelize and FPS kernels.
    Bench(BenchArgs),
    /// Run the staged pipeline end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ReportOut {
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// SynthSpec JSON; defaults describe the built-in room.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Number of random objects in the generated room.
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    depth_noise: Option<f64>,
    #[arg(long)]
    pose_noise: Option<f64>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct DensifyFlags {
    /// DensifyConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial isotropic scale of new Gaussians.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Signed,
    Absolute,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    base_count: Option<usize>,
    #[arg(long, default_value_t = fgs::gaussian::DESK_FEATURE_DIM)]
    feature_dim: usize,
    #[command(flatten)]
    densify: DensifyFlags,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct DensifyArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// New Gaussians for this layer.
    #[arg(long)]
    budget: Option<usize>,
    #[command(flatten)]
    densify: DensifyFlags,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// HEAD tensor file; passthrough heads when absent.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Write the heads actually used to this HEAD file.
    #[arg(long)]
    save_heads: Option<PathBuf>,
    /// Refine every Gaussian instead of the newest layer.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long, default_value_t = 4)]
    attention_heads: usize,
    #[arg(long, default_value_t = 0.12)]
    prior_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    prior_opacity: f64,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Render only this view.
    #[arg(long)]
    view: Option<usize>,
    /// Use the per-pixel reference renderer.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct GridFlags {
    /// Copy the grid geometry from this VOXG file.
    #[arg(long)]
    like: Option<PathBuf>,
    /// GridSpec JSON.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args)]
struct CutoffFlags {
    /// Mahalanobis cutoff.
    #[arg(long)]
    cutoff: Option<f64>,
    /// Accumulate every Gaussian everywhere.
    #[arg(long, conflicts_with = "cutoff")]
    no_cutoff: bool,
}

impl CutoffFlags {
    fn apply(&self, current: Option<f64>) -> Option<f64> {
        if self.no_cutoff {
            None
        } else {
            self.cutoff.or(current)
        }
    }
}

#[derive(Args)]
struct VoxelizeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// VoxelizeConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[command(flatten)]
    cutoff: CutoffFlags,
    #[command(flatten)]
    grid: GridFlags,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    scene: PathBuf,
    /// PNTS binary or whitespace XYZ text.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[command(flatten)]
    cutoff: CutoffFlags,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// LossWeights JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct EvalMiouArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// One-channel PLNE mask over the grid's voxels.
    #[arg(long)]
    visibility: Option<PathBuf>,
    /// Evaluate the bank's class ids.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Comma-separated class ids; overrides --bank.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<u16>,
    #[arg(long, value_delimiter = ',')]
    ignore: Vec<u16>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct EvalMapArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Labelled points; visibility flags enable mAP(v).
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[command(flatten)]
    cutoff: CutoffFlags,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct BenchArgs {
    /// BenchConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Timed runs per fast kernel.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    oracle_repeats: Option<usize>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct PipelineArgs {
    /// PipelineConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory laid out by `fgs synth`.
    #[arg(long, conflicts_with = "synth")]
    input: Option<PathBuf>,
    /// Generate inputs in memory from this SynthSpec JSON (default: the built-in room).
    #[arg(long)]
    synth: Option<PathBuf>,
    /// Write scene.fgs, grid.voxg and report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Progressive layers after the base layer.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    base_count: Option<usize>,
    /// New Gaussians per progressive layer.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    no_attention: bool,
    #[command(flatten)]
    report: ReportOut,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes)
        .map_err(fgs::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn emit<T: Serialize>(value: &T, out: &ReportOut) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            return Err(e.into());
        }
    }
    if let Some(p) = &out.report {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn ctx<T>(r: fgs::Result<T>, what: impl FnOnce() -> String) -> Result<T> {
    r.map_err(anyhow::Error::from).with_context(what)
}

fn load_scene(p: &Path) -> Result<GaussianScene> {
    ctx(io::read_scene(p), || format!("reading scene {}", p.display()))
}

fn load_rig(p: &Path) -> Result<Vec<CameraView>> {
    ctx(io::read_rig(p), || format!("reading rig {}", p.display()))
}

fn load_bank(p: &Path) -> Result<TextBank> {
    ctx(io::read_bank(p), || format!("reading bank {}", p.display()))
}

fn save_scene(p: &Path, s: &GaussianScene) -> Result<()> {
    ctx(io::write_scene(p, s), || format!("writing scene {}", p.display()))
}

fn read_mask(p: &Path, len: usize) -> Result<Vec<bool>> {
    let plane = ctx(io::read_plane(p), || format!("reading mask {}", p.display()))?;
    if plane.data.len() != len {
        return Err(fgs::Error::InvalidInput(format!(
            "mask {} has {} entries, expected {len}",
            p.display(),
            plane.data.len()
        ))
        .into());
    }
    Ok(plane.data.iter().map(|v| *v > 0.5).collect())
}

fn mask_plane(mask: &[bool]) -> fgs::Result<Plane> {
    Plane::from_data(mask.len(), 1, 1, mask.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect())
}

fn densify_config(flags: &DensifyFlags) -> Result<DensifyConfig> {
    let mut cfg: DensifyConfig = config_or_default(flags.config.as_ref())?;
    if let Some(g) = flags.gamma {
        cfg.gamma = g;
    }
    if let Some(s) = flags.scale {
        cfg.init_scale = s;
    }
    if let Some(m) = flags.mode {
        cfg.select_mode = match m {
            Mode::Signed => SelectMode::Signed,
            Mode::Absolute => SelectMode::Absolute,
        };
    }
    Ok(cfg)
}

fn grid_spec(flags: &GridFlags) -> Result<GridSpec> {
    match (&flags.like, &flags.grid) {
        (Some(_), Some(_)) => bail!(fgs::Error::InvalidInput("pass --like or --grid, not both".into())),
        (Some(p), None) => Ok(ctx(io::read_grid(p), || format!("reading grid {}", p.display()))?.spec),
        (None, Some(p)) => read_json(p),
        (None, None) => Ok(SynthSpec::default().grid),
    }
}

fn cmd_synth(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec: SynthSpec = config_or_default(a.spec.as_ref())?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(o) = a.objects {
        spec.objects = o;
    }
    if let Some(n) = a.depth_noise {
        spec.noise.depth = n;
    }
    if let Some(n) = a.pose_noise {
        spec.noise.pose = n;
    }
    let scene = ctx(gen_scene(&spec), || "generating synthetic scene".into())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = |name: &str| a.out.join(name);
    save_scene(&out("scene.fgs"), &scene.gaussians)?;
    ctx(io::write_rig(out("rig.json"), &scene.views), || "writing rig".into())?;
    ctx(io::write_grid(out("gt.voxg"), &scene.gt), || "writing ground truth".into())?;
    ctx(io::write_plane(out("visibility.plne"), &mask_plane(&scene.visibility)?), || "writing visibility".into())?;
    ctx(io::write_bank(out("bank.json"), &scene.bank), || "writing bank".into())?;
    let lidar = PointSet {
        points: scene.lidar.points.clone(),
        labels: Some(scene.lidar.labels.clone()),
        visible: Some(scene.lidar.visible.clone()),
    };
    ctx(io::write_points(out("lidar.pnts"), &lidar), || "writing lidar points".into())?;
    fs::write(out("spec.json"), serde_json::to_string_pretty(&scene.spec)?)?;
    log::info!("wrote synthetic scene to {}", a.out.display());
    emit(
        &json!({
            "out": a.out,
            "seed": scene.spec.seed,
            "primitives": scene.primitives.len(),
            "gaussians": scene.gaussians.len(),
            "views": scene.views.len(),
            "occupied_voxels": scene.gt.occupied_count(),
            "visible_voxels": scene.visibility.iter().filter(|v| **v).count(),
            "lidar_points": scene.lidar.points.len(),
        }),
        &a.report,
    )
}

fn cmd_init(a: InitArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = densify_config(&a.densify)?;
    if let Some(n) = a.base_count {
        cfg.base_count = n;
    }
    let views = load_rig(&a.rig)?;
    let scene = ctx(base_init(&views, &cfg, a.feature_dim, seed.unwrap_or(0)), || "base initialization".into())?;
    save_scene(&a.out, &scene)?;
    emit(&json!({ "gaussians": scene.len(), "layer_offsets": scene.layer_offsets }), &a.report)
}

fn cmd_densify(a: DensifyArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = densify_config(&a.densify)?;
    let scene = load_scene(&a.scene)?;
    let layer = scene.layer_count();
    if let Some(b) = a.budget {
        cfg.layer_budgets = vec![b; layer.max(1)];
    } else if cfg.layer_budgets.len() < layer {
        let last = cfg.layer_budgets.last().copied().unwrap_or(1000);
        cfg.layer_budgets.resize(layer, last);
    }
    let views = load_rig(&a.rig)?;
    let seed = seed.unwrap_or(0).wrapping_add(layer as u64);
    let (out, report) = ctx(densify_layer(&scene, &views, &cfg, layer, seed), || format!("densifying layer {layer}"))?;
    save_scene(&a.out, &out)?;
    emit(&report, &a.report)
}

fn load_heads(path: &Path) -> Result<(DecodeHeads, Option<AttentionWeights>, TensorMap)> {
    let t = ctx(io::read_tensors(path), || format!("reading heads {}", path.display()))?;
    let heads = ctx(DecodeHeads::from_tensors(&t), || format!("loading heads {}", path.display()))?;
    let attn = ctx(AttentionWeights::from_tensors(&t), || format!("loading attention {}", path.display()))?;
    Ok((heads, attn, t))
}

fn cmd_refine(a: RefineArgs, seed: Option<u64>) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let views = load_rig(&a.rig)?;
    let f = scene.feature_dim;
    let (heads, file_attn) = match &a.heads {
        Some(p) => {
            let (h, at, _) = load_heads(p)?;
            (h, at)
        }
        None => (
            ctx(DecodeHeads::passthrough(f, HeadConfig::default(), a.prior_scale, a.prior_opacity), || {
                "building passthrough heads".into()
            })?,
            None,
        ),
    };
    let attention = match (a.no_attention, file_attn) {
        (true, _) => None,
        (false, Some(w)) => Some(w),
        (false, None) => Some(ctx(AttentionWeights::seeded(f, a.attention_heads, seed.unwrap_or(0)), || {
            "seeding attention weights".into()
        })?),
    };
    if let Some(p) = &a.save_heads {
        let mut t = heads.to_tensors();
        if let Some(w) = &attention {
            t.extend(w.to_tensors());
        }
        ctx(io::write_tensors(p, &t), || format!("writing heads {}", p.display()))?;
    }
    let scope = if a.all { RefineScope::All } else { RefineScope::Newest };
    let (out, report) = ctx(refine_layer(&scene, &views, &heads, attention.as_ref(), scope), || "refining".into())?;
    save_scene(&a.out, &out)?;
    emit(&report, &a.report)
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let views = load_rig(&a.rig)?;
    let picked: Vec<usize> = match a.view {
        Some(i) if i < views.len() => vec![i],
        Some(i) => bail!(fgs::Error::InvalidInput(format!("view {i} out of range (rig has {})", views.len()))),
        None => (0..views.len()).collect(),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::new();
    for i in picked {
        let v = &views[i];
        let r = if a.oracle { fgs::render_oracle(&scene, v) } else { fgs::render(&scene, v) };
        let depth = DepthMap::new(Plane::from_data(r.width, r.height, 1, r.depth.clone())?, r.valid.clone())?;
        let feature = Plane::from_data(r.width, r.height, r.feature_dim, r.feature.clone())?;
        let alpha = Plane::from_data(r.width, r.height, 1, r.acc_alpha.clone())?;
        let name = |s: &str| a.out.join(format!("view{i}_{s}"));
        ctx(io::write_depth(name("depth.plne"), &depth), || "writing depth".into())?;
        ctx(io::write_plane(name("feature.plne"), &feature), || "writing feature".into())?;
        ctx(io::write_plane(name("alpha.plne"), &alpha), || "writing alpha".into())?;
        fs::write(name("depth.pgm"), io::depth_pgm(&r.depth, &r.valid, r.width, r.height)?)?;
        entries.push(json!({
            "view": i,
            "valid_pixels": r.valid.iter().filter(|v| **v).count(),
            "pixels": r.width * r.height,
        }));
    }
    emit(&json!({ "oracle": a.oracle, "views": entries }), &a.report)
}

fn cmd_voxelize(a: VoxelizeArgs) -> Result<()> {
    let mut cfg: VoxelizeConfig = config_or_default(a.config.as_ref())?;
    if let Some(t) = a.tau {
        cfg.tau_occ = t;
    }
    cfg.cutoff = a.cutoff.apply(cfg.cutoff);
    let spec = grid_spec(&a.grid)?;
    let scene = load_scene(&a.scene)?;
    let bank = load_bank(&a.bank)?;
    let grid = ctx(voxelize(&scene, &bank, &spec, &cfg), || "voxelizing".into())?;
    ctx(io::write_grid(&a.out, &grid), || format!("writing grid {}", a.out.display()))?;
    emit(&grid_summary(&grid), &a.report)
}

fn grid_summary(grid: &VoxelGrid) -> serde_json::Value {
    let mut counts = std::collections::BTreeMap::new();
    for l in grid.labels.iter().filter(|l| **l != EMPTY_LABEL) {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    json!({
        "dims": grid.spec.dims,
        "voxels": grid.spec.voxel_count(),
        "occupied": grid.occupied_count(),
        "per_class": counts,
    })
}

fn load_points(p: &Path) -> Result<PointSet> {
    ctx(io::read_points(p), || format!("reading points {}", p.display()))
}

fn class_queries(bank: &TextBank) -> (Vec<String>, Vec<Option<u16>>, Vec<Vec<f64>>) {
    let named: Vec<_> = bank.classes.iter().filter(|c| c.class_id.is_some()).collect();
    (
        named.iter().map(|c| c.name.clone()).collect(),
        named.iter().map(|c| c.class_id).collect(),
        named.iter().map(|c| c.embeddings[0].clone()).collect(),
    )
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let pts = load_points(&a.points)?;
    let bank = load_bank(&a.bank)?;
    let cutoff = a.cutoff.apply(Some(fgs::voxel::DEFAULT_CUTOFF));
    let q = ctx(query_points(&scene, &pts.points, cutoff), || "querying points".into())?;
    let occ: Vec<f64> = q.iter().map(|p| p.occ).collect();
    let feats: Vec<Vec<f64>> = q.into_iter().map(|p| p.feature).collect();
    let (names, ids, queries) = class_queries(&bank);
    let scores = retrieval_scores(&feats, &queries);
    let best: Vec<Option<u16>> = (0..pts.points.len())
        .map(|i| {
            let col: Vec<f64> = scores.iter().map(|s| s[i]).collect();
            if col.is_empty() {
                None
            } else {
                ids[fgs::voxel::argmax(&col)]
            }
        })
        .collect();
    emit(&json!({ "classes": names, "class_ids": ids, "occupancy": occ, "scores": scores, "best": best }), &a.report)
}

fn cmd_loss(a: LossArgs) -> Result<()> {
    let w: LossWeights = config_or_default(a.weights.as_ref())?;
    let scene = load_scene(&a.scene)?;
    let views = load_rig(&a.rig)?;
    let loss = ctx(scene_losses(&scene, &views, &w), || "evaluating losses".into())?;
    emit(&loss, &a.report)
}

fn cmd_eval_miou(a: EvalMiouArgs) -> Result<()> {
    let pred = ctx(io::read_grid(&a.pred), || format!("reading {}", a.pred.display()))?;
    let gt = ctx(io::read_grid(&a.gt), || format!("reading {}", a.gt.display()))?;
    let mask = a.visibility.as_ref().map(|p| read_mask(p, gt.labels.len())).transpose()?;
    let classes = if !a.classes.is_empty() {
        a.classes.clone()
    } else if let Some(b) = &a.bank {
        load_bank(b)?.class_ids()
    } else {
        let mut c: Vec<u16> = gt.labels.iter().copied().filter(|l| *l != EMPTY_LABEL).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let r = ctx(eval_miou(&pred, &gt, &classes, &a.ignore, mask.as_deref()), || "evaluating mIoU".into())?;
    emit(&r, &a.report)
}

fn cmd_eval_map(a: EvalMapArgs) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let pts = load_points(&a.points)?;
    let labels = pts
        .labels
        .as_ref()
        .ok_or_else(|| fgs::Error::InvalidInput(format!("{} carries no labels", a.points.display())))?;
    let bank = load_bank(&a.bank)?;
    let cutoff = a.cutoff.apply(Some(fgs::voxel::DEFAULT_CUTOFF));
    let q = ctx(query_points(&scene, &pts.points, cutoff), || "querying points".into())?;
    let feats: Vec<Vec<f64>> = q.into_iter().map(|p| p.feature).collect();
    let (_, ids, queries) = class_queries(&bank);
    let gt: Vec<Vec<bool>> = ids.iter().map(|id| labels.iter().map(|l| Some(*l) == *id).collect()).collect();
    let r = ctx(eval_map(&retrieval_scores(&feats, &queries), &gt, pts.visible.as_deref()), || {
        "evaluating mAP".into()
    })?;
    emit(&r, &a.report)
}

fn cmd_bench(a: BenchArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: BenchConfig = config_or_default(a.config.as_ref())?;
    if let Some(k) = a.repeats {
        cfg.repeats = k;
    }
    if let Some(k) = a.oracle_repeats {
        cfg.oracle_repeats = k;
    }
    if let Some(n) = a.gaussians {
        cfg.render_gaussians = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let r = ctx(run_bench(&cfg), || "benchmark".into())?;
    log::info!(
        "render {:.1} ms tiled vs {:.1} ms oracle ({:.1}x)",
        r.render_tiled.median_ms,
        r.render_oracle.median_ms,
        r.render_speedup
    );
    emit(&r, &a.report)
}

fn synth_dir_inputs(dir: &Path, feature_dim: Option<usize>) -> Result<PipelineInputs> {
    let views = load_rig(&dir.join("rig.json"))?;
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    let bank = opt("bank.json").map(|p| load_bank(&p)).transpose()?;
    let gt = opt("gt.voxg")
        .map(|p| ctx(io::read_grid(&p), || format!("reading {}", p.display())))
        .transpose()?;
    let visibility = match (&gt, opt("visibility.plne")) {
        (Some(g), Some(p)) => Some(read_mask(&p, g.labels.len())?),
        _ => None,
    };
    let lidar = opt("lidar.pnts").map(|p| load_points(&p)).transpose()?.and_then(|s| {
        let n = s.points.len();
        s.labels.map(|labels| LabelledPoints {
            points: s.points,
            labels,
            visible: s.visible.unwrap_or_else(|| vec![true; n]),
        })
    });
    let feature_dim = feature_dim
        .or_else(|| views.iter().find_map(|v| v.ref_feature.as_ref().map(|f| f.channels)))
        .or(bank.as_ref().map(|b| b.dim))
        .ok_or_else(|| fgs::Error::InvalidInput("cannot infer the feature dimension".into()))?;
    Ok(PipelineInputs { views, feature_dim, scene: None, bank, gt, visibility, lidar, heads: None })
}

fn cmd_pipeline(a: PipelineArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: PipelineConfig = config_or_default(a.config.as_ref())?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.attention.seed = s;
    }
    if let Some(n) = a.base_count {
        cfg.densify.base_count = n;
    }
    if let Some(g) = a.gamma {
        cfg.densify.gamma = g;
    }
    if let Some(b) = a.layers {
        cfg.stages = PipelineConfig::default_stages(b);
        let last = cfg.densify.layer_budgets.last().copied().unwrap_or(1000);
        cfg.densify.layer_budgets.resize(b, last);
    }
    if let Some(n) = a.budget {
        cfg.densify.layer_budgets.iter_mut().for_each(|b| *b = n);
    }
    if a.no_attention {
        cfg.attention.enabled = false;
    }
    let mut inputs = match (&a.input, &a.synth) {
        (Some(dir), _) => synth_dir_inputs(dir, None)?,
        (None, spec) => {
            let mut s: SynthSpec = config_or_default(spec.as_ref())?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            ctx(gen_scene(&s), || "generating synthetic scene".into())?.pipeline_inputs()
        }
    };
    if let Some(p) = &a.heads {
        let (h, _, _) = load_heads(p)?;
        inputs.heads = Some(h);
    }
    let run = ctx(run_pipeline(&cfg, &inputs), || "pipeline".into())?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        if let Some(s) = &run.scene {
            save_scene(&dir.join("scene.fgs"), s)?;
        }
        if let Some(g) = &run.grid {
            ctx(io::write_grid(dir.join("grid.voxg"), g), || "writing grid".into())?;
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
    }
    if let Some(e) = run.report.eval.as_ref() {
        if let Some(m) = &e.miou {
            log::info!("mIoU {:.4}", m.miou.unwrap_or(f64::NAN));
        }
        if let Some(r) = &e.retrieval {
            log::info!("mAP {:.4}", r.map.unwrap_or(f64::NAN));
        }
    }
    emit(&run.report, &a.report)
}

fn dispatch(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, seed),
        Cmd::Init(a) => cmd_init(a, seed),
        Cmd::Densify(a) => cmd_densify(a, seed),
        Cmd::Refine(a) => cmd_refine(a, seed),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Voxelize(a) => cmd_voxelize(a),
        Cmd::Retrieve(a) => cmd_retrieve(a),
        Cmd::Loss(a) => cmd_loss(a),
        Cmd::EvalMiou(a) => cmd_eval_miou(a),
        Cmd::EvalMap(a) => cmd_eval_map(a),
        Cmd::Bench(a) => cmd_bench(a, seed),
        Cmd::Pipeline(a) => cmd_pipeline(a, seed),
    }
}

/// 2 invalid input, 3 numerical degeneracy, 4 I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(fe) = cause.downcast_ref::<fgs::Error>() {
            return match fe {
                fgs::Error::Numerical(_) => 3,
                fgs::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

/// The cause chain, skipping causes whose text the previous message already
/// ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info })
        .parse_env("FGS_LOG")
        .init();
    let result = match cli.threads {
        Some(0) => Err(anyhow!(fgs::Error::InvalidInput("--threads must be positive".into()))),
        Some(t) => par::with_threads(t, move || dispatch(cli)),
        None => dispatch(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
