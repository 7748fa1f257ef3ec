//! Stage orchestration: base layer, progressive densify/refine layers,
//! voxelization and evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionWeights;
use crate::camera::CameraView;
use crate::densify::{base_init, densify_layer, DensifyConfig, DensifyReport};
use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;
use crate::geometry::Vec3;
use crate::metrics::{eval_map, eval_miou, MapReport, MiouReport};
use crate::sampling::{refine_layer, DecodeHeads, HeadConfig, RefineReport, RefineScope};
use crate::voxel::{query_points, retrieval_scores, voxelize, GridSpec, TextBank, VoxelGrid, VoxelizeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Refine,
    Densify,
    Voxelize,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Refine => "refine",
            Stage::Densify => "densify",
            Stage::Voxelize => "voxelize",
            Stage::Eval => "eval",
        }
    }

    fn rank(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Refine | Stage::Densify => 1,
            Stage::Voxelize => 2,
            Stage::Eval => 3,
        }
    }
}

/// Geometry the passthrough heads assign to refined Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodePrior {
    pub scale: f64,
    pub opacity: f64,
}

impl Default for DecodePrior {
    fn default() -> Self {
        DecodePrior {
            scale: 0.12,
            opacity: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionSpec {
    pub enabled: bool,
    pub heads: usize,
    pub seed: u64,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            enabled: true,
            heads: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub densify: DensifyConfig,
    pub heads: HeadConfig,
    pub prior: DecodePrior,
    pub attention: AttentionSpec,
    pub refine_scope: RefineScope,
    pub voxelize: VoxelizeConfig,
    /// Overrides the ground-truth grid geometry when set.
    pub grid: Option<GridSpec>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: PipelineConfig::default_stages(2),
            densify: DensifyConfig::default(),
            heads: HeadConfig::default(),
            prior: DecodePrior::default(),
            attention: AttentionSpec::default(),
            refine_scope: RefineScope::Newest,
            voxelize: VoxelizeConfig::default(),
            grid: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// `init, refine, (densify, refine) × layers, voxelize, eval`.
    pub fn default_stages(layers: usize) -> Vec<Stage> {
        let mut s = vec![Stage::Init, Stage::Refine];
        for _ in 0..layers {
            s.extend([Stage::Densify, Stage::Refine]);
        }
        s.extend([Stage::Voxelize, Stage::Eval]);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.windows(2).any(|w| w[0].rank() > w[1].rank()) {
            return Err(Error::invalid(
                "stages must run init, then densify/refine, then voxelize, then eval",
            ));
        }
        for s in [Stage::Init, Stage::Voxelize, Stage::Eval] {
            if self.stages.iter().filter(|x| **x == s).count() > 1 {
                return Err(Error::invalid(format!("stage {} appears twice", s.name())));
            }
        }
        let densifies = self.stages.iter().filter(|s| **s == Stage::Densify).count();
        if densifies > self.densify.layer_budgets.len() {
            return Err(Error::invalid(format!(
                "{densifies} densify stages but only {} layer budgets",
                self.densify.layer_budgets.len()
            )));
        }
        self.densify.validate()?;
        self.voxelize.validate()
    }
}

/// Everything a run reads besides its config.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    pub views: Vec<CameraView>,
    pub feature_dim: usize,
    /// Scene to start from when there is no init stage.
    pub scene: Option<GaussianScene>,
    pub bank: Option<TextBank>,
    pub gt: Option<VoxelGrid>,
    /// Camera-visibility mask over `gt`.
    pub visibility: Option<Vec<bool>>,
    pub lidar: Option<LabelledPoints>,
    /// Decode heads; passthrough heads from the config prior when absent.
    pub heads: Option<DecodeHeads>,
}

/// Query points with class labels for retrieval evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledPoints {
    pub points: Vec<Vec3>,
    pub labels: Vec<u16>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub gaussians: usize,
    /// Wall time of every stage that built or refined this layer.
    pub elapsed_ms: f64,
    /// Wall time of the layer's refine pass.
    pub refine_ms: Option<f64>,
    pub densify: Option<DensifyReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub elapsed_ms: f64,
    pub gaussians: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: Option<MiouReport>,
    pub retrieval: Option<MapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    pub layers: Vec<LayerReport>,
    pub eval: Option<EvalReport>,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub scene: Option<GaussianScene>,
    pub grid: Option<VoxelGrid>,
    pub report: PipelineReport,
}

fn stage_err(s: Stage, e: Error) -> Error {
    let wrap = |m: String| format!("stage {}: {m}", s.name());
    match e {
        Error::InvalidInput(m) => Error::InvalidInput(wrap(m)),
        Error::Numerical(m) => Error::Numerical(wrap(m)),
        Error::EmptyInput(m) => Error::EmptyInput(wrap(m)),
        Error::Format(m) => Error::Format(wrap(m)),
        other => other,
    }
}

pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs) -> Result<PipelineRun> {
    cfg.validate()?;
    let f = inputs.feature_dim;
    let heads = match &inputs.heads {
        Some(h) => h.clone(),
        None => DecodeHeads::passthrough(f, cfg.heads, cfg.prior.scale, cfg.prior.opacity)?,
    };
    let attention = if cfg.attention.enabled {
        Some(AttentionWeights::seeded(f, cfg.attention.heads, cfg.attention.seed)?)
    } else {
        None
    };
    let mut scene = inputs.scene.clone();
    let mut grid: Option<VoxelGrid> = None;
    let mut report = PipelineReport {
        stages: Vec::new(),
        layers: Vec::new(),
        eval: None,
        threads: crate::par::current_threads(),
    };
    let layer_of = |scene: &GaussianScene, report: &mut PipelineReport| -> usize {
        let b = scene.layer_count() - 1;
        if report.layers.len() <= b {
            report.layers.push(LayerReport {
                layer: b,
                gaussians: scene.len(),
                elapsed_ms: 0.0,
                refine_ms: None,
                densify: None,
            });
        }
        b
    };
    for &stage in &cfg.stages {
        let t0 = Instant::now();
        let mut refine_report = None;
        let mut touched = None;
        let res: Result<()> = (|| {
            match stage {
                Stage::Init => {
                    let s = base_init(&inputs.views, &cfg.densify, f, cfg.seed)?;
                    touched = Some(layer_of(&s, &mut report));
                    scene = Some(s);
                }
                Stage::Densify => {
                    let cur = scene.as_ref().ok_or_else(|| Error::invalid("no scene to densify"))?;
                    let layer = cur.layer_count();
                    let (s, d) = densify_layer(cur, &inputs.views, &cfg.densify, layer, cfg.seed.wrapping_add(layer as u64))?;
                    let b = layer_of(&s, &mut report);
                    report.layers[b].densify = Some(d);
                    touched = Some(b);
                    scene = Some(s);
                }
                Stage::Refine => {
                    let cur = scene.as_ref().ok_or_else(|| Error::invalid("no scene to refine"))?;
                    let t = Instant::now();
                    let (s, r) = refine_layer(cur, &inputs.views, &heads, attention.as_ref(), cfg.refine_scope)?;
                    let ms = t.elapsed().as_secs_f64() * 1e3;
                    let b = layer_of(&s, &mut report);
                    report.layers[b].refine_ms = Some(ms);
                    touched = Some(b);
                    refine_report = Some(r);
                    scene = Some(s);
                }
                Stage::Voxelize => {
                    let cur = scene.as_ref().ok_or_else(|| Error::invalid("no scene to voxelize"))?;
                    let bank = inputs.bank.as_ref().ok_or_else(|| Error::invalid("voxelize needs a text bank"))?;
                    let spec = cfg
                        .grid
                        .or(inputs.gt.as_ref().map(|g| g.spec))
                        .ok_or_else(|| Error::invalid("voxelize needs a grid spec"))?;
                    grid = Some(voxelize(cur, bank, &spec, &cfg.voxelize)?);
                }
                Stage::Eval => {
                    report.eval = Some(evaluate(scene.as_ref(), grid.as_ref(), inputs, &cfg.voxelize)?);
                }
            }
            Ok(())
        })();
        res.map_err(|e| stage_err(stage, e))?;
        let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(b) = touched {
            report.layers[b].elapsed_ms += elapsed_ms;
        }
        report.stages.push(StageReport {
            stage,
            elapsed_ms,
            gaussians: scene.as_ref().map_or(0, GaussianScene::len),
            refine: refine_report,
        });
    }
    Ok(PipelineRun { scene, grid, report })
}

fn evaluate(
    scene: Option<&GaussianScene>,
    grid: Option<&VoxelGrid>,
    inputs: &PipelineInputs,
    vcfg: &VoxelizeConfig,
) -> Result<EvalReport> {
    let miou = match (grid, &inputs.gt, &inputs.bank) {
        (Some(pred), Some(gt), Some(bank)) => Some(eval_miou(
            pred,
            gt,
            &bank.class_ids(),
            &[],
            inputs.visibility.as_deref(),
        )?),
        _ => None,
    };
    let retrieval = match (scene, &inputs.lidar, &inputs.bank) {
        (Some(s), Some(l), Some(bank)) if !s.is_empty() && !l.points.is_empty() => {
            let q = query_points(s, &l.points, vcfg.cutoff)?;
            let feats: Vec<Vec<f64>> = q.into_iter().map(|p| p.feature).collect();
            let classes: Vec<_> = bank.classes.iter().filter(|c| c.class_id.is_some()).collect();
            let queries: Vec<Vec<f64>> = classes.iter().map(|c| c.embeddings[0].clone()).collect();
            let gt: Vec<Vec<bool>> = classes
                .iter()
                .map(|c| l.labels.iter().map(|x| Some(*x) == c.class_id).collect())
                .collect();
            Some(eval_map(&retrieval_scores(&feats, &queries), &gt, Some(&l.visible))?)
        }
        _ => None,
    };
    Ok(EvalReport { miou, retrieval })
}
