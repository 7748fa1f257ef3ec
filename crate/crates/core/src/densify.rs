//! Progressive online densification.
//!
//! The base layer comes from farthest point sampling over back-projected
//! reference depth. Each later layer renders the current scene, selects the
//! pixels whose rendered depth lies more than `gamma` behind the reference,
//! back-projects those reference depths and appends `n_b` FPS-chosen points
//! as fresh Gaussians.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{backproject, backproject_pixel, CameraView};
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Quat, Vec3};
use crate::par;
use crate::plane::DepthMap;
use crate::raster::{render, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    /// `D̂ − D > γ`
    #[default]
    Signed,
    /// `|D̂ − D| > γ`
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Depth-residual threshold in meters.
    pub gamma: f64,
    pub base_count: usize,
    /// New Gaussians per progressive layer, indexed from layer 1.
    pub layer_budgets: Vec<usize>,
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Constant every new feature component starts at.
    pub init_feature: f64,
    pub select_mode: SelectMode,
    /// Seeded uniform subsample of the candidate cloud before FPS when it is
    /// larger than this.
    pub candidate_cap: Option<usize>,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            gamma: 0.2,
            base_count: 4000,
            layer_budgets: vec![1000, 1000],
            init_scale: 0.2,
            init_opacity: 0.5,
            init_feature: 0.0,
            select_mode: SelectMode::Signed,
            candidate_cap: None,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.base_count == 0 || self.layer_budgets.iter().any(|b| *b == 0) {
            return Err(Error::invalid("densification budgets must be positive"));
        }
        if !(self.init_scale > 0.0) || !(0.0..=1.0).contains(&self.init_opacity) {
            return Err(Error::invalid("invalid initial scale or opacity"));
        }
        Ok(())
    }

    fn new_gaussian(&self, mean: Vec3, feature_dim: usize) -> FeatureGaussian {
        FeatureGaussian {
            mean,
            scale: Vec3::repeat(self.init_scale),
            rotation: Quat::IDENTITY,
            opacity: self.init_opacity,
            feature: vec![self.init_feature; feature_dim],
        }
    }
}

/// Greedy max-min subset of `points`.
///
/// The first pick is index 0; each later pick maximizes the distance to the
/// picked set, ties going to the lowest index.
pub fn fps(points: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::invalid(format!(
            "cannot pick {k} points from {}",
            points.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    const CHUNK: usize = 8192;
    let mut picked = Vec::with_capacity(k);
    // squared distance to the picked set; -1 marks picked points
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = 0usize;
    loop {
        picked.push(current);
        dist[current] = -1.0;
        if picked.len() == k {
            break;
        }
        let c = points[current];
        par::for_each_chunk_mut(&mut dist, CHUNK, |ci, chunk| {
            let base = ci * CHUNK;
            for (j, d) in chunk.iter_mut().enumerate() {
                if *d >= 0.0 {
                    let nd = (points[base + j] - c).norm_squared();
                    if nd < *d {
                        *d = nd;
                    }
                }
            }
        });
        let n_chunks = dist.len().div_ceil(CHUNK);
        let best = par::map_range(n_chunks, |ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(dist.len());
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (j, &d) in dist[lo..hi].iter().enumerate() {
                if d > best.0 {
                    best = (d, lo + j);
                }
            }
            best
        });
        current = best
            .into_iter()
            .fold((f64::NEG_INFINITY, usize::MAX), |a, b| if b.0 > a.0 { b } else { a })
            .1;
    }
    Ok(picked)
}

/// Pixels (x, y) in row-major order whose residual exceeds `gamma`.
///
/// Pixels without a reference depth are never selected; pixels the render
/// leaves empty count as an infinite residual.
pub fn select_under_represented(
    rendered: &RenderOutput,
    reference: &DepthMap,
    gamma: f64,
    mode: SelectMode,
) -> Result<Vec<(usize, usize)>> {
    if rendered.width != reference.width() || rendered.height != reference.height() {
        return Err(Error::invalid(format!(
            "rendered {}×{} vs reference {}×{}",
            rendered.width,
            rendered.height,
            reference.width(),
            reference.height()
        )));
    }
    let mut out = Vec::new();
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            let Some(d_ref) = reference.get(x, y) else {
                continue;
            };
            let i = y * rendered.width + x;
            let residual = if rendered.valid[i] {
                rendered.depth[i] - d_ref
            } else {
                f64::INFINITY
            };
            let r = match mode {
                SelectMode::Signed => residual,
                SelectMode::Absolute => residual.abs(),
            };
            if r > gamma {
                out.push((x, y));
            }
        }
    }
    Ok(out)
}

fn reference_depth(view: &CameraView) -> Result<&DepthMap> {
    let d = view
        .ref_depth
        .as_ref()
        .ok_or_else(|| Error::invalid("view has no reference depth"))?;
    if d.width() != view.width || d.height() != view.height {
        return Err(Error::invalid("reference depth size differs from camera size"));
    }
    Ok(d)
}

fn cap_candidates(points: Vec<Vec3>, cap: Option<usize>, seed: u64) -> Vec<Vec3> {
    match cap {
        Some(cap) if points.len() > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = index::sample(&mut rng, points.len(), cap).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| points[i]).collect()
        }
        _ => points,
    }
}

/// Base layer: FPS over the union of all reference-depth back-projections.
pub fn base_init(
    views: &[CameraView],
    cfg: &DensifyConfig,
    feature_dim: usize,
    seed: u64,
) -> Result<GaussianScene> {
    cfg.validate()?;
    let mut cloud = Vec::new();
    for v in views {
        cloud.extend(backproject(v, reference_depth(v)?));
    }
    if cloud.len() < cfg.base_count {
        return Err(Error::InsufficientPoints {
            needed: cfg.base_count,
            available: cloud.len(),
        });
    }
    let cloud = cap_candidates(cloud, cfg.candidate_cap.map(|c| c.max(cfg.base_count)), seed);
    let picks = fps(&cloud, cfg.base_count)?;
    let gaussians = picks
        .into_iter()
        .map(|i| cfg.new_gaussian(cloud[i], feature_dim))
        .collect();
    GaussianScene::new(gaussians, vec![cfg.base_count], feature_dim)
}

/// Diagnostics for one densification step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub layer: usize,
    pub selected_pixels_per_view: Vec<usize>,
    pub candidate_points: usize,
    pub added_count: usize,
    /// Mean |D̂ − D| over selected pixels the old scene renders.
    pub residual_before: Option<f64>,
    /// Same pixel set, rendered from the grown scene.
    pub residual_after: Option<f64>,
    /// Selected pixels with no rendered depth before / after.
    pub uncovered_before: usize,
    pub uncovered_after: usize,
}

fn residual_stats(
    renders: &[RenderOutput],
    views: &[CameraView],
    selected: &[Vec<(usize, usize)>],
) -> (Option<f64>, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut uncovered = 0usize;
    for ((r, v), sel) in renders.iter().zip(views).zip(selected) {
        let d = v.ref_depth.as_ref().expect("checked");
        for &(x, y) in sel {
            let i = y * r.width + x;
            if r.valid[i] {
                sum += (r.depth[i] - d.get(x, y).expect("selected pixels have a reference")).abs();
                n += 1;
            } else {
                uncovered += 1;
            }
        }
    }
    ((n > 0).then(|| sum / n as f64), uncovered)
}

/// Grows `scene` by progressive layer `layer` (≥ 1).
///
/// Existing Gaussians are copied untouched; an empty selection appends a
/// zero-growth layer.
pub fn densify_layer(
    scene: &GaussianScene,
    views: &[CameraView],
    cfg: &DensifyConfig,
    layer: usize,
    seed: u64,
) -> Result<(GaussianScene, DensifyReport)> {
    cfg.validate()?;
    if layer == 0 {
        return Err(Error::invalid("progressive layers start at 1"));
    }
    if scene.layer_count() != layer {
        return Err(Error::invalid(format!(
            "layer {layer} needs a scene with {layer} layers, got {}",
            scene.layer_count()
        )));
    }
    let budget = *cfg
        .layer_budgets
        .get(layer - 1)
        .ok_or_else(|| Error::invalid(format!("no budget configured for layer {layer}")))?;
    for v in views {
        reference_depth(v)?;
    }

    let renders = par::map_slice(views, |v| render(scene, v));
    let mut selected = Vec::with_capacity(views.len());
    let mut pool = Vec::new();
    for (v, r) in views.iter().zip(&renders) {
        let d = v.ref_depth.as_ref().expect("checked");
        let sel = select_under_represented(r, d, cfg.gamma, cfg.select_mode)?;
        pool.extend(sel.iter().map(|&(x, y)| {
            backproject_pixel(v, x as f64, y as f64, d.get(x, y).expect("selected"))
        }));
        selected.push(sel);
    }
    let candidate_points = pool.len();
    let (residual_before, uncovered_before) = residual_stats(&renders, views, &selected);

    let mut out = scene.clone();
    let pool = cap_candidates(pool, cfg.candidate_cap.map(|c| c.max(budget)), seed);
    let take = budget.min(pool.len());
    let picks = fps(&pool, take)?;
    out.gaussians
        .extend(picks.into_iter().map(|i| cfg.new_gaussian(pool[i], scene.feature_dim)));
    out.layer_offsets.push(out.gaussians.len());

    let (residual_after, uncovered_after) = if take > 0 {
        let after = par::map_slice(views, |v| render(&out, v));
        residual_stats(&after, views, &selected)
    } else {
        (residual_before, uncovered_before)
    };

    let report = DensifyReport {
        layer,
        selected_pixels_per_view: selected.iter().map(Vec::len).collect(),
        candidate_points,
        added_count: take,
        residual_before,
        residual_after,
        uncovered_before,
        uncovered_after,
    };
    Ok((out, report))
}
