//! Median-of-k timings for the hot kernels and the random fixtures they run
//! on.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics};
use crate::densify::fps;
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Pose, Quat, Vec3};
use crate::par;
use crate::raster::{render, render_oracle};
use crate::synth::orthonormal_basis;
use crate::voxel::{voxelize, GridSpec, PromptReduce, TextBank, TextClass, VoxelizeConfig};

/// Pinhole camera at the origin looking down +z with a 90° horizontal field
/// of view.
pub fn forward_camera(width: usize, height: usize) -> Result<CameraView> {
    let f = width as f64 / 2.0;
    let k = Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)?;
    CameraView::new(k, Pose::identity(), width, height)
}

/// Random unit quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Quat {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if let Ok(q) = Quat::normalized(q) {
            return q;
        }
    }
}

/// `n` anisotropic Gaussians inside the frustum of [`forward_camera`] at
/// depths in `[near, far]`.
pub fn random_view_scene(
    n: usize,
    feature_dim: usize,
    width: usize,
    height: usize,
    depth: (f64, f64),
    rng: &mut impl Rng,
) -> Result<GaussianScene> {
    let aspect = height as f64 / width as f64;
    let gaussians = (0..n)
        .map(|_| {
            let z = rng.random_range(depth.0..depth.1);
            let mean = Vec3::new(
                rng.random_range(-1.1..1.1) * z,
                rng.random_range(-1.1..1.1) * z * aspect,
                z,
            );
            let scale = Vec3::from_fn(|_, _| rng.random_range(0.02..0.3));
            let feature = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureGaussian::new(mean, scale, random_rotation(rng).0, rng.random_range(0.05..0.99), feature)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianScene::single_layer(gaussians, feature_dim)
}

/// `n` Gaussians scattered through `spec`'s volume.
pub fn random_grid_scene(n: usize, feature_dim: usize, spec: &GridSpec, rng: &mut impl Rng) -> Result<GaussianScene> {
    let ext: [f64; 3] = std::array::from_fn(|a| spec.dims[a] as f64 * spec.voxel_size);
    let gaussians = (0..n)
        .map(|_| {
            let mean = Vec3::from_fn(|a, _| spec.origin[a] + rng.random_range(0.0..ext[a]));
            let scale = Vec3::from_fn(|_, _| rng.random_range(0.5..2.0) * spec.voxel_size);
            let feature = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureGaussian::new(mean, scale, random_rotation(rng).0, rng.random_range(0.05..0.99), feature)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianScene::single_layer(gaussians, feature_dim)
}

/// One prompt per class with orthonormal embeddings.
pub fn orthonormal_bank(classes: usize, dim: usize, seed: u64) -> Result<TextBank> {
    let basis = orthonormal_basis(classes, dim, seed)?;
    let classes = basis
        .into_iter()
        .enumerate()
        .map(|(i, e)| TextClass {
            name: format!("class{i}"),
            class_id: Some(i as u16),
            prompts: vec![format!("class{i}")],
            embeddings: vec![e],
        })
        .collect();
    TextBank::new(classes, PromptReduce::Max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub runs_ms: Vec<f64>,
}

/// Runs `f` `k` times and keeps every wall time.
pub fn time_median<R>(k: usize, mut f: impl FnMut() -> R) -> Timing {
    let runs_ms: Vec<f64> = (0..k.max(1))
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let mut sorted = runs_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median_ms = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    Timing { median_ms, runs_ms }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub repeats: usize,
    /// Repeats for the brute-force paths, which are much slower.
    pub oracle_repeats: usize,
    pub render_gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub voxel_gaussians: usize,
    pub grid_dims: [usize; 3],
    pub fps_points: usize,
    pub fps_k: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            repeats: 5,
            oracle_repeats: 1,
            render_gaussians: 10_000,
            width: 320,
            height: 180,
            feature_dim: 16,
            voxel_gaussians: 2_000,
            grid_dims: [50, 50, 8],
            fps_points: 20_000,
            fps_k: 1_000,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.oracle_repeats == 0 {
            return Err(Error::invalid("bench repeats must be positive"));
        }
        if self.fps_k > self.fps_points {
            return Err(Error::invalid("fps_k exceeds fps_points"));
        }
        if self.width == 0 || self.height == 0 || self.grid_dims.contains(&0) {
            return Err(Error::invalid("bench sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub threads: usize,
    pub render_tiled: Timing,
    pub render_oracle: Timing,
    pub render_speedup: f64,
    /// Largest |tiled − oracle| over depth, feature and alpha.
    pub render_max_abs_diff: f64,
    pub voxelize_cutoff: Timing,
    pub voxelize_oracle: Timing,
    pub voxelize_speedup: f64,
    pub fps: Timing,
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let cam = forward_camera(cfg.width, cfg.height)?;
    let scene = random_view_scene(cfg.render_gaussians, cfg.feature_dim, cfg.width, cfg.height, (1.0, 40.0), &mut rng)?;
    let render_tiled = time_median(cfg.repeats, || render(&scene, &cam));
    let (a, b) = (render(&scene, &cam), render_oracle(&scene, &cam));
    let oracle_t = time_median(cfg.oracle_repeats, || render_oracle(&scene, &cam));
    let render_max_abs_diff = a
        .depth
        .iter()
        .zip(&b.depth)
        .chain(a.feature.iter().zip(&b.feature))
        .chain(a.acc_alpha.iter().zip(&b.acc_alpha))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let spec = GridSpec {
        origin: [-(cfg.grid_dims[0] as f64) * 0.2, -(cfg.grid_dims[1] as f64) * 0.2, -1.0],
        voxel_size: 0.4,
        dims: cfg.grid_dims,
    };
    let vscene = random_grid_scene(cfg.voxel_gaussians, cfg.feature_dim, &spec, &mut rng)?;
    let bank = orthonormal_bank(cfg.feature_dim.min(8), cfg.feature_dim, cfg.seed)?;
    let with_cutoff = VoxelizeConfig::default();
    let oracle = VoxelizeConfig { cutoff: None, ..with_cutoff };
    voxelize(&vscene, &bank, &spec, &with_cutoff)?;
    let voxelize_cutoff = time_median(cfg.repeats, || voxelize(&vscene, &bank, &spec, &with_cutoff));
    let voxelize_oracle = time_median(cfg.oracle_repeats, || voxelize(&vscene, &bank, &spec, &oracle));

    let points: Vec<Vec3> = (0..cfg.fps_points)
        .map(|_| Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0)))
        .collect();
    let fps_t = time_median(cfg.repeats, || fps(&points, cfg.fps_k));

    Ok(BenchReport {
        config: cfg.clone(),
        threads: par::current_threads(),
        render_speedup: oracle_t.median_ms / render_tiled.median_ms.max(1e-9),
        render_tiled,
        render_oracle: oracle_t,
        render_max_abs_diff,
        voxelize_speedup: voxelize_oracle.median_ms / voxelize_cutoff.median_ms.max(1e-9),
        voxelize_cutoff,
        voxelize_oracle,
        fps: fps_t,
    })
}
