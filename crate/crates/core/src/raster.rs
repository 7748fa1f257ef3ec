//! Expected-depth and feature rasterization.
//!
//! Gaussians are projected with a first-order perspective linearization,
//! sorted once per camera by center depth and alpha-blended front to back:
//!
//! ```text
//! D̂ = Σ dᵢ αᵢ Tᵢ / Σ αᵢ Tᵢ        F̂ = Σ fᵢ αᵢ Tᵢ        Tᵢ = Π_{j<i} (1 − αⱼ)
//! ```
//!
//! [`render`] bins Gaussians into 16×16 tiles; [`render_oracle`] evaluates
//! every pixel against every Gaussian. Both share [`Projected2D::alpha_at`]
//! and the blend rule, and agree to rounding.

use nalgebra::{Matrix2, Matrix2x3};

use crate::camera::{CameraView, Z_NEAR};
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::par;
use crate::plane::{DepthMap, Plane};

/// Screen-space dilation added to every 2D covariance, in px².
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Minimum accumulated alpha for a pixel to carry a depth.
pub const ACC_EPS: f64 = 1e-6;
pub const TILE: usize = 16;
/// Jacobian clamp, as a multiple of the frustum half-extent.
pub const GUARD_BAND: f64 = 1.3;

/// Screen footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mean2d: [f64; 2],
    /// Symmetric covariance as (xx, xy, yy).
    pub cov2d: [f64; 3],
    conic: [f64; 3],
    pub z_cam: f64,
    pub opacity: f64,
    pub source_index: usize,
}

impl Projected2D {
    pub fn new(
        mean2d: [f64; 2],
        cov2d: [f64; 3],
        z_cam: f64,
        opacity: f64,
        source_index: usize,
    ) -> Result<Self> {
        let [a, b, c] = cov2d;
        let det = a * c - b * b;
        if !(det.is_finite() && det > 0.0 && a > 0.0) {
            return Err(Error::numerical(format!(
                "2D covariance {cov2d:?} is not positive definite"
            )));
        }
        Ok(Projected2D {
            mean2d,
            cov2d,
            conic: [c / det, -b / det, a / det],
            z_cam,
            opacity,
            source_index,
        })
    }

    /// Squared Mahalanobis distance of pixel `(u, v)` from the center.
    #[inline]
    pub fn mahalanobis2(&self, u: f64, v: f64) -> f64 {
        let du = u - self.mean2d[0];
        let dv = v - self.mean2d[1];
        self.conic[0] * du * du + 2.0 * self.conic[1] * du * dv + self.conic[2] * dv * dv
    }

    /// Blend weight at `(u, v)`, clamped to 0.99 and zeroed below 1/255.
    #[inline]
    pub fn alpha_at(&self, u: f64, v: f64) -> f64 {
        let a = (self.opacity * (-0.5 * self.mahalanobis2(u, v)).exp()).min(ALPHA_MAX);
        if a < ALPHA_MIN {
            0.0
        } else {
            a
        }
    }

    /// Half-extents (in px) of the region where `alpha_at` can be non-zero,
    /// or `None` if the Gaussian never reaches the alpha cutoff.
    pub fn footprint(&self) -> Option<[f64; 2]> {
        // α ≥ 1/255  ⇔  m ≤ 2 ln(255 o)
        let m_max = 2.0 * (self.opacity / ALPHA_MIN).ln();
        if !(m_max >= 0.0) {
            return None;
        }
        let k = m_max.sqrt();
        Some([k * self.cov2d[0].sqrt(), k * self.cov2d[2].sqrt()])
    }
}

/// Free-function form of [`Projected2D::alpha_at`].
pub fn alpha_at(p: &Projected2D, u: f64, v: f64) -> f64 {
    p.alpha_at(u, v)
}

/// Projects `g` without any screen-space culling. `None` when the center is
/// at or behind the near plane.
pub fn project_unculled(g: &FeatureGaussian, index: usize, cam: &CameraView) -> Option<Projected2D> {
    let w = cam.pose.rotation.transpose();
    let t = w * (g.mean - cam.pose.translation);
    if !(t.z > Z_NEAR) {
        return None;
    }
    let k = &cam.intrinsics;
    let (u, v) = k.project(&t);
    let iz = 1.0 / t.z;
    // the Jacobian is evaluated with x/z, y/z clamped to a guard band around
    // the frustum so Gaussians beside the camera do not explode on screen
    let (w_px, h_px) = (cam.width as f64, cam.height as f64);
    let tx = (t.x * iz).clamp(-GUARD_BAND * (k.cx + 0.5) / k.fx, GUARD_BAND * (w_px - 0.5 - k.cx) / k.fx) * t.z;
    let ty = (t.y * iz).clamp(-GUARD_BAND * (k.cy + 0.5) / k.fy, GUARD_BAND * (h_px - 0.5 - k.cy) / k.fy) * t.z;
    let j = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * tx * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * ty * iz * iz,
    );
    let sigma_cam = w * g.covariance() * w.transpose();
    let cov: Matrix2<f64> = j * sigma_cam * j.transpose();
    let b = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    let cov2d = [cov[(0, 0)] + LOW_PASS, b, cov[(1, 1)] + LOW_PASS];
    match Projected2D::new([u, v], cov2d, t.z, g.opacity, index) {
        Ok(p) => Some(p),
        Err(e) => {
            log::warn!("gaussian {index}: {e}; culled");
            None
        }
    }
}

/// Projects `g` into `cam`, culling it when it is behind the near plane or its
/// alpha footprint misses the image.
pub fn project_gaussian(g: &FeatureGaussian, index: usize, cam: &CameraView) -> Option<Projected2D> {
    let p = project_unculled(g, index, cam)?;
    screen_box(&p, cam.width, cam.height).map(|_| p)
}

/// Inclusive pixel box `[x0, x1] × [y0, y1]` covering the footprint, padded by
/// one pixel, or `None` if it misses the image.
fn screen_box(p: &Projected2D, width: usize, height: usize) -> Option<[usize; 4]> {
    let [ru, rv] = p.footprint()?;
    let (lo_u, hi_u) = (p.mean2d[0] - ru - 1.0, p.mean2d[0] + ru + 1.0);
    let (lo_v, hi_v) = (p.mean2d[1] - rv - 1.0, p.mean2d[1] + rv + 1.0);
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    if !(hi_u >= 0.0 && lo_u <= wmax && hi_v >= 0.0 && lo_v <= hmax) {
        return None;
    }
    Some([
        lo_u.max(0.0).ceil() as usize,
        hi_u.min(wmax).floor() as usize,
        lo_v.max(0.0).ceil() as usize,
        hi_v.min(hmax).floor() as usize,
    ])
}

/// Per-pixel expected depth, accumulated alpha and feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    /// 0 where `valid` is false.
    pub depth: Vec<f64>,
    pub acc_alpha: Vec<f64>,
    pub valid: Vec<bool>,
    /// Row-major `H × W × F`, not normalized by accumulated alpha.
    pub feature: Vec<f64>,
}

impl RenderOutput {
    fn blank(width: usize, height: usize, feature_dim: usize) -> Self {
        let n = width * height;
        RenderOutput {
            width,
            height,
            feature_dim,
            depth: vec![0.0; n],
            acc_alpha: vec![0.0; n],
            valid: vec![false; n],
            feature: vec![0.0; n * feature_dim],
        }
    }

    pub fn depth_map(&self) -> DepthMap {
        DepthMap {
            depth: Plane {
                width: self.width,
                height: self.height,
                channels: 1,
                data: self.depth.clone(),
            },
            valid: self.valid.clone(),
        }
    }

    pub fn feature_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            channels: self.feature_dim,
            data: self.feature.clone(),
        }
    }

    pub fn feature_at(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.feature_dim;
        &self.feature[o..o + self.feature_dim]
    }

    /// Largest absolute difference across depth, alpha and feature. Pixels
    /// whose validity differs count as infinite.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        if self.width != other.width || self.height != other.height || self.feature_dim != other.feature_dim {
            return f64::INFINITY;
        }
        if self.valid != other.valid {
            return f64::INFINITY;
        }
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        d(&self.depth, &other.depth)
            .max(d(&self.acc_alpha, &other.acc_alpha))
            .max(d(&self.feature, &other.feature))
    }
}

/// Running blend state for one pixel.
struct PixelBlend<'a> {
    transmittance: f64,
    depth_sum: f64,
    weight_sum: f64,
    z_lo: f64,
    z_hi: f64,
    feature: &'a mut [f64],
}

impl<'a> PixelBlend<'a> {
    fn new(feature: &'a mut [f64]) -> Self {
        PixelBlend {
            transmittance: 1.0,
            depth_sum: 0.0,
            weight_sum: 0.0,
            z_lo: f64::INFINITY,
            z_hi: f64::NEG_INFINITY,
            feature,
        }
    }

    #[inline]
    fn done(&self) -> bool {
        self.transmittance < TRANSMITTANCE_MIN
    }

    #[inline]
    fn add(&mut self, p: &Projected2D, alpha: f64, f: &[f64]) {
        let w = alpha * self.transmittance;
        self.depth_sum += p.z_cam * w;
        self.weight_sum += w;
        self.z_lo = self.z_lo.min(p.z_cam);
        self.z_hi = self.z_hi.max(p.z_cam);
        for (o, x) in self.feature.iter_mut().zip(f) {
            *o += w * x;
        }
        self.transmittance *= 1.0 - alpha;
    }

    /// (depth, acc_alpha, valid). Depth is clamped to the contributing z
    /// range so a single contributor reproduces its depth bit for bit.
    fn finish(self) -> (f64, f64, bool) {
        if self.weight_sum >= ACC_EPS {
            let d = (self.depth_sum / self.weight_sum).clamp(self.z_lo, self.z_hi);
            (d, self.weight_sum, true)
        } else {
            (0.0, self.weight_sum, false)
        }
    }
}

fn sorted_projections(scene: &GaussianScene, cam: &CameraView, cull: bool) -> Vec<Projected2D> {
    let projected = par::map_range(scene.len(), |i| {
        let g = &scene.gaussians[i];
        if cull {
            project_gaussian(g, i, cam)
        } else {
            project_unculled(g, i, cam)
        }
    });
    let mut list: Vec<Projected2D> = projected.into_iter().flatten().collect();
    list.sort_by(|a, b| {
        a.z_cam
            .total_cmp(&b.z_cam)
            .then(a.source_index.cmp(&b.source_index))
    });
    list
}

/// Reference renderer: every pixel against the full depth-sorted list.
pub fn render_oracle(scene: &GaussianScene, cam: &CameraView) -> RenderOutput {
    let f_dim = scene.feature_dim;
    let list = sorted_projections(scene, cam, false);
    let mut out = RenderOutput::blank(cam.width, cam.height, f_dim);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let i = y * cam.width + x;
            let mut blend = PixelBlend::new(&mut out.feature[i * f_dim..(i + 1) * f_dim]);
            for p in &list {
                if blend.done() {
                    continue;
                }
                let a = p.alpha_at(x as f64, y as f64);
                if a > 0.0 {
                    blend.add(p, a, &scene.gaussians[p.source_index].feature);
                }
            }
            let (d, acc, ok) = blend.finish();
            out.depth[i] = d;
            out.acc_alpha[i] = acc;
            out.valid[i] = ok;
        }
    }
    out
}

struct TileResult {
    depth: Vec<f64>,
    acc: Vec<f64>,
    valid: Vec<bool>,
    feature: Vec<f64>,
}

/// Tile-binned renderer.
pub fn render(scene: &GaussianScene, cam: &CameraView) -> RenderOutput {
    let (w, h, f_dim) = (cam.width, cam.height, scene.feature_dim);
    let list = sorted_projections(scene, cam, true);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);

    // Lists inherit the global depth order because `list` is walked in order.
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in list.iter().enumerate() {
        let Some([x0, x1, y0, y1]) = screen_box(p, w, h) else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let tiles = par::map_range(tiles_x * tiles_y, |t| {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let (x0, y0) = (tx * TILE, ty * TILE);
        let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
        let n = (x1 - x0) * (y1 - y0);
        let mut r = TileResult {
            depth: vec![0.0; n],
            acc: vec![0.0; n],
            valid: vec![false; n],
            feature: vec![0.0; n * f_dim],
        };
        let bin = &bins[t];
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y - y0) * (x1 - x0) + (x - x0);
                let mut blend = PixelBlend::new(&mut r.feature[i * f_dim..(i + 1) * f_dim]);
                for &k in bin {
                    let p = &list[k as usize];
                    let a = p.alpha_at(x as f64, y as f64);
                    if a > 0.0 {
                        blend.add(p, a, &scene.gaussians[p.source_index].feature);
                        if blend.done() {
                            break;
                        }
                    }
                }
                let (d, acc, ok) = blend.finish();
                r.depth[i] = d;
                r.acc[i] = acc;
                r.valid[i] = ok;
            }
        }
        r
    });

    let mut out = RenderOutput::blank(w, h, f_dim);
    for (t, r) in tiles.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let (x0, y0) = (tx * TILE, ty * TILE);
        let tw = (x0 + TILE).min(w) - x0;
        for (row, y) in (y0..(y0 + TILE).min(h)).enumerate() {
            let src = row * tw..(row + 1) * tw;
            let dst = y * w + x0..y * w + x0 + tw;
            out.depth[dst.clone()].copy_from_slice(&r.depth[src.clone()]);
            out.acc_alpha[dst.clone()].copy_from_slice(&r.acc[src.clone()]);
            out.valid[dst.clone()].copy_from_slice(&r.valid[src.clone()]);
            out.feature[dst.start * f_dim..dst.end * f_dim]
                .copy_from_slice(&r.feature[src.start * f_dim..src.end * f_dim]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::geometry::{Pose, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_cam(w: usize, h: usize, f: f64) -> CameraView {
        CameraView::new(
            Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap(),
            Pose::identity(),
            w,
            h,
        )
        .unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, f_dim: usize) -> GaussianScene {
        let gs = (0..n)
            .map(|_| {
                let z = rng.random_range(2.0..12.0);
                let mean = Vec3::new(rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z);
                let scale = Vec3::new(
                    rng.random_range(0.05..0.6),
                    rng.random_range(0.05..0.6),
                    rng.random_range(0.05..0.6),
                );
                let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let feat = (0..f_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                FeatureGaussian::new(mean, scale, q, rng.random_range(0.05..1.0), feat).unwrap()
            })
            .collect();
        GaussianScene::single_layer(gs, f_dim).unwrap()
    }

    #[test]
    fn isotropic_on_axis_covariance() {
        let cam = axis_cam(64, 64, 500.0);
        let g = FeatureGaussian::isotropic(Vec3::new(0.0, 0.0, 5.0), 0.1, 0.5, vec![]).unwrap();
        let p = project_gaussian(&g, 0, &cam).unwrap();
        // (0.1 · 500 / 5)² + 0.3
        assert!((p.cov2d[0] - 100.3).abs() < 1e-9);
        assert!((p.cov2d[2] - 100.3).abs() < 1e-9);
        assert!(p.cov2d[1].abs() < 1e-12);
        assert_eq!(p.mean2d, [31.5, 31.5]);
    }

    #[test]
    fn culling() {
        let cam = axis_cam(64, 64, 500.0);
        let behind = FeatureGaussian::isotropic(Vec3::new(0.0, 0.0, -5.0), 0.1, 0.5, vec![]).unwrap();
        assert!(project_gaussian(&behind, 0, &cam).is_none());
        // 1000 px to the right at 5 m with a 0.01 m blob
        let far = FeatureGaussian::isotropic(Vec3::new(10.0, 0.0, 5.0), 0.01, 0.9, vec![]).unwrap();
        assert!(project_gaussian(&far, 0, &cam).is_none());
        assert!(project_unculled(&far, 0, &cam).is_some());
    }

    #[test]
    fn alpha_examples() {
        let p = Projected2D::new([10.0, 10.0], [4.0, 0.0, 9.0], 3.0, 0.8, 0).unwrap();
        assert_eq!(p.alpha_at(10.0, 10.0), 0.8);
        let p1 = Projected2D::new([0.0, 0.0], [4.0, 0.0, 4.0], 3.0, 1.0, 0).unwrap();
        assert!((p1.alpha_at(2.0, 0.0) - (-0.5f64).exp()).abs() < 1e-15);
        let p0 = Projected2D::new([0.0, 0.0], [4.0, 0.0, 4.0], 3.0, 0.0, 0).unwrap();
        assert_eq!(p0.alpha_at(0.0, 0.0), 0.0);
        assert!(p0.footprint().is_none());
        let pc = Projected2D::new([0.0, 0.0], [1.0, 0.0, 1.0], 3.0, 1.0, 0).unwrap();
        assert_eq!(pc.alpha_at(0.0, 0.0), ALPHA_MAX);
    }

    #[test]
    fn singular_covariance_is_degenerate() {
        assert!(matches!(
            Projected2D::new([0.0, 0.0], [1.0, 1.0, 1.0], 1.0, 1.0, 0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn footprint_bounds_nonzero_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let a: f64 = rng.random_range(0.5..30.0);
            let c: f64 = rng.random_range(0.5..30.0);
            let b = rng.random_range(-0.9..0.9) * (a * c).sqrt();
            let p = Projected2D::new([0.0, 0.0], [a, b, c], 1.0, rng.random_range(0.01..1.0), 0).unwrap();
            let Some([ru, rv]) = p.footprint() else { continue };
            for _ in 0..200 {
                let (u, v): (f64, f64) = (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
                if u.abs() > ru || v.abs() > rv {
                    assert_eq!(p.alpha_at(u, v), 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_invalid() {
        let cam = axis_cam(20, 10, 50.0);
        let out = render(&GaussianScene::empty(3), &cam);
        assert!(out.valid.iter().all(|v| !v));
        assert!(out.feature.iter().all(|v| *v == 0.0));
        assert!(out.acc_alpha.iter().all(|v| *v == 0.0));
        assert_eq!(out, render_oracle(&GaussianScene::empty(3), &cam));
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let cam = axis_cam(33, 33, 100.0);
        let f = vec![0.25, -2.0, 7.0];
        let g = FeatureGaussian::isotropic(Vec3::new(0.0, 0.0, 4.3), 0.2, 1.0, f.clone()).unwrap();
        let scene = GaussianScene::single_layer(vec![g], 3).unwrap();
        for out in [render(&scene, &cam), render_oracle(&scene, &cam)] {
            let i = 16 * 33 + 16;
            assert!(out.valid[i]);
            assert_eq!(out.depth[i], 4.3);
            let feat = out.feature_at(16, 16);
            for k in 0..3 {
                assert_eq!(feat[k], 0.99 * f[k]);
            }
        }
    }

    #[test]
    fn tiled_matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 50, 4);
            let cam = axis_cam(64, 64, 60.0);
            let a = render(&scene, &cam);
            let b = render_oracle(&scene, &cam);
            assert!(a.max_abs_diff(&b) <= 1e-5, "diff {}", a.max_abs_diff(&b));
            assert!(a.valid.iter().any(|v| *v));
        }
    }

    #[test]
    fn transparent_duplicate_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 30, 2);
        let cam = axis_cam(48, 40, 40.0);
        let base = render(&scene, &cam);
        let mut dup = scene.clone();
        let mut g = dup.gaussians[7].clone();
        g.opacity = 0.0;
        dup.gaussians.insert(3, g);
        dup.layer_offsets = vec![dup.gaussians.len()];
        assert_eq!(render(&dup, &cam), base);
    }

    #[test]
    fn feature_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = random_scene(&mut rng, 30, 3);
        let cam = axis_cam(40, 40, 40.0);
        let base = render(&scene, &cam);
        let mut scaled = scene.clone();
        for g in &mut scaled.gaussians {
            g.feature.iter_mut().for_each(|v| *v *= 2.0);
        }
        let out = render(&scaled, &cam);
        for (a, b) in out.feature.iter().zip(&base.feature) {
            assert_eq!(*a, 2.0 * b);
        }
        assert_eq!(out.depth, base.depth);
    }
}
