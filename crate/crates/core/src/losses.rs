//! Forward evaluation of the depth and feature training losses.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics, Z_NEAR};
use crate::error::{Error, Result};
use crate::gaussian::GaussianScene;
use crate::geometry::Pose;
use crate::par;
use crate::plane::{DepthMap, Plane};
use crate::raster::render;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_silog: f64,
    pub lambda_temp: f64,
    pub lambda_mse: f64,
    pub lambda_depth: f64,
    pub lambda_feat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_silog: 0.15,
            lambda_temp: 10.0,
            lambda_mse: 10.0,
            lambda_depth: 1.0,
            lambda_feat: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_silog,
            self.lambda_temp,
            self.lambda_mse,
            self.lambda_depth,
            self.lambda_feat,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Default variance weight of [`silog`].
pub const SILOG_LAMBDA_VAR: f64 = 0.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_MIX: f64 = 0.85;

fn joint_mask(a: &DepthMap, b: &DepthMap, mask: Option<&[bool]>) -> Result<Vec<bool>> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::invalid("depth maps differ in size"));
    }
    let n = a.valid.len();
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::invalid("mask size differs from depth maps"));
    }
    Ok((0..n)
        .map(|i| a.valid[i] && b.valid[i] && mask.is_none_or(|m| m[i]))
        .collect())
}

/// Mean `|D − D̂|` over pixels valid in both maps and in `mask`.
pub fn l1_depth(gt: &DepthMap, pred: &DepthMap, mask: Option<&[bool]>) -> Result<f64> {
    let m = joint_mask(gt, pred, mask)?;
    let terms: Vec<f64> = (0..m.len())
        .filter(|&i| m[i])
        .map(|i| (gt.depth.data[i] - pred.depth.data[i]).abs())
        .collect();
    if terms.is_empty() {
        return Err(Error::EmptyInput("no valid pixels for the L1 depth loss".into()));
    }
    Ok(par::sum(&terms) / terms.len() as f64)
}

/// Scale-invariant log loss `mean(g²) − λ_var·(mean g)²` with
/// `g = ln(D̂ / D)`, evaluated as `var(g) + (1 − λ_var)·(mean g)²`.
pub fn silog(gt: &DepthMap, pred: &DepthMap, mask: Option<&[bool]>, lambda_var: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_var) {
        return Err(Error::invalid("lambda_var must lie in [0, 1]"));
    }
    let m = joint_mask(gt, pred, mask)?;
    let mut g = Vec::new();
    for i in (0..m.len()).filter(|&i| m[i]) {
        let (d, dh) = (gt.depth.data[i], pred.depth.data[i]);
        if !(d > 0.0 && dh > 0.0) {
            return Err(Error::invalid("silog needs positive depths"));
        }
        g.push((dh / d).ln());
    }
    if g.is_empty() {
        return Err(Error::EmptyInput("no valid pixels for the silog loss".into()));
    }
    let n = g.len() as f64;
    let mean = par::sum(&g) / n;
    let sq: Vec<f64> = g.iter().map(|v| (v - mean) * (v - mean)).collect();
    Ok(par::sum(&sq) / n + (1.0 - lambda_var) * mean * mean)
}

/// Warps `source` into the target view using the target depth and the
/// target→source transform. Returns the warped image and per-pixel validity.
pub fn warp_source(source: &Plane, depth: &DepthMap, target_to_source: &Pose, k: &Intrinsics) -> (Plane, Vec<bool>) {
    let (w, h, c) = (depth.width(), depth.height(), source.channels);
    let mut out = Plane::zeros(w, h, c);
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let Some(d) = depth.get(x, y) else { continue };
            let p = target_to_source.apply(&k.unproject(x as f64, y as f64, d));
            if p.z < Z_NEAR {
                continue;
            }
            let (u, v) = k.project(&p);
            let i = y * w + x;
            valid[i] = source.bilinear_into(u, v, &mut out.data[i * c..(i + 1) * c]);
        }
    }
    (out, valid)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r.clamp(0, n - 1) as usize
}

/// Per-pixel `0.85·(1 − SSIM)/2 + 0.15·L1` between `a` and `b` with a
/// reflect-padded 3×3 window. Pixels whose window touches an invalid `b`
/// pixel are `None`.
pub fn photometric_error(a: &Plane, b: &Plane, b_valid: &[bool]) -> Vec<Option<f64>> {
    let (w, h, c) = (a.width, a.height, a.channels);
    par::map_range(w * h, |i| {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        let mut nb = [0usize; 9];
        for (k, slot) in nb.iter_mut().enumerate() {
            let dx = (k % 3) as isize - 1;
            let dy = (k / 3) as isize - 1;
            *slot = reflect(y + dy, h) * w + reflect(x + dx, w);
        }
        if nb.iter().any(|&j| !b_valid[j]) {
            return None;
        }
        let mut ssim = 0.0;
        let mut l1 = 0.0;
        for ch in 0..c {
            let (mut ma, mut mb) = (0.0, 0.0);
            for &j in &nb {
                ma += a.data[j * c + ch];
                mb += b.data[j * c + ch];
            }
            ma /= 9.0;
            mb /= 9.0;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for &j in &nb {
                let da = a.data[j * c + ch] - ma;
                let db = b.data[j * c + ch] - mb;
                va += da * da;
                vb += db * db;
                cov += da * db;
            }
            va /= 9.0;
            vb /= 9.0;
            cov /= 9.0;
            let s = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            ssim += ((1.0 - s) / 2.0).clamp(0.0, 1.0);
            l1 += (a.data[i * c + ch] - b.data[i * c + ch]).abs();
        }
        Some((SSIM_MIX * ssim + (1.0 - SSIM_MIX) * l1) / c as f64)
    })
}

/// Temporal photometric consistency: every source photo is warped into the
/// target through `depth`, the per-pixel error is minimised over sources and
/// averaged over pixels with at least one valid source. Each source carries
/// its target→source camera transform.
pub fn photometric_temporal(
    target: &Plane,
    sources: &[(&Plane, Pose)],
    depth: &DepthMap,
    k: &Intrinsics,
) -> Result<f64> {
    if target.width != depth.width() || target.height != depth.height() {
        return Err(Error::invalid("target photo and depth differ in size"));
    }
    let n = target.pixel_count();
    let mut best: Vec<Option<f64>> = vec![None; n];
    for (src, rel) in sources {
        if src.channels != target.channels {
            return Err(Error::invalid("source and target photos differ in channels"));
        }
        let (warped, valid) = warp_source(src, depth, rel, k);
        for (b, e) in best.iter_mut().zip(photometric_error(target, &warped, &valid)) {
            if let Some(e) = e {
                *b = Some(b.map_or(e, |cur| cur.min(e)));
            }
        }
    }
    let terms: Vec<f64> = best.into_iter().flatten().collect();
    if terms.is_empty() {
        return Err(Error::EmptyInput("no pixel overlaps any warped source".into()));
    }
    Ok(par::sum(&terms) / terms.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatLoss {
    pub cos: f64,
    pub mse: f64,
}

/// Cosine term: mean `1 − cos(F, F̂)` over pixels where both norms are
/// non-zero. MSE term: mean `‖F − F̂‖²` over pixels. Both are 0 when nothing
/// is valid.
pub fn feat_loss(f: &Plane, f_hat: &Plane, mask: Option<&[bool]>) -> Result<FeatLoss> {
    if f.width != f_hat.width || f.height != f_hat.height || f.channels != f_hat.channels {
        return Err(Error::invalid("feature planes differ in shape"));
    }
    let n = f.pixel_count();
    if mask.is_some_and(|m| m.len() != n) {
        return Err(Error::invalid("mask size differs from feature planes"));
    }
    let c = f.channels;
    let per_pixel = par::map_range(n, |i| {
        if mask.is_some_and(|m| !m[i]) {
            return None;
        }
        let (a, b) = (&f.data[i * c..(i + 1) * c], &f_hat.data[i * c..(i + 1) * c]);
        let (mut dot, mut na, mut nb, mut se) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
            na += x * x;
            nb += y * y;
            se += (x - y) * (x - y);
        }
        let cos = (na > 0.0 && nb > 0.0).then(|| 1.0 - dot / (na.sqrt() * nb.sqrt()));
        Some((cos, se))
    });
    let mse: Vec<f64> = per_pixel.iter().flatten().map(|p| p.1).collect();
    let cos: Vec<f64> = per_pixel.iter().flatten().filter_map(|p| p.0).collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { par::sum(v) / v.len() as f64 };
    Ok(FeatLoss {
        cos: mean(&cos),
        mse: mean(&mse),
    })
}

/// Raw loss terms before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub l1: f64,
    pub silog: f64,
    pub temporal: f64,
    pub cos: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub components: LossComponents,
    pub weights: LossWeights,
    pub l_depth: f64,
    pub l_feat: f64,
    pub depth_contribution: f64,
    pub feat_contribution: f64,
    pub total: f64,
}

/// `λ_depth·(L1 + λ_SILog·SILog + λ_temp·temp) + λ_feat·(cos + λ_mse·mse)`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> LossBreakdown {
    let l_depth = c.l1 + w.lambda_silog * c.silog + w.lambda_temp * c.temporal;
    let l_feat = c.cos + w.lambda_mse * c.mse;
    let depth_contribution = w.lambda_depth * l_depth;
    let feat_contribution = w.lambda_feat * l_feat;
    LossBreakdown {
        components: *c,
        weights: *w,
        l_depth,
        l_feat,
        depth_contribution,
        feat_contribution,
        total: depth_contribution + feat_contribution,
    }
}

/// Per-view and averaged losses of a scene against a rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLoss {
    pub per_view: Vec<LossComponents>,
    pub breakdown: LossBreakdown,
}

/// Renders every view and scores it against the view's references. The
/// temporal term uses views with the same intrinsics and size whose
/// timestamp differs by exactly one as sources; it is 0 for views without
/// photo or sources. Depth terms are 0 for views with no overlapping valid
/// pixels.
pub fn scene_losses(scene: &GaussianScene, views: &[CameraView], w: &LossWeights) -> Result<SceneLoss> {
    w.validate()?;
    if views.is_empty() {
        return Err(Error::EmptyInput("rig has no views".into()));
    }
    let mut per_view = Vec::with_capacity(views.len());
    for (vi, v) in views.iter().enumerate() {
        let out = render(scene, v);
        let pred = out.depth_map();
        let mut c = LossComponents::default();
        if let Some(gt) = &v.ref_depth {
            c.l1 = ok_or_zero(l1_depth(gt, &pred, None))?;
            c.silog = ok_or_zero(silog(gt, &pred, None, SILOG_LAMBDA_VAR))?;
        }
        if let Some(f) = &v.ref_feature {
            if f.channels == out.feature_dim {
                let fl = feat_loss(f, &out.feature_plane(), Some(&out.valid))?;
                c.cos = fl.cos;
                c.mse = fl.mse;
            }
        }
        if let Some(photo) = &v.photo {
            let srcs: Vec<(&Plane, Pose)> = views
                .iter()
                .enumerate()
                .filter(|(j, s)| {
                    *j != vi
                        && (s.timestamp - v.timestamp).abs() == 1
                        && s.intrinsics == v.intrinsics
                        && s.width == v.width
                        && s.height == v.height
                })
                .filter_map(|(_, s)| s.photo.as_ref().map(|p| (p, s.pose.inverse().compose(&v.pose))))
                .collect();
            if !srcs.is_empty() {
                c.temporal = ok_or_zero(photometric_temporal(photo, &srcs, &pred, &v.intrinsics))?;
            }
        }
        per_view.push(c);
    }
    let n = per_view.len() as f64;
    let mean = |f: fn(&LossComponents) -> f64| per_view.iter().map(f).sum::<f64>() / n;
    let avg = LossComponents {
        l1: mean(|c| c.l1),
        silog: mean(|c| c.silog),
        temporal: mean(|c| c.temporal),
        cos: mean(|c| c.cos),
        mse: mean(|c| c.mse),
    };
    Ok(SceneLoss {
        breakdown: total_loss(&avg, w),
        per_view,
    })
}

fn ok_or_zero(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::EmptyInput(_)) => Ok(0.0),
        other => other,
    }
}
