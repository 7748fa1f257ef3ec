//! Anisotropy-aware feature sampling and the decode heads.
//!
//! For each Gaussian a small head turns its query into `n` offsets in the
//! unit cube, which are stretched by the scale and rotated into the
//! Gaussian's frame (`μ + R(r)(s ⊙ δ)`). The resulting points are projected
//! into every view, bilinearly sampled from the view's feature plane and
//! fused by a query-conditioned softmax. Two heads decode the fused feature
//! into a new text feature and new geometry.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{asa_forward, build_mask, AttentionWeights};
use crate::camera::{project_point, CameraView};
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Quat, Vec3};
use crate::par;

/// Named tensors (shape, values) as stored in head files.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// Affine layer `y = W x + b`, `W` row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::invalid(format!(
                "dense layer {in_dim}→{out_dim} has {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Dense { in_dim, out_dim, weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Dense {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: (0..out_dim).map(|_| rng.random_range(-0.1..0.1)).collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("mlp needs at least one layer"));
        }
        if layers.windows(2).any(|w| w[0].out_dim != w[1].in_dim) {
            return Err(Error::invalid("mlp layer widths do not chain"));
        }
        Ok(Mlp { layers })
    }

    /// Random stack with the given widths, e.g. `[16, 32, 11]`.
    pub fn seeded(widths: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: widths.windows(2).map(|w| Dense::seeded(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::invalid(format!(
                "mlp expects width {}, got {}",
                self.in_dim(),
                x.len()
            )));
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    fn to_tensors(&self, prefix: &str, out: &mut TensorMap) {
        for (i, l) in self.layers.iter().enumerate() {
            out.insert(format!("{prefix}.{i}.weight"), (vec![l.out_dim, l.in_dim], l.weight.clone()));
            out.insert(format!("{prefix}.{i}.bias"), (vec![l.out_dim], l.bias.clone()));
        }
    }

    fn from_tensors(prefix: &str, t: &TensorMap) -> Result<Option<Self>> {
        let mut layers = Vec::new();
        while let Some((shape, w)) = t.get(&format!("{prefix}.{}.weight", layers.len())) {
            let (_, b) = t
                .get(&format!("{prefix}.{}.bias", layers.len()))
                .ok_or_else(|| Error::Format(format!("{prefix}: missing bias")))?;
            if shape.len() != 2 {
                return Err(Error::Format(format!("{prefix}: weight must be 2-D")));
            }
            layers.push(Dense::new(shape[1], shape[0], w.clone(), b.clone())?);
        }
        if layers.is_empty() {
            return Ok(None);
        }
        Mlp::new(layers).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Sample points per Gaussian.
    pub n_offsets: usize,
    /// Bound on the per-axis mean displacement, meters.
    pub delta_max: f64,
    /// Floor added to decoded scales, meters.
    pub s_min: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            n_offsets: 16,
            delta_max: 2.0,
            s_min: 0.01,
        }
    }
}

/// Offset, aggregation-weight, feature and geometry heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHeads {
    pub config: HeadConfig,
    /// query → 3n offsets (pre-tanh)
    pub offset_head: Mlp,
    /// query → n aggregation logits; uniform fusion when absent
    pub weights_head: Option<Mlp>,
    /// fused feature → F
    pub feat_head: Mlp,
    /// fused feature → Δμ(3), s(3), r(4), σ(1)
    pub geo_head: Mlp,
}

pub const GEO_OUT: usize = 11;

impl DecodeHeads {
    pub fn new(
        config: HeadConfig,
        offset_head: Mlp,
        weights_head: Option<Mlp>,
        feat_head: Mlp,
        geo_head: Mlp,
    ) -> Result<Self> {
        let h = DecodeHeads {
            config,
            offset_head,
            weights_head,
            feat_head,
            geo_head,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.n_offsets == 0 || !(c.delta_max > 0.0) || !(c.s_min > 0.0) {
            return Err(Error::invalid("head config must be positive"));
        }
        if self.offset_head.out_dim() != 3 * c.n_offsets {
            return Err(Error::invalid(format!(
                "offset head emits {} values, expected {}",
                self.offset_head.out_dim(),
                3 * c.n_offsets
            )));
        }
        if let Some(w) = &self.weights_head {
            if w.out_dim() != c.n_offsets || w.in_dim() != self.offset_head.in_dim() {
                return Err(Error::invalid("weights head shape mismatch"));
            }
        }
        if self.feat_head.in_dim() != self.geo_head.in_dim() {
            return Err(Error::invalid("feature and geometry heads read different widths"));
        }
        if self.feat_head.out_dim() != self.feat_head.in_dim() {
            return Err(Error::invalid("feature head must map F to F"));
        }
        if self.geo_head.out_dim() != GEO_OUT {
            return Err(Error::invalid(format!("geometry head must emit {GEO_OUT} values")));
        }
        Ok(())
    }

    pub fn query_dim(&self) -> usize {
        self.offset_head.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.feat_head.out_dim()
    }

    /// Random heads for tests and benchmarks.
    pub fn seeded(query_dim: usize, feature_dim: usize, hidden: usize, config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.n_offsets;
        DecodeHeads {
            config,
            offset_head: Mlp::seeded(&[query_dim, 3 * n], &mut rng),
            weights_head: Some(Mlp::seeded(&[query_dim, n], &mut rng)),
            feat_head: Mlp::seeded(&[feature_dim, hidden, feature_dim], &mut rng),
            geo_head: Mlp::seeded(&[feature_dim, hidden, GEO_OUT], &mut rng),
        }
    }

    /// Heads with no learned content: a fixed offset stencil inside the
    /// unit cube, uniform fusion, the fused feature passed through, and
    /// constant geometry (`Δμ = 0`, isotropic `scale`, identity rotation,
    /// `opacity`).
    pub fn passthrough(feature_dim: usize, config: HeadConfig, scale: f64, opacity: f64) -> Result<Self> {
        if !(scale > config.s_min) || !(0.0 < opacity && opacity < 1.0) {
            return Err(Error::invalid("passthrough scale must exceed s_min and opacity lie in (0, 1)"));
        }
        let n = config.n_offsets;
        let mut offset = Dense::zeros(feature_dim, 3 * n);
        for (j, p) in stencil(n).iter().enumerate() {
            for k in 0..3 {
                offset.bias[3 * j + k] = p[k].atanh();
            }
        }
        let mut feat = Dense::zeros(feature_dim, feature_dim);
        for k in 0..feature_dim {
            feat.weight[k * feature_dim + k] = 1.0;
        }
        let mut geo = Dense::zeros(feature_dim, GEO_OUT);
        let raw_scale = inv_softplus(scale - config.s_min);
        geo.bias[3..6].fill(raw_scale);
        geo.bias[6] = 1.0;
        geo.bias[10] = (opacity / (1.0 - opacity)).ln();
        Ok(DecodeHeads {
            config,
            offset_head: Mlp { layers: vec![offset] },
            weights_head: None,
            feat_head: Mlp { layers: vec![feat] },
            geo_head: Mlp { layers: vec![geo] },
        })
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut t = TensorMap::new();
        let c = &self.config;
        t.insert("config".into(), (vec![3], vec![c.n_offsets as f64, c.delta_max, c.s_min]));
        self.offset_head.to_tensors("offset", &mut t);
        if let Some(w) = &self.weights_head {
            w.to_tensors("weights", &mut t);
        }
        self.feat_head.to_tensors("feat", &mut t);
        self.geo_head.to_tensors("geo", &mut t);
        t
    }

    pub fn from_tensors(t: &TensorMap) -> Result<Self> {
        let (_, c) = t
            .get("config")
            .ok_or_else(|| Error::Format("head file has no config tensor".into()))?;
        if c.len() != 3 {
            return Err(Error::Format("config tensor must hold 3 values".into()));
        }
        let config = HeadConfig {
            n_offsets: c[0] as usize,
            delta_max: c[1],
            s_min: c[2],
        };
        let need = |p: &str| {
            Mlp::from_tensors(p, t)?.ok_or_else(|| Error::Format(format!("head file has no {p} head")))
        };
        DecodeHeads::new(
            config,
            need("offset")?,
            Mlp::from_tensors("weights", t)?,
            need("feat")?,
            need("geo")?,
        )
    }
}

fn inv_softplus(y: f64) -> f64 {
    // log(exp(y) − 1), stable for large y
    y + (-(-y).exp_m1()).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `n` well-spread points inside the cube `(−0.75, 0.75)³`: a Fibonacci
/// sphere of radius 0.75 plus the center for odd counts.
pub fn stencil(n: usize) -> Vec<Vec3> {
    let m = if n % 2 == 1 { n - 1 } else { n };
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts: Vec<Vec3> = (0..m)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
            let r = (1.0 - y * y).sqrt();
            let t = golden * i as f64;
            Vec3::new(r * t.cos(), y, r * t.sin()) * 0.75
        })
        .collect();
    if n % 2 == 1 {
        pts.insert(0, Vec3::zeros());
    }
    pts
}

/// `n` unit-cube offsets `tanh(offset_head(query))`.
pub fn gen_offsets(query: &[f64], heads: &DecodeHeads, n: usize) -> Result<Vec<Vec3>> {
    if n != heads.config.n_offsets {
        return Err(Error::invalid(format!(
            "heads produce {} offsets, {n} requested",
            heads.config.n_offsets
        )));
    }
    let raw = heads.offset_head.forward(query)?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("offset head output is not finite"));
    }
    Ok(raw
        .chunks(3)
        .map(|c| Vec3::new(c[0].tanh(), c[1].tanh(), c[2].tanh()))
        .collect())
}

/// Offsets and the ego-frame points they map to.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub offsets: Vec<Vec3>,
    pub points: Vec<Vec3>,
}

/// `μ + R(r)(s ⊙ δ)` for every offset δ.
pub fn place_samples(g: &FeatureGaussian, offsets: &[Vec3]) -> SampleSet {
    let r = g.rotation_matrix();
    let points = offsets
        .iter()
        .map(|d| g.mean + r * g.scale.component_mul(d))
        .collect();
    SampleSet {
        offsets: offsets.to_vec(),
        points,
    }
}

/// Per-(point, view) bilinear samples; `None` where the point is behind the
/// camera or projects outside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeatures {
    pub n_points: usize,
    pub n_views: usize,
    pub dim: usize,
    /// Indexed `point * n_views + view`.
    pub values: Vec<Option<Vec<f64>>>,
}

impl SampledFeatures {
    pub fn get(&self, point: usize, view: usize) -> Option<&[f64]> {
        self.values[point * self.n_views + view].as_deref()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

pub fn sample_features(samples: &SampleSet, views: &[CameraView]) -> Result<SampledFeatures> {
    let mut dim = None;
    for v in views {
        let f = v
            .ref_feature
            .as_ref()
            .ok_or_else(|| Error::invalid("view has no feature plane"))?;
        if f.width != v.width || f.height != v.height {
            return Err(Error::invalid("feature plane size differs from camera size"));
        }
        if *dim.get_or_insert(f.channels) != f.channels {
            return Err(Error::invalid("views carry feature planes of different widths"));
        }
    }
    let dim = dim.unwrap_or(0);
    let mut values = Vec::with_capacity(samples.points.len() * views.len());
    for p in &samples.points {
        for v in views {
            let plane = v.ref_feature.as_ref().expect("checked");
            values.push(
                project_point(p, v)
                    .visible()
                    .and_then(|(u, vv, _)| plane.bilinear(u, vv)),
            );
        }
    }
    Ok(SampledFeatures {
        n_points: samples.points.len(),
        n_views: views.len(),
        dim,
        values,
    })
}

/// Fuses all valid samples into one feature.
///
/// Each (point j, view) pair gets logit `weights_head(query)[j]`; weights are
/// the softmax over valid pairs. Without a weights head the valid samples are
/// averaged. `Ok(None)` signals that nothing was valid.
pub fn aggregate(
    sampled: &SampledFeatures,
    weights_head: Option<&Mlp>,
    query: &[f64],
) -> Result<Option<Vec<f64>>> {
    let valid: Vec<(usize, &[f64])> = (0..sampled.n_points)
        .flat_map(|j| (0..sampled.n_views).filter_map(move |v| sampled.get(j, v).map(|f| (j, f))))
        .collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let mut out = vec![0.0; sampled.dim];
    match weights_head {
        None => {
            for (_, f) in &valid {
                for (o, x) in out.iter_mut().zip(*f) {
                    *o += x;
                }
            }
            let n = valid.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        Some(head) => {
            let logits = head.forward(query)?;
            if logits.len() != sampled.n_points {
                return Err(Error::invalid(format!(
                    "weights head emits {} logits for {} points",
                    logits.len(),
                    sampled.n_points
                )));
            }
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("aggregation logits are not finite"));
            }
            let max = valid.iter().map(|(j, _)| logits[*j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = valid.iter().map(|(j, _)| (logits[*j] - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for ((_, f), w) in valid.iter().zip(&e) {
                let w = w / total;
                for (o, x) in out.iter_mut().zip(*f) {
                    *o += w * x;
                }
            }
        }
    }
    Ok(Some(out))
}

/// Decodes a fused feature into the next state of `prev`.
pub fn decode_update(fused: &[f64], heads: &DecodeHeads, prev: &FeatureGaussian) -> Result<FeatureGaussian> {
    let feature = heads.feat_head.forward(fused)?;
    let raw = heads.geo_head.forward(fused)?;
    if feature.iter().chain(&raw).any(|v| !v.is_finite()) {
        return Err(Error::numerical("decode head output is not finite"));
    }
    let c = &heads.config;
    let delta = Vec3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * c.delta_max;
    let scale = Vec3::new(
        softplus(raw[3]) + c.s_min,
        softplus(raw[4]) + c.s_min,
        softplus(raw[5]) + c.s_min,
    );
    let q = [raw[6], raw[7], raw[8], raw[9]];
    let rotation = Quat::normalized(q)
        .ok()
        .filter(|_| q.iter().map(|v| v * v).sum::<f64>().sqrt() > 1e-8)
        .unwrap_or(Quat::IDENTITY);
    let g = FeatureGaussian {
        mean: prev.mean + delta,
        scale,
        rotation,
        opacity: logistic(raw[10]),
        feature,
    };
    g.check().map_err(|e| Error::numerical(format!("decoded gaussian is invalid: {e}")))?;
    Ok(g)
}

/// Which Gaussians a refine pass rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RefineScope {
    #[default]
    Newest,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub refined: usize,
    /// Gaussians left unchanged because no sample landed in any view.
    pub kept: usize,
    pub attention: bool,
}

/// One forward pass of a progressive layer: optional asymmetric attention
/// over all queries, then sampling, fusion and decoding for the Gaussians in
/// `scope`. The query of a Gaussian is its current feature.
pub fn refine_layer(
    scene: &GaussianScene,
    views: &[CameraView],
    heads: &DecodeHeads,
    attention: Option<&AttentionWeights>,
    scope: RefineScope,
) -> Result<(GaussianScene, RefineReport)> {
    heads.validate()?;
    if heads.query_dim() != scene.feature_dim || heads.feature_dim() != scene.feature_dim {
        return Err(Error::invalid(format!(
            "heads expect width {}/{}, scene features are {}",
            heads.query_dim(),
            heads.feature_dim(),
            scene.feature_dim
        )));
    }
    let n = scene.len();
    let range = match scope {
        RefineScope::All => 0..n,
        RefineScope::Newest => scene.inherited_count()..n,
    };
    let queries: Vec<f64> = match attention {
        Some(w) => {
            if w.dim != scene.feature_dim {
                return Err(Error::invalid("attention width differs from feature width"));
            }
            let flat: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect();
            let pos: Vec<Vec3> = scene.gaussians.iter().map(|g| g.mean).collect();
            asa_forward(&flat, &pos, w, &build_mask(scene.inherited_count(), n)?)?
        }
        None => scene.gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect(),
    };
    let d = scene.feature_dim;
    let k = heads.config.n_offsets;
    let updated = par::map_range(range.len(), |r| -> Result<Option<FeatureGaussian>> {
        let i = range.start + r;
        let g = &scene.gaussians[i];
        let q = &queries[i * d..(i + 1) * d];
        let samples = place_samples(g, &gen_offsets(q, heads, k)?);
        let sampled = sample_features(&samples, views)?;
        match aggregate(&sampled, heads.weights_head.as_ref(), q)? {
            Some(fused) => decode_update(&fused, heads, g).map(Some),
            None => Ok(None),
        }
    });
    let mut out = scene.clone();
    let mut kept = 0;
    for (r, u) in updated.into_iter().enumerate() {
        match u? {
            Some(g) => out.gaussians[range.start + r] = g,
            None => kept += 1,
        }
    }
    Ok((
        out,
        RefineReport {
            refined: range.len() - kept,
            kept,
            attention: attention.is_some(),
        },
    ))
}
