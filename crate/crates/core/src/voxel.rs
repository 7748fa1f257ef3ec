//! Text-probability assignment, Gaussian-to-voxel accumulation and point
//! queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Mat3, Vec3};
use crate::par;

/// Label of unoccupied voxels.
pub const EMPTY_LABEL: u16 = 0xFFFF;
/// Occ3D voxel edge, meters.
pub const DEFAULT_VOXEL_SIZE: f64 = 0.4;
pub const DEFAULT_TAU_OCC: f64 = 0.1;
pub const DEFAULT_CUTOFF: f64 = 3.0;

/// Occ3D-nuScenes class ids.
pub mod class_id {
    pub const OTHERS: u16 = 0;
    pub const BARRIER: u16 = 1;
    pub const BICYCLE: u16 = 2;
    pub const BUS: u16 = 3;
    pub const CAR: u16 = 4;
    pub const CONSTRUCTION_VEHICLE: u16 = 5;
    pub const MOTORCYCLE: u16 = 6;
    pub const PEDESTRIAN: u16 = 7;
    pub const TRAFFIC_CONE: u16 = 8;
    pub const TRAILER: u16 = 9;
    pub const TRUCK: u16 = 10;
    pub const DRIVEABLE_SURFACE: u16 = 11;
    pub const OTHER_FLAT: u16 = 12;
    pub const SIDEWALK: u16 = 13;
    pub const TERRAIN: u16 = 14;
    pub const MANMADE: u16 = 15;
    pub const VEGETATION: u16 = 16;
}

/// Zero-shot prompt table: class name, class id (`None` for the empty
/// entry) and prompts. "others" and "other flat" have no prompts and are
/// never predicted.
pub const PROMPT_TABLE: &[(&str, Option<u16>, &[&str])] = &[
    ("barrier", Some(class_id::BARRIER), &["barrier"]),
    ("bicycle", Some(class_id::BICYCLE), &["bicycle"]),
    ("bus", Some(class_id::BUS), &["bus"]),
    ("car", Some(class_id::CAR), &["car"]),
    ("construction vehicle", Some(class_id::CONSTRUCTION_VEHICLE), &["construction vehicle"]),
    ("motorcycle", Some(class_id::MOTORCYCLE), &["motorcycle"]),
    ("pedestrian", Some(class_id::PEDESTRIAN), &["person"]),
    ("traffic cone", Some(class_id::TRAFFIC_CONE), &["cone"]),
    ("trailer", Some(class_id::TRAILER), &["trailer"]),
    ("truck", Some(class_id::TRUCK), &["truck"]),
    ("driveable surface", Some(class_id::DRIVEABLE_SURFACE), &["road"]),
    ("sidewalk", Some(class_id::SIDEWALK), &["sidewalk"]),
    ("terrain", Some(class_id::TERRAIN), &["terrain", "grass"]),
    ("manmade", Some(class_id::MANMADE), &["building", "wall", "fence", "pole", "sign"]),
    ("vegetation", Some(class_id::VEGETATION), &["vegetation"]),
    ("empty", None, &["sky"]),
];

/// How a class with several prompts scores a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptReduce {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextClass {
    pub name: String,
    /// `None` marks the empty/sky entry.
    pub class_id: Option<u16>,
    pub prompts: Vec<String>,
    /// One unit-norm embedding per prompt.
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBank {
    pub classes: Vec<TextClass>,
    pub reduce: PromptReduce,
    pub dim: usize,
}

const UNIT_TOL: f64 = 1e-6;

impl TextBank {
    pub fn new(classes: Vec<TextClass>, reduce: PromptReduce) -> Result<Self> {
        let dim = classes
            .first()
            .and_then(|c| c.embeddings.first())
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("text bank is empty"))?;
        let bank = TextBank { classes, reduce, dim };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.dim == 0 {
            return Err(Error::invalid("text bank is empty"));
        }
        for c in &self.classes {
            if c.embeddings.is_empty() || c.embeddings.len() != c.prompts.len() {
                return Err(Error::invalid(format!(
                    "class {:?} needs one embedding per prompt",
                    c.name
                )));
            }
            for e in &c.embeddings {
                if e.len() != self.dim {
                    return Err(Error::invalid(format!("class {:?} embedding has wrong width", c.name)));
                }
                let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::invalid(format!("class {:?} embedding is not unit norm", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Per-class similarity `f · f_text`, reduced over prompts.
    pub fn similarities(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::invalid(format!(
                "feature width {} does not match bank width {}",
                f.len(),
                self.dim
            )));
        }
        Ok(self
            .classes
            .iter()
            .map(|c| {
                let dots = c.embeddings.iter().map(|e| dot(f, e));
                match self.reduce {
                    PromptReduce::Max => dots.fold(f64::NEG_INFINITY, f64::max),
                    PromptReduce::Mean => dots.sum::<f64>() / c.embeddings.len() as f64,
                }
            })
            .collect())
    }

    /// Label emitted when class `k` wins.
    pub fn label_of(&self, k: usize) -> u16 {
        self.classes[k].class_id.unwrap_or(EMPTY_LABEL)
    }

    /// Class ids that can be predicted, in bank order.
    pub fn class_ids(&self) -> Vec<u16> {
        self.classes.iter().filter_map(|c| c.class_id).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of the bank similarities.
pub fn text_probs(f: &[f64], bank: &TextBank) -> Result<Vec<f64>> {
    if bank.is_empty() {
        return Err(Error::invalid("text bank is empty"));
    }
    let s = bank.similarities(f)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite similarity"));
    }
    Ok(softmax(&s))
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.iter().map(|v| v / t).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Minimum corner, meters.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        if self.dims.contains(&0) {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Flat index; x varies slowest, z fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        [i / (self.dims[1] * self.dims[2]), y, z]
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let h = self.voxel_size;
        Vec3::new(
            self.origin[0] + (x as f64 + 0.5) * h,
            self.origin[1] + (y as f64 + 0.5) * h,
            self.origin[2] + (z as f64 + 0.5) * h,
        )
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn locate(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for k in 0..3 {
            let t = ((p[k] - self.origin[k]) / self.voxel_size).floor();
            if !(t >= 0.0 && t < self.dims[k] as f64) {
                return None;
            }
            out[k] = t as usize;
        }
        Some(out)
    }

    /// Inclusive index range along `axis` of centers inside `[lo, hi]`.
    fn center_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let h = self.voxel_size;
        let a = ((lo - self.origin[axis]) / h - 0.5).ceil().max(0.0);
        let b = ((hi - self.origin[axis]) / h - 0.5).floor().min(self.dims[axis] as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    /// `V_o` per voxel.
    pub occ_mass: Vec<f64>,
    /// Class id per voxel, [`EMPTY_LABEL`] when unoccupied.
    pub labels: Vec<u16>,
    /// `V_p`, `bank.len()` channels per voxel, when computed.
    pub class_mass: Option<Vec<f64>>,
}

impl VoxelGrid {
    pub fn empty(spec: GridSpec) -> Self {
        let n = spec.voxel_count();
        VoxelGrid {
            spec,
            occ_mass: vec![0.0; n],
            labels: vec![EMPTY_LABEL; n],
            class_mass: None,
        }
    }

    pub fn occupied(&self, i: usize) -> bool {
        self.labels[i] != EMPTY_LABEL
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != EMPTY_LABEL).count()
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.spec == other.spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoxelizeConfig {
    pub tau_occ: f64,
    /// Mahalanobis distance beyond which a Gaussian is ignored; `None`
    /// accumulates every Gaussian into every voxel.
    pub cutoff: Option<f64>,
}

impl Default for VoxelizeConfig {
    fn default() -> Self {
        VoxelizeConfig {
            tau_occ: DEFAULT_TAU_OCC,
            cutoff: Some(DEFAULT_CUTOFF),
        }
    }
}

impl VoxelizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_occ >= 0.0 && self.tau_occ.is_finite()) {
            return Err(Error::invalid("tau_occ must be finite and non-negative"));
        }
        if self.cutoff.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("cutoff must be positive"));
        }
        Ok(())
    }
}

/// Precomputed per-Gaussian kernel data.
struct Kernel {
    mean: Vec3,
    precision: Mat3,
    /// Half extent of the cutoff ellipsoid's bounding box.
    half: Vec3,
}

fn kernels(gaussians: &[FeatureGaussian], cutoff: Option<f64>) -> Vec<Kernel> {
    par::map_slice(gaussians, |g| {
        let cov = g.covariance();
        let half = match cutoff {
            Some(c) => Vec3::new(cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()) * c,
            None => Vec3::repeat(f64::INFINITY),
        };
        Kernel {
            mean: g.mean,
            precision: g.precision(),
            half,
        }
    })
}

impl Kernel {
    /// `exp(−½ m²)`, or 0 beyond the cutoff.
    #[inline]
    fn weight(&self, x: &Vec3, cutoff2: f64) -> f64 {
        let d = x - self.mean;
        let m2 = d.dot(&(self.precision * d));
        if m2 > cutoff2 {
            0.0
        } else {
            (-0.5 * m2).exp()
        }
    }
}

/// Accumulates `V_o = Σ w_i o_i` and `V_p = Σ w_i p_i` at every voxel
/// center and labels voxels with `V_o ≥ τ_occ` by the arg-max class of
/// `V_p`. An "empty" winner leaves the voxel unoccupied.
pub fn voxelize(scene: &GaussianScene, bank: &TextBank, spec: &GridSpec, cfg: &VoxelizeConfig) -> Result<VoxelGrid> {
    spec.validate()?;
    cfg.validate()?;
    bank.validate()?;
    let c = bank.len();
    let probs: Vec<Vec<f64>> = par::map_slice(&scene.gaussians, |g| text_probs(&g.feature, bank))
        .into_iter()
        .collect::<Result<_>>()?;
    let ks = kernels(&scene.gaussians, cfg.cutoff);
    let cutoff2 = cfg.cutoff.map_or(f64::INFINITY, |v| v * v);
    let [dx, dy, dz] = spec.dims;
    let slab = dy * dz;
    let mut occ = vec![0.0; spec.voxel_count()];
    let mut cls = vec![0.0; spec.voxel_count() * c];
    let mut acc: Vec<(&mut [f64], &mut [f64])> = occ.chunks_mut(slab).zip(cls.chunks_mut(slab * c)).collect();
    let work = |x: usize, (occ, cls): &mut (&mut [f64], &mut [f64])| {
        let cx = spec.center(x, 0, 0).x;
        for (i, k) in ks.iter().enumerate() {
            if (cx - k.mean.x).abs() > k.half.x {
                continue;
            }
            let Some((y0, y1)) = spec.center_range(1, k.mean.y - k.half.y, k.mean.y + k.half.y) else {
                continue;
            };
            let Some((z0, z1)) = spec.center_range(2, k.mean.z - k.half.z, k.mean.z + k.half.z) else {
                continue;
            };
            let o = scene.gaussians[i].opacity;
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let w = k.weight(&spec.center(x, y, z), cutoff2);
                    if w == 0.0 {
                        continue;
                    }
                    let j = y * dz + z;
                    occ[j] += w * o;
                    for (a, p) in cls[j * c..(j + 1) * c].iter_mut().zip(&probs[i]) {
                        *a += w * p;
                    }
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        acc.par_iter_mut().enumerate().for_each(|(x, a)| work(x, a));
    }
    #[cfg(not(feature = "parallel"))]
    acc.iter_mut().enumerate().for_each(|(x, a)| work(x, a));
    debug_assert_eq!(acc.len(), dx);
    drop(acc);
    let labels = (0..occ.len())
        .map(|i| {
            if occ[i] >= cfg.tau_occ && occ[i] > 0.0 {
                bank.label_of(argmax(&cls[i * c..(i + 1) * c]))
            } else {
                EMPTY_LABEL
            }
        })
        .collect();
    Ok(VoxelGrid {
        spec: *spec,
        occ_mass: occ,
        labels,
        class_mass: Some(cls),
    })
}

/// Occupancy mass and feature at a query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointQuery {
    pub occ: f64,
    pub feature: Vec<f64>,
}

/// `P_o = Σ w_i o_i` and `P_f = Σ w_i f_i` at every point, with the same
/// kernel and cutoff as [`voxelize`].
pub fn query_points(scene: &GaussianScene, points: &[Vec3], cutoff: Option<f64>) -> Result<Vec<PointQuery>> {
    if scene.is_empty() {
        return Err(Error::EmptyInput("cannot query an empty scene".into()));
    }
    if cutoff.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::invalid("cutoff must be positive"));
    }
    let ks = kernels(&scene.gaussians, cutoff);
    let cutoff2 = cutoff.map_or(f64::INFINITY, |v| v * v);
    let f = scene.feature_dim;
    Ok(par::map_slice(points, |p| {
        let mut q = PointQuery {
            occ: 0.0,
            feature: vec![0.0; f],
        };
        for (k, g) in ks.iter().zip(&scene.gaussians) {
            let d = p - k.mean;
            if d.x.abs() > k.half.x || d.y.abs() > k.half.y || d.z.abs() > k.half.z {
                continue;
            }
            let w = k.weight(p, cutoff2);
            if w == 0.0 {
                continue;
            }
            q.occ += w * g.opacity;
            for (a, v) in q.feature.iter_mut().zip(&g.feature) {
                *a += w * v;
            }
        }
        q
    }))
}

/// Cosine similarity of every point feature with every query embedding,
/// laid out `[query][point]`. Zero-norm features score 0.
pub fn retrieval_scores(features: &[Vec<f64>], queries: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = features.iter().map(|f| dot(f, f).sqrt()).collect();
    queries
        .iter()
        .map(|q| {
            let qn = dot(q, q).sqrt();
            features
                .iter()
                .zip(&norms)
                .map(|(f, n)| if *n > 0.0 && qn > 0.0 { dot(f, q) / (n * qn) } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    fn bank3() -> TextBank {
        TextBank::new(
            (0..3)
                .map(|k| TextClass {
                    name: format!("c{k}"),
                    class_id: (k < 2).then_some(k as u16 + 1),
                    prompts: vec![format!("p{k}")],
                    embeddings: vec![unit(3, k)],
                })
                .collect(),
            PromptReduce::Max,
        )
        .unwrap()
    }

    fn spec(n: usize) -> GridSpec {
        GridSpec {
            origin: [0.0; 3],
            voxel_size: 1.0,
            dims: [n; 3],
        }
    }

    #[test]
    fn softmax_fixture() {
        let p = text_probs(&[1.0, 0.0, -1.0], &bank3()).unwrap();
        for (a, b) in p.iter().zip([0.6652, 0.2447, 0.0900]) {
            assert!((a - b).abs() < 5e-5);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_split_evenly() {
        let mut b = bank3();
        b.classes[1].embeddings = b.classes[0].embeddings.clone();
        b.classes.pop();
        assert_eq!(text_probs(&[0.3, 0.1, 0.0], &b).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn bank_rejects_non_unit_and_empty() {
        let mut b = bank3();
        b.classes[0].embeddings[0][0] = 2.0;
        assert!(b.validate().is_err());
        assert!(TextBank::new(vec![], PromptReduce::Max).is_err());
    }

    #[test]
    fn prompt_reduce_modes() {
        let mut b = bank3();
        b.classes[0].prompts.push("q".into());
        b.classes[0].embeddings.push(unit(3, 1));
        assert_eq!(b.similarities(&[1.0, 0.5, 0.0]).unwrap()[0], 1.0);
        b.reduce = PromptReduce::Mean;
        assert_eq!(b.similarities(&[1.0, 0.5, 0.0]).unwrap()[0], 0.75);
    }

    #[test]
    fn single_gaussian_on_center() {
        let g = FeatureGaussian::isotropic(Vec3::new(2.5, 1.5, 0.5), 0.3, 0.7, unit(3, 1)).unwrap();
        let scene = GaussianScene::single_layer(vec![g], 3).unwrap();
        let grid = voxelize(&scene, &bank3(), &spec(4), &VoxelizeConfig::default()).unwrap();
        let i = grid.spec.index(2, 1, 0);
        assert_eq!(grid.occ_mass[i], 0.7);
        assert_eq!(grid.labels[i], 2);
        assert_eq!(grid.occupied_count(), 1);
    }

    #[test]
    fn empty_scene_is_unoccupied() {
        let scene = GaussianScene::empty(3);
        let grid = voxelize(&scene, &bank3(), &spec(3), &VoxelizeConfig::default()).unwrap();
        assert_eq!(grid.occupied_count(), 0);
    }

    #[test]
    fn empty_class_winner_stays_unoccupied() {
        let g = FeatureGaussian::isotropic(Vec3::new(0.5, 0.5, 0.5), 0.3, 0.9, unit(3, 2)).unwrap();
        let scene = GaussianScene::single_layer(vec![g], 3).unwrap();
        let grid = voxelize(&scene, &bank3(), &spec(2), &VoxelizeConfig::default()).unwrap();
        assert!(grid.occ_mass[0] > 0.1);
        assert_eq!(grid.labels[0], EMPTY_LABEL);
    }

    #[test]
    fn query_at_center_returns_feature() {
        let f = vec![0.25, -1.5, 3.0];
        let g = FeatureGaussian::isotropic(Vec3::new(1.0, 2.0, 3.0), 0.2, 0.6, f.clone()).unwrap();
        let scene = GaussianScene::single_layer(vec![g], 3).unwrap();
        let q = query_points(&scene, &[Vec3::new(1.0, 2.0, 3.0), Vec3::new(21.0, 2.0, 3.0)], Some(3.0)).unwrap();
        assert_eq!(q[0].occ, 0.6);
        assert_eq!(q[0].feature, f);
        assert_eq!(q[1].occ, 0.0);
        assert_eq!(q[1].feature, vec![0.0; 3]);
    }

    #[test]
    fn grid_index_round_trip() {
        let s = GridSpec {
            origin: [-1.0, 0.0, 2.0],
            voxel_size: 0.4,
            dims: [3, 4, 5],
        };
        for i in 0..s.voxel_count() {
            let [x, y, z] = s.coords(i);
            assert_eq!(s.index(x, y, z), i);
            assert_eq!(s.locate(&s.center(x, y, z)), Some([x, y, z]));
        }
        assert_eq!(s.locate(&Vec3::new(-1.1, 0.0, 2.0)), None);
    }

    #[test]
    fn retrieval_scores_are_cosines() {
        let s = retrieval_scores(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]], &[vec![1.0, 0.0]]);
        assert_eq!(s[0][0], 1.0);
        assert_eq!(s[0][1], 0.0);
        assert!((s[0][2] - 0.5f64.sqrt()).abs() < 1e-15);
    }
}
