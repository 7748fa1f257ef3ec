//! Deterministic synthetic scenes with analytic ground truth.
//!
//! Scenes are built from axis-aligned (optionally yawed) boxes, spheres and
//! rectangles, each carrying an Occ3D class. Camera references come from
//! exact ray casting, features are fixed orthonormal class vectors, and the
//! ground-truth grid marks every voxel whose center lies inside a primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics};
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Mat3, Pose, Vec3};
use crate::par;
use crate::plane::{DepthMap, Plane};
use crate::voxel::{class_id, GridSpec, PromptReduce, TextBank, TextClass, VoxelGrid, EMPTY_LABEL, PROMPT_TABLE};

/// Seed of the class-vector basis; shared by every scene so banks agree.
pub const CLASS_BASIS_SEED: u64 = 0x0CC3D;
const HIT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    /// Box with half extents, rotated by `yaw` radians about +z.
    Box {
        center: [f64; 3],
        half: [f64; 3],
        #[serde(default)]
        yaw: f64,
    },
    Sphere { center: [f64; 3], radius: f64 },
    /// Rectangle normal to `axis` with half extents along the other two
    /// axes in increasing order.
    Quad {
        center: [f64; 3],
        axis: usize,
        half: [f64; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub class_id: u16,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let good = match self.shape {
            Shape::Box { center, half, yaw } => ok(&center) && yaw.is_finite() && half.iter().all(|h| *h > 0.0),
            Shape::Sphere { center, radius } => ok(&center) && radius > 0.0,
            Shape::Quad { center, axis, half } => ok(&center) && axis < 3 && half.iter().all(|h| *h > 0.0),
        };
        if !good || self.class_id == EMPTY_LABEL {
            return Err(Error::invalid(format!("degenerate primitive {self:?}")));
        }
        Ok(())
    }

    /// Closed-set containment; quads count as one voxel thick.
    fn contains(&self, p: &Vec3, quad_half_thickness: f64) -> bool {
        match self.shape {
            Shape::Box { center, half, yaw } => {
                let l = to_local(p, &center, yaw);
                (0..3).all(|k| l[k].abs() <= half[k] + HIT_EPS)
            }
            Shape::Sphere { center, radius } => (p - Vec3::from(center)).norm() <= radius + HIT_EPS,
            Shape::Quad { center, axis, half } => {
                let d = p - Vec3::from(center);
                let (a, b) = other_axes(axis);
                d[axis].abs() <= quad_half_thickness
                    && d[a].abs() <= half[0] + HIT_EPS
                    && d[b].abs() <= half[1] + HIT_EPS
            }
        }
    }

    /// Smallest ray parameter `t > 0` at which `o + t d` hits the surface.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        match self.shape {
            Shape::Box { center, half, yaw } => {
                let lo = to_local(o, &center, yaw);
                let ld = rot_z(-yaw) * d;
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for k in 0..3 {
                    if ld[k] == 0.0 {
                        if lo[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - lo[k]) / ld[k];
                    let b = (half[k] - lo[k]) / ld[k];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                if t0 > HIT_EPS {
                    Some(t0)
                } else if t1 > HIT_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = o - Vec3::from(center);
                let a = d.dot(d);
                let b = oc.dot(d);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [(-b - s) / a, (-b + s) / a].into_iter().find(|t| *t > HIT_EPS)
            }
            Shape::Quad { center, axis, half } => {
                if d[axis] == 0.0 {
                    return None;
                }
                let t = (center[axis] - o[axis]) / d[axis];
                if t <= HIT_EPS {
                    return None;
                }
                let p = o + d * t;
                let (a, b) = other_axes(axis);
                ((p[a] - center[a]).abs() <= half[0] && (p[b] - center[b]).abs() <= half[1]).then_some(t)
            }
        }
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn rot_z(yaw: f64) -> Mat3 {
    let (s, c) = yaw.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn to_local(p: &Vec3, center: &[f64; 3], yaw: f64) -> Vec3 {
    rot_z(-yaw) * (p - Vec3::from(*center))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub cameras: usize,
    /// Rig center in the ground plane.
    pub center: [f64; 2],
    pub mount_height: f64,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Downward tilt of every camera.
    pub pitch_deg: f64,
    /// Consecutive frames; frame `k` is shifted `k · frame_step` along +x
    /// and stamped `k`.
    pub frames: usize,
    pub frame_step: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            cameras: 6,
            center: [0.0, 0.0],
            mount_height: 1.6,
            width: 320,
            height: 180,
            hfov_deg: 90.0,
            pitch_deg: 15.0,
            frames: 1,
            frame_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    pub origin: [f64; 3],
    pub beams: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            origin: [0.0, 0.0, 1.8],
            beams: 32,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
            azimuth_steps: 180,
            max_range: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of additive reference-depth noise, meters.
    pub depth: f64,
    /// Standard deviation of camera translation noise, meters.
    pub pose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    pub feature_dim: usize,
    pub grid: GridSpec,
    /// Empty means: generate the default room from `seed`.
    pub primitives: Vec<Primitive>,
    /// Random objects placed in the generated room.
    pub objects: usize,
    pub rig: RigSpec,
    pub lidar: LidarSpec,
    pub noise: NoiseSpec,
    /// Lattice spacing of the ground-truth Gaussian scene, meters.
    pub gt_spacing: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            feature_dim: crate::gaussian::DESK_FEATURE_DIM,
            grid: GridSpec {
                origin: [-8.4, -8.4, -0.2],
                voxel_size: 0.4,
                dims: [42, 42, 8],
            },
            primitives: Vec::new(),
            objects: 6,
            rig: RigSpec::default(),
            lidar: LidarSpec::default(),
            noise: NoiseSpec::default(),
            gt_spacing: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        SynthSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        let r = &self.rig;
        if r.cameras == 0 || r.width == 0 || r.height == 0 || r.frames == 0 {
            return Err(Error::invalid("rig needs cameras, frames and a positive image size"));
        }
        if !(r.hfov_deg > 0.0 && r.hfov_deg < 180.0) {
            return Err(Error::invalid("hfov must lie in (0, 180) degrees"));
        }
        if !(self.gt_spacing > 0.0) || self.noise.depth < 0.0 || self.noise.pose < 0.0 {
            return Err(Error::invalid("spacing must be positive and noise non-negative"));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Primitives to render: the explicit list, or the seeded room.
    pub fn resolved_primitives(&self) -> Vec<Primitive> {
        if self.primitives.is_empty() {
            room(&self.grid, self.objects, self.seed)
        } else {
            self.primitives.clone()
        }
    }
}

/// A closed room filling `grid`: ground slab (road with sidewalk strips and a
/// terrain patch), perimeter walls and `objects` random class objects. Every
/// visible planar face lies on a plane of voxel centers.
pub fn room(grid: &GridSpec, objects: usize, seed: u64) -> Vec<Primitive> {
    let h = grid.voxel_size;
    let lo = [grid.origin[0] + 0.5 * h, grid.origin[1] + 0.5 * h];
    let hi = [
        grid.origin[0] + (grid.dims[0] as f64 - 0.5) * h,
        grid.origin[1] + (grid.dims[1] as f64 - 0.5) * h,
    ];
    let z0 = grid.origin[2] + 0.5 * h;
    let wall_top = z0 + ((grid.dims[2] as f64) - 2.0) * h;
    let mut p = Vec::new();
    let boxed = |x: [f64; 2], y: [f64; 2], z: [f64; 2], class_id: u16| Primitive {
        shape: Shape::Box {
            center: [(x[0] + x[1]) / 2.0, (y[0] + y[1]) / 2.0, (z[0] + z[1]) / 2.0],
            half: [(x[1] - x[0]) / 2.0, (y[1] - y[0]) / 2.0, (z[1] - z[0]) / 2.0],
            yaw: 0.0,
        },
        class_id,
    };
    let ground = [z0 - h, z0];
    // sidewalk strips along ±y, a terrain patch in one corner, road elsewhere;
    // lateral seams fall on voxel boundaries
    let strip = 4.0 * h;
    let inner_y = [lo[1] + strip + 0.5 * h, hi[1] - strip - 0.5 * h];
    let terrain_x = lo[0] + 10.0 * h + 0.5 * h;
    p.push(boxed([lo[0], hi[0]], [hi[1] - strip - 0.5 * h, hi[1]], ground, class_id::SIDEWALK));
    p.push(boxed([lo[0], hi[0]], [lo[1], lo[1] + strip + 0.5 * h], ground, class_id::SIDEWALK));
    p.push(boxed([lo[0], terrain_x], [inner_y[0], inner_y[0] + 10.0 * h], ground, class_id::TERRAIN));
    p.push(boxed([terrain_x, hi[0]], [inner_y[0], inner_y[0] + 10.0 * h], ground, class_id::DRIVEABLE_SURFACE));
    p.push(boxed([lo[0], hi[0]], [inner_y[0] + 10.0 * h, inner_y[1]], ground, class_id::DRIVEABLE_SURFACE));
    let wall_z = [z0 + 0.5 * h, wall_top];
    let t = h;
    p.push(boxed([lo[0], lo[0] + t], [lo[1], hi[1]], wall_z, class_id::MANMADE));
    p.push(boxed([hi[0] - t, hi[0]], [lo[1], hi[1]], wall_z, class_id::MANMADE));
    p.push(boxed([lo[0] + t + 0.5 * h, hi[0] - t - 0.5 * h], [lo[1], lo[1] + t], wall_z, class_id::MANMADE));
    p.push(boxed([lo[0] + t + 0.5 * h, hi[0] - t - 0.5 * h], [hi[1] - t, hi[1]], wall_z, class_id::MANMADE));

    // (class, half extents in voxels along x, y, height in voxels above ground)
    const KINDS: &[(u16, [usize; 2], usize)] = &[
        (class_id::CAR, [5, 2], 4),
        (class_id::TRUCK, [8, 3], 5),
        (class_id::PEDESTRIAN, [1, 1], 4),
        (class_id::BARRIER, [1, 3], 2),
        (class_id::TRAFFIC_CONE, [1, 1], 2),
        (class_id::VEGETATION, [3, 3], 6),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let rig_clear = 2.5;
    let mut attempts = 0;
    while placed.len() < objects && attempts < 1000 {
        attempts += 1;
        let (class, mut half, height) = KINDS[placed.len() % KINDS.len()];
        if rng.random_bool(0.5) {
            half.swap(0, 1);
        }
        let (hx, hy) = (half[0] as f64 * h, half[1] as f64 * h);
        let nx = grid.dims[0];
        let ny = grid.dims[1];
        let cx = lo[0] + rng.random_range(4..nx - 4) as f64 * h;
        let cy = lo[1] + rng.random_range(4..ny - 4) as f64 * h;
        let margin = 2.0 * h;
        let fits = cx - hx > lo[0] + t + margin
            && cx + hx < hi[0] - t - margin
            && cy - hy > lo[1] + t + margin
            && cy + hy < hi[1] - t - margin
            && (cx.abs() - hx).max(cy.abs() - hy) > rig_clear
            && placed
                .iter()
                .all(|q| (cx - q[0]).abs() > hx + q[2] + margin || (cy - q[1]).abs() > hy + q[3] + margin);
        if !fits {
            continue;
        }
        placed.push([cx, cy, hx, hy]);
        let top = z0 + height as f64 * h;
        if class == class_id::VEGETATION {
            let r = hx.min(hy).min((top - z0) / 2.0);
            p.push(Primitive {
                shape: Shape::Sphere {
                    center: [cx, cy, z0 + r + 0.5 * h],
                    radius: r,
                },
                class_id: class,
            });
        } else {
            p.push(boxed([cx - hx, cx + hx], [cy - hy, cy + hy], [z0 + 0.5 * h, top], class));
        }
    }
    p
}

/// Orthonormal vectors from seeded Gram–Schmidt.
pub fn orthonormal_basis(count: usize, dim: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::invalid(format!("{count} orthonormal vectors do not fit in {dim} dimensions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        for b in &out {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    Ok(out)
}

/// Bank over the classes present in `primitives` plus the empty/sky entry,
/// each with its first table prompt and a fixed orthonormal embedding.
pub fn class_bank(primitives: &[Primitive], feature_dim: usize) -> Result<TextBank> {
    let basis = table_basis(feature_dim)?;
    let mut ids: Vec<u16> = primitives.iter().map(|p| p.class_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let entry = |id: Option<u16>| -> Result<TextClass> {
        let slot = PROMPT_TABLE
            .iter()
            .position(|e| e.1 == id)
            .ok_or_else(|| Error::invalid(format!("class {id:?} has no prompt")))?;
        let (name, _, prompts) = PROMPT_TABLE[slot];
        Ok(TextClass {
            name: name.to_string(),
            class_id: id,
            prompts: vec![prompts[0].to_string()],
            embeddings: vec![basis[slot].clone()],
        })
    };
    let mut classes = ids.iter().map(|i| entry(Some(*i))).collect::<Result<Vec<_>>>()?;
    classes.push(entry(None)?);
    TextBank::new(classes, PromptReduce::Max)
}

/// Fixed-seed orthonormal class vectors, one per prompt-table entry
/// (including empty), in table order.
pub fn table_basis(dim: usize) -> Result<Vec<Vec<f64>>> {
    orthonormal_basis(PROMPT_TABLE.len(), dim, CLASS_BASIS_SEED)
}

/// Closest hit over all primitives: `(t, primitive index)`.
pub fn cast_ray(prims: &[Primitive], o: &Vec3, d: &Vec3) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some(t) = p.intersect(o, d) {
            if best.is_none_or(|b| t < b.0) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Rig of `spec.cameras` cameras per frame, evenly spaced in yaw and
/// sharing one optical center.
pub fn make_rig(spec: &RigSpec) -> Result<Vec<CameraView>> {
    let f = (spec.width as f64 / 2.0) / (spec.hfov_deg.to_radians() / 2.0).tan();
    let k = Intrinsics::new(f, f, (spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0)?;
    let pitch = spec.pitch_deg.to_radians();
    let mut views = Vec::with_capacity(spec.cameras * spec.frames);
    for frame in 0..spec.frames {
        let eye = Vec3::new(
            spec.center[0] + frame as f64 * spec.frame_step,
            spec.center[1],
            spec.mount_height,
        );
        for c in 0..spec.cameras {
            let yaw = std::f64::consts::TAU * c as f64 / spec.cameras as f64;
            let dir = Vec3::new(yaw.cos() * pitch.cos(), yaw.sin() * pitch.cos(), -pitch.sin());
            let pose = Pose::look_at(eye, eye + dir, Vec3::z())?;
            views.push(CameraView::new(k, pose, spec.width, spec.height)?.with_timestamp(frame as i64));
        }
    }
    Ok(views)
}

fn class_color(id: u16) -> [f64; 3] {
    let h = (id as f64 * 0.618_033_988_75).fract();
    let c = |s: f64| 0.25 + 0.6 * (0.5 + 0.5 * (std::f64::consts::TAU * (h + s)).cos());
    [c(0.0), c(1.0 / 3.0), c(2.0 / 3.0)]
}

const SKY_COLOR: [f64; 3] = [0.55, 0.7, 0.95];

fn texture(p: &Vec3) -> f64 {
    0.75 + 0.25 * (3.1 * p.x).sin() * (2.3 * p.y).sin() * (1.7 * p.z + 0.5).cos()
}

/// Casts every pixel of `view` and fills analytic depth, class features and
/// a textured photo. Sky pixels get invalid depth and the `sky` feature.
pub fn render_references(
    view: &CameraView,
    prims: &[Primitive],
    features: &[Vec<f64>],
    sky: &[f64],
) -> (DepthMap, Plane, Plane, Vec<Option<usize>>) {
    let (w, h) = (view.width, view.height);
    let f = sky.len();
    let hits = par::map_range(w * h, |i| {
        let d_cam = view.intrinsics.unproject((i % w) as f64, (i / w) as f64, 1.0);
        let d = view.pose.rotation * d_cam;
        cast_ray(prims, &view.pose.translation, &d)
    });
    let mut depth = Plane::zeros(w, h, 1);
    let mut valid = vec![false; w * h];
    let mut feat = Plane::zeros(w, h, f);
    let mut photo = Plane::zeros(w, h, 3);
    let mut hit_prim = vec![None; w * h];
    for (i, hit) in hits.into_iter().enumerate() {
        match hit {
            Some((t, k)) => {
                depth.data[i] = t;
                valid[i] = true;
                hit_prim[i] = Some(k);
                feat.data[i * f..(i + 1) * f].copy_from_slice(&features[k]);
                let d = view.pose.rotation * view.intrinsics.unproject((i % w) as f64, (i / w) as f64, 1.0);
                let p = view.pose.translation + d * t;
                let col = class_color(prims[k].class_id);
                let tex = texture(&p);
                for c in 0..3 {
                    photo.data[i * 3 + c] = col[c] * tex;
                }
            }
            None => {
                feat.data[i * f..(i + 1) * f].copy_from_slice(sky);
                photo.data[i * 3..i * 3 + 3].copy_from_slice(&SKY_COLOR);
            }
        }
    }
    (DepthMap { depth, valid }, feat, photo, hit_prim)
}

/// Labels every voxel whose center lies inside a primitive; later
/// primitives win overlaps.
pub fn gt_grid(prims: &[Primitive], spec: &GridSpec) -> VoxelGrid {
    let mut g = VoxelGrid::empty(*spec);
    let ht = spec.voxel_size / 2.0;
    g.labels = par::map_range(spec.voxel_count(), |i| {
        let [x, y, z] = spec.coords(i);
        let c = spec.center(x, y, z);
        prims
            .iter()
            .rev()
            .find(|p| p.contains(&c, ht))
            .map_or(EMPTY_LABEL, |p| p.class_id)
    });
    g.occ_mass = g.labels.iter().map(|l| if *l == EMPTY_LABEL { 0.0 } else { 1.0 }).collect();
    g
}

/// Voxels observed by at least one camera ray: every voxel a pixel ray
/// crosses up to and including the first occupied one.
pub fn visibility_mask(grid: &VoxelGrid, views: &[CameraView]) -> Vec<bool> {
    let spec = grid.spec;
    let mut seen = vec![false; spec.voxel_count()];
    for v in views {
        let marks = par::map_range(v.height, |y| {
            let mut out = Vec::new();
            for x in 0..v.width {
                let d = v.pose.rotation * v.intrinsics.unproject(x as f64, y as f64, 1.0);
                march(&spec, &v.pose.translation, &d, |i| {
                    out.push(i);
                    grid.occupied(i)
                });
            }
            out
        });
        for i in marks.into_iter().flatten() {
            seen[i] = true;
        }
    }
    seen
}

/// Amanatides–Woo traversal of the voxels along `o + t d`, `t ≥ 0`;
/// `visit` returns true to stop.
pub fn march(spec: &GridSpec, o: &Vec3, d: &Vec3, mut visit: impl FnMut(usize) -> bool) {
    let h = spec.voxel_size;
    let lo = Vec3::from(spec.origin);
    let hi = lo + Vec3::new(spec.dims[0] as f64, spec.dims[1] as f64, spec.dims[2] as f64) * h;
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] >= hi[k] {
                return;
            }
        } else {
            let a = (lo[k] - o[k]) / d[k];
            let b = (hi[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if t0 >= t1 {
        return;
    }
    let start = o + d * t0;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        let c = ((start[k] - lo[k]) / h).floor() as i64;
        cell[k] = c.clamp(0, spec.dims[k] as i64 - 1);
        if d[k] > 0.0 {
            step[k] = 1;
            t_max[k] = (lo[k] + (cell[k] + 1) as f64 * h - o[k]) / d[k];
            t_delta[k] = h / d[k];
        } else if d[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (lo[k] + cell[k] as f64 * h - o[k]) / d[k];
            t_delta[k] = -h / d[k];
        }
    }
    loop {
        let i = spec.index(cell[0] as usize, cell[1] as usize, cell[2] as usize);
        if visit(i) {
            return;
        }
        let k = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[k] > t1 {
            return;
        }
        cell[k] += step[k];
        if cell[k] < 0 || cell[k] >= spec.dims[k] as i64 {
            return;
        }
        t_max[k] += t_delta[k];
    }
}

/// LiDAR returns with class labels and camera visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarPoints {
    pub points: Vec<Vec3>,
    pub labels: Vec<u16>,
    /// The point is in some camera's image and unoccluded from it.
    pub visible: Vec<bool>,
}

pub fn virtual_lidar(spec: &LidarSpec, prims: &[Primitive], views: &[CameraView]) -> LidarPoints {
    let o = Vec3::from(spec.origin);
    let rays: Vec<Vec3> = (0..spec.beams)
        .flat_map(|b| {
            let e = if spec.beams == 1 {
                spec.elevation_min_deg
            } else {
                spec.elevation_min_deg
                    + (spec.elevation_max_deg - spec.elevation_min_deg) * b as f64 / (spec.beams - 1) as f64
            }
            .to_radians();
            (0..spec.azimuth_steps).map(move |a| {
                let az = std::f64::consts::TAU * a as f64 / spec.azimuth_steps as f64;
                Vec3::new(e.cos() * az.cos(), e.cos() * az.sin(), e.sin())
            })
        })
        .collect();
    let hits = par::map_slice(&rays, |d| {
        cast_ray(prims, &o, d)
            .filter(|(t, _)| *t <= spec.max_range)
            .map(|(t, k)| {
                let p = o + d * t;
                let vis = views.iter().any(|v| {
                    let pc = v.to_camera(&p);
                    if pc.z < crate::camera::Z_NEAR {
                        return false;
                    }
                    let (u, vv) = v.intrinsics.project(&pc);
                    if !(u >= -0.5 && vv >= -0.5 && u < v.width as f64 - 0.5 && vv < v.height as f64 - 0.5) {
                        return false;
                    }
                    let dir = p - v.pose.translation;
                    cast_ray(prims, &v.pose.translation, &dir).is_some_and(|(s, _)| s >= 1.0 - 1e-6)
                });
                (p, prims[k].class_id, vis)
            })
    });
    let mut out = LidarPoints {
        points: Vec::new(),
        labels: Vec::new(),
        visible: Vec::new(),
    };
    for (p, l, v) in hits.into_iter().flatten() {
        out.points.push(p);
        out.labels.push(l);
        out.visible.push(v);
    }
    out
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation taking +z to unit `n`.
fn quat_z_to(n: &Vec3) -> [f64; 4] {
    if n.z < -1.0 + 1e-12 {
        return [0.0, 1.0, 0.0, 0.0];
    }
    let w = 1.0 + n.z;
    let q = [w, -n.y, n.x, 0.0];
    let m = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / m)
}

/// Flat Gaussians tiling the surface of every primitive (bottom faces of
/// boxes skipped) at roughly `spacing`.
pub fn surface_gaussians(prims: &[Primitive], features: &[Vec<f64>], spacing: f64) -> Result<(Vec<FeatureGaussian>, Vec<usize>)> {
    let thin = spacing * 0.1;
    let tangent = spacing * 0.6;
    let opacity = 0.9;
    let mut gs = Vec::new();
    let mut owner = Vec::new();
    for (pi, p) in prims.iter().enumerate() {
        let feat = &features[pi];
        let mut emit = |mean: Vec3, q: [f64; 4]| -> Result<()> {
            gs.push(FeatureGaussian::new(mean, Vec3::new(tangent, tangent, thin), q, opacity, feat.clone())?);
            owner.push(pi);
            Ok(())
        };
        match p.shape {
            Shape::Box { center, half, yaw } => {
                let qy = [(yaw / 2.0).cos(), 0.0, 0.0, (yaw / 2.0).sin()];
                let r = rot_z(yaw);
                for axis in 0..3 {
                    for sign in [-1.0, 1.0] {
                        if axis == 2 && sign < 0.0 {
                            continue;
                        }
                        let (a, b) = other_axes(axis);
                        let mut n = Vec3::zeros();
                        n[axis] = sign;
                        let qf = quat_mul(qy, quat_z_to(&n));
                        let (na, nb) = (
                            ((2.0 * half[a]) / spacing).ceil().max(1.0) as usize,
                            ((2.0 * half[b]) / spacing).ceil().max(1.0) as usize,
                        );
                        for i in 0..na {
                            for j in 0..nb {
                                let mut l = Vec3::zeros();
                                l[axis] = sign * half[axis];
                                l[a] = -half[a] + (i as f64 + 0.5) * 2.0 * half[a] / na as f64;
                                l[b] = -half[b] + (j as f64 + 0.5) * 2.0 * half[b] / nb as f64;
                                emit(Vec3::from(center) + r * l, qf)?;
                            }
                        }
                    }
                }
            }
            Shape::Sphere { center, radius } => {
                let area = 4.0 * std::f64::consts::PI * radius * radius;
                let m = ((area / (spacing * spacing)).ceil() as usize).max(4);
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                for i in 0..m {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    let n = Vec3::new(r * t.cos(), r * t.sin(), z);
                    emit(Vec3::from(center) + n * radius, quat_z_to(&n))?;
                }
            }
            Shape::Quad { center, axis, half } => {
                let (a, b) = other_axes(axis);
                let mut n = Vec3::zeros();
                n[axis] = 1.0;
                let q = quat_z_to(&n);
                let na = ((2.0 * half[0]) / spacing).ceil().max(1.0) as usize;
                let nb = ((2.0 * half[1]) / spacing).ceil().max(1.0) as usize;
                for i in 0..na {
                    for j in 0..nb {
                        let mut l = Vec3::from(center);
                        l[a] += -half[0] + (i as f64 + 0.5) * 2.0 * half[0] / na as f64;
                        l[b] += -half[1] + (j as f64 + 0.5) * 2.0 * half[1] / nb as f64;
                        emit(l, q)?;
                    }
                }
            }
        }
    }
    Ok((gs, owner))
}

/// Everything generated from one spec.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub primitives: Vec<Primitive>,
    pub bank: TextBank,
    /// Ground-truth surface Gaussians and the primitive each came from.
    pub gaussians: GaussianScene,
    pub gaussian_owner: Vec<usize>,
    pub gt: VoxelGrid,
    /// Camera-observed voxels of `gt`.
    pub visibility: Vec<bool>,
    pub views: Vec<CameraView>,
    pub lidar: LidarPoints,
}

impl SynthScene {
    /// Ground-truth Gaussians without those of primitive `skip`.
    pub fn gaussians_without(&self, skip: usize) -> Result<GaussianScene> {
        let kept: Vec<FeatureGaussian> = self
            .gaussians
            .gaussians
            .iter()
            .zip(&self.gaussian_owner)
            .filter(|(_, o)| **o != skip)
            .map(|(g, _)| g.clone())
            .collect();
        GaussianScene::single_layer(kept, self.gaussians.feature_dim)
    }

    /// Class ids that can be retrieved, in bank order.
    pub fn query_classes(&self) -> Vec<u16> {
        self.bank.class_ids()
    }

    /// Pipeline inputs carrying the rig, bank, ground truth and LiDAR.
    pub fn pipeline_inputs(&self) -> crate::pipeline::PipelineInputs {
        crate::pipeline::PipelineInputs {
            views: self.views.clone(),
            feature_dim: self.spec.feature_dim,
            scene: None,
            bank: Some(self.bank.clone()),
            gt: Some(self.gt.clone()),
            visibility: Some(self.visibility.clone()),
            lidar: Some(crate::pipeline::LabelledPoints {
                points: self.lidar.points.clone(),
                labels: self.lidar.labels.clone(),
                visible: self.lidar.visible.clone(),
            }),
            heads: None,
        }
    }
}

pub fn gen_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let prims = spec.resolved_primitives();
    if prims.is_empty() {
        return Err(Error::invalid("scene has no primitives"));
    }
    prims.iter().try_for_each(Primitive::validate)?;
    let bank = class_bank(&prims, spec.feature_dim)?;
    let embedding = |id: Option<u16>| -> Vec<f64> {
        bank.classes
            .iter()
            .find(|c| c.class_id == id)
            .map(|c| c.embeddings[0].clone())
            .expect("bank covers every class")
    };
    let features: Vec<Vec<f64>> = prims.iter().map(|p| embedding(Some(p.class_id))).collect();
    let sky = embedding(None);

    let mut views = make_rig(&spec.rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xD3F7);
    for v in views.iter_mut() {
        let (mut depth, feat, photo, _) = render_references(v, &prims, &features, &sky);
        if spec.noise.depth > 0.0 {
            let n = Normal::new(0.0, spec.noise.depth).map_err(|e| Error::invalid(e.to_string()))?;
            for (d, ok) in depth.depth.data.iter_mut().zip(&depth.valid) {
                if *ok {
                    *d = (*d + n.sample(&mut rng)).max(crate::camera::Z_NEAR);
                }
            }
        }
        v.ref_depth = Some(depth);
        v.ref_feature = Some(feat);
        v.photo = Some(photo);
    }
    let gt = gt_grid(&prims, &spec.grid);
    let visibility = visibility_mask(&gt, &views);
    let lidar = virtual_lidar(&spec.lidar, &prims, &views);
    let (gs, owner) = surface_gaussians(&prims, &features, spec.gt_spacing)?;
    let gaussians = GaussianScene::single_layer(gs, spec.feature_dim)?;
    if spec.noise.pose > 0.0 {
        views = perturb_poses(&views, spec.noise.pose, spec.seed ^ 0x905E)?;
    }
    Ok(SynthScene {
        spec: spec.clone(),
        primitives: prims,
        bank,
        gaussians,
        gaussian_owner: owner,
        gt,
        visibility,
        views,
        lidar,
    })
}

/// Adds zero-mean normal noise with standard deviation `std_dev` to every
/// translation component.
pub fn perturb_poses(views: &[CameraView], std_dev: f64, seed: u64) -> Result<Vec<CameraView>> {
    if !(std_dev >= 0.0 && std_dev.is_finite()) {
        return Err(Error::invalid("pose noise must be finite and non-negative"));
    }
    if std_dev == 0.0 {
        return Ok(views.to_vec());
    }
    let n = Normal::new(0.0, std_dev).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(views
        .iter()
        .map(|v| {
            let mut v = v.clone();
            for k in 0..3 {
                v.pose.translation[k] += n.sample(&mut rng);
            }
            v
        })
        .collect())
}
