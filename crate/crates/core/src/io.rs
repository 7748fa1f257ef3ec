//! On-disk exchange formats.
//!
//! Binary files are little-endian with a four-byte magic. Values live in
//! memory as f64 and are stored as f32.
//!
//! | magic  | content                                                    |
//! |--------|------------------------------------------------------------|
//! | `FGSC` | Gaussian scene: version, N, F, layer offsets, records      |
//! | `PLNE` | plane: width, height, channels, row-major interleaved data |
//! | `VOXG` | voxel grid: dims, origin, voxel size, occupancy, labels    |
//! | `PNTS` | point queries with optional labels and visibility          |
//! | `HEAD` | named tensors for decode heads and attention               |
//!
//! Camera rigs and prompt banks are JSON documents whose plane and
//! embedding paths resolve relative to the document.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics};
use crate::error::{Error, Result};
use crate::gaussian::{FeatureGaussian, GaussianScene};
use crate::geometry::{Pose, Vec3};
use crate::plane::{DepthMap, Plane};
use crate::sampling::TensorMap;
use crate::voxel::{GridSpec, PromptReduce, TextBank, TextClass, VoxelGrid};

pub const SCENE_MAGIC: &[u8; 4] = b"FGSC";
pub const SCENE_VERSION: u32 = 1;
pub const PLANE_MAGIC: &[u8; 4] = b"PLNE";
pub const GRID_MAGIC: &[u8; 4] = b"VOXG";
pub const POINTS_MAGIC: &[u8; 4] = b"PNTS";
pub const HEAD_MAGIC: &[u8; 4] = b"HEAD";

const POINTS_LABELS: u32 = 1;
const POINTS_VISIBLE: u32 = 2;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f64) -> Result<()> {
        self.bytes(&(v as f32).to_le_bytes())
    }

    fn f32s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 4);
        for v in vs {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != want {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.array()?) as f64)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?];
        self.0.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn end(&mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.0.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    Ok(Writer(BufWriter::new(File::create(path)?)))
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader(BufReader::new(File::open(path)?)))
}

fn finish(w: Writer<BufWriter<File>>) -> Result<()> {
    w.0.into_inner().map_err(|e| Error::Io(e.into_error()))?.sync_all()?;
    Ok(())
}

// ---------------------------------------------------------------- scene

pub fn write_scene_to<W: Write>(scene: &GaussianScene, out: W) -> Result<()> {
    scene.validate()?;
    let mut w = Writer(out);
    w.bytes(SCENE_MAGIC)?;
    w.u32(SCENE_VERSION as usize)?;
    w.u32(scene.len())?;
    w.u32(scene.feature_dim)?;
    w.u32(scene.layer_offsets.len())?;
    for o in &scene.layer_offsets {
        w.u32(*o)?;
    }
    let mut rec = Vec::with_capacity(11 + scene.feature_dim);
    for g in &scene.gaussians {
        rec.clear();
        rec.extend(g.mean.iter());
        rec.extend(g.scale.iter());
        rec.extend(g.rotation.0);
        rec.push(g.opacity);
        rec.extend(&g.feature);
        w.f32s(&rec)?;
    }
    Ok(())
}

pub fn read_scene_from<R: Read>(input: R) -> Result<GaussianScene> {
    let mut r = Reader(input);
    r.magic(SCENE_MAGIC)?;
    let version = r.u32()?;
    if version != SCENE_VERSION as usize {
        return Err(Error::Format(format!("unsupported scene version {version}")));
    }
    let n = r.u32()?;
    let f = r.u32()?;
    let layers = r.u32()?;
    let offsets = (0..layers).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let mut gaussians = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let v = r.f32s(11 + f)?;
        let g = FeatureGaussian::new(
            Vec3::new(v[0], v[1], v[2]),
            Vec3::new(v[3], v[4], v[5]),
            [v[6], v[7], v[8], v[9]],
            v[10],
            v[11..].to_vec(),
        )
        .map_err(|e| Error::Format(format!("record {i}: {e}")))?;
        gaussians.push(g);
    }
    r.end()?;
    GaussianScene::new(gaussians, offsets, f)
}

pub fn write_scene(path: impl AsRef<Path>, scene: &GaussianScene) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_scene_to(scene, &mut w.0)?;
    finish(w)
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    read_scene_from(open(path.as_ref())?.0)
}

// ---------------------------------------------------------------- planes

pub fn write_plane_to<W: Write>(plane: &Plane, out: W) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(PLANE_MAGIC)?;
    w.u32(plane.width)?;
    w.u32(plane.height)?;
    w.u32(plane.channels)?;
    w.f32s(&plane.data)
}

pub fn read_plane_from<R: Read>(input: R) -> Result<Plane> {
    let mut r = Reader(input);
    r.magic(PLANE_MAGIC)?;
    let (w, h, c) = (r.u32()?, r.u32()?, r.u32()?);
    let n = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(c))
        .ok_or_else(|| Error::Format("plane size overflow".into()))?;
    let data = r.f32s(n)?;
    r.end()?;
    Plane::from_data(w, h, c, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_plane(path: impl AsRef<Path>, plane: &Plane) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_plane_to(plane, &mut w.0)?;
    finish(w)
}

pub fn read_plane(path: impl AsRef<Path>) -> Result<Plane> {
    read_plane_from(open(path.as_ref())?.0)
}

/// Invalid pixels are stored as 0.
pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_plane(path, &depth.to_plane())
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    DepthMap::from_plane(read_plane(path)?)
}

// ---------------------------------------------------------------- voxel grid

pub fn write_grid_to<W: Write>(grid: &VoxelGrid, out: W) -> Result<()> {
    grid.spec.validate()?;
    let mut w = Writer(out);
    w.bytes(GRID_MAGIC)?;
    for d in grid.spec.dims {
        w.u32(d)?;
    }
    for o in grid.spec.origin {
        w.f32(o)?;
    }
    w.f32(grid.spec.voxel_size)?;
    w.f32s(&grid.occ_mass)?;
    let mut buf = Vec::with_capacity(grid.labels.len() * 2);
    for l in &grid.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    w.bytes(&buf)
}

pub fn read_grid_from<R: Read>(input: R) -> Result<VoxelGrid> {
    let mut r = Reader(input);
    r.magic(GRID_MAGIC)?;
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let origin = [r.f32()?, r.f32()?, r.f32()?];
    let voxel_size = r.f32()?;
    let spec = GridSpec { origin, voxel_size, dims };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    let n = spec.voxel_count();
    let occ_mass = r.f32s(n)?;
    let mut buf = vec![0u8; n * 2];
    r.0.read_exact(&mut buf).map_err(truncated)?;
    let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    r.end()?;
    Ok(VoxelGrid { spec, occ_mass, labels, class_mass: None })
}

pub fn write_grid(path: impl AsRef<Path>, grid: &VoxelGrid) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_grid_to(grid, &mut w.0)?;
    finish(w)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    read_grid_from(open(path.as_ref())?.0)
}

// ---------------------------------------------------------------- points

/// Query points with optional per-point class ids and visibility flags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<u16>>,
    pub visible: Option<Vec<bool>>,
}

impl PointSet {
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if self.labels.as_ref().is_some_and(|l| l.len() != n)
            || self.visible.as_ref().is_some_and(|v| v.len() != n)
        {
            return Err(Error::invalid("point labels or visibility have the wrong length"));
        }
        if self.points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(())
    }
}

pub fn write_points_to<W: Write>(set: &PointSet, out: W) -> Result<()> {
    set.validate()?;
    let mut w = Writer(out);
    w.bytes(POINTS_MAGIC)?;
    w.u32(set.points.len())?;
    let flags = if set.labels.is_some() { POINTS_LABELS } else { 0 }
        | if set.visible.is_some() { POINTS_VISIBLE } else { 0 };
    w.u32(flags as usize)?;
    let xyz: Vec<f64> = set.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    w.f32s(&xyz)?;
    if let Some(l) = &set.labels {
        let buf: Vec<u8> = l.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.bytes(&buf)?;
    }
    if let Some(v) = &set.visible {
        let buf: Vec<u8> = v.iter().map(|b| *b as u8).collect();
        w.bytes(&buf)?;
    }
    Ok(())
}

fn read_points_binary(bytes: &[u8]) -> Result<PointSet> {
    let mut r = Reader(bytes);
    r.magic(POINTS_MAGIC)?;
    let n = r.u32()?;
    let flags = r.u32()? as u32;
    if flags & !(POINTS_LABELS | POINTS_VISIBLE) != 0 {
        return Err(Error::Format(format!("unknown point flags {flags:#x}")));
    }
    let xyz = r.f32s(n * 3)?;
    let points = xyz.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let labels = if flags & POINTS_LABELS != 0 {
        let mut buf = vec![0u8; n * 2];
        r.0.read_exact(&mut buf).map_err(truncated)?;
        Some(buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    } else {
        None
    };
    let visible = if flags & POINTS_VISIBLE != 0 {
        let mut buf = vec![0u8; n];
        r.0.read_exact(&mut buf).map_err(truncated)?;
        Some(buf.into_iter().map(|b| b != 0).collect())
    } else {
        None
    };
    r.end()?;
    Ok(PointSet { points, labels, visible })
}

/// One point per line: `x y z [label [visible]]`. Blank lines and lines
/// starting with `#` are skipped; every line must carry the same columns.
pub fn parse_points_text(text: &str) -> Result<PointSet> {
    let mut set = PointSet::default();
    let mut cols = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::Format(format!("line {}: {what}", ln + 1));
        if !(3..=5).contains(&fields.len()) {
            return Err(bad("expected 3 to 5 columns"));
        }
        if *cols.get_or_insert(fields.len()) != fields.len() {
            return Err(bad("column count changed"));
        }
        let mut xyz = [0.0; 3];
        for (v, f) in xyz.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| bad("bad coordinate"))?;
        }
        set.points.push(Vec3::from(xyz));
        if let Some(f) = fields.get(3) {
            let l: u16 = f.parse().map_err(|_| bad("bad label"))?;
            set.labels.get_or_insert_with(Vec::new).push(l);
        }
        if let Some(f) = fields.get(4) {
            let v = match *f {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad("bad visibility flag")),
            };
            set.visible.get_or_insert_with(Vec::new).push(v);
        }
    }
    set.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(set)
}

pub fn format_points_text(set: &PointSet) -> Result<String> {
    set.validate()?;
    let mut s = String::new();
    for (i, p) in set.points.iter().enumerate() {
        s.push_str(&format!("{} {} {}", p.x, p.y, p.z));
        if let Some(l) = &set.labels {
            s.push_str(&format!(" {}", l[i]));
            if let Some(v) = &set.visible {
                s.push_str(if v[i] { " 1" } else { " 0" });
            }
        }
        s.push('\n');
    }
    Ok(s)
}

/// Binary when the file starts with `PNTS`, whitespace text otherwise.
pub fn read_points(path: impl AsRef<Path>) -> Result<PointSet> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(POINTS_MAGIC) {
        read_points_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format("point file is neither PNTS nor text".into()))?;
        parse_points_text(text)
    }
}

/// Text output for `.txt`/`.xyz` paths, binary otherwise.
pub fn write_points(path: impl AsRef<Path>, set: &PointSet) -> Result<()> {
    let path = path.as_ref();
    let text = matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "xyz"));
    if text {
        if set.visible.is_some() && set.labels.is_none() {
            return Err(Error::invalid("text points cannot carry visibility without labels"));
        }
        fs::write(path, format_points_text(set)?)?;
        Ok(())
    } else {
        let mut w = create(path)?;
        write_points_to(set, &mut w.0)?;
        finish(w)
    }
}

// ---------------------------------------------------------------- tensors

pub fn write_tensors_to<W: Write>(tensors: &TensorMap, out: W) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(HEAD_MAGIC)?;
    w.u32(tensors.len())?;
    for (name, (shape, data)) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("tensor {name} does not match its shape")));
        }
        w.u32(name.len())?;
        w.bytes(name.as_bytes())?;
        w.u32(shape.len())?;
        for d in shape {
            w.u32(*d)?;
        }
        w.f32s(data)?;
    }
    Ok(())
}

pub fn read_tensors_from<R: Read>(input: R) -> Result<TensorMap> {
    let mut r = Reader(input);
    r.magic(HEAD_MAGIC)?;
    let count = r.u32()?;
    let mut out = TensorMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let mut name = vec![0u8; len];
        r.0.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let data = r.f32s(n)?;
        if out.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    r.end()?;
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &TensorMap) -> Result<()> {
    let mut w = create(path.as_ref())?;
    write_tensors_to(tensors, &mut w.0)?;
    finish(w)
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorMap> {
    read_tensors_from(open(path.as_ref())?.0)
}

// ---------------------------------------------------------------- rig JSON

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigViewFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-ego 3×4, row-major.
    pub pose: [f64; 12],
    #[serde(default)]
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub views: Vec<RigViewFile>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads the rig and every plane it references.
pub fn read_rig(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    let path = path.as_ref();
    let rig: RigFile = serde_json::from_slice(&fs::read(path)?)?;
    let dir = base_dir(path);
    rig.views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let k = Intrinsics::new(v.fx, v.fy, v.cx, v.cy)?;
            let pose = Pose::from_rows(&v.pose)?;
            let mut view = CameraView::new(k, pose, v.width, v.height)?.with_timestamp(v.timestamp);
            let ctx = |e: Error| Error::invalid(format!("view {i}: {e}"));
            if let Some(p) = &v.depth {
                view.ref_depth = Some(read_depth(dir.join(p))?);
            }
            if let Some(p) = &v.feature {
                view.ref_feature = Some(read_plane(dir.join(p))?);
            }
            if let Some(p) = &v.photo {
                view.photo = Some(read_plane(dir.join(p))?);
            }
            view.validate().map_err(ctx)?;
            Ok(view)
        })
        .collect()
}

/// Writes the rig JSON and `view{i}_{depth,feature,photo}.plne` next to it.
pub fn write_rig(path: impl AsRef<Path>, views: &[CameraView]) -> Result<()> {
    let path = path.as_ref();
    let dir = base_dir(path);
    let mut rig = RigFile { views: Vec::with_capacity(views.len()) };
    for (i, v) in views.iter().enumerate() {
        let k = &v.intrinsics;
        let mut entry = RigViewFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: v.width,
            height: v.height,
            pose: v.pose.to_rows(),
            timestamp: v.timestamp,
            depth: None,
            feature: None,
            photo: None,
        };
        if let Some(d) = &v.ref_depth {
            let name = PathBuf::from(format!("view{i}_depth.plne"));
            write_depth(dir.join(&name), d)?;
            entry.depth = Some(name);
        }
        if let Some(f) = &v.ref_feature {
            let name = PathBuf::from(format!("view{i}_feature.plne"));
            write_plane(dir.join(&name), f)?;
            entry.feature = Some(name);
        }
        if let Some(p) = &v.photo {
            let name = PathBuf::from(format!("view{i}_photo.plne"));
            write_plane(dir.join(&name), p)?;
            entry.photo = Some(name);
        }
        rig.views.push(entry);
    }
    fs::write(path, serde_json::to_string_pretty(&rig)?)?;
    Ok(())
}

// ---------------------------------------------------------------- prompt bank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntryFile {
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u16>,
    pub prompts: Vec<String>,
    /// PLNE plane of width `dim`, one row per prompt.
    pub embedding_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankFile {
    #[serde(default)]
    pub reduce: PromptReduce,
    pub classes: Vec<BankEntryFile>,
}

/// Embeddings pass through f32, so they are re-normalized on load.
pub fn read_bank(path: impl AsRef<Path>) -> Result<TextBank> {
    let path = path.as_ref();
    let file: BankFile = serde_json::from_slice(&fs::read(path)?)?;
    let dir = base_dir(path);
    let mut classes = Vec::with_capacity(file.classes.len());
    for c in file.classes {
        let plane = read_plane(dir.join(&c.embedding_path))?;
        if plane.channels != 1 || plane.height != c.prompts.len() {
            return Err(Error::Format(format!(
                "class {}: embedding plane must be 1 channel with one row per prompt",
                c.class
            )));
        }
        let embeddings = plane
            .data
            .chunks_exact(plane.width)
            .map(|row| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    Ok(row.iter().map(|v| v / n).collect())
                } else {
                    Err(Error::Format(format!("class {}: zero embedding", c.class)))
                }
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        classes.push(TextClass {
            name: c.class,
            class_id: c.class_id,
            prompts: c.prompts,
            embeddings,
        });
    }
    TextBank::new(classes, file.reduce)
}

/// Writes the bank JSON and `bank_{i}.plne` embedding planes next to it.
pub fn write_bank(path: impl AsRef<Path>, bank: &TextBank) -> Result<()> {
    let path = path.as_ref();
    let dir = base_dir(path);
    let mut file = BankFile { reduce: bank.reduce, classes: Vec::with_capacity(bank.len()) };
    for (i, c) in bank.classes.iter().enumerate() {
        let name = PathBuf::from(format!("bank_{i}.plne"));
        let data = c.embeddings.concat();
        write_plane(dir.join(&name), &Plane::from_data(bank.dim, c.embeddings.len(), 1, data)?)?;
        file.classes.push(BankEntryFile {
            class: c.name.clone(),
            class_id: c.class_id,
            prompts: c.prompts.clone(),
            embedding_path: name,
        });
    }
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

// ---------------------------------------------------------------- previews

/// 8-bit grayscale depth preview, near bright and far dark, invalid black.
pub fn depth_pgm(depth: &[f64], valid: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    if depth.len() != width * height || valid.len() != depth.len() {
        return Err(Error::invalid("preview buffer does not match its size"));
    }
    let finite = depth.iter().zip(valid).filter(|(d, v)| **v && d.is_finite()).map(|(d, _)| *d);
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(depth.iter().zip(valid).map(|(d, v)| {
        if *v && d.is_finite() {
            (255.0 - 254.0 * (d - lo) / span).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// 8-bit color preview of a 3-channel plane with values in [0, 1].
pub fn plane_ppm(plane: &Plane) -> Result<Vec<u8>> {
    if plane.channels != 3 {
        return Err(Error::invalid("color preview needs a 3-channel plane"));
    }
    let mut out = format!("P6\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use crate::voxel::EMPTY_LABEL;

    fn scene() -> GaussianScene {
        let g = |x: f64, f: f64| {
            FeatureGaussian::new(
                Vec3::new(x, 0.5, -1.25),
                Vec3::new(0.25, 0.5, 1.0),
                Quat::IDENTITY.0,
                0.75,
                vec![f, -f, 0.0],
            )
            .unwrap()
        };
        GaussianScene::new(vec![g(0.0, 1.0), g(1.0, 0.5), g(2.0, 0.25)], vec![2, 3], 3).unwrap()
    }

    #[test]
    fn scene_round_trip_is_exact_for_f32_values() {
        let s = scene();
        let mut buf = Vec::new();
        write_scene_to(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 * 4 + 2 * 4 + 3 * (11 + 3) * 4);
        assert_eq!(read_scene_from(&buf[..]).unwrap(), s);
    }

    #[test]
    fn scene_rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_scene_to(&scene(), &mut buf).unwrap();
        assert!(matches!(read_scene_from(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        buf[0] = b'X';
        assert!(matches!(read_scene_from(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn plane_and_grid_round_trip() {
        let p = Plane::from_data(2, 1, 2, vec![1.0, 2.0, 0.5, -3.0]).unwrap();
        let mut buf = Vec::new();
        write_plane_to(&p, &mut buf).unwrap();
        assert_eq!(read_plane_from(&buf[..]).unwrap(), p);

        let spec = GridSpec { origin: [-1.0, 0.0, 2.5], voxel_size: 0.5, dims: [2, 1, 2] };
        let grid = VoxelGrid {
            spec,
            occ_mass: vec![0.0, 1.5, 0.25, 0.0],
            labels: vec![EMPTY_LABEL, 4, 11, EMPTY_LABEL],
            class_mass: None,
        };
        let mut buf = Vec::new();
        write_grid_to(&grid, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 12 + 12 + 4 + 16 + 8);
        assert_eq!(read_grid_from(&buf[..]).unwrap(), grid);
    }

    #[test]
    fn points_binary_and_text() {
        let set = PointSet {
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.0, 4.0)],
            labels: Some(vec![4, 16]),
            visible: Some(vec![true, false]),
        };
        let mut buf = Vec::new();
        write_points_to(&set, &mut buf).unwrap();
        assert_eq!(read_points_binary(&buf).unwrap(), set);
        let text = format_points_text(&set).unwrap();
        assert_eq!(text, "1 2 3 4 1\n-0.5 0 4 16 0\n");
        assert_eq!(parse_points_text(&text).unwrap(), set);
        assert!(parse_points_text("1 2\n").is_err());
        assert!(parse_points_text("1 2 3\n1 2 3 4\n").is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let mut t = TensorMap::new();
        t.insert("a.weight".into(), (vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        t.insert("config".into(), (vec![1], vec![0.5]));
        let mut buf = Vec::new();
        write_tensors_to(&t, &mut buf).unwrap();
        assert_eq!(read_tensors_from(&buf[..]).unwrap(), t);
        t.insert("bad".into(), (vec![2], vec![1.0]));
        assert!(write_tensors_to(&t, &mut Vec::new()).is_err());
    }

    #[test]
    fn pgm_maps_near_to_bright() {
        let out = depth_pgm(&[1.0, 3.0, 2.0], &[true, true, false], 3, 1).unwrap();
        assert_eq!(&out[..11], b"P5\n3 1\n255\n");
        assert_eq!(&out[11..], &[255, 1, 0]);
    }
}
