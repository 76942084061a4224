//! On-disk formats: the `.bt` tensor container, dataset directories,
//! checkpoints and trajectory CSV files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use corrtrack_core::geom::Camera;
use corrtrack_core::model::{init_params, ArchConfig, ModelParams};
use corrtrack_core::scene::{generate_scene, render_all, RenderedFrame, SceneSpec};
use corrtrack_core::track::{TrackPoint, TrackQuery, Trajectory, Video};

pub const BT_MAGIC: &[u8; 4] = b"BTEN";
pub const BT_VERSION: u16 = 1;
const CKPT_MAGIC: &[u8; 4] = b"BTCK";
const CKPT_VERSION: u16 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("payload holds {got} bytes, header implies {expected}")]
    PayloadLength { expected: u64, got: u64 },
    #[error("expected {expected:?} tensor, found {found:?}")]
    WrongDtype { expected: DType, found: DType },
    #[error("shape {got:?}, expected {expected:?}")]
    WrongShape { expected: Vec<u64>, got: Vec<u64> },
    #[error("checkpoint architecture {found:?} does not match configured {expected:?}")]
    ArchMismatch { expected: Box<ArchConfig>, found: Box<ArchConfig> },
    #[error("checkpoint tensor '{0}' missing or unexpected")]
    TensorName(String),
    #[error("dataset does not match its manifest: {0}")]
    ManifestMismatch(String),
    #[error("malformed CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    I32 = 2,
    U8 = 3,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self, FormatError> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::U8,
            c => return Err(FormatError::UnknownDtype(c)),
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor as stored in a `.bt` file.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl BinaryTensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self, FormatError> {
        let expected = dims.iter().product::<u64>();
        if expected != data.len() as u64 {
            return Err(FormatError::PayloadLength {
                expected: expected * data.dtype().size() as u64,
                got: (data.len() * data.dtype().size()) as u64,
            });
        }
        Ok(BinaryTensor { dims, data })
    }

    pub fn f64(dims: &[usize], data: Vec<f64>) -> Result<Self, FormatError> {
        Self::new(dims.iter().map(|d| *d as u64).collect(), TensorData::F64(data))
    }

    pub fn into_f64(self, dims: &[usize]) -> Result<Vec<f64>, FormatError> {
        self.check_dims(dims)?;
        match self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(FormatError::WrongDtype {
                expected: DType::F64,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_i32(self, dims: &[usize]) -> Result<Vec<i32>, FormatError> {
        self.check_dims(dims)?;
        match self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(FormatError::WrongDtype {
                expected: DType::I32,
                found: other.dtype(),
            }),
        }
    }

    fn check_dims(&self, dims: &[usize]) -> Result<(), FormatError> {
        let expected: Vec<u64> = dims.iter().map(|d| *d as u64).collect();
        if self.dims != expected {
            return Err(FormatError::WrongShape {
                expected,
                got: self.dims.clone(),
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), FormatError> {
        w.write_all(BT_MAGIC)?;
        w.write_all(&BT_VERSION.to_le_bytes())?;
        w.write_all(&[self.data.dtype() as u8, self.dims.len() as u8])?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * self.data.dtype().size());
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => buf.extend_from_slice(v),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Read one tensor. With `exact`, trailing bytes after the payload are an
    /// error.
    pub fn read_from<R: Read>(r: &mut R, exact: bool) -> Result<Self, FormatError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BT_MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != BT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        r.read_exact(&mut b2)?;
        let dtype = DType::from_code(b2[0])?;
        let rank = b2[1] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            dims.push(u64::from_le_bytes(b8));
        }
        let count = dims.iter().try_fold(1u64, |a, d| a.checked_mul(*d));
        let expected = count.and_then(|c| c.checked_mul(dtype.size() as u64)).unwrap_or(u64::MAX);
        let mut payload = Vec::new();
        r.take(expected).read_to_end(&mut payload)?;
        if payload.len() as u64 != expected {
            return Err(FormatError::PayloadLength {
                expected,
                got: payload.len() as u64,
            });
        }
        if exact {
            let mut extra = Vec::new();
            r.read_to_end(&mut extra)?;
            if !extra.is_empty() {
                return Err(FormatError::PayloadLength {
                    expected,
                    got: expected + extra.len() as u64,
                });
            }
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I32 => TensorData::I32(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => TensorData::U8(payload),
        };
        Ok(BinaryTensor { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        Self::read_from(&mut BufReader::new(f), true)
    }
}

/// Contents of `manifest.json` in a scene directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SceneSpec,
    pub num_frames: usize,
    pub cameras: Vec<Camera>,
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("scene_{seed}"))
}

fn frame_path(dir: &Path, t: usize, kind: &str) -> PathBuf {
    dir.join(format!("frame_{t}.{kind}.bt"))
}

/// Render a scene and write its manifest and per-frame tensors under `root`.
pub fn save_scene(root: &Path, spec: &SceneSpec) -> Result<PathBuf, anyhow::Error> {
    let scene = generate_scene(spec)?;
    let frames = render_all(&scene)?;
    let dir = scene_dir(root, spec.seed);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        num_frames: frames.len(),
        cameras: scene.cameras.clone(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&mpath))?;
    for (t, f) in frames.iter().enumerate() {
        write_frame(&dir, t, f)?;
    }
    Ok(dir)
}

fn write_frame(dir: &Path, t: usize, f: &RenderedFrame) -> Result<(), FormatError> {
    let (w, h) = (f.width, f.height);
    BinaryTensor::f64(&[h, w, 3], f.image.clone())?.save(&frame_path(dir, t, "img"))?;
    BinaryTensor::f64(&[h, w], f.depth.clone())?.save(&frame_path(dir, t, "depth"))?;
    let world = f.world_points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    BinaryTensor::f64(&[h, w, 3], world)?.save(&frame_path(dir, t, "world"))?;
    BinaryTensor::new(vec![h as u64, w as u64], TensorData::I32(f.surfel_id.clone()))?.save(&frame_path(dir, t, "ids"))?;
    Ok(())
}

fn read_frame(dir: &Path, t: usize, w: usize, h: usize) -> Result<RenderedFrame, FormatError> {
    let image = BinaryTensor::load(&frame_path(dir, t, "img"))?.into_f64(&[h, w, 3])?;
    let depth = BinaryTensor::load(&frame_path(dir, t, "depth"))?.into_f64(&[h, w])?;
    let world = BinaryTensor::load(&frame_path(dir, t, "world"))?.into_f64(&[h, w, 3])?;
    let surfel_id = BinaryTensor::load(&frame_path(dir, t, "ids"))?.into_i32(&[h, w])?;
    Ok(RenderedFrame {
        width: w,
        height: h,
        image,
        depth,
        world_points: world.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        surfel_id,
    })
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, FormatError> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(FormatError::ManifestMismatch(format!("format_version {}", m.format_version)));
    }
    if m.cameras.len() != m.num_frames {
        return Err(FormatError::ManifestMismatch("camera count differs from num_frames".into()));
    }
    Ok(m)
}

/// Load a scene directory as a video.
pub fn load_scene(dir: &Path) -> Result<(Manifest, Video), FormatError> {
    let m = load_manifest(dir)?;
    let frames = (0..m.num_frames)
        .map(|t| read_frame(dir, t, m.spec.width, m.spec.height))
        .collect::<Result<Vec<_>, _>>()?;
    let video = Video {
        frames,
        cameras: m.cameras.clone(),
    };
    Ok((m, video))
}

/// Regenerate the scene from the manifest's spec and check that everything
/// on disk matches it bit for bit.
pub fn verify_scene(dir: &Path) -> Result<(), anyhow::Error> {
    let (m, video) = load_scene(dir)?;
    let scene = generate_scene(&m.spec)?;
    if scene.cameras != m.cameras {
        return Err(FormatError::ManifestMismatch("cameras differ from regenerated scene".into()).into());
    }
    let frames = render_all(&scene)?;
    for (t, (a, b)) in frames.iter().zip(&video.frames).enumerate() {
        let same = a.width == b.width
            && a.height == b.height
            && a.surfel_id == b.surfel_id
            && bits_eq(&a.image, &b.image)
            && bits_eq(&a.depth, &b.depth)
            && a.world_points.iter().zip(&b.world_points).all(|(p, q)| bits_eq(p.as_slice(), q.as_slice()));
        if !same {
            return Err(FormatError::ManifestMismatch(format!("frame {t} differs from regenerated render")).into());
        }
    }
    Ok(())
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Scene directories under a dataset root, ordered by seed.
pub fn list_scenes(root: &Path) -> Result<Vec<(u64, PathBuf)>, FormatError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        let Some(seed) = name.to_str().and_then(|n| n.strip_prefix("scene_")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        out.push((seed, entry.path()));
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    arch: ArchConfig,
    frozen_encoder: bool,
    tensors: Vec<String>,
}

/// Write parameters as a header followed by one `.bt` record per tensor.
pub fn write_checkpoint<W: Write>(w: &mut W, params: &ModelParams) -> Result<(), FormatError> {
    let named = params.named_tensors();
    let header = CheckpointHeader {
        arch: params.arch.clone(),
        frozen_encoder: params.frozen_encoder,
        tensors: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in named {
        BinaryTensor::f64(&t.shape, t.data.clone())?.write_to(w)?;
    }
    Ok(())
}

/// Read parameters; when `expected` is given the stored architecture must
/// equal it.
pub fn read_checkpoint<R: Read>(r: &mut R, expected: Option<&ArchConfig>) -> Result<ModelParams, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CKPT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if let Some(exp) = expected {
        if *exp != header.arch {
            return Err(FormatError::ArchMismatch {
                expected: Box::new(exp.clone()),
                found: Box::new(header.arch),
            });
        }
    }
    let mut params = init_params(0, &header.arch).map_err(|e| FormatError::ManifestMismatch(e.to_string()))?;
    params.frozen_encoder = header.frozen_encoder;
    let mut slots = params.named_tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(FormatError::TensorName(format!("{} tensors stored, {} expected", header.tensors.len(), slots.len())));
    }
    for ((name, slot), stored) in slots.iter_mut().zip(&header.tensors) {
        if name != stored {
            return Err(FormatError::TensorName(stored.clone()));
        }
        let t = BinaryTensor::read_from(r, false)?;
        slot.data = t.into_f64(&slot.shape)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::TensorName("trailing data".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), FormatError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params)?;
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchConfig>) -> Result<ModelParams, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_checkpoint(&mut bytes.as_slice(), expected)
}

pub const TRAJECTORY_HEADER: &str = "query_id,frame,x,y,z,visible_prob,valid";
pub const POINTS_HEADER: &str = "query_id,frame,px,py,pz";

/// Path of the full-3D sibling of a trajectory CSV.
pub fn points_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("tracks");
    csv.with_file_name(format!("{stem}.points3d.csv"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write trajectories as CSV. When any entry carries a 3D point the full
/// point goes to the sibling file from [`points_path`].
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<(), FormatError> {
    let mut main = String::from(TRAJECTORY_HEADER);
    main.push('\n');
    let mut pts = String::from(POINTS_HEADER);
    pts.push('\n');
    let mut any3d = false;
    for (q, tr) in trajs.iter().enumerate() {
        for (t, p) in tr.points.iter().enumerate() {
            main.push_str(&format!(
                "{q},{t},{},{},{},{},{}\n",
                p.pixel[0],
                p.pixel[1],
                opt(p.point3d.map(|v| v[2])),
                p.visible_prob,
                p.valid as u8
            ));
            if let Some(v) = p.point3d {
                any3d = true;
                pts.push_str(&format!("{q},{t},{},{},{}\n", v[0], v[1], v[2]));
            }
        }
    }
    fs::write(path, main).map_err(io_err(path))?;
    if any3d {
        let pp = points_path(path);
        fs::write(&pp, pts).map_err(io_err(&pp))?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<T, FormatError> {
    field.and_then(|s| s.parse().ok()).ok_or_else(|| FormatError::Csv {
        line,
        msg: format!("bad {what}"),
    })
}

/// Read trajectories back. Each query frame is taken as the first valid
/// frame, and the query pixel as the position there.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, FormatError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut rows: BTreeMap<usize, BTreeMap<usize, TrackPoint>> = BTreeMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if i == 0 {
            if line.trim() != TRAJECTORY_HEADER {
                return Err(FormatError::Csv { line: 1, msg: "unexpected header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let q: usize = parse(it.next(), i + 1, "query_id")?;
        let t: usize = parse(it.next(), i + 1, "frame")?;
        let x: f64 = parse(it.next(), i + 1, "x")?;
        let y: f64 = parse(it.next(), i + 1, "y")?;
        let z = it.next().ok_or(FormatError::Csv { line: i + 1, msg: "missing z".into() })?;
        let z: Option<f64> = if z.is_empty() { None } else { Some(parse(Some(z), i + 1, "z")?) };
        let vis: f64 = parse(it.next(), i + 1, "visible_prob")?;
        let valid: u8 = parse(it.next(), i + 1, "valid")?;
        let point3d = z.map(|z| [f64::NAN, f64::NAN, z]);
        rows.entry(q).or_default().insert(
            t,
            TrackPoint {
                pixel: [x, y],
                visible_prob: vis,
                point3d,
                valid: valid != 0,
            },
        );
    }
    let pp = points_path(path);
    if pp.exists() {
        let text = fs::read_to_string(&pp).map_err(io_err(&pp))?;
        for (i, line) in text.lines().enumerate().skip(1) {
            let mut it = line.split(',');
            let q: usize = parse(it.next(), i + 1, "query_id")?;
            let t: usize = parse(it.next(), i + 1, "frame")?;
            let v = [parse(it.next(), i + 1, "px")?, parse(it.next(), i + 1, "py")?, parse(it.next(), i + 1, "pz")?];
            let slot = rows.get_mut(&q).and_then(|r| r.get_mut(&t)).ok_or(FormatError::Csv {
                line: i + 1,
                msg: "point without trajectory row".into(),
            })?;
            slot.point3d = Some(v);
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for (expect, (q, frames)) in rows.into_iter().enumerate() {
        if q != expect || frames.keys().copied().ne(0..frames.len()) {
            return Err(FormatError::Csv {
                line: 0,
                msg: format!("query {q} is not a dense run of frames"),
            });
        }
        let points: Vec<TrackPoint> = frames.into_values().collect();
        let tq = points.iter().position(|p| p.valid).unwrap_or(0);
        out.push(Trajectory {
            query: TrackQuery {
                query_frame: tq,
                pixel: points[tq].pixel,
            },
            points,
        });
    }
    Ok(out)
}
