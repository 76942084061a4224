//! Pairwise nearest-neighbour tracking. Every target frame is matched
//! against the query frame independently; there is no temporal smoothing.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{estimate_intrinsics, unproject_camera_frame, Camera, GeomError, Intrinsics};
use crate::model::{DescriptorMap, Model, ModelError, ModelParams};
use crate::sampling::{gather, sampler, FeatureSampler, Taps};
use crate::scene::{render_all, GroundTruthTrack, RenderedFrame, Scene, SceneError};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("pixel ({x}, {y}) outside the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("frame {frame} out of range for a {num_frames}-frame video")]
    FrameOutOfRange { frame: usize, num_frames: usize },
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("unknown {kind} '{name}', expected one of {options:?}")]
    Unknown { kind: &'static str, name: String, options: Vec<&'static str> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Frames of one video with the camera of each frame.
#[derive(Debug, Clone)]
pub struct Video {
    pub frames: Vec<RenderedFrame>,
    pub cameras: Vec<Camera>,
}

impl Video {
    pub fn from_scene(scene: &Scene) -> Result<Self, TrackError> {
        Ok(Video {
            frames: render_all(scene)?,
            cameras: scene.cameras.clone(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    fn check_frame(&self, frame: usize) -> Result<(), TrackError> {
        if frame >= self.num_frames() {
            return Err(TrackError::FrameOutOfRange {
                frame,
                num_frames: self.num_frames(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackQuery {
    pub query_frame: usize,
    /// `(x, y)` in pixels.
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub pixel: [f64; 2],
    pub visible_prob: f64,
    /// Position in the query frame's camera coordinates.
    pub point3d: Option<[f64; 3]>,
    pub valid: bool,
}

impl TrackPoint {
    pub fn visible(&self, threshold: f64) -> bool {
        self.visible_prob >= threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: TrackQuery,
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    /// A perfect prediction built from ground truth: exact projections,
    /// certain visibility, and the surfel position in the query camera.
    pub fn from_ground_truth(gt: &GroundTruthTrack, query_frame: usize, cameras: &[Camera]) -> Self {
        let qcam = &cameras[query_frame];
        let points = (0..gt.pixels.len())
            .map(|t| {
                let px = gt.pixels[t].unwrap_or_else(Vector2::zeros);
                let p = qcam.world_to_camera(&gt.world[t]);
                TrackPoint {
                    pixel: [px.x, px.y],
                    visible_prob: if gt.visible[t] { 1.0 } else { 0.0 },
                    point3d: Some([p.x, p.y, p.z]),
                    valid: t >= query_frame,
                }
            })
            .collect();
        let q = gt.pixels[query_frame].unwrap_or_else(Vector2::zeros);
        Trajectory {
            query: TrackQuery {
                query_frame,
                pixel: [q.x, q.y],
            },
            points,
        }
    }
}

/// Pixel centres sit at integer coordinates, so the image spans
/// `[-0.5, W - 0.5] × [-0.5, H - 0.5]`.
fn check_bounds(pixel: [f64; 2], width: usize, height: usize) -> Result<(), TrackError> {
    let ok = pixel[0] >= -0.5 && pixel[1] >= -0.5 && pixel[0] <= width as f64 - 0.5 && pixel[1] <= height as f64 - 0.5;
    if !ok || !pixel[0].is_finite() || !pixel[1].is_finite() {
        return Err(TrackError::OutOfBounds {
            x: pixel[0],
            y: pixel[1],
            width,
            height,
        });
    }
    Ok(())
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Descriptor at a fractional pixel, blended by `sampler` and renormalized.
pub fn sample_descriptor(d: &DescriptorMap, pixel: [f64; 2], sampler: &dyn FeatureSampler) -> Result<Vec<f64>, TrackError> {
    check_bounds(pixel, d.width, d.height)?;
    let taps = sampler.taps(pixel, d.width, d.height);
    Ok(normalize(gather(&d.data, d.dim, &taps)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2d {
    /// Row-major index of the best target pixel.
    pub index: usize,
    pub pixel: [f64; 2],
    /// Cosine similarity at the best pixel.
    pub score: f64,
}

/// For each query descriptor, the target pixel of highest cosine similarity.
/// Ties go to the lowest row-major index.
pub fn correspond_descriptors(queries: &[Vec<f64>], target: &DescriptorMap) -> Result<Vec<Match2d>, TrackError> {
    let d = target.dim;
    let n = target.width * target.height;
    if let Some(q) = queries.iter().find(|q| q.len() != d) {
        return Err(TrackError::DimMismatch(q.len(), d));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let qn: Vec<f64> = queries.iter().flat_map(|q| normalize(q.clone())).collect();
    let mut scores = vec![0.0; queries.len() * n];
    crate::nn::matmul(queries.len(), d, n, &qn, false, &target.data, true, 0.0, &mut scores);
    let inv_norm: Vec<f64> = (0..n)
        .map(|i| {
            let s = target.at(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if s > 0.0 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, s) in row.iter().enumerate() {
                let c = s * inv_norm[i];
                if c > best_score {
                    best_score = c;
                    best = i;
                }
            }
            Match2d {
                index: best,
                pixel: [(best % target.width) as f64, (best / target.width) as f64],
                score: best_score,
            }
        })
        .collect())
}

/// Sample each query pixel in `dq` and find its best match in `dt`.
pub fn correspond(
    dq: &DescriptorMap,
    dt: &DescriptorMap,
    queries: &[[f64; 2]],
    sampler: &dyn FeatureSampler,
) -> Result<Vec<Match2d>, TrackError> {
    if dq.dim != dt.dim {
        return Err(TrackError::DimMismatch(dq.dim, dt.dim));
    }
    let descs = queries
        .iter()
        .map(|&p| sample_descriptor(dq, p, sampler))
        .collect::<Result<Vec<_>, _>>()?;
    correspond_descriptors(&descs, dt)
}

/// Everything the tracker reads from one (query frame, target frame) pair.
#[derive(Debug, Clone)]
pub struct PairOutputs {
    pub desc_query: DescriptorMap,
    pub desc_target: DescriptorMap,
    pub vis_logits_query: Vec<f64>,
    /// Per-pixel points of the target frame in the query camera frame.
    pub points_target: Vec<Vector3<f64>>,
    pub points_query: Vec<Vector3<f64>>,
}

/// Where per-pair descriptors, visibility and pointmaps come from.
pub trait CorrespondenceSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn pair(&self, video: &Video, query_frame: usize, target_frame: usize) -> Result<PairOutputs, TrackError>;
}

/// Runs the network on `(I^{t_q}, I^t)`.
pub struct ModelSource {
    pub params: ModelParams,
}

impl CorrespondenceSource for ModelSource {
    fn name(&self) -> &'static str {
        "model"
    }

    fn pair(&self, video: &Video, tq: usize, t: usize) -> Result<PairOutputs, TrackError> {
        let (w, h) = (video.width(), video.height());
        let out = Model::new(&self.params).forward(&video.frames[tq].image, &video.frames[t].image, w, h)?;
        let [q, tv] = out.views;
        let to_points = |flat: &[f64]| flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        Ok(PairOutputs {
            points_target: to_points(&tv.points),
            points_query: to_points(&q.points),
            desc_query: q.descriptors,
            desc_target: tv.descriptors,
            vis_logits_query: q.vis_logits,
        })
    }
}

/// Ground truth injected in place of the network: every surfel gets a fixed
/// random unit code, pointmaps are exact and visibility is known.
pub struct OracleSource {
    pub dim: usize,
    pub salt: u64,
    /// Logit magnitude used for certain visibility.
    pub confidence_logit: f64,
}

impl Default for OracleSource {
    fn default() -> Self {
        OracleSource {
            dim: 64,
            salt: 0x5eed,
            confidence_logit: 12.0,
        }
    }
}

impl OracleSource {
    /// Deterministic code for a surfel id; empty pixels (`-1`) share one.
    pub fn code(&self, id: i32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.salt ^ (id as i64 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        normalize(v)
    }

    fn descriptors(&self, frame: &RenderedFrame) -> DescriptorMap {
        let data = frame.surfel_id.iter().flat_map(|&id| self.code(id)).collect();
        DescriptorMap {
            width: frame.width,
            height: frame.height,
            dim: self.dim,
            data,
        }
    }

    /// Depth unprojected at pixel centres, expressed in the query camera.
    fn points(frame: &RenderedFrame, cam: &Camera, qcam: &Camera) -> Vec<Vector3<f64>> {
        (0..frame.num_pixels())
            .map(|i| {
                if frame.is_valid(i) {
                    let px = Vector2::new((i % frame.width) as f64, (i / frame.width) as f64);
                    let pc = unproject_camera_frame(&px, frame.depth[i], &cam.intrinsics).expect("positive depth");
                    qcam.world_to_camera(&cam.camera_to_world(&pc))
                } else {
                    Vector3::zeros()
                }
            })
            .collect()
    }
}

impl CorrespondenceSource for OracleSource {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn pair(&self, video: &Video, tq: usize, t: usize) -> Result<PairOutputs, TrackError> {
        let (fq, ft) = (&video.frames[tq], &video.frames[t]);
        let qcam = &video.cameras[tq];
        let present: std::collections::HashSet<i32> = ft.surfel_id.iter().copied().filter(|&id| id >= 0).collect();
        let k = self.confidence_logit;
        let vis_logits_query = fq
            .surfel_id
            .iter()
            .map(|id| if present.contains(id) { k } else { -k })
            .collect();
        Ok(PairOutputs {
            desc_query: self.descriptors(fq),
            desc_target: self.descriptors(ft),
            vis_logits_query,
            points_target: Self::points(ft, &video.cameras[t], qcam),
            points_query: Self::points(fq, qcam, qcam),
        })
    }
}

/// Source of camera intrinsics for lifting 2D tracks.
pub trait IntrinsicsSource: Send + Sync {
    fn name(&self) -> &'static str;
    fn intrinsics(&self, camera: &Camera) -> Intrinsics;
}

pub struct GroundTruthIntrinsics;

impl IntrinsicsSource for GroundTruthIntrinsics {
    fn name(&self) -> &'static str {
        "gt"
    }

    fn intrinsics(&self, camera: &Camera) -> Intrinsics {
        camera.intrinsics
    }
}

/// Focal length equal to the image width, principal point at the centre.
pub struct EstimatedIntrinsics;

impl IntrinsicsSource for EstimatedIntrinsics {
    fn name(&self) -> &'static str {
        "estimated"
    }

    fn intrinsics(&self, camera: &Camera) -> Intrinsics {
        estimate_intrinsics(camera.width, camera.height)
    }
}

type Registry<T> = BTreeMap<&'static str, Box<T>>;

fn intrinsics_registry() -> &'static Registry<dyn IntrinsicsSource> {
    static REG: OnceLock<Registry<dyn IntrinsicsSource>> = OnceLock::new();
    REG.get_or_init(|| {
        let all: Vec<Box<dyn IntrinsicsSource>> = vec![Box::new(GroundTruthIntrinsics), Box::new(EstimatedIntrinsics)];
        all.into_iter().map(|s| (s.name(), s)).collect()
    })
}

pub fn intrinsics_source(name: &str) -> Result<&'static dyn IntrinsicsSource, TrackError> {
    let reg = intrinsics_registry();
    reg.get(name).map(|b| b.as_ref()).ok_or_else(|| TrackError::Unknown {
        kind: "intrinsics source",
        name: name.into(),
        options: reg.keys().copied().collect(),
    })
}

pub fn feature_sampler(name: &str) -> Result<&'static dyn FeatureSampler, TrackError> {
    sampler(name).ok_or_else(|| TrackError::Unknown {
        kind: "sampler",
        name: name.into(),
        options: crate::sampling::sampler_names(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Registered feature sampler name.
    pub sampling: String,
    /// Registered intrinsics source for the lifted mode.
    pub intrinsics: String,
    /// Parallel workers over frame pairs; results do not depend on it.
    pub workers: usize,
    pub visibility_threshold: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            sampling: "bilinear".into(),
            intrinsics: "gt".into(),
            workers: 1,
            visibility_threshold: 0.5,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sample_scalar(values: &[f64], taps: &Taps) -> f64 {
    taps.iter().map(|&(i, w)| w * values[i]).sum()
}

fn sample_point(points: &[Vector3<f64>], taps: &Taps) -> Vector3<f64> {
    taps.iter().fold(Vector3::zeros(), |acc, &(i, w)| acc + points[i] * w)
}

/// Run `job` over every item on up to `workers` threads and return results
/// in item order, whatever the scheduling.
pub fn run_ordered<T, R, F>(items: &[T], workers: usize, job: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

struct PairResult {
    /// Per query of the group: pixel, visible probability, optional point.
    entries: Vec<([f64; 2], f64, Option<[f64; 3]>)>,
}

/// Shared engine behind the tracker modes. When `fixed` is given its pixels
/// replace the argmax correspondences (pointmap lookup of known tracks).
fn track_pairs(
    video: &Video,
    source: &dyn CorrespondenceSource,
    queries: &[TrackQuery],
    cfg: &TrackConfig,
    with_points: bool,
    fixed: Option<&[Trajectory]>,
) -> Result<Vec<Trajectory>, TrackError> {
    let nf = video.num_frames();
    let (w, h) = (video.width(), video.height());
    let samp = feature_sampler(&cfg.sampling)?;
    for q in queries {
        video.check_frame(q.query_frame)?;
        check_bounds(q.pixel, w, h)?;
    }
    // queries grouped by query frame; all queries of a frame are tracked together
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry(q.query_frame).or_default().push(i);
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    for &tq in groups.keys() {
        for t in tq..nf {
            if t > tq || with_points {
                items.push((tq, t));
            }
        }
    }
    let results = run_ordered(&items, cfg.workers, |&(tq, t)| -> Result<PairResult, TrackError> {
        let members = &groups[&tq];
        let out = source.pair(video, tq, t)?;
        let qpix: Vec<[f64; 2]> = members.iter().map(|&i| queries[i].pixel).collect();
        let pixels: Vec<[f64; 2]> = if t == tq {
            qpix.clone()
        } else if let Some(fixed) = fixed {
            members.iter().map(|&i| fixed[i].points[t].pixel).collect()
        } else {
            correspond(&out.desc_query, &out.desc_target, &qpix, samp)?
                .into_iter()
                .map(|m| m.pixel)
                .collect()
        };
        let entries = qpix
            .iter()
            .zip(&pixels)
            .map(|(qp, px)| {
                let vis = if t == tq {
                    1.0
                } else {
                    sigmoid(sample_scalar(&out.vis_logits_query, &samp.taps(*qp, w, h)))
                };
                let point = with_points.then(|| {
                    let taps = samp.taps(*px, w, h);
                    let p = if t == tq {
                        sample_point(&out.points_query, &taps)
                    } else {
                        sample_point(&out.points_target, &taps)
                    };
                    [p.x, p.y, p.z]
                });
                (*px, vis, point)
            })
            .collect();
        Ok(PairResult { entries })
    });

    let mut trajs: Vec<Trajectory> = queries
        .iter()
        .map(|q| Trajectory {
            query: *q,
            points: vec![
                TrackPoint {
                    pixel: q.pixel,
                    visible_prob: 0.0,
                    point3d: None,
                    valid: false,
                };
                nf
            ],
        })
        .collect();
    for (&(tq, t), res) in items.iter().zip(results) {
        let res = res?;
        for (&qi, (px, vis, point)) in groups[&tq].iter().zip(res.entries) {
            trajs[qi].points[t] = TrackPoint {
                pixel: px,
                visible_prob: vis,
                point3d: point,
                valid: true,
            };
        }
    }
    // the identity pair needs no model when no points are requested
    for tr in trajs.iter_mut() {
        let tq = tr.query.query_frame;
        if !tr.points[tq].valid {
            tr.points[tq] = TrackPoint {
                pixel: tr.query.pixel,
                visible_prob: 1.0,
                point3d: None,
                valid: true,
            };
        }
    }
    Ok(trajs)
}

/// 2D trajectories in "first" query mode: frames before the query frame are
/// marked invalid.
pub fn track2d(
    video: &Video,
    source: &dyn CorrespondenceSource,
    queries: &[TrackQuery],
    cfg: &TrackConfig,
) -> Result<Vec<Trajectory>, TrackError> {
    track_pairs(video, source, queries, cfg, false, None)
}

/// 2D tracking plus the pointmap entry at each corresponded pixel.
pub fn track3d_pointmap(
    video: &Video,
    source: &dyn CorrespondenceSource,
    queries: &[TrackQuery],
    cfg: &TrackConfig,
) -> Result<Vec<Trajectory>, TrackError> {
    track_pairs(video, source, queries, cfg, true, None)
}

/// Read pointmaps at the pixels of existing trajectories instead of at
/// argmax correspondences.
pub fn pointmap_at_tracks(
    video: &Video,
    source: &dyn CorrespondenceSource,
    tracks: &[Trajectory],
    cfg: &TrackConfig,
) -> Result<Vec<Trajectory>, TrackError> {
    let queries: Vec<TrackQuery> = tracks.iter().map(|t| t.query).collect();
    let mut out = track_pairs(video, source, &queries, cfg, true, Some(tracks))?;
    for (o, t) in out.iter_mut().zip(tracks) {
        for (po, pt) in o.points.iter_mut().zip(&t.points) {
            po.visible_prob = pt.visible_prob;
            po.valid = pt.valid;
        }
    }
    Ok(out)
}

/// Lift 2D trajectories with per-frame depth: unproject at the tracked
/// pixel, then move into the query camera with the known relative pose.
/// Depth is read at the nearest pixel. A pixel without depth gets no 3D
/// point, which the 3D metric scores as a miss.
pub fn track3d_lifted(
    tracks: &[Trajectory],
    video: &Video,
    depth: &[Vec<f64>],
    intrinsics: &dyn IntrinsicsSource,
) -> Result<Vec<Trajectory>, TrackError> {
    let (w, h) = (video.width(), video.height());
    let mut out = tracks.to_vec();
    for tr in out.iter_mut() {
        let qcam = &video.cameras[tr.query.query_frame];
        for (t, p) in tr.points.iter_mut().enumerate() {
            if !p.valid {
                continue;
            }
            check_bounds(p.pixel, w, h)?;
            let x = (p.pixel[0].round().max(0.0) as usize).min(w - 1);
            let y = (p.pixel[1].round().max(0.0) as usize).min(h - 1);
            let z = depth[t][y * w + x];
            if !(z > 0.0) {
                continue;
            }
            let cam = &video.cameras[t];
            let k = intrinsics.intrinsics(cam);
            let pc = unproject_camera_frame(&Vector2::new(p.pixel[0], p.pixel[1]), z, &k)?;
            let q = qcam.world_to_camera(&cam.camera_to_world(&pc));
            p.point3d = Some([q.x, q.y, q.z]);
        }
    }
    Ok(out)
}

/// Ground-truth depth maps of a video.
pub fn gt_depth(video: &Video) -> Vec<Vec<f64>> {
    video.frames.iter().map(|f| f.depth.clone()).collect()
}

/// A tracking strategy selectable by name.
pub trait TrackerMode: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(
        &self,
        video: &Video,
        source: &dyn CorrespondenceSource,
        queries: &[TrackQuery],
        cfg: &TrackConfig,
    ) -> Result<Vec<Trajectory>, TrackError>;
}

pub struct Track2d;

impl TrackerMode for Track2d {
    fn name(&self) -> &'static str {
        "2d"
    }

    fn run(&self, video: &Video, source: &dyn CorrespondenceSource, queries: &[TrackQuery], cfg: &TrackConfig) -> Result<Vec<Trajectory>, TrackError> {
        track2d(video, source, queries, cfg)
    }
}

pub struct Track3dPointmap;

impl TrackerMode for Track3dPointmap {
    fn name(&self) -> &'static str {
        "3d-pointmap"
    }

    fn run(&self, video: &Video, source: &dyn CorrespondenceSource, queries: &[TrackQuery], cfg: &TrackConfig) -> Result<Vec<Trajectory>, TrackError> {
        track3d_pointmap(video, source, queries, cfg)
    }
}

/// 2D tracking lifted with ground-truth depth.
pub struct Track3dLifted;

impl TrackerMode for Track3dLifted {
    fn name(&self) -> &'static str {
        "3d-lifted"
    }

    fn run(&self, video: &Video, source: &dyn CorrespondenceSource, queries: &[TrackQuery], cfg: &TrackConfig) -> Result<Vec<Trajectory>, TrackError> {
        let tracks = track2d(video, source, queries, cfg)?;
        track3d_lifted(&tracks, video, &gt_depth(video), intrinsics_source(&cfg.intrinsics)?)
    }
}

fn mode_registry() -> &'static Registry<dyn TrackerMode> {
    static REG: OnceLock<Registry<dyn TrackerMode>> = OnceLock::new();
    REG.get_or_init(|| {
        let all: Vec<Box<dyn TrackerMode>> = vec![Box::new(Track2d), Box::new(Track3dPointmap), Box::new(Track3dLifted)];
        all.into_iter().map(|m| (m.name(), m)).collect()
    })
}

pub fn tracker_mode(name: &str) -> Result<&'static dyn TrackerMode, TrackError> {
    let reg = mode_registry();
    reg.get(name).map(|b| b.as_ref()).ok_or_else(|| TrackError::Unknown {
        kind: "tracker mode",
        name: name.into(),
        options: reg.keys().copied().collect(),
    })
}

pub fn tracker_mode_names() -> Vec<&'static str> {
    mode_registry().keys().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{Bilinear, Nearest};
    use crate::scene::{generate_scene, ground_truth_track, CameraPath, SceneSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn dmap(w: usize, h: usize, vecs: Vec<Vec<f64>>) -> DescriptorMap {
        let dim = vecs[0].len();
        DescriptorMap::new(w, h, dim, vecs.concat()).unwrap()
    }

    fn onehot(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn sample_integer_and_midpoint() {
        let d = dmap(2, 1, vec![onehot(2, 0), onehot(2, 1)]);
        assert_eq!(sample_descriptor(&d, [1.0, 0.0], &Bilinear).unwrap(), vec![0.0, 1.0]);
        let mid = sample_descriptor(&d, [0.5, 0.0], &Bilinear).unwrap();
        let r = 0.5f64.sqrt();
        assert_abs_diff_eq!(mid[0], r, epsilon = 1e-12);
        assert_abs_diff_eq!(mid[1], r, epsilon = 1e-12);
        assert_eq!(sample_descriptor(&d, [0.6, 0.0], &Nearest).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(sample_descriptor(&d, [1.6, 0.0], &Bilinear), Err(TrackError::OutOfBounds { .. })));
    }

    #[test]
    fn sample_matches_four_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h, dim) = (5, 4, 3);
        let vecs: Vec<Vec<f64>> = (0..w * h)
            .map(|_| normalize((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let d = dmap(w, h, vecs.clone());
        for _ in 0..20 {
            let x = rng.gen_range(0.0..(w - 1) as f64);
            let y = rng.gen_range(0.0..(h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let mut blend = vec![0.0; dim];
            for k in 0..dim {
                blend[k] = (1.0 - fx) * (1.0 - fy) * vecs[y0 * w + x0][k]
                    + fx * (1.0 - fy) * vecs[y0 * w + x0 + 1][k]
                    + (1.0 - fx) * fy * vecs[(y0 + 1) * w + x0][k]
                    + fx * fy * vecs[(y0 + 1) * w + x0 + 1][k];
            }
            let got = sample_descriptor(&d, [x, y], &Bilinear).unwrap();
            for (a, b) in got.iter().zip(normalize(blend)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correspond_identity_and_ties() {
        let (w, h) = (4, 3);
        let d = dmap(w, h, (0..w * h).map(|k| onehot(w * h, k)).collect());
        let qs: Vec<[f64; 2]> = (0..w * h).map(|k| [(k % w) as f64, (k / w) as f64]).collect();
        let m = correspond(&d, &d, &qs, &Bilinear).unwrap();
        for (k, mm) in m.iter().enumerate() {
            assert_eq!(mm.index, k);
            assert_abs_diff_eq!(mm.score, 1.0, epsilon = 1e-12);
        }
        // two identical target descriptors: lowest index wins
        let t = dmap(3, 1, vec![onehot(2, 1), onehot(2, 0), onehot(2, 0)]);
        let m = correspond_descriptors(&[vec![1.0, 0.0]], &t).unwrap();
        assert_eq!(m[0].index, 1);
        assert_eq!(m[0].pixel, [1.0, 0.0]);
    }

    #[test]
    fn correspond_finds_planted_descriptor() {
        let (w, h) = (8, 10);
        let mut vecs: Vec<Vec<f64>> = (0..w * h).map(|_| onehot(3, 1)).collect();
        vecs[7 * w + 5] = onehot(3, 0);
        let t = dmap(w, h, vecs);
        let m = correspond_descriptors(&[onehot(3, 0)], &t).unwrap();
        assert_eq!(m[0].pixel, [5.0, 7.0]);
    }

    proptest! {
        #[test]
        fn correspond_ignores_per_pixel_scale(
            seed in 0u64..1000,
            scales in prop::collection::vec(0.01f64..100.0, 12),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vecs: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let scaled: Vec<Vec<f64>> = vecs.iter().zip(&scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect();
            let q: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let a = correspond_descriptors(&q, &dmap(4, 3, vecs)).unwrap();
            let b = correspond_descriptors(&q, &dmap(4, 3, scaled)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(x.index, y.index);
            }
        }
    }

    fn small_scene(path: CameraPath) -> Scene {
        generate_scene(&SceneSpec {
            seed: 9,
            num_frames: 8,
            num_static_points: 1500,
            num_objects: 3,
            camera_path: path,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn gt_queries(scene: &Scene, video: &Video, n: usize) -> (Vec<TrackQuery>, Vec<GroundTruthTrack>) {
        let mut qs = Vec::new();
        let mut gts = Vec::new();
        let f0 = &video.frames[0];
        for idx in (0..f0.num_pixels()).step_by(f0.num_pixels() / n) {
            let id = f0.surfel_id[idx];
            if id < 0 {
                continue;
            }
            let (x, y) = f0.pixel_xy(idx);
            qs.push(TrackQuery {
                query_frame: 0,
                pixel: [x as f64, y as f64],
            });
            gts.push(ground_truth_track(scene, &video.frames, id as usize, 1e-4));
        }
        (qs, gts)
    }

    #[test]
    fn oracle_recovers_ground_truth_tracks() {
        let scene = small_scene(CameraPath::Pan { velocity: [0.02, 0.0, 0.0] });
        let video = Video::from_scene(&scene).unwrap();
        let (qs, gts) = gt_queries(&scene, &video, 40);
        let trajs = track2d(&video, &OracleSource::default(), &qs, &TrackConfig::default()).unwrap();
        let mut checked = 0;
        for (tr, gt) in trajs.iter().zip(&gts) {
            for t in 1..video.num_frames() {
                let p = &tr.points[t];
                assert!(p.valid);
                assert_eq!(p.visible(0.5), gt.visible[t]);
                if gt.visible[t] {
                    let g = gt.pixels[t].unwrap();
                    assert!((p.pixel[0] - g.x).abs() <= 0.5 && (p.pixel[1] - g.y).abs() <= 0.5);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn query_frame_entry_and_first_mode() {
        let scene = small_scene(CameraPath::Static);
        let video = Video::from_scene(&scene).unwrap();
        let last = video.num_frames() - 1;
        let q = TrackQuery {
            query_frame: last,
            pixel: [10.25, 7.5],
        };
        let trajs = track2d(&video, &OracleSource::default(), &[q], &TrackConfig::default()).unwrap();
        let tr = &trajs[0];
        assert!(tr.points[..last].iter().all(|p| !p.valid));
        assert_eq!(tr.points[last].pixel, q.pixel);
        assert!(tr.points[last].visible(0.5));
    }

    #[test]
    fn identical_frames_stay_put() {
        let scene = small_scene(CameraPath::Static);
        let mut video = Video::from_scene(&scene).unwrap();
        let f0 = video.frames[0].clone();
        video.frames.iter_mut().for_each(|f| *f = f0.clone());
        let q = TrackQuery {
            query_frame: 0,
            pixel: [20.0, 11.0],
        };
        let trajs = track2d(&video, &OracleSource::default(), &[q], &TrackConfig::default()).unwrap();
        assert!(trajs[0].points.iter().all(|p| p.pixel == q.pixel));
    }

    #[test]
    fn pointmap_and_lifted_agree_on_exact_tracks() {
        let scene = small_scene(CameraPath::Arc {
            velocity: [0.02, 0.0, 0.01],
            yaw_rate: 0.01,
        });
        let video = Video::from_scene(&scene).unwrap();
        let (_, gts) = gt_queries(&scene, &video, 30);
        // only frames where the surfel is visible carry a meaningful lookup
        let exact: Vec<Trajectory> = gts
            .iter()
            .map(|g| {
                let mut tr = Trajectory::from_ground_truth(g, 0, &video.cameras);
                for (t, p) in tr.points.iter_mut().enumerate() {
                    p.valid = g.visible[t];
                    p.pixel = p.pixel.map(f64::round);
                }
                tr.query.pixel = tr.points[0].pixel;
                tr
            })
            .collect();
        let cfg = TrackConfig {
            sampling: "nearest".into(),
            ..TrackConfig::default()
        };
        let pm = pointmap_at_tracks(&video, &OracleSource::default(), &exact, &cfg).unwrap();
        let lifted = track3d_lifted(&exact, &video, &gt_depth(&video), &GroundTruthIntrinsics).unwrap();
        let mut n = 0;
        for ((a, b), e) in pm.iter().zip(&lifted).zip(&exact) {
            for t in 0..video.num_frames() {
                if !e.points[t].valid {
                    continue;
                }
                let (pa, pb) = (a.points[t].point3d.unwrap(), b.points[t].point3d.unwrap());
                for k in 0..3 {
                    assert_abs_diff_eq!(pa[k], pb[k], epsilon = 1e-9);
                }
                n += 1;
            }
        }
        assert!(n > 50);
    }

    #[test]
    fn oracle_modes_share_depth() {
        let scene = small_scene(CameraPath::Arc {
            velocity: [0.03, 0.01, 0.0],
            yaw_rate: 0.01,
        });
        let video = Video::from_scene(&scene).unwrap();
        let (qs, _) = gt_queries(&scene, &video, 25);
        let cfg = TrackConfig::default();
        let oracle = OracleSource::default();
        let a = tracker_mode("3d-pointmap").unwrap().run(&video, &oracle, &qs, &cfg).unwrap();
        let b = tracker_mode("3d-lifted").unwrap().run(&video, &oracle, &qs, &cfg).unwrap();
        for (ta, tb) in a.iter().zip(&b) {
            for (pa, pb) in ta.points.iter().zip(&tb.points) {
                assert_eq!(pa.pixel, pb.pixel);
                let (x, y) = (pa.point3d.unwrap(), pb.point3d.unwrap());
                assert_abs_diff_eq!(x[2], y[2], epsilon = 1e-6);
                if pa.pixel == pa.pixel.map(f64::round) {
                    for k in 0..3 {
                        assert_abs_diff_eq!(x[k], y[k], epsilon = 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_without_depth_is_not_lifted() {
        let scene = small_scene(CameraPath::Static);
        let video = Video::from_scene(&scene).unwrap();
        let w = video.width();
        let i = video.frames[0].depth.iter().position(|&z| z > 0.0).unwrap();
        let q = TrackQuery {
            query_frame: 0,
            pixel: [(i % w) as f64, (i / w) as f64],
        };
        let trajs = track2d(&video, &OracleSource::default(), &[q], &TrackConfig::default()).unwrap();
        let mut depth = gt_depth(&video);
        depth[0][i] = 0.0;
        let lifted = track3d_lifted(&trajs, &video, &depth, &GroundTruthIntrinsics).unwrap();
        let full = track3d_lifted(&trajs, &video, &gt_depth(&video), &GroundTruthIntrinsics).unwrap();
        assert!(full[0].points[0].point3d.is_some());
        assert_eq!(lifted[0].points[0].point3d, None);
        assert_eq!(lifted[0].points[1..], full[0].points[1..]);
    }

    #[test]
    fn estimated_intrinsics_scale_out_under_pure_forward_motion() {
        // a point straight ahead moves only in depth, so a wrong focal
        // length rescales x and y while z stays exact
        let scene = small_scene(CameraPath::Pan { velocity: [0.0, 0.0, 0.02] });
        let video = Video::from_scene(&scene).unwrap();
        let k = video.cameras[0].intrinsics;
        let q = TrackQuery {
            query_frame: 0,
            pixel: [k.cx.round(), k.cy.round()],
        };
        let trajs = track2d(&video, &OracleSource::default(), &[q], &TrackConfig::default()).unwrap();
        let d = gt_depth(&video);
        let gt = track3d_lifted(&trajs, &video, &d, &GroundTruthIntrinsics).unwrap();
        let est = track3d_lifted(&trajs, &video, &d, &EstimatedIntrinsics).unwrap();
        for (a, b) in gt[0].points.iter().zip(&est[0].points) {
            let (a, b) = (a.point3d.unwrap(), b.point3d.unwrap());
            assert_abs_diff_eq!(a[2], b[2], epsilon = 1e-9);
        }
    }

    #[test]
    fn scheduling_invariance() {
        let scene = small_scene(CameraPath::Pan { velocity: [0.02, 0.0, 0.0] });
        let video = Video::from_scene(&scene).unwrap();
        let (mut qs, _) = gt_queries(&scene, &video, 20);
        qs.push(TrackQuery {
            query_frame: 3,
            pixel: [12.5, 20.25],
        });
        let one = TrackConfig::default();
        let many = TrackConfig { workers: 4, ..one.clone() };
        let oracle = OracleSource::default();
        let a = track3d_pointmap(&video, &oracle, &qs, &one).unwrap();
        let b = track3d_pointmap(&video, &oracle, &qs, &many).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn registries() {
        assert_eq!(tracker_mode_names(), vec!["2d", "3d-lifted", "3d-pointmap"]);
        assert!(matches!(tracker_mode("4d"), Err(TrackError::Unknown { .. })));
        assert_eq!(intrinsics_source("estimated").unwrap().name(), "estimated");
        assert!(feature_sampler("cubic").is_err());
    }

    #[test]
    fn run_ordered_keeps_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = run_ordered(&items, 6, |x| x * x);
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
    }
}
