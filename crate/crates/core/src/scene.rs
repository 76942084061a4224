//! Synthetic dynamic scenes with exact ground truth.
//!
//! A scene is a textured static backdrop plus a handful of rigid textured
//! disks that translate (bouncing inside a box, so piecewise linear) and spin
//! at a constant rate. Frames are rendered by splatting every surfel to its
//! nearest pixel with a z-buffer, which keeps per-pixel correspondences exact.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, axis_angle, classify_match, Camera, GeomError, Intrinsics, MatchKind, PointMapBundle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("frame index {index} out of range for {num_frames} frames")]
    FrameOutOfRange { index: usize, num_frames: usize },
    #[error("a training pair needs two distinct frames, got {0} twice")]
    SameFrame(usize),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Parametric camera trajectory. Frame 0 always sits at the world origin
/// looking down +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraPath {
    Static,
    /// Constant-velocity translation of the camera centre (world units/frame).
    Pan { velocity: [f64; 3] },
    /// Translation plus a constant yaw rate (radians/frame) about the y axis.
    Arc { velocity: [f64; 3], yaw_rate: f64 },
}

impl CameraPath {
    fn pose(&self, t: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let tf = t as f64;
        let (center, yaw) = match *self {
            CameraPath::Static => (Vector3::zeros(), 0.0),
            CameraPath::Pan { velocity } => (Vector3::from(velocity) * tf, 0.0),
            CameraPath::Arc { velocity, yaw_rate } => (Vector3::from(velocity) * tf, yaw_rate * tf),
        };
        // camera-to-world rotation is a yaw; invert for world-to-camera
        let r_cw = axis_angle(&Vector3::y(), yaw);
        let r = r_cw.transpose();
        (r, -(r * center))
    }

    pub fn is_static(&self) -> bool {
        match *self {
            CameraPath::Static => true,
            CameraPath::Pan { velocity } => velocity == [0.0; 3],
            CameraPath::Arc { velocity, yaw_rate } => velocity == [0.0; 3] && yaw_rate == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexturePalette {
    /// Disjoint high-contrast palettes for backdrop and objects, with
    /// per-surfel colour jitter.
    HighContrast,
    /// Same palette for backdrop and objects.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub num_static_points: usize,
    pub num_objects: usize,
    /// Object speed bounds in scene units per frame.
    pub object_speed_range: [f64; 2],
    /// Upper bound on an object's spin rate (radians/frame).
    pub max_spin: f64,
    pub camera_path: CameraPath,
    pub texture_palette: TexturePalette,
    /// Focal length as a fraction of the image width.
    pub focal_scale: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_frames: 48,
            width: 64,
            height: 48,
            num_static_points: 4000,
            num_objects: 8,
            object_speed_range: [0.03, 0.08],
            max_spin: 0.01,
            camera_path: CameraPath::Static,
            texture_palette: TexturePalette::HighContrast,
            focal_scale: 0.9,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.num_frames < 2 {
            return Err(SceneError::InvalidSpec("num_frames must be at least 2".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SceneError::InvalidSpec("resolution must be at least 8x8".into()));
        }
        let [lo, hi] = self.object_speed_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(SceneError::InvalidSpec("object speeds must satisfy 0 <= min <= max".into()));
        }
        if !(self.max_spin >= 0.0) {
            return Err(SceneError::InvalidSpec("max_spin must be non-negative".into()));
        }
        if !(self.focal_scale > 0.0) {
            return Err(SceneError::InvalidSpec("focal_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.focal_scale * self.width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidMotion {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// A rigid cluster of surfels in object-local coordinates with one pose per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub surfels: Vec<Surfel>,
    pub motions: Vec<RigidMotion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub static_surfels: Vec<Surfel>,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<Camera>,
    object_offsets: Vec<usize>,
}

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_surfels(&self) -> usize {
        self.object_offsets.last().copied().unwrap_or(self.static_surfels.len())
    }

    fn locate(&self, id: usize) -> Option<(usize, usize)> {
        if id < self.static_surfels.len() {
            return None;
        }
        let obj = self.object_offsets.partition_point(|&off| off <= id) - 1;
        Some((obj, id - self.object_offsets[obj]))
    }

    /// Object index owning a surfel, or `None` for backdrop surfels.
    pub fn owner(&self, id: usize) -> Option<usize> {
        self.locate(id).map(|(o, _)| o)
    }

    pub fn surfel_world(&self, id: usize, frame: usize) -> Vector3<f64> {
        match self.locate(id) {
            None => self.static_surfels[id].position,
            Some((o, k)) => {
                let obj = &self.objects[o];
                obj.motions[frame].apply(&obj.surfels[k].position)
            }
        }
    }

    pub fn surfel_color(&self, id: usize) -> [f64; 3] {
        match self.locate(id) {
            None => self.static_surfels[id].color,
            Some((o, k)) => self.objects[o].surfels[k].color,
        }
    }

    pub fn check_frame(&self, frame: usize) -> Result<(), SceneError> {
        if frame >= self.num_frames() {
            return Err(SceneError::FrameOutOfRange {
                index: frame,
                num_frames: self.num_frames(),
            });
        }
        Ok(())
    }
}

const BACKDROP_DEPTH: f64 = 5.0;
const BACKDROP_RELIEF: f64 = 0.25;
const OBJECT_DEPTH: [f64; 2] = [2.4, 4.0];
const OBJECT_RADIUS: [f64; 2] = [0.25, 0.4];
const COLOR_JITTER: f64 = 0.06;
const NEAR_PLANE: f64 = 1e-3;

const BACKDROP_PALETTE: [[f64; 3]; 6] = [
    [0.92, 0.92, 0.86],
    [0.18, 0.22, 0.30],
    [0.58, 0.42, 0.24],
    [0.30, 0.56, 0.34],
    [0.62, 0.62, 0.74],
    [0.12, 0.12, 0.12],
];
const OBJECT_PALETTE: [[f64; 3]; 6] = [
    [1.00, 0.10, 0.10],
    [0.10, 0.30, 1.00],
    [1.00, 0.85, 0.00],
    [0.90, 0.20, 0.90],
    [0.00, 0.90, 0.90],
    [1.00, 0.50, 0.00],
];

fn jittered(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

/// Triangle-wave reflection of `x` into `[lo, hi]`.
fn bounce(x: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    let u = (x - lo).rem_euclid(2.0 * len);
    if u <= len {
        lo + u
    } else {
        lo + 2.0 * len - u
    }
}

fn backdrop_depth(x: f64, y: f64, phase: [f64; 2]) -> f64 {
    BACKDROP_DEPTH + BACKDROP_RELIEF * (1.3 * x + phase[0]).sin() * (1.7 * y + phase[1]).cos()
}

/// Build a scene. The result is a pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics();
    let (w, h) = (spec.width, spec.height);

    let cameras = (0..spec.num_frames)
        .map(|t| {
            let (r, tr) = spec.camera_path.pose(t);
            Camera::new(r, tr, k, w, h)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (obj_palette, bg_palette): (&[[f64; 3]], &[[f64; 3]]) = match spec.texture_palette {
        TexturePalette::HighContrast => (&OBJECT_PALETTE, &BACKDROP_PALETTE),
        TexturePalette::Shared => (&OBJECT_PALETTE, &OBJECT_PALETTE),
    };

    // backdrop extent: union of all frustum footprints at the backdrop depth
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for cam in &cameras {
        for (u, v) in [(-0.5, -0.5), (w as f64 - 0.5, -0.5), (-0.5, h as f64 - 0.5), (w as f64 - 0.5, h as f64 - 0.5)] {
            let ray = cam.rotation.transpose()
                * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let c = cam.center();
            let s = (BACKDROP_DEPTH - c.z) / ray.z.max(1e-6);
            let p = c + ray * s;
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
    }
    let margin = 0.04 * (xmax - xmin).max(ymax - ymin);
    let (xmin, xmax, ymin, ymax) = (xmin - margin, xmax + margin, ymin - margin, ymax + margin);
    let phase = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)];

    let cell = 0.35;
    let ncells = (((xmax - xmin) * (ymax - ymin)) / (cell * cell)).ceil().max(1.0) as usize;
    let cells: Vec<(Vector2<f64>, [f64; 3])> = (0..ncells)
        .map(|_| {
            (
                Vector2::new(rng.gen_range(xmin..xmax), rng.gen_range(ymin..ymax)),
                bg_palette[rng.gen_range(0..bg_palette.len())],
            )
        })
        .collect();

    let aspect = (xmax - xmin) / (ymax - ymin);
    let ny = ((spec.num_static_points as f64 / aspect).sqrt().round() as usize).max(1);
    let nx = if spec.num_static_points == 0 { 0 } else { spec.num_static_points.div_ceil(ny) };
    let mut static_surfels = Vec::with_capacity(spec.num_static_points);
    'grid: for iy in 0..ny {
        for ix in 0..nx {
            if static_surfels.len() == spec.num_static_points {
                break 'grid;
            }
            let x = xmin + (ix as f64 + 0.5) * (xmax - xmin) / nx as f64;
            let y = ymin + (iy as f64 + 0.5) * (ymax - ymin) / ny as f64;
            let here = Vector2::new(x, y);
            let base = cells
                .iter()
                .min_by(|a, b| (a.0 - here).norm_squared().total_cmp(&(b.0 - here).norm_squared()))
                .map(|c| c.1)
                .unwrap_or(bg_palette[0]);
            static_surfels.push(Surfel {
                position: Vector3::new(x, y, backdrop_depth(x, y, phase)),
                color: jittered(&mut rng, base),
            });
        }
    }

    let mut objects = Vec::with_capacity(spec.num_objects);
    let mut object_offsets = vec![static_surfels.len()];
    let [smin, smax] = spec.object_speed_range;
    for _ in 0..spec.num_objects {
        let depth = rng.gen_range(OBJECT_DEPTH[0]..OBJECT_DEPTH[1]);
        let radius = rng.gen_range(OBJECT_RADIUS[0]..OBJECT_RADIUS[1]);
        // bounce box: the frame-0 frustum at this depth, shrunk by the radius
        let half_w = 0.5 * w as f64 / k.fx * depth - radius;
        let half_h = 0.5 * h as f64 / k.fy * depth - radius;
        let lo = Vector3::new(-half_w.max(0.0), -half_h.max(0.0), depth - 0.3);
        let hi = Vector3::new(half_w.max(0.0), half_h.max(0.0), depth + 0.3);
        let start = Vector3::new(
            rng.gen_range(lo.x..=hi.x),
            rng.gen_range(lo.y..=hi.y),
            depth,
        );
        let speed = if smax > smin { rng.gen_range(smin..smax) } else { smin };
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let vz = rng.gen_range(-0.2..0.2);
        let velocity = Vector3::new(heading.cos(), heading.sin(), vz).normalize() * speed;
        let spin = rng.gen_range(-1.0..1.0) * spec.max_spin;
        let spin0 = rng.gen_range(0.0..std::f64::consts::TAU);
        let tilt = axis_angle(
            &Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0),
            rng.gen_range(0.0..0.3),
        );

        let sectors: Vec<[f64; 3]> = (0..4).map(|_| obj_palette[rng.gen_range(0..obj_palette.len())]).collect();
        let core = obj_palette[rng.gen_range(0..obj_palette.len())];
        let spacing = OBJECT_DEPTH[0] / k.fx / 1.4;
        let n = (radius / spacing).ceil() as i64;
        let mut surfels = Vec::new();
        for iy in -n..=n {
            for ix in -n..=n {
                let local = Vector2::new(ix as f64 * spacing, iy as f64 * spacing);
                let r = local.norm();
                if r > radius {
                    continue;
                }
                let base = if r < 0.45 * radius {
                    core
                } else {
                    let ang = local.y.atan2(local.x).rem_euclid(std::f64::consts::TAU);
                    sectors[((ang / std::f64::consts::FRAC_PI_2) as usize).min(3)]
                };
                surfels.push(Surfel {
                    position: Vector3::new(local.x, local.y, 0.0),
                    color: jittered(&mut rng, base),
                });
            }
        }

        let motions = (0..spec.num_frames)
            .map(|t| {
                let tf = t as f64;
                let p = start + velocity * tf;
                let translation = Vector3::new(bounce(p.x, lo.x, hi.x), bounce(p.y, lo.y, hi.y), bounce(p.z, lo.z, hi.z));
                let rotation = tilt * axis_angle(&Vector3::z(), spin0 + spin * tf);
                RigidMotion { rotation, translation }
            })
            .collect();
        object_offsets.push(object_offsets.last().unwrap() + surfels.len());
        objects.push(SceneObject { surfels, motions });
    }

    Ok(Scene {
        spec: spec.clone(),
        static_surfels,
        objects,
        cameras,
        object_offsets,
    })
}

/// One rendered view. All per-pixel arrays are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB in [0, 1].
    pub image: Vec<f64>,
    /// Camera-frame depth, 0 where no surfel landed.
    pub depth: Vec<f64>,
    /// World position of the surfel seen at each pixel.
    pub world_points: Vec<Vector3<f64>>,
    /// Winning surfel per pixel, -1 where empty.
    pub surfel_id: Vec<i32>,
}

impl RenderedFrame {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.surfel_id[idx] >= 0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.surfel_id.iter().map(|&id| id >= 0).collect()
    }

    pub fn pixel_xy(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }

    /// Map from surfel id to the pixel index where it is visible.
    pub fn visibility_index(&self, num_surfels: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_surfels];
        for (idx, &id) in self.surfel_id.iter().enumerate() {
            if id >= 0 {
                out[id as usize] = Some(idx);
            }
        }
        out
    }
}

/// Nearest pixel a projection lands on, if inside the image.
pub fn splat_pixel(pixel: &Vector2<f64>, width: usize, height: usize) -> Option<(usize, usize)> {
    let x = pixel.x.round();
    let y = pixel.y.round();
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some((x as usize, y as usize))
}

/// Point-splat z-buffer rasterizer. Equal depths resolve to the lower id.
pub fn render(scene: &Scene, frame: usize) -> Result<RenderedFrame, SceneError> {
    scene.check_frame(frame)?;
    let cam = &scene.cameras[frame];
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let mut depth = vec![f64::INFINITY; n];
    let mut ids = vec![-1i32; n];
    let mut world = vec![Vector3::zeros(); n];
    for id in 0..scene.num_surfels() {
        let p = scene.surfel_world(id, frame);
        let pc = cam.world_to_camera(&p);
        if pc.z <= NEAR_PLANE {
            continue;
        }
        let (px, z) = geom::project_camera_frame(&pc, &cam.intrinsics)?;
        let Some((x, y)) = splat_pixel(&px, w, h) else { continue };
        let idx = y * w + x;
        if z < depth[idx] {
            depth[idx] = z;
            ids[idx] = id as i32;
            world[idx] = p;
        }
    }
    let mut image = vec![0.0; 3 * n];
    for idx in 0..n {
        if ids[idx] >= 0 {
            image[3 * idx..3 * idx + 3].copy_from_slice(&scene.surfel_color(ids[idx] as usize));
        } else {
            depth[idx] = 0.0;
        }
    }
    Ok(RenderedFrame {
        width: w,
        height: h,
        image,
        depth,
        world_points: world,
        surfel_id: ids,
    })
}

pub fn render_all(scene: &Scene) -> Result<Vec<RenderedFrame>, SceneError> {
    (0..scene.num_frames()).map(|t| render(scene, t)).collect()
}

/// Per-surfel ground-truth trajectory across every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub surfel_id: usize,
    /// Exact sub-pixel projection, `None` when behind the camera.
    pub pixels: Vec<Option<Vector2<f64>>>,
    pub world: Vec<Vector3<f64>>,
    pub visible: Vec<bool>,
    pub is_dynamic: bool,
}

impl GroundTruthTrack {
    pub fn first_visible(&self) -> Option<usize> {
        self.visible.iter().position(|v| *v)
    }
}

pub fn ground_truth_track(
    scene: &Scene,
    frames: &[RenderedFrame],
    surfel_id: usize,
    eps: f64,
) -> GroundTruthTrack {
    let nf = scene.num_frames();
    let world: Vec<_> = (0..nf).map(|t| scene.surfel_world(surfel_id, t)).collect();
    let mut pixels = Vec::with_capacity(nf);
    let mut visible = Vec::with_capacity(nf);
    for t in 0..nf {
        let cam = &scene.cameras[t];
        let pc = cam.world_to_camera(&world[t]);
        let px = if pc.z > NEAR_PLANE {
            geom::project_camera_frame(&pc, &cam.intrinsics).ok().map(|(p, _)| p)
        } else {
            None
        };
        let vis = px
            .and_then(|p| splat_pixel(&p, cam.width, cam.height))
            .map(|(x, y)| frames[t].surfel_id[y * cam.width + x] == surfel_id as i32)
            .unwrap_or(false);
        pixels.push(px);
        visible.push(vis);
    }
    let is_dynamic = world
        .iter()
        .any(|p| classify_match(&world[0], p, eps) == MatchKind::Dynamic);
    GroundTruthTrack {
        surfel_id,
        pixels,
        world,
        visible,
        is_dynamic,
    }
}

/// A surfel visible in both frames of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub surfel_id: usize,
    /// Pixel index in view 1 / view 2.
    pub pixel1: usize,
    pub pixel2: usize,
    pub world1: Vector3<f64>,
    pub world2: Vector3<f64>,
    pub kind: MatchKind,
}

/// Two frames of a scene with everything the training losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePairSample {
    pub t1: usize,
    pub t2: usize,
    pub frame1: RenderedFrame,
    pub frame2: RenderedFrame,
    pub camera1: Camera,
    pub camera2: Camera,
    /// View-1 points in the view-1 camera frame.
    pub gt_points1: PointMapBundle,
    /// View-2 points (at time t2) in the view-1 camera frame.
    pub gt_points2: PointMapBundle,
    pub correspondences: Vec<Correspondence>,
    /// Per pixel of each view: whether its surfel is visible in the other
    /// view (`None` for empty pixels).
    pub vis_labels1: Vec<Option<bool>>,
    pub vis_labels2: Vec<Option<bool>>,
}

impl ScenePairSample {
    pub fn width(&self) -> usize {
        self.frame1.width
    }

    pub fn height(&self) -> usize {
        self.frame1.height
    }

    pub fn stride(&self) -> usize {
        self.t1.abs_diff(self.t2)
    }
}

/// Assemble a training pair from the two pre-rendered frames `t1` and `t2`.
pub fn ground_truth_pair_from_frames(
    scene: &Scene,
    f1: &RenderedFrame,
    f2: &RenderedFrame,
    t1: usize,
    t2: usize,
    eps: f64,
) -> Result<ScenePairSample, SceneError> {
    scene.check_frame(t1)?;
    scene.check_frame(t2)?;
    if t1 == t2 {
        return Err(SceneError::SameFrame(t1));
    }
    let cam1 = scene.cameras[t1].clone();
    let cam2 = scene.cameras[t2].clone();
    let ns = scene.num_surfels();
    let where1 = f1.visibility_index(ns);
    let where2 = f2.visibility_index(ns);

    let mut correspondences = Vec::new();
    for (p1, &id) in f1.surfel_id.iter().enumerate() {
        if id < 0 {
            continue;
        }
        if let Some(p2) = where2[id as usize] {
            let world1 = f1.world_points[p1];
            let world2 = f2.world_points[p2];
            correspondences.push(Correspondence {
                surfel_id: id as usize,
                pixel1: p1,
                pixel2: p2,
                world1,
                world2,
                kind: classify_match(&world1, &world2, eps),
            });
        }
    }
    let labels = |f: &RenderedFrame, other: &[Option<usize>]| -> Vec<Option<bool>> {
        f.surfel_id
            .iter()
            .map(|&id| (id >= 0).then(|| other[id as usize].is_some()))
            .collect()
    };
    let vis_labels1 = labels(f1, &where2);
    let vis_labels2 = labels(f2, &where1);

    let gt_points1 = geom::to_reference_frame(f1.width, f1.height, &f1.world_points, &f1.valid_mask(), &cam1, 1)?;
    let gt_points2 = geom::to_reference_frame(f2.width, f2.height, &f2.world_points, &f2.valid_mask(), &cam1, 1)?;

    Ok(ScenePairSample {
        t1,
        t2,
        frame1: f1.clone(),
        frame2: f2.clone(),
        camera1: cam1,
        camera2: cam2,
        gt_points1,
        gt_points2,
        correspondences,
        vis_labels1,
        vis_labels2,
    })
}

pub fn ground_truth_pair(scene: &Scene, t1: usize, t2: usize, eps: f64) -> Result<ScenePairSample, SceneError> {
    scene.check_frame(t1)?;
    scene.check_frame(t2)?;
    if t1 == t2 {
        return Err(SceneError::SameFrame(t1));
    }
    let f1 = render(scene, t1)?;
    let f2 = render(scene, t2)?;
    ground_truth_pair_from_frames(scene, &f1, &f2, t1, t2, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::DEFAULT_STATIC_EPS;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            num_frames: 12,
            width: 32,
            height: 24,
            num_static_points: 1000,
            num_objects: 3,
            ..SceneSpec::default()
        }
    }

    fn single_surfel_scene(points: &[(Vector3<f64>, [f64; 3])]) -> Scene {
        let spec = SceneSpec {
            num_frames: 2,
            width: 16,
            height: 12,
            num_static_points: 0,
            num_objects: 0,
            ..SceneSpec::default()
        };
        let mut scene = generate_scene(&spec).unwrap();
        scene.static_surfels = points
            .iter()
            .map(|(p, c)| Surfel { position: *p, color: *c })
            .collect();
        scene.object_offsets = vec![scene.static_surfels.len()];
        scene
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small_spec(5)).unwrap();
        let b = generate_scene(&small_spec(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(render(&a, 3).unwrap(), render(&b, 3).unwrap());
        let c = generate_scene(&small_spec(6)).unwrap();
        assert_ne!(a.static_surfels, c.static_surfels);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec(0);
        s.num_frames = 1;
        assert!(generate_scene(&s).is_err());
        let mut s = small_spec(0);
        s.width = 7;
        assert!(generate_scene(&s).is_err());
        let mut s = small_spec(0);
        s.object_speed_range = [-0.1, 0.1];
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn single_surfel_on_axis() {
        let scene = single_surfel_scene(&[(Vector3::new(0.0, 0.0, 1.0), [1.0, 0.0, 0.0])]);
        let k = scene.cameras[0].intrinsics;
        let f = render(&scene, 0).unwrap();
        let valid: Vec<usize> = (0..f.num_pixels()).filter(|&i| f.is_valid(i)).collect();
        assert_eq!(valid.len(), 1);
        let (x, y) = f.pixel_xy(valid[0]);
        assert_eq!((x as f64, y as f64), (k.cx.round(), k.cy.round()));
        assert_eq!(f.depth[valid[0]], 1.0);
    }

    #[test]
    fn zbuffer_keeps_nearest() {
        let scene = single_surfel_scene(&[
            (Vector3::new(0.0, 0.0, 2.0), [0.0, 0.0, 1.0]),
            (Vector3::new(0.0, 0.0, 1.0), [1.0, 0.0, 0.0]),
        ]);
        let f = render(&scene, 0).unwrap();
        let idx = (0..f.num_pixels()).find(|&i| f.is_valid(i)).unwrap();
        assert_eq!(f.surfel_id[idx], 1);
        assert_eq!(f.depth[idx], 1.0);
        assert_eq!(&f.image[3 * idx..3 * idx + 3], &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn rendered_pixels_reproject() {
        for path in [
            CameraPath::Static,
            CameraPath::Arc { velocity: [0.02, 0.0, 0.01], yaw_rate: 0.01 },
        ] {
            let mut spec = small_spec(11);
            spec.camera_path = path;
            let scene = generate_scene(&spec).unwrap();
            for t in [0, 5, 11] {
                let f = render(&scene, t).unwrap();
                let cam = &scene.cameras[t];
                for idx in 0..f.num_pixels() {
                    if !f.is_valid(idx) {
                        assert_eq!(f.depth[idx], 0.0);
                        continue;
                    }
                    let (x, y) = f.pixel_xy(idx);
                    let (px, d) = geom::project(&f.world_points[idx], cam).unwrap();
                    assert!((px.x - x as f64).abs() <= 0.5 && (px.y - y as f64).abs() <= 0.5);
                    assert!((d - f.depth[idx]).abs() < 1e-6);
                    assert_eq!(f.world_points[idx], scene.surfel_world(f.surfel_id[idx] as usize, t));
                }
            }
        }
    }

    #[test]
    fn visibility_matches_brute_force() {
        let mut spec = small_spec(2);
        spec.camera_path = CameraPath::Pan { velocity: [0.03, 0.0, 0.0] };
        let scene = generate_scene(&spec).unwrap();
        let frames = render_all(&scene).unwrap();
        for t in [0, 7] {
            let cam = &scene.cameras[t];
            let proj: Vec<Option<(usize, usize, f64)>> = (0..scene.num_surfels())
                .map(|id| {
                    let pc = cam.world_to_camera(&scene.surfel_world(id, t));
                    if pc.z <= NEAR_PLANE {
                        return None;
                    }
                    let (px, d) = geom::project_camera_frame(&pc, &cam.intrinsics).ok()?;
                    splat_pixel(&px, cam.width, cam.height).map(|(x, y)| (x, y, d))
                })
                .collect();
            for id in (0..scene.num_surfels()).step_by(7) {
                let track = ground_truth_track(&scene, &frames, id, DEFAULT_STATIC_EPS);
                let expected = match proj[id] {
                    None => false,
                    Some((x, y, d)) => proj.iter().enumerate().all(|(other, q)| match q {
                        Some((ox, oy, od)) if *ox == x && *oy == y => *od > d || (*od == d && other >= id),
                        _ => true,
                    }),
                };
                assert_eq!(track.visible[t], expected, "surfel {id} frame {t}");
            }
        }
    }

    #[test]
    fn static_world_constancy_and_rigidity() {
        let scene = generate_scene(&small_spec(8)).unwrap();
        for id in (0..scene.static_surfels.len()).step_by(13) {
            let a = scene.surfel_world(id, 0);
            for t in 1..scene.num_frames() {
                assert!((scene.surfel_world(id, t) - a).norm() <= 1e-12);
            }
        }
        for obj in &scene.objects {
            for m in &obj.motions {
                let r = &m.rotation;
                assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_objects_means_all_static() {
        let mut spec = small_spec(3);
        spec.num_objects = 0;
        spec.camera_path = CameraPath::Pan { velocity: [0.02, 0.01, 0.0] };
        let scene = generate_scene(&spec).unwrap();
        let pair = ground_truth_pair(&scene, 0, 9, DEFAULT_STATIC_EPS).unwrap();
        assert!(!pair.correspondences.is_empty());
        assert!(pair.correspondences.iter().all(|c| c.kind == MatchKind::Static));
    }

    #[test]
    fn motionless_object_is_static() {
        let mut spec = small_spec(4);
        spec.num_objects = 1;
        spec.object_speed_range = [0.0, 0.0];
        spec.max_spin = 0.0;
        let scene = generate_scene(&spec).unwrap();
        let first = scene.static_surfels.len();
        for id in first..scene.num_surfels() {
            assert_eq!(
                classify_match(&scene.surfel_world(id, 0), &scene.surfel_world(id, 11), DEFAULT_STATIC_EPS),
                MatchKind::Static
            );
        }
    }

    #[test]
    fn pair_rejects_same_frame() {
        let scene = generate_scene(&small_spec(1)).unwrap();
        assert_eq!(ground_truth_pair(&scene, 2, 2, DEFAULT_STATIC_EPS), Err(SceneError::SameFrame(2)));
        assert!(matches!(
            ground_truth_pair(&scene, 0, 99, DEFAULT_STATIC_EPS),
            Err(SceneError::FrameOutOfRange { .. })
        ));
    }

    #[test]
    fn static_scene_pair_is_identity() {
        let mut spec = small_spec(9);
        spec.num_objects = 0;
        let scene = generate_scene(&spec).unwrap();
        let pair = ground_truth_pair(&scene, 1, 10, DEFAULT_STATIC_EPS).unwrap();
        assert!(!pair.correspondences.is_empty());
        for c in &pair.correspondences {
            assert_eq!(c.kind, MatchKind::Static);
            assert_eq!(c.pixel1, c.pixel2);
        }
        assert!(pair.vis_labels1.iter().flatten().all(|v| *v));
    }

    #[test]
    fn translated_object_displacement_matches_projection() {
        let spec = SceneSpec {
            num_frames: 2,
            num_static_points: 0,
            num_objects: 1,
            ..SceneSpec::default()
        };
        let mut scene = generate_scene(&spec).unwrap();
        let m0 = scene.objects[0].motions[0].clone();
        scene.objects[0].motions[1] = RigidMotion {
            rotation: m0.rotation,
            translation: m0.translation + Vector3::new(0.1, 0.0, 0.0),
        };
        let pair = ground_truth_pair(&scene, 0, 1, DEFAULT_STATIC_EPS).unwrap();
        assert!(!pair.correspondences.is_empty());
        let cam = &scene.cameras[0];
        for c in &pair.correspondences {
            assert_eq!(c.kind, MatchKind::Dynamic);
            let (a, _) = geom::project(&c.world1, cam).unwrap();
            let (b, _) = geom::project(&(c.world1 + Vector3::new(0.1, 0.0, 0.0)), cam).unwrap();
            let predicted = b - a;
            let (x1, y1) = pair.frame1.pixel_xy(c.pixel1);
            let (x2, y2) = pair.frame2.pixel_xy(c.pixel2);
            let observed = Vector2::new(x2 as f64 - x1 as f64, y2 as f64 - y1 as f64);
            // each endpoint is quantized by at most half a pixel per axis
            assert!((observed - predicted).abs().max() <= 1.0);
            let exact_target = a + predicted;
            assert!((exact_target.x - x2 as f64).abs() <= 0.5 && (exact_target.y - y2 as f64).abs() <= 0.5);
        }
    }

    #[test]
    fn default_scene_coverage() {
        let scene = generate_scene(&SceneSpec::default()).unwrap();
        let pair = ground_truth_pair(&scene, 0, 10, DEFAULT_STATIC_EPS).unwrap();
        let visible_either = pair.vis_labels1.iter().flatten().count();
        let both = pair.correspondences.len();
        assert!(both as f64 >= 0.3 * visible_either as f64, "{both} of {visible_either}");
        assert!(pair.correspondences.iter().any(|c| c.kind == MatchKind::Dynamic));
    }

    #[test]
    fn bounce_is_piecewise_linear() {
        assert_eq!(bounce(0.5, 0.0, 1.0), 0.5);
        assert_eq!(bounce(1.5, 0.0, 1.0), 0.5);
        assert_eq!(bounce(2.25, 0.0, 1.0), 0.25);
        assert_eq!(bounce(-0.25, 0.0, 1.0), 0.25);
    }
}
