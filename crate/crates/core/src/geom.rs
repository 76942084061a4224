//! Pinhole camera geometry and pointmap helpers.
//!
//! Conventions: right-handed frames, the camera looks down +z, pixel
//! coordinates have their origin at the top-left pixel centre with x to the
//! right and y down. Integer pixel coordinates address pixel centres.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Default world-space tolerance separating static from dynamic matches.
pub const DEFAULT_STATIC_EPS: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("pointmap has no valid pixel")]
    EmptyPointMap,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Intrinsics guess used when calibration is unavailable: focal length equal
/// to the image width and the principal point at the image centre.
pub fn estimate_intrinsics(width: usize, height: usize) -> Intrinsics {
    let w = width as f64;
    Intrinsics {
        fx: w,
        fy: w,
        cx: w / 2.0,
        cy: height as f64 / 2.0,
    }
}

/// A calibrated camera with a world-to-camera pose: `p_cam = R p_world + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let cam = Camera {
            rotation,
            translation,
            intrinsics,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z.
    pub fn identity(intrinsics: Intrinsics, width: usize, height: usize) -> Result<Self, GeomError> {
        Self::new(Matrix3::identity(), Vector3::zeros(), intrinsics, width, height)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeomError::InvalidCamera("rotation is not a proper rotation".into()));
        }
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(GeomError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&k.cx) || !(0.0..self.height as f64).contains(&k.cy) {
            return Err(GeomError::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Transform taking points in this camera's frame into `other`'s frame.
    pub fn relative_to(&self, other: &Camera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.rotation * self.rotation.transpose();
        let t = other.translation - r * self.translation;
        (r, t)
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Whether a (possibly fractional) pixel lies inside the sampled image area.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Project a world point, returning its pixel and camera-frame depth.
pub fn project(point: &Vector3<f64>, camera: &Camera) -> Result<(Vector2<f64>, f64), GeomError> {
    let pc = camera.world_to_camera(point);
    project_camera_frame(&pc, &camera.intrinsics)
}

/// Project a point already expressed in the camera frame.
pub fn project_camera_frame(pc: &Vector3<f64>, k: &Intrinsics) -> Result<(Vector2<f64>, f64), GeomError> {
    if pc.z <= MIN_DEPTH {
        return Err(GeomError::NonPositiveDepth(pc.z));
    }
    Ok((
        Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
        pc.z,
    ))
}

/// Lift a pixel at the given depth into the camera frame.
pub fn unproject_camera_frame(pixel: &Vector2<f64>, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>, GeomError> {
    if depth <= MIN_DEPTH {
        return Err(GeomError::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (pixel.x - k.cx) / k.fx * depth,
        (pixel.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Lift a pixel at the given depth into world coordinates.
pub fn unproject(pixel: &Vector2<f64>, depth: f64, camera: &Camera) -> Result<Vector3<f64>, GeomError> {
    let pc = unproject_camera_frame(pixel, depth, &camera.intrinsics)?;
    Ok(camera.camera_to_world(&pc))
}

/// Dense per-pixel 3D coordinates in a declared reference frame together with
/// a confidence map and validity mask. Storage is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMapBundle {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
    /// Index of the view whose camera frame the points are expressed in.
    pub reference_view: usize,
}

impl PointMapBundle {
    pub fn new(
        width: usize,
        height: usize,
        points: Vec<Vector3<f64>>,
        valid: Vec<bool>,
        reference_view: usize,
    ) -> Result<Self, GeomError> {
        let n = width * height;
        if points.len() != n || valid.len() != n {
            return Err(GeomError::ShapeMismatch(format!(
                "expected {n} pixels, got {} points and {} mask entries",
                points.len(),
                valid.len()
            )));
        }
        Ok(PointMapBundle {
            width,
            height,
            points,
            confidence: vec![1.0; n],
            valid,
            reference_view,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Express world points in the frame of `reference`. Invalid entries are
/// copied through untouched.
pub fn to_reference_frame(
    width: usize,
    height: usize,
    world_points: &[Vector3<f64>],
    valid: &[bool],
    reference: &Camera,
    reference_view: usize,
) -> Result<PointMapBundle, GeomError> {
    let points = world_points
        .iter()
        .zip(valid)
        .map(|(p, &ok)| if ok { reference.world_to_camera(p) } else { *p })
        .collect();
    PointMapBundle::new(width, height, points, valid.to_vec(), reference_view)
}

/// Mean distance from the origin over valid pixels.
pub fn norm_factor(bundle: &PointMapBundle) -> Result<f64, GeomError> {
    norm_factor_masked(&bundle.points, &bundle.valid)
}

pub fn norm_factor_masked(points: &[Vector3<f64>], valid: &[bool]) -> Result<f64, GeomError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, _) in points.iter().zip(valid).filter(|(_, v)| **v) {
        sum += p.norm();
        count += 1;
    }
    if count == 0 {
        return Err(GeomError::EmptyPointMap);
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchKind {
    Static,
    Dynamic,
}

/// Label a correspondence by whether its world point moved between frames.
pub fn classify_match(i_world: &Vector3<f64>, j_world: &Vector3<f64>, eps: f64) -> MatchKind {
    if (i_world - j_world).norm() <= eps {
        MatchKind::Static
    } else {
        MatchKind::Dynamic
    }
}

/// Rotation about an arbitrary axis (Rodrigues).
pub fn axis_angle(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}
