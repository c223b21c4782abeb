//! Pinhole camera model, keypoint deprojection, task boxes and action masking.
//!
//! Extrinsics map world to camera: `p_cam = R p_world + t`. Deprojection of a
//! pixel `u` with z-depth `d` is `R^-1 (d K^-1 [u, 1] - t)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("degenerate depth {depth} at pixel ({u}, {v})")]
    DegenerateDepth { u: f64, v: f64, depth: f64 },

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("no keypoints to build a box from")]
    EmptyKeypoints,

    #[error("box does not intersect the workspace")]
    EmptyIntersection,

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("tcp {tcp:?} is outside the active box")]
    ConstraintViolation { tcp: [f64; 3] },
}

pub type GeometryResult<T> = std::result::Result<T, GeometryError>;

/// Depth source: pixel `(u, v)` to camera-frame z-depth in metres.
pub trait DepthLookup: Send + Sync {
    fn depth(&self, u: f64, v: f64) -> Option<f64>;
}

impl<F> DepthLookup for F
where
    F: Fn(f64, f64) -> Option<f64> + Send + Sync,
{
    fn depth(&self, u: f64, v: f64) -> Option<f64> {
        self(u, v)
    }
}

#[derive(Clone)]
pub struct CameraModel {
    k: Matrix3<f64>,
    k_inv: Matrix3<f64>,
    r: Matrix3<f64>,
    t: Vec3,
    pub width: u32,
    pub height: u32,
    depth: Arc<dyn DepthLookup>,
}

impl fmt::Debug for CameraModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CameraModel")
            .field("k", &self.k)
            .field("r", &self.r)
            .field("t", &self.t)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl CameraModel {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vec3,
        width: u32,
        height: u32,
        depth: Arc<dyn DepthLookup>,
    ) -> GeometryResult<Self> {
        if k[(0, 0)] == 0.0 || k[(1, 1)] == 0.0 {
            return Err(GeometryError::InvalidCamera("focal lengths must be nonzero".into()));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("intrinsics are singular".into()))?;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera("rotation is not orthonormal".into()));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera("image size must be positive".into()));
        }
        Ok(CameraModel { k, k_inv, r, t, width, height, depth })
    }

    /// Camera at `eye` looking at `target`, image x along `right`, y down.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        k: Matrix3<f64>,
        width: u32,
        height: u32,
        depth: Arc<dyn DepthLookup>,
    ) -> GeometryResult<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Self::new(k, r, t, width, height, depth)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.k
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    pub fn depth_at(&self, u: f64, v: f64) -> Option<f64> {
        self.depth.depth(u, v)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    /// World point of the ray through pixel `(u, v)` at z-depth `d`.
    pub fn ray_point(&self, u: f64, v: f64, d: f64) -> Vec3 {
        // R^-1 = R^T for a rotation.
        self.r.transpose() * (d * (self.k_inv * Vec3::new(u, v, 1.0)) - self.t)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelKeypoint {
    pub name: String,
    pub u_norm: u32,
    pub v_norm: u32,
    pub confidence: f64,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub name: String,
    pub p: Vec3,
}

impl WorldPoint {
    pub fn new(name: impl Into<String>, p: Vec3) -> Self {
        WorldPoint { name: name.into(), p }
    }
}

/// Axis-aligned box in the base frame; `size` holds full extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialConstraint {
    pub center: Vec3,
    pub size: Vec3,
}

impl SpatialConstraint {
    pub fn new(center: Vec3, size: Vec3) -> GeometryResult<Self> {
        let b = SpatialConstraint { center, size };
        b.validate()?;
        Ok(b)
    }

    pub fn from_bounds(lo: Vec3, hi: Vec3) -> GeometryResult<Self> {
        Self::new((lo + hi) * 0.5, hi - lo)
    }

    pub fn validate(&self) -> GeometryResult<()> {
        if !self.center.iter().chain(self.size.iter()).all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite entries".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "sizes must be positive, got {:?}",
                self.size.as_slice()
            )));
        }
        Ok(())
    }

    pub fn lo(&self) -> Vec3 {
        self.center - self.size * 0.5
    }

    pub fn hi(&self) -> Vec3 {
        self.center + self.size * 0.5
    }

    pub fn half_diagonal(&self) -> f64 {
        self.size.norm() * 0.5
    }

    /// `[cx, cy, cz, sx, sy, sz, 0, 0, 0]`; the trailing rotation is always zero.
    pub fn to_bbox_3d(&self) -> [f64; 9] {
        [
            self.center.x,
            self.center.y,
            self.center.z,
            self.size.x,
            self.size.y,
            self.size.z,
            0.0,
            0.0,
            0.0,
        ]
    }

    pub fn from_bbox_3d(v: &[f64]) -> GeometryResult<Self> {
        if v.len() != 9 {
            return Err(GeometryError::InvalidBox(format!("bbox_3d needs 9 numbers, got {}", v.len())));
        }
        if v[6..].iter().any(|&r| r != 0.0) {
            return Err(GeometryError::InvalidBox("rotated boxes are not supported".into()));
        }
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    /// Intersection with `other`, if non-empty.
    pub fn intersect(&self, other: &SpatialConstraint) -> GeometryResult<Self> {
        let lo = self.lo().sup(&other.lo());
        let hi = self.hi().inf(&other.hi());
        if (0..3).any(|i| hi[i] <= lo[i]) {
            return Err(GeometryError::EmptyIntersection);
        }
        Self::from_bounds(lo, hi)
    }

    /// Nearest point of the box.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        let (lo, hi) = (self.lo(), self.hi());
        Vec3::from_fn(|i, _| p[i].clamp(lo[i], hi[i]))
    }
}

/// `[0, 1000]` integer coordinates to pixels.
pub fn denormalize_pixel(kp: &PixelKeypoint, width: u32, height: u32) -> (f64, f64) {
    (
        kp.u_norm as f64 / 1000.0 * width as f64,
        kp.v_norm as f64 / 1000.0 * height as f64,
    )
}

/// Pixels to `[0, 1000]` integer coordinates, `round(px / size * 1000)`.
pub fn normalize_pixel(u: f64, v: f64, width: u32, height: u32) -> (u32, u32) {
    let f = |x: f64, s: u32| (x / s as f64 * 1000.0).round().clamp(0.0, 1000.0) as u32;
    (f(u, width), f(v, height))
}

pub fn deproject(cam: &CameraModel, u: f64, v: f64) -> GeometryResult<Vec3> {
    let d = cam.depth_at(u, v).unwrap_or(f64::NAN);
    if !(d > 0.0 && d.is_finite()) {
        return Err(GeometryError::DegenerateDepth { u, v, depth: d });
    }
    Ok(cam.ray_point(u, v, d))
}

/// Pinhole projection `K (R p + t)`; returns pixel coordinates and z-depth.
pub fn project(cam: &CameraModel, p: &Vec3) -> GeometryResult<(f64, f64, f64)> {
    let pc = cam.to_camera(p);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let h = cam.k * pc;
    Ok((h.x / h.z, h.y / h.z, pc.z))
}

/// Tight box around keypoints: AABB grown by `margins` per side, extents
/// raised to `min_size`, then clipped to `workspace`.
pub fn bbox_from_keypoints(
    points: &[WorldPoint],
    margins: Vec3,
    min_size: Vec3,
    workspace: &SpatialConstraint,
) -> GeometryResult<SpatialConstraint> {
    let first = points.first().ok_or(GeometryError::EmptyKeypoints)?;
    let mut lo = first.p;
    let mut hi = first.p;
    for wp in &points[1..] {
        lo = lo.inf(&wp.p);
        hi = hi.sup(&wp.p);
    }
    lo -= margins;
    hi += margins;
    let center = (lo + hi) * 0.5;
    let size = (hi - lo).sup(&min_size);
    if size.iter().any(|&s| s <= 0.0) {
        return Err(GeometryError::InvalidBox("zero-extent box; add margins or min_size".into()));
    }
    SpatialConstraint { center, size }.intersect(workspace)
}

/// Closed-box membership.
pub fn contains(b: &SpatialConstraint, p: &Vec3) -> bool {
    (0..3).all(|i| (p[i] - b.center[i]).abs() <= b.size[i] * 0.5)
}

/// Per-axis clip of the translational part of `delta` so that `tcp + delta`
/// stays inside the box. Rotational and further components pass through.
pub fn clamp_action_to_box(
    tcp: &Vec3,
    delta: &[f64; 6],
    b: &SpatialConstraint,
) -> GeometryResult<[f64; 6]> {
    if !contains(b, tcp) {
        return Err(GeometryError::ConstraintViolation { tcp: [tcp.x, tcp.y, tcp.z] });
    }
    let mut out = *delta;
    let (lo, hi) = (b.lo(), b.hi());
    for i in 0..3 {
        let target = tcp[i] + delta[i];
        if target < lo[i] || target > hi[i] || (target - b.center[i]).abs() > b.size[i] * 0.5 {
            let mut d = target.clamp(lo[i], hi[i]) - tcp[i];
            // Shrink toward zero until the sum lands inside under the exact
            // membership test; a few ulps at most.
            while (tcp[i] + d - b.center[i]).abs() > b.size[i] * 0.5 && d != 0.0 {
                d = if d > 0.0 { f64::from_bits(d.to_bits() - 1) } else { -f64::from_bits((-d).to_bits() - 1) };
            }
            out[i] = d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_depth(d: f64) -> Arc<dyn DepthLookup> {
        Arc::new(move |_: f64, _: f64| Some(d))
    }

    fn identity_cam(t: Vec3, d: f64) -> CameraModel {
        CameraModel::new(Matrix3::identity(), Matrix3::identity(), t, 640, 480, const_depth(d)).unwrap()
    }

    fn kp(u: u32, v: u32) -> PixelKeypoint {
        PixelKeypoint { name: "k".into(), u_norm: u, v_norm: v, confidence: 1.0, description: String::new() }
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize_pixel(&kp(500, 500), 848, 480), (424.0, 240.0));
        assert_eq!(denormalize_pixel(&kp(0, 0), 848, 480), (0.0, 0.0));
        assert_eq!(denormalize_pixel(&kp(1000, 1000), 640, 480), (640.0, 480.0));
    }

    #[test]
    fn deproject_identity() {
        let p = deproject(&identity_cam(Vec3::zeros(), 1.0), 3.0, 4.0).unwrap();
        assert_eq!(p, Vec3::new(3.0, 4.0, 1.0));
        let p = deproject(&identity_cam(Vec3::new(0.0, 0.0, -1.0), 1.0), 3.0, 4.0).unwrap();
        assert_eq!(p, Vec3::new(3.0, 4.0, 2.0));
    }

    #[test]
    fn deproject_bad_depth() {
        let cam = identity_cam(Vec3::zeros(), 0.0);
        assert!(matches!(deproject(&cam, 1.0, 1.0), Err(GeometryError::DegenerateDepth { .. })));
    }

    #[test]
    fn project_identity() {
        let cam = identity_cam(Vec3::zeros(), 1.0);
        assert_eq!(project(&cam, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), (0.0, 0.0, 1.0));
        assert_eq!(project(&cam, &Vec3::new(2.0, 4.0, 2.0)).unwrap(), (1.0, 2.0, 2.0));
        assert!(matches!(project(&cam, &Vec3::new(0.0, 0.0, -1.0)), Err(GeometryError::BehindCamera(_))));
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let r = Matrix3::identity() * 2.0;
        assert!(CameraModel::new(Matrix3::identity(), r, Vec3::zeros(), 1, 1, const_depth(1.0)).is_err());
        let mut k = Matrix3::identity();
        k[(0, 0)] = 0.0;
        assert!(CameraModel::new(k, Matrix3::identity(), Vec3::zeros(), 1, 1, const_depth(1.0)).is_err());
    }

    fn big_ws() -> SpatialConstraint {
        SpatialConstraint::new(Vec3::zeros(), Vec3::repeat(10.0)).unwrap()
    }

    #[test]
    fn bbox_examples() {
        let p = Vec3::new(0.5, 0.1, 0.2);
        let b = bbox_from_keypoints(&[WorldPoint::new("a", p)], Vec3::repeat(0.01), Vec3::zeros(), &big_ws()).unwrap();
        assert!((b.center - p).norm() < 1e-12);
        assert!((b.size - Vec3::repeat(0.02)).norm() < 1e-12);

        let pts = [WorldPoint::new("a", p), WorldPoint::new("b", p + Vec3::new(0.0, 0.0, 0.1))];
        let b = bbox_from_keypoints(&pts, Vec3::zeros(), Vec3::new(0.01, 0.02, 0.0), &big_ws()).unwrap();
        assert!((b.size - Vec3::new(0.01, 0.02, 0.1)).norm() < 1e-12);
    }

    #[test]
    fn bbox_errors() {
        assert_eq!(
            bbox_from_keypoints(&[], Vec3::zeros(), Vec3::zeros(), &big_ws()),
            Err(GeometryError::EmptyKeypoints)
        );
        let far = [WorldPoint::new("a", Vec3::new(100.0, 0.0, 0.0))];
        assert_eq!(
            bbox_from_keypoints(&far, Vec3::repeat(0.01), Vec3::zeros(), &big_ws()),
            Err(GeometryError::EmptyIntersection)
        );
    }

    #[test]
    fn contains_boundary() {
        let b = SpatialConstraint::new(Vec3::zeros(), Vec3::new(0.02, 0.02, 0.02)).unwrap();
        assert!(contains(&b, &Vec3::zeros()));
        assert!(contains(&b, &Vec3::new(0.01, 0.0, 0.0)));
        assert!(!contains(&b, &Vec3::new(0.01 + 2e-9, 0.0, 0.0)));
    }

    #[test]
    fn clamp_examples() {
        let b = SpatialConstraint::new(Vec3::zeros(), Vec3::new(0.02, 0.1, 0.1)).unwrap();
        let d = [0.001, -0.002, 0.003, 0.1, 0.2, 0.3];
        assert_eq!(clamp_action_to_box(&Vec3::zeros(), &d, &b).unwrap(), d);
        let d = [0.05, 0.0, 0.0, 0.1, 0.0, 0.0];
        let out = clamp_action_to_box(&Vec3::zeros(), &d, &b).unwrap();
        assert!((out[0] - 0.01).abs() < 1e-15);
        assert_eq!(out[3], 0.1);
        assert!(clamp_action_to_box(&Vec3::new(1.0, 0.0, 0.0), &d, &b).is_err());
    }

    #[test]
    fn bbox_3d_layout() {
        let b = SpatialConstraint::from_bbox_3d(&[0.5, 0.0, 0.2, 0.02, 0.01, 0.05, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(b.center, Vec3::new(0.5, 0.0, 0.2));
        assert_eq!(b.size, Vec3::new(0.02, 0.01, 0.05));
        assert_eq!(b.to_bbox_3d(), [0.5, 0.0, 0.2, 0.02, 0.01, 0.05, 0.0, 0.0, 0.0]);
        assert!(SpatialConstraint::from_bbox_3d(&[0.5, 0.0, 0.2, -0.01, 0.01, 0.05, 0.0, 0.0, 0.0]).is_err());
        assert!(SpatialConstraint::from_bbox_3d(&[0.5, 0.0]).is_err());
    }
}
