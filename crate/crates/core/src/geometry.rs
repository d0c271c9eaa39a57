//! Pinhole camera model, rigid transforms, inter-view pixel transfer and the
//! per-pixel confidence weights used when splatting.
//!
//! Depth is z-depth (distance along the optical axis), not ray length.
//! Pixel coordinates are continuous with integer values at pixel centers.

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

/// Default depth cut-off in meters.
pub const DEFAULT_DEPTH_THRESHOLD: f64 = 3.0;

const ORTHONORMAL_TOL: f64 = 1e-9;
const DEGENERATE_NORMAL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("point is not in front of the camera")]
    NotProjectable,
    #[error("depth must be strictly positive")]
    InvalidDepth,
    #[error("transferred point lies behind the target camera")]
    BehindCamera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Half of the horizontal field of view, radians.
    pub omega: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        omega: f64,
    ) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            omega,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel camera whose horizontal half field of view is `omega`,
    /// with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < FRAC_PI_2) {
            return Err(Error::Config(format!("omega {omega} outside (0, pi/2)")));
        }
        let f = (width as f64 / 2.0) / omega.tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            omega,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.omega > 0.0 && self.omega < FRAC_PI_2) {
            return Err(Error::Config(format!("omega {} outside (0, pi/2)", self.omega)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64)
            || !(self.cy >= 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Config("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Unit-depth ray through `pixel`: deproject(pixel, 1).
    #[inline]
    pub fn ray(&self, pixel: Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn contains(&self, pixel: Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

/// Rigid view-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.abs().max() > ORTHONORMAL_TOL {
            return Err(Error::Config("rotation is not orthonormal".into()));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Config("rotation determinant is not +1".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation: t,
        }
    }

    /// Camera at `eye` whose optical axis (+z) points at `target`, with
    /// image +y roughly along `down`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self {
            rotation,
            translation: eye,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub id: usize,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl CameraView {
    /// Transform taking points in this view's frame into `target`'s frame.
    pub fn relative_to(&self, target: &CameraView) -> Pose {
        target.pose.inverse().compose(&self.pose)
    }
}

/// Row-major z-depth raster in meters; `0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Config(format!(
                "depth buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Zero every value outside `(0, threshold]`.
    pub fn threshold(&mut self, threshold: f64) {
        for d in &mut self.data {
            if !(*d > 0.0 && *d <= threshold) {
                *d = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// Depth-uncertainty scale in meters.
    pub sigma_d: f64,
    pub radial: bool,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            sigma_d: DEFAULT_DEPTH_THRESHOLD,
            radial: true,
        }
    }
}

#[inline]
pub fn project(point: &Vector3<f64>, intr: &Intrinsics) -> std::result::Result<Vector2<f64>, GeometryError> {
    if !(point.z > 0.0) {
        return Err(GeometryError::NotProjectable);
    }
    Ok(Vector2::new(
        intr.fx * point.x / point.z + intr.cx,
        intr.fy * point.y / point.z + intr.cy,
    ))
}

#[inline]
pub fn deproject(
    pixel: Vector2<f64>,
    depth: f64,
    intr: &Intrinsics,
) -> std::result::Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::InvalidDepth);
    }
    Ok(intr.ray(pixel) * depth)
}

/// Where a source pixel lands in a target view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer {
    pub pixel: Vector2<f64>,
    /// z of the transformed point in the target frame.
    pub depth: f64,
}

/// Transfer of a pixel with known depth given the relative transform
/// source-to-target. Out-of-bounds landings are returned as-is.
#[inline]
pub fn transfer_with(
    pixel_s: Vector2<f64>,
    depth_s: f64,
    intr_s: &Intrinsics,
    rel: &Pose,
    intr_t: &Intrinsics,
) -> std::result::Result<Transfer, GeometryError> {
    let p = rel.apply(&deproject(pixel_s, depth_s, intr_s)?);
    let pixel = project(&p, intr_t).map_err(|_| GeometryError::BehindCamera)?;
    Ok(Transfer { pixel, depth: p.z })
}

/// Map an integer source pixel with its stored depth into the target view.
pub fn transfer(
    pixel_s: (usize, usize),
    depth_s: &DepthMap,
    view_s: &CameraView,
    view_t: &CameraView,
) -> std::result::Result<Transfer, GeometryError> {
    let d = depth_s.get(pixel_s.0, pixel_s.1);
    let rel = view_s.relative_to(view_t);
    transfer_with(
        Vector2::new(pixel_s.0 as f64, pixel_s.1 as f64),
        d,
        &view_s.intrinsics,
        &rel,
        &view_t.intrinsics,
    )
}

#[inline]
pub fn depth_confidence(d: f64, params: &ConfidenceParams) -> f64 {
    (-d / params.sigma_d).exp()
}

/// Field-of-view distortion confidence, `exp(r/R(r) - 1)`, which is 1 at
/// the principal point and decays outward. The radius is measured in
/// normalized image-plane units.
pub fn radial_confidence(pixel: Vector2<f64>, intr: &Intrinsics) -> f64 {
    let ray = intr.ray(pixel);
    let r = (ray.x * ray.x + ray.y * ray.y).sqrt();
    let tan_omega = intr.omega.tan();
    // The limit of r/R at r -> 0 is 1; below this radius the series is exact
    // to double precision.
    if r < 1e-6 {
        let a = r * tan_omega;
        return (-(a * a) / 3.0).exp();
    }
    let max_arg = FRAC_PI_2 * (1.0 - 1e-9);
    let arg = (r * tan_omega).min(max_arg);
    let r_eff = arg / tan_omega;
    let big_r = arg.tan() / tan_omega;
    (r_eff / big_r - 1.0).exp()
}

#[inline]
pub fn pixel_confidence(
    pixel: Vector2<f64>,
    d: f64,
    intr: &Intrinsics,
    params: &ConfidenceParams,
) -> f64 {
    let wr = if params.radial {
        radial_confidence(pixel, intr)
    } else {
        1.0
    };
    depth_confidence(d, params) * wr
}

/// Per-pixel unit normals of the surface described by a depth map. `None`
/// where the pixel is invalid or lacks a valid neighbor along x or y.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.normals[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.normals.iter().filter(|n| n.is_some()).count()
    }
}

/// Stencil choice for one tangent direction: `(plus, minus)` pixel indices,
/// tangent = v(plus) - v(minus).
#[inline]
fn stencil(
    depth: &DepthMap,
    x: usize,
    y: usize,
    horizontal: bool,
) -> Option<(usize, usize)> {
    let (w, h) = (depth.width, depth.height);
    let idx = |x: usize, y: usize| y * w + x;
    let here = idx(x, y);
    let (next, prev) = if horizontal {
        (
            (x + 1 < w).then(|| idx(x + 1, y)),
            (x > 0).then(|| idx(x - 1, y)),
        )
    } else {
        (
            (y + 1 < h).then(|| idx(x, y + 1)),
            (y > 0).then(|| idx(x, y - 1)),
        )
    };
    let next = next.filter(|&i| depth.data[i] > 0.0);
    let prev = prev.filter(|&i| depth.data[i] > 0.0);
    match (next, prev) {
        (Some(n), Some(p)) => Some((n, p)),
        (Some(n), None) => Some((n, here)),
        (None, Some(p)) => Some((here, p)),
        (None, None) => None,
    }
}

#[inline]
fn point_at(depth: &DepthMap, intr: &Intrinsics, i: usize) -> Vector3<f64> {
    let x = (i % depth.width) as f64;
    let y = (i / depth.width) as f64;
    intr.ray(Vector2::new(x, y)) * depth.data[i]
}

/// Unnormalized normal `ty × tx` and the stencil that produced it.
#[inline]
fn raw_normal(
    depth: &DepthMap,
    intr: &Intrinsics,
    x: usize,
    y: usize,
) -> Option<(Vector3<f64>, (usize, usize), (usize, usize))> {
    if !depth.is_valid(x, y) {
        return None;
    }
    let sx = stencil(depth, x, y, true)?;
    let sy = stencil(depth, x, y, false)?;
    let tx = point_at(depth, intr, sx.0) - point_at(depth, intr, sx.1);
    let ty = point_at(depth, intr, sy.0) - point_at(depth, intr, sy.1);
    let m = ty.cross(&tx);
    if m.norm() < DEGENERATE_NORMAL {
        return None;
    }
    Some((m, sx, sy))
}

/// Central-difference normals of deprojected points, falling back to
/// one-sided differences at borders and next to invalid pixels. Normals
/// face the camera (negative z for a frontal plane).
pub fn compute_normals(depth: &DepthMap, intr: &Intrinsics) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let mut normals = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            normals.push(raw_normal(depth, intr, x, y).map(|(m, _, _)| m / m.norm()));
        }
    }
    NormalMap {
        width: w,
        height: h,
        normals,
    }
}

/// Back-propagate `upstream[p] = dL/dn(p)` through [`compute_normals`] to
/// the depth values. Entries of `upstream` at normal-invalid pixels are
/// ignored.
pub fn normals_backward(
    depth: &DepthMap,
    intr: &Intrinsics,
    upstream: &[Vector3<f64>],
) -> Vec<f64> {
    let (w, h) = (depth.width, depth.height);
    let mut grad = vec![0.0; w * h];
    let ray = |i: usize| intr.ray(Vector2::new((i % w) as f64, (i / w) as f64));
    for y in 0..h {
        for x in 0..w {
            let g_n = upstream[y * w + x];
            if g_n == Vector3::zeros() {
                continue;
            }
            let Some((m, sx, sy)) = raw_normal(depth, intr, x, y) else {
                continue;
            };
            let norm = m.norm();
            let n = m / norm;
            let g_m = (g_n - n * n.dot(&g_n)) / norm;
            let tx = point_at(depth, intr, sx.0) - point_at(depth, intr, sx.1);
            let ty = point_at(depth, intr, sy.0) - point_at(depth, intr, sy.1);
            // m = ty × tx
            let g_ty = tx.cross(&g_m);
            let g_tx = g_m.cross(&ty);
            grad[sx.0] += ray(sx.0).dot(&g_tx);
            grad[sx.1] -= ray(sx.1).dot(&g_tx);
            grad[sy.0] += ray(sy.0).dot(&g_ty);
            grad[sy.1] -= ray(sy.1).dot(&g_ty);
        }
    }
    grad
}
