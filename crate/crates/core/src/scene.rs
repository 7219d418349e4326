//! Scene geometry: Gaussians, pinhole cameras and two-view utilities.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::math;
use crate::sh;

/// Points closer than this to the image plane count as behind the camera.
pub const EPS_DEPTH: f64 = 1e-4;

/// Rays closer to parallel than this (radians) are rejected by triangulation.
pub const MIN_TRIANGULATION_ANGLE: f64 = 0.5 * core::f64::consts::PI / 180.0;

/// One anisotropic Gaussian primitive in its optimizable parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Unnormalized quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// SH coefficients, one RGB triple per basis function.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian {
    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3], sh_degree: usize) -> Self {
        let mut sh = alloc::vec![[0.0; 3]; sh::coeff_count(sh_degree)];
        sh[0] = sh::dc_from_color(color);
        Self {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(math::ln(scale)),
            opacity_logit: math::logit(opacity),
            sh,
        }
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(math::exp)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quaternion(self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_quaternion(self.unit_rotation())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_rs(self.unit_rotation(), self.scale())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    /// Number of scalar parameters for a given SH degree.
    pub const fn param_count(sh_degree: usize) -> usize {
        11 + 3 * sh::coeff_count(sh_degree)
    }

    /// Appends the parameters in the flat layout used by the optimizer:
    /// position (3), rotation (4), log-scale (3), opacity logit (1), SH (3 per coefficient).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.position.iter());
        out.extend_from_slice(&self.rotation);
        out.extend(self.log_scale.iter());
        out.push(self.opacity_logit);
        for c in &self.sh {
            out.extend_from_slice(c);
        }
    }

    pub fn read_params(&mut self, p: &[f64]) {
        self.position = Vector3::new(p[0], p[1], p[2]);
        self.rotation.copy_from_slice(&p[3..7]);
        self.log_scale = Vector3::new(p[7], p[8], p[9]);
        self.opacity_logit = p[10];
        for (k, c) in self.sh.iter_mut().enumerate() {
            c.copy_from_slice(&p[11 + 3 * k..14 + 3 * k]);
        }
    }
}

/// Offsets of the parameter groups inside the flat layout.
pub mod layout {
    pub const POSITION: core::ops::Range<usize> = 0..3;
    pub const ROTATION: core::ops::Range<usize> = 3..7;
    pub const LOG_SCALE: core::ops::Range<usize> = 7..10;
    pub const OPACITY: usize = 10;
    pub const SH_DC: core::ops::Range<usize> = 11..14;
    pub const SH_REST_START: usize = 14;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self { gaussians: Vec::new(), sh_degree }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) -> Result<()> {
        if g.sh.len() != sh::coeff_count(self.sh_degree) {
            return Err(Error::Shape(alloc::format!(
                "gaussian has {} SH coefficients, cloud degree {} needs {}",
                g.sh.len(),
                self.sh_degree,
                sh::coeff_count(self.sh_degree)
            )));
        }
        self.gaussians.push(g);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Gaussian::param_count(self.sh_degree)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.param_count());
        for g in &self.gaussians {
            g.write_params(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let stride = self.param_count();
        for (g, p) in self.gaussians.iter_mut().zip(flat.chunks_exact(stride)) {
            g.read_params(p);
        }
    }

    /// First Gaussian holding a non-finite parameter.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.gaussians.iter().position(|g| !g.is_finite())
    }
}

pub fn normalize_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = math::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix.
pub fn quaternion_from_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = 0.5 / math::sqrt(trace + 1.0);
        [0.25 / s, (r[(2, 1)] - r[(1, 2)]) * s, (r[(0, 2)] - r[(2, 0)]) * s, (r[(1, 0)] - r[(0, 1)]) * s]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = 2.0 * math::sqrt(1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]);
        [(r[(2, 1)] - r[(1, 2)]) / s, 0.25 * s, (r[(0, 1)] + r[(1, 0)]) / s, (r[(0, 2)] + r[(2, 0)]) / s]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = 2.0 * math::sqrt(1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]);
        [(r[(0, 2)] - r[(2, 0)]) / s, (r[(0, 1)] + r[(1, 0)]) / s, 0.25 * s, (r[(1, 2)] + r[(2, 1)]) / s]
    } else {
        let s = 2.0 * math::sqrt(1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]);
        [(r[(1, 0)] - r[(0, 1)]) / s, (r[(0, 2)] + r[(2, 0)]) / s, (r[(1, 2)] + r[(2, 1)]) / s, 0.25 * s]
    };
    normalize_quaternion(q)
}

/// `R diag(s)^2 R^T` for a unit quaternion `q` and positive scales `s`.
pub fn covariance_from_rs(q: [f64; 4], s: Vector3<f64>) -> Result<Matrix3<f64>> {
    if !q.iter().all(|v| v.is_finite()) || !s.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite rotation or scale".into()));
    }
    if s.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    let m = rotation_from_quaternion(normalize_quaternion(q)) * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Pinhole camera with a world-to-camera pose (`x_cam = R x_world + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Matrix3::identity(), Vector3::zeros())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("camera has non-finite entries".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidParameter("principal point outside the image".into()));
        }
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("camera rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// World-space direction of the ray through pixel `p` (not normalized,
    /// unit camera-space depth).
    pub fn pixel_ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        let d = Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * d
    }

    pub fn contains_pixel(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    pub fn same_intrinsics(&self, other: &Camera) -> bool {
        self.fx == other.fx
            && self.fy == other.fy
            && self.cx == other.cx
            && self.cy == other.cy
            && self.width == other.width
            && self.height == other.height
    }
}

/// Projects a world point; returns the pixel and the camera-space depth.
pub fn project_point(x: &Vector3<f64>, cam: &Camera) -> Result<(Vector2<f64>, f64)> {
    let p = cam.world_to_camera(x);
    if !(p.z > EPS_DEPTH) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    let px = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    Ok((px, p.z))
}

/// Ray-midpoint two-view triangulation.
pub fn triangulate_two_view(
    xi: &Vector2<f64>,
    xj: &Vector2<f64>,
    cam_i: &Camera,
    cam_j: &Camera,
) -> Result<Vector3<f64>> {
    let oi = cam_i.center();
    let oj = cam_j.center();
    if (oi - oj).norm() <= 1e-12 * (1.0 + oi.norm()) {
        return Err(Error::DegenerateGeometry("camera centers coincide".into()));
    }
    let di = cam_i.pixel_ray(xi).normalize();
    let dj = cam_j.pixel_ray(xj).normalize();
    let cos_angle = di.dot(&dj).clamp(-1.0, 1.0);
    if math::acos(cos_angle.abs()) < MIN_TRIANGULATION_ANGLE {
        return Err(Error::DegenerateGeometry("rays are nearly parallel".into()));
    }
    // Closest points oi + s di and oj + t dj.
    let w = oi - oj;
    let b = di.dot(&dj);
    let d = di.dot(&w);
    let e = dj.dot(&w);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    Ok(((oi + di * s) + (oj + dj * t)) * 0.5)
}

/// A pixel observation of a sparse point in the view with id `view`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub view: u32,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint {
    pub position: Vector3<f64>,
    pub observations: Vec<Observation>,
    /// Optional RGB in [0, 1], used for initialization when present.
    pub color: Option<[f64; 3]>,
}

impl SparsePoint {
    pub fn observed_in(&self, view: u32) -> bool {
        self.observations.iter().any(|o| o.view == view)
    }
}

/// Outcome of [`reprojection_error`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReprojectionReport {
    /// Sum of squared pixel residuals over the usable observations.
    pub total: f64,
    pub used: usize,
    /// `(point index, view id)` of observations skipped because the point is
    /// behind that camera.
    pub behind_camera: Vec<(usize, u32)>,
}

pub fn reprojection_error(points: &[SparsePoint], cams: &BTreeMap<u32, Camera>) -> Result<ReprojectionReport> {
    let mut report = ReprojectionReport::default();
    for (i, p) in points.iter().enumerate() {
        for obs in &p.observations {
            let cam = cams.get(&obs.view).ok_or(Error::UnknownView(obs.view))?;
            match project_point(&p.position, cam) {
                Ok((px, _)) => {
                    report.total += (px - obs.pixel).norm_squared();
                    report.used += 1;
                }
                Err(Error::BehindCamera { .. }) => report.behind_camera.push((i, obs.view)),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

/// Companion camera of a virtual rectified pair, displaced by `baseline`
/// along the camera x axis so that `cam` is the left view: a visible point
/// projects `fx * baseline / z` pixels further left in the returned camera.
pub fn right_pose(cam: &Camera, baseline: f64) -> Result<Camera> {
    if !(baseline >= 0.0) || !baseline.is_finite() {
        return Err(Error::InvalidParameter(alloc::format!("baseline {baseline} must be finite and >= 0")));
    }
    cam.validate()?;
    let mut right = cam.clone();
    if baseline > 0.0 {
        right.translation.x -= baseline;
    }
    Ok(right)
}
