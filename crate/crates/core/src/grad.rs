//! Analytic backward pass of [`render_frame`](crate::raster::render_frame).
//!
//! Gradients flow through each splat's alpha (opacity, projected mean and
//! covariance), its color and its depth. The depth sort and the early-exit
//! cut are treated as constants.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, ScalarMap};
use crate::raster::{pixel_center, RenderedFrame, ALPHA_MAX, EPS_NORM};
use crate::scene::{layout, normalize_quaternion, rotation_from_quaternion, Camera, Gaussian, GaussianCloud};
use crate::sh;

/// Gradients for every Gaussian, in the flat layout of
/// [`Gaussian::write_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub stride: usize,
    pub values: Vec<f64>,
    /// Norm of the loss gradient w.r.t. the projected 2D mean (pixels).
    pub screen_grad: Vec<f64>,
    /// Whether the Gaussian survived culling in this view.
    pub visible: Vec<bool>,
}

impl ParamGrads {
    pub fn zeros(count: usize, sh_degree: usize) -> Self {
        let stride = Gaussian::param_count(sh_degree);
        Self { stride, values: vec![0.0; count * stride], screen_grad: vec![0.0; count], visible: vec![false; count] }
    }

    pub fn len(&self) -> usize {
        self.screen_grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.screen_grad.is_empty()
    }

    pub fn of(&self, i: usize) -> &[f64] {
        &self.values[i * self.stride..(i + 1) * self.stride]
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.of(i)[layout::POSITION])
    }

    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.of(i)[layout::ROTATION];
        [r[0], r[1], r[2], r[3]]
    }

    pub fn log_scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.of(i)[layout::LOG_SCALE])
    }

    pub fn opacity_logit(&self, i: usize) -> f64 {
        self.of(i)[layout::OPACITY]
    }

    pub fn sh(&self, i: usize, k: usize) -> [f64; 3] {
        let s = &self.of(i)[layout::SH_DC.start + 3 * k..layout::SH_DC.start + 3 * k + 3];
        [s[0], s[1], s[2]]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// Conic entries a, b (off-diagonal, counted once), c.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

/// Backpropagates per-pixel gradients of the color and normalized depth maps
/// to all Gaussian parameters.
pub fn backward_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    frame: &RenderedFrame,
    d_color: &Image,
    d_depth: &ScalarMap,
) -> Result<ParamGrads> {
    let shape = (frame.width, frame.height);
    if (cam.width, cam.height) != shape {
        return Err(Error::shape("camera", shape, (cam.width, cam.height)));
    }
    if d_color.shape() != shape {
        return Err(Error::shape("color gradient", shape, d_color.shape()));
    }
    if d_depth.shape() != shape {
        return Err(Error::shape("depth gradient", shape, d_depth.shape()));
    }

    let mut sg = vec![SplatGrad::default(); frame.splats.len()];
    let mut trans = Vec::new();

    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = y * frame.width + x;
            let contribs = frame.contributors(x, y);
            let g_c = [d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]];
            let g_d = d_depth.data[p];
            if g_c == [0.0; 3] && g_d == 0.0 {
                continue;
            }
            let acc_alpha = frame.alpha.data[p];
            let g_raw = g_d / acc_alpha.max(EPS_NORM);
            let g_acc = if acc_alpha > EPS_NORM {
                -g_d * frame.raw_depth.data[p] / (acc_alpha * acc_alpha)
            } else {
                0.0
            };

            trans.clear();
            let mut t = 1.0;
            for c in contribs {
                trans.push(t);
                t *= 1.0 - c.alpha;
            }
            let bg = frame.background;
            let g_final = g_c[0] * bg[0] + g_c[1] * bg[1] + g_c[2] * bg[2] - g_acc;
            // Gradient mass of everything behind the current splat.
            let mut behind = g_final * t;

            let center = pixel_center(x, y);
            for (c, &t_i) in contribs.iter().zip(&trans).rev() {
                let s = &frame.splats[c.splat as usize];
                let g = &mut sg[c.splat as usize];
                let a = c.alpha;
                let w = a * t_i;
                let value = g_c[0] * s.color[0] + g_c[1] * s.color[1] + g_c[2] * s.color[2] + g_raw * s.depth;
                let g_alpha = t_i * value - behind / (1.0 - a);
                behind += value * w;

                for ch in 0..3 {
                    g.color[ch] += g_c[ch] * w;
                }
                g.depth += g_raw * w;

                let fall = c.falloff;
                if s.opacity * fall >= ALPHA_MAX {
                    continue;
                }
                g.opacity += g_alpha * fall;
                let ga = g_alpha * a;
                let d = center - s.mean;
                g.mean += (s.conic * d) * ga;
                g.conic[0] += -0.5 * ga * d.x * d.x;
                g.conic[1] += -ga * d.x * d.y;
                g.conic[2] += -0.5 * ga * d.y * d.y;
            }
        }
    }

    let mut out = ParamGrads::zeros(cloud.len(), cloud.sh_degree);
    let stride = out.stride;
    let cam_center = cam.center();
    let w = &cam.rotation;
    for (s, g) in frame.splats.iter().zip(&sg) {
        let gi = s.source;
        let gauss = &cloud.gaussians[gi];
        let slot = &mut out.values[gi * stride..(gi + 1) * stride];
        out.visible[gi] = true;
        out.screen_grad[gi] = g.mean.norm();

        let mut g_pos = Vector3::zeros();

        // color -> SH coefficients and view direction
        let degree = cloud.sh_degree;
        let v = gauss.position - cam_center;
        let dist = v.norm();
        let dir = v / dist;
        let basis = sh::basis(&dir, degree);
        let g_raw: [f64; 3] =
            core::array::from_fn(|ch| if s.color_raw[ch] > 0.0 && s.color_raw[ch] < 1.0 { g.color[ch] } else { 0.0 });
        let mut g_dir = Vector3::zeros();
        for k in 0..basis.count {
            let base = layout::SH_DC.start + 3 * k;
            let mut along = 0.0;
            for ch in 0..3 {
                slot[base + ch] = g_raw[ch] * basis.values[k];
                along += g_raw[ch] * gauss.sh[k][ch];
            }
            if k > 0 {
                g_dir += Vector3::from(basis.grads[k]) * along;
            }
        }
        g_pos += (g_dir - dir * dir.dot(&g_dir)) / dist;

        // opacity
        let o = s.opacity;
        slot[layout::OPACITY] = g.opacity * o * (1.0 - o);

        // conic -> 2D covariance -> 3D covariance
        let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -(s.conic * g_conic * s.conic);
        let q = normalize_quaternion(gauss.rotation);
        let r = rotation_from_quaternion(q);
        let scale = gauss.scale();
        let m = r * Matrix3::from_diagonal(&scale);
        let sigma = m * m.transpose();
        let sigma_cam = w * sigma * w.transpose();
        let j = s.jacobian;
        let g_sigma_cam = j.transpose() * g_cov2 * j;
        let g_j: Matrix2x3<f64> = 2.0 * g_cov2 * j * sigma_cam;
        let g_sigma = w.transpose() * g_sigma_cam * w;
        let g_m = 2.0 * g_sigma * m;

        let mut g_r = g_m;
        for k in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += g_m[(i, k)] * r[(i, k)];
                g_r[(i, k)] = g_m[(i, k)] * scale[k];
            }
            slot[layout::LOG_SCALE.start + k] = acc * scale[k];
        }
        let g_q = quaternion_grad(q, &g_r);
        let qn = crate::math::sqrt(gauss.rotation.iter().map(|v| v * v).sum::<f64>());
        let dot = (0..4).map(|i| q[i] * g_q[i]).sum::<f64>();
        for i in 0..4 {
            slot[layout::ROTATION.start + i] = (g_q[i] - q[i] * dot) / qn;
        }

        // camera-space mean: projection, Jacobian and depth
        let t = s.cam_mean;
        let (fx, fy) = (cam.fx, cam.fy);
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut g_t = Vector3::new(g.mean.x * fx * iz, g.mean.y * fy * iz, 0.0);
        g_t.z = -g.mean.x * fx * t.x * iz2 - g.mean.y * fy * t.y * iz2 + g.depth;
        g_t.x += g_j[(0, 2)] * (-fx * iz2);
        g_t.y += g_j[(1, 2)] * (-fy * iz2);
        g_t.z += g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
        g_pos += w.transpose() * g_t;
        slot[layout::POSITION].copy_from_slice(g_pos.as_slice());

        if slot.iter().any(|v| !v.is_finite()) {
            return Err(Error::GradientOverflow { index: gi });
        }
    }
    Ok(out)
}

/// Gradient w.r.t. a unit quaternion `(w, x, y, z)` given `dL/dR`.
fn quaternion_grad(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dot = |m: [[f64; 3]; 3]| -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                acc += m[i][j] * g[(i, j)];
            }
        }
        acc
    };
    [
        dot([[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]]),
        dot([[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]]),
        dot([[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]]),
        dot([[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]]),
    ]
}
