//! Forward rendering: EWA projection of each Gaussian to a 2D splat and
//! front-to-back alpha compositing of color, depth and alpha.
//!
//! Pixel `(i, j)` is sampled at `(i + 0.5, j + 0.5)`, so the top-left pixel
//! covers `[0, 1) x [0, 1)` in the camera's pixel coordinates.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, ScalarMap};
use crate::math;
use crate::scene::{Camera, Gaussian, GaussianCloud, EPS_DEPTH};
use crate::sh;

/// Isotropic variance (px^2) added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
/// Per-splat opacity saturation.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance would fall below this.
pub const T_STOP: f64 = 1e-4;
/// Splat contributions below this are dropped; it also sizes the footprint.
pub const ALPHA_MIN: f64 = 1e-8;
/// Pixels with accumulated alpha above this carry a meaningful depth.
pub const ALPHA_MASK: f64 = 0.5;
/// Floor of the alpha used to normalize accumulated depth.
pub const EPS_NORM: f64 = 1e-6;

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Projected covariance including the low-pass term.
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Camera-space z of the center.
    pub depth: f64,
    pub color: [f64; 3],
    /// Color before clamping to [0, 1].
    pub color_raw: [f64; 3],
    pub opacity: f64,
    pub source: usize,
    pub bbox: PixelRect,
    /// Largest quadratic form `q` at which the splat can reach `ALPHA_MIN`,
    /// padded against rounding.
    pub support: f64,
    pub cam_mean: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// Jacobian of the pinhole projection at camera-space point `t`.
#[inline]
pub fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz2, 0.0, cam.fy * iz, -cam.fy * t.y * iz2)
}

/// Projects one Gaussian. `None` means culled: behind the camera, negligible
/// opacity, or a footprint that misses the image.
pub fn project_gaussian_2d(g: &Gaussian, cam: &Camera) -> Option<Splat2D> {
    let t = cam.world_to_camera(&g.position);
    if !(t.z > EPS_DEPTH) {
        return None;
    }
    let opacity = g.opacity();
    if !(opacity > ALPHA_MIN) {
        return None;
    }
    let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let jacobian = projection_jacobian(cam, &t);
    let sigma = g.covariance().ok()?;
    let w = &cam.rotation;
    let cov = jacobian * (w * sigma * w.transpose()) * jacobian.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;

    // Support: o * exp(-q/2) >= ALPHA_MIN, i.e. q <= 2 ln(o / ALPHA_MIN).
    let q_max = 2.0 * math::ln(opacity / ALPHA_MIN);
    let support = q_max * (1.0 + 1e-9) + 1e-9;
    let rx = math::sqrt(support * cov[(0, 0)]);
    let ry = math::sqrt(support * cov[(1, 1)]);
    let bbox = pixel_range(mean.x, rx, cam.width).zip(pixel_range(mean.y, ry, cam.height))?;
    let bbox = PixelRect { x0: bbox.0 .0, x1: bbox.0 .1, y0: bbox.1 .0, y1: bbox.1 .1 };

    let degree = sh::degree_for_count(g.sh.len())?;
    let dir = (g.position - cam.center()).normalize();
    let color_raw = sh::eval_raw(&g.sh, &sh::basis(&dir, degree));
    let color = color_raw.map(|c| c.clamp(0.0, 1.0));

    Some(Splat2D {
        mean,
        cov,
        conic,
        depth: t.z,
        color,
        color_raw,
        opacity,
        source: 0,
        bbox,
        support,
        cam_mean: t,
        jacobian,
    })
}

/// Pixels whose centers lie in `[center - r, center + r]`, clipped to `[0, n)`.
fn pixel_range(center: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = math::ceil(center - r - 0.5).max(0.0);
    let hi = math::floor(center + r - 0.5).min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

impl Splat2D {
    /// Quadratic form `(p - mean)^T conic (p - mean)`.
    #[inline]
    pub fn quad(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.mean;
        self.conic[(0, 0)] * d.x * d.x + 2.0 * self.conic[(0, 1)] * d.x * d.y + self.conic[(1, 1)] * d.y * d.y
    }

    /// Columns of row `y` whose pixel centers fall inside the support
    /// ellipse, as a half-open range within the bounding box.
    pub fn row_span(&self, y: usize) -> Option<(usize, usize)> {
        let (a, b, c) = (self.conic[(0, 0)], self.conic[(0, 1)], self.conic[(1, 1)]);
        let dy = y as f64 + 0.5 - self.mean.y;
        let disc = b * b * dy * dy - a * (c * dy * dy - self.support);
        if !(disc >= 0.0) {
            return None;
        }
        let root = math::sqrt(disc);
        let margin = 1e-6;
        let lo = self.mean.x + (-b * dy - root) / a - margin;
        let hi = self.mean.x + (-b * dy + root) / a + margin;
        let x0 = (math::ceil(lo - 0.5).max(self.bbox.x0 as f64)) as usize;
        let x1 = (math::floor(hi - 0.5) + 1.0).min(self.bbox.x1 as f64);
        if !(x1 > x0 as f64) {
            return None;
        }
        Some((x0, x1 as usize))
    }
}

/// Unclamped Gaussian falloff `exp(-q/2)` of a splat at pixel center `p`.
#[inline]
pub fn falloff(s: &Splat2D, p: &Vector2<f64>) -> f64 {
    math::exp(-0.5 * s.quad(p))
}

#[inline]
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    /// Index into [`RenderedFrame::splats`].
    pub splat: u32,
    /// Clamped alpha.
    pub alpha: f64,
    /// Unclamped `exp(-q/2)`.
    pub falloff: f64,
}

/// Output of [`render_frame`] together with what the backward pass needs.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub width: usize,
    pub height: usize,
    pub color: Image,
    /// Accumulated depth divided by `max(alpha, EPS_NORM)`.
    pub depth: ScalarMap,
    pub raw_depth: ScalarMap,
    pub alpha: ScalarMap,
    pub background: [f64; 3],
    /// Visible splats sorted front to back.
    pub splats: Vec<Splat2D>,
    offsets: Vec<usize>,
    contributors: Vec<Contributor>,
}

impl RenderedFrame {
    /// Ordered front-to-back contributors of pixel `(x, y)`.
    pub fn contributors(&self, x: usize, y: usize) -> &[Contributor] {
        let p = y * self.width + x;
        &self.contributors[self.offsets[p]..self.offsets[p + 1]]
    }

    /// `alpha > ALPHA_MASK` per pixel.
    pub fn depth_mask(&self) -> Vec<bool> {
        self.alpha.data.iter().map(|a| *a > ALPHA_MASK).collect()
    }

    pub fn total_overlaps(&self) -> usize {
        self.contributors.len()
    }
}

/// Renders `cloud` from `cam` over a constant `background`.
pub fn render_frame(cloud: &GaussianCloud, cam: &Camera, background: [f64; 3]) -> Result<RenderedFrame> {
    if let Some(index) = cloud.first_non_finite() {
        return Err(Error::TrainingStateCorrupt { index });
    }
    let (w, h) = (cam.width, cam.height);

    let mut splats: Vec<Splat2D> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian_2d(g, cam).map(|mut s| {
                s.source = i;
                s
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));

    // Bin splats per pixel, preserving depth order (CSR layout).
    let mut starts = vec![0usize; w * h + 1];
    let spans: Vec<Vec<(usize, usize, usize)>> = splats
        .iter()
        .map(|s| (s.bbox.y0..s.bbox.y1).filter_map(|y| s.row_span(y).map(|(x0, x1)| (y, x0, x1))).collect())
        .collect();
    for rows in &spans {
        for &(y, x0, x1) in rows {
            for x in x0..x1 {
                starts[y * w + x + 1] += 1;
            }
        }
    }
    for p in 0..w * h {
        starts[p + 1] += starts[p];
    }
    let mut fill = starts.clone();
    let mut bins = vec![0u32; starts[w * h]];
    for (k, rows) in spans.iter().enumerate() {
        for &(y, x0, x1) in rows {
            for x in x0..x1 {
                let p = y * w + x;
                bins[fill[p]] = k as u32;
                fill[p] += 1;
            }
        }
    }

    let mut color = Image::new(w, h);
    let mut raw_depth = ScalarMap::new(w, h);
    let mut depth = ScalarMap::new(w, h);
    let mut alpha = ScalarMap::new(w, h);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut contributors = Vec::new();
    offsets.push(0);

    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let center = pixel_center(x, y);
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            for &k in &bins[starts[p]..starts[p + 1]] {
                let s = &splats[k as usize];
                let q = s.quad(&center);
                if q > s.support {
                    continue;
                }
                let fall = math::exp(-0.5 * q);
                let a = s.opacity * fall;
                if a < ALPHA_MIN {
                    continue;
                }
                let a = a.min(ALPHA_MAX);
                let next = trans * (1.0 - a);
                if next < T_STOP {
                    break;
                }
                let weight = a * trans;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * weight;
                }
                d += s.depth * weight;
                trans = next;
                contributors.push(Contributor { splat: k, alpha: a, falloff: fall });
            }
            offsets.push(contributors.len());
            for ch in 0..3 {
                c[ch] += trans * background[ch];
            }
            color.set_pixel(x, y, c);
            let acc = 1.0 - trans;
            alpha.data[p] = acc;
            raw_depth.data[p] = d;
            depth.data[p] = d / acc.max(EPS_NORM);
        }
    }

    Ok(RenderedFrame {
        width: w,
        height: h,
        color,
        depth,
        raw_depth,
        alpha,
        background,
        splats,
        offsets,
        contributors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use proptest::prelude::*;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::identity(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    #[test]
    fn isotropic_projection() {
        let g = Gaussian::new(Vector3::new(0.0, 0.0, 5.0), 1.0, 0.5, [0.5; 3], 0);
        let s = project_gaussian_2d(&g, &cam(100, 100)).unwrap();
        assert_eq!(s.mean, Vector2::new(50.0, 50.0));
        let expected = Matrix2::identity() * (400.0 + LOW_PASS);
        assert!((s.cov - expected).abs().max() < 1e-9);
    }

    #[test]
    fn culling() {
        let behind = Gaussian::new(Vector3::new(0.0, 0.0, -5.0), 1.0, 0.5, [0.5; 3], 0);
        assert!(project_gaussian_2d(&behind, &cam(100, 100)).is_none());
        let far = Gaussian::new(Vector3::new(5e4, 0.0, 5.0), 0.01, 0.5, [0.5; 3], 0);
        assert!(project_gaussian_2d(&far, &cam(100, 100)).is_none());
    }

    #[test]
    fn empty_cloud_is_background() {
        let f = render_frame(&GaussianCloud::new(0), &cam(8, 6), [0.2, 0.3, 0.4]).unwrap();
        for p in f.color.data.chunks_exact(3) {
            assert_eq!(p, &[0.2, 0.3, 0.4]);
        }
        assert!(f.alpha.data.iter().all(|a| *a == 0.0));
        assert!(f.depth_mask().iter().all(|m| !m));
    }

    /// A tiny splat centered on pixel (2, 2) of a 5x5 image.
    fn point_splat(z: f64, opacity: f64, color: [f64; 3]) -> Gaussian {
        let c = cam(5, 5);
        // pixel center (2.5, 2.5) back-projected at depth z
        let x = (2.5 - c.cx) * z / c.fx;
        Gaussian::new(Vector3::new(x, x, z), 1e-4, opacity, color, 0)
    }

    #[test]
    fn single_saturated_splat() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(point_splat(5.0, 0.999_9, [1.0, 0.0, 0.0])).unwrap();
        let bg = [0.0, 0.0, 1.0];
        let f = render_frame(&cloud, &cam(5, 5), bg).unwrap();
        let c = f.color.pixel(2, 2);
        assert!((c[0] - 0.99).abs() < 1e-12);
        assert!((c[2] - 0.01).abs() < 1e-12);
        assert!((f.depth.get(2, 2) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_splats_blend_front_to_back() {
        let mut cloud = GaussianCloud::new(0);
        // Listed back first to exercise the depth sort.
        cloud.push(point_splat(4.0, 0.999_9, [0.0, 0.0, 1.0])).unwrap();
        cloud.push(point_splat(2.0, 0.5, [1.0, 0.0, 0.0])).unwrap();
        let bg = [0.0, 1.0, 0.0];
        let f = render_frame(&cloud, &cam(5, 5), bg).unwrap();
        let c = f.color.pixel(2, 2);
        // The front splat's falloff at the exact center is 1.
        let residual = 0.5 * 0.01;
        assert!((c[0] - 0.5).abs() < 1e-9);
        assert!((c[2] - 0.5 * 0.99).abs() < 1e-9);
        assert!((c[1] - residual).abs() < 1e-9);
        let expected_depth = (0.5 * 2.0 + 0.495 * 4.0) / 0.995;
        assert!((f.depth.get(2, 2) - expected_depth).abs() < 1e-9);
        assert_eq!(f.contributors(2, 2).len(), 2);
    }

    #[test]
    fn isolated_opaque_splat_depth() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(point_splat(3.7, 0.9, [0.3; 3])).unwrap();
        let f = render_frame(&cloud, &cam(5, 5), [0.0; 3]).unwrap();
        assert!((f.depth.get(2, 2) - 3.7).abs() < 1e-6);
    }

    #[test]
    fn non_finite_parameter_is_reported() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(point_splat(3.0, 0.5, [0.3; 3])).unwrap();
        let mut bad = point_splat(3.0, 0.5, [0.3; 3]);
        bad.log_scale.x = f64::NAN;
        cloud.push(bad).unwrap();
        let err = render_frame(&cloud, &cam(5, 5), [0.0; 3]).unwrap_err();
        assert_eq!(err, Error::TrainingStateCorrupt { index: 1 });
    }

    fn gaussian_strategy() -> impl Strategy<Value = Gaussian> {
        (
            prop::array::uniform3(-0.3f64..0.3),
            3.0f64..6.0,
            prop::array::uniform3(-2.5f64..-1.0),
            prop::array::uniform4(-1.0f64..1.0),
            -2.0f64..2.0,
            prop::array::uniform3(-1.0f64..1.0),
        )
            .prop_map(|(xy, z, ls, q, o, c)| Gaussian {
                position: Vector3::new(xy[0], xy[1], z),
                rotation: if q.iter().all(|v| v.abs() < 1e-3) { [1.0, 0.0, 0.0, 0.0] } else { q },
                log_scale: Vector3::from(ls),
                opacity_logit: o,
                sh: alloc::vec![c],
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn adding_a_gaussian_never_lowers_alpha(
            gs in prop::collection::vec(gaussian_strategy(), 1..6),
            extra in gaussian_strategy(),
        ) {
            let c = cam(12, 10);
            let mut cloud = GaussianCloud { gaussians: gs, sh_degree: 0 };
            let before = render_frame(&cloud, &c, [0.0; 3]).unwrap();
            cloud.gaussians.push(extra);
            let after = render_frame(&cloud, &c, [0.0; 3]).unwrap();
            for (a, b) in before.alpha.data.iter().zip(&after.alpha.data) {
                prop_assert!(*b >= *a - 1e-15);
            }
        }

        #[test]
        fn permutation_invariance(gs in prop::collection::vec(gaussian_strategy(), 2..7), seed in 0u64..1000) {
            let c = cam(12, 10);
            let cloud = GaussianCloud { gaussians: gs.clone(), sh_degree: 0 };
            let mut permuted = gs;
            // deterministic shuffle
            let n = permuted.len();
            for i in 0..n {
                let j = ((seed as usize).wrapping_mul(31).wrapping_add(i * 17)) % n;
                permuted.swap(i, j);
            }
            let a = render_frame(&cloud, &c, [0.1, 0.2, 0.3]).unwrap();
            let b = render_frame(&GaussianCloud { gaussians: permuted, sh_degree: 0 }, &c, [0.1, 0.2, 0.3]).unwrap();
            prop_assert_eq!(a.color, b.color);
            prop_assert_eq!(a.depth, b.depth);
            prop_assert_eq!(a.alpha, b.alpha);
        }

        #[test]
        fn zero_alpha_pixels_show_background(gs in prop::collection::vec(gaussian_strategy(), 0..4)) {
            let c = cam(12, 10);
            let bg = [0.25, 0.5, 0.75];
            let f = render_frame(&GaussianCloud { gaussians: gs, sh_degree: 0 }, &c, bg).unwrap();
            for (p, a) in f.color.data.chunks_exact(3).zip(&f.alpha.data) {
                if *a == 0.0 {
                    prop_assert_eq!(p, &bg[..]);
                }
            }
        }
    }
}
