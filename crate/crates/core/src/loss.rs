//! Photometric + depth training loss and evaluation metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, ScalarMap};
use crate::math;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// PSNR reported when the mean squared error vanishes.
pub const PSNR_CAP: f64 = 100.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = math::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian blur with zero padding ("same" output size). The
/// kernel is symmetric, so this operator is its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape("image", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean SSIM of `x` against `y` and, optionally, its gradient w.r.t. `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h) = x.shape();
    let n = w * h;
    let kernel = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    let norm = 1.0 / (3 * n) as f64;
    for ch in 0..3 {
        let xs = x.channel(ch).data;
        let ys = y.channel(ch).data;
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mx = blur(&xs, w, h, &kernel);
        let my = blur(&ys, w, h, &kernel);
        let exx = blur(&xx, w, h, &kernel);
        let eyy = blur(&yy, w, h, &kernel);
        let exy = blur(&xy, w, h, &kernel);

        let mut d_mu = vec![0.0; n];
        let mut d_var = vec![0.0; n];
        let mut d_cov = vec![0.0; n];
        for p in 0..n {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let a1 = 2.0 * mx[p] * my[p] + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + C1;
            let b2 = sxx + syy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let dmu = 2.0 * my[p] * a2 / (b1 * b2) - s * 2.0 * mx[p] / b1;
                let dvar = -s / b2;
                let dcov = 2.0 * a1 / (b1 * b2);
                d_mu[p] = norm * (dmu - 2.0 * mx[p] * dvar - my[p] * dcov);
                d_var[p] = norm * dvar;
                d_cov[p] = norm * dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let bmu = blur(&d_mu, w, h, &kernel);
            let bvar = blur(&d_var, w, h, &kernel);
            let bcov = blur(&d_cov, w, h, &kernel);
            for p in 0..n {
                g.data[3 * p + ch] = bmu[p] + 2.0 * xs[p] * bvar[p] + ys[p] * bcov[p];
            }
        }
    }
    (total * norm, grad)
}

/// Mean SSIM over channels and pixels (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// `(1 - SSIM) / 2`.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// D-SSIM and its gradient w.r.t. `rendered`.
pub fn dssim_with_grad(rendered: &Image, target: &Image) -> Result<(f64, Image)> {
    check_same(rendered, target)?;
    let (s, g) = ssim_impl(rendered, target, true);
    let mut g = g.expect("gradient requested");
    for v in &mut g.data {
        *v *= -0.5;
    }
    Ok(((1.0 - s) / 2.0, g))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub depth_l1: f64,
    pub total: f64,
    /// Fraction of pixels that entered the depth term.
    pub depth_valid_fraction: f64,
}

impl LossBreakdown {
    pub fn combine(l1: f64, dssim: f64, depth_l1: f64, lambda_dssim: f64, lambda_depth: f64) -> f64 {
        let photometric = (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim;
        if lambda_depth == 0.0 {
            photometric
        } else {
            photometric + lambda_depth * depth_l1
        }
    }
}

/// Per-pixel loss gradients w.r.t. the rendered color and normalized depth.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub color: Image,
    pub depth: ScalarMap,
}

/// Inputs of the depth term.
#[derive(Debug, Clone, Copy)]
pub struct DepthTerm<'a> {
    pub prior: Option<&'a DepthMap>,
    pub rendered: &'a ScalarMap,
    /// Rendered-depth mask (alpha above the mask threshold).
    pub mask: &'a [bool],
}

fn check_weights(lambda_dssim: f64, lambda_depth: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_dssim) {
        return Err(Error::Config(alloc::format!("lambda_dssim {lambda_dssim} outside [0, 1]")));
    }
    if !(lambda_depth >= 0.0) {
        return Err(Error::Config(alloc::format!("lambda_depth {lambda_depth} must be >= 0")));
    }
    Ok(())
}

fn depth_pixels<'a>(depth: &DepthTerm<'a>, shape: (usize, usize)) -> Result<Option<(&'a DepthMap, Vec<usize>)>> {
    if depth.rendered.shape() != shape {
        return Err(Error::shape("rendered depth", shape, depth.rendered.shape()));
    }
    if depth.mask.len() != shape.0 * shape.1 {
        return Err(Error::Shape(alloc::format!("depth mask has {} entries", depth.mask.len())));
    }
    let Some(prior) = depth.prior else { return Ok(None) };
    if prior.shape() != shape {
        return Err(Error::shape("depth prior", shape, prior.shape()));
    }
    let idx = (0..shape.0 * shape.1).filter(|&p| prior.valid[p] && depth.mask[p]).collect();
    Ok(Some((prior, idx)))
}

/// `(1 - l_dssim) * L1 + l_dssim * D-SSIM + l_depth * masked depth L1`,
/// every term a mean.
pub fn total_loss(
    target: &Image,
    rendered: &Image,
    depth: DepthTerm<'_>,
    lambda_dssim: f64,
    lambda_depth: f64,
) -> Result<LossBreakdown> {
    check_weights(lambda_dssim, lambda_depth)?;
    check_same(target, rendered)?;
    let shape = target.shape();
    let l1 = target.data.iter().zip(&rendered.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.data.len() as f64;
    let ds = dssim(target, rendered)?;
    let (depth_l1, fraction) = match depth_pixels(&depth, shape)? {
        Some((prior, idx)) if !idx.is_empty() => {
            let sum: f64 = idx.iter().map(|&p| (prior.depth[p] - depth.rendered.data[p]).abs()).sum();
            (sum / idx.len() as f64, idx.len() as f64 / (shape.0 * shape.1) as f64)
        }
        _ => (0.0, 0.0),
    };
    Ok(LossBreakdown {
        l1,
        dssim: ds,
        depth_l1,
        total: LossBreakdown::combine(l1, ds, depth_l1, lambda_dssim, lambda_depth),
        depth_valid_fraction: fraction,
    })
}

/// [`total_loss`] plus its gradient w.r.t. the rendered color and depth.
pub fn total_loss_with_grad(
    target: &Image,
    rendered: &Image,
    depth: DepthTerm<'_>,
    lambda_dssim: f64,
    lambda_depth: f64,
) -> Result<(LossBreakdown, LossGrads)> {
    check_weights(lambda_dssim, lambda_depth)?;
    check_same(target, rendered)?;
    let shape = target.shape();
    let count = target.data.len() as f64;
    let mut l1 = 0.0;
    let mut g_color = Image::new(shape.0, shape.1);
    for ((t, r), g) in target.data.iter().zip(&rendered.data).zip(g_color.data.iter_mut()) {
        let diff = r - t;
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = (1.0 - lambda_dssim) * sign / count;
    }
    l1 /= count;
    let (ds, g_ssim) = dssim_with_grad(rendered, target)?;
    for (g, s) in g_color.data.iter_mut().zip(&g_ssim.data) {
        *g += lambda_dssim * s;
    }

    let mut g_depth = ScalarMap::new(shape.0, shape.1);
    let (depth_l1, fraction) = match depth_pixels(&depth, shape)? {
        Some((prior, idx)) if !idx.is_empty() => {
            let n = idx.len() as f64;
            let mut sum = 0.0;
            for &p in &idx {
                let diff = depth.rendered.data[p] - prior.depth[p];
                sum += diff.abs();
                if lambda_depth != 0.0 && diff != 0.0 {
                    g_depth.data[p] = lambda_depth * diff.signum() / n;
                }
            }
            (sum / n, n / (shape.0 * shape.1) as f64)
        }
        _ => (0.0, 0.0),
    };
    let breakdown = LossBreakdown {
        l1,
        dssim: ds,
        depth_l1,
        total: LossBreakdown::combine(l1, ds, depth_l1, lambda_dssim, lambda_depth),
        depth_valid_fraction: fraction,
    };
    Ok((breakdown, LossGrads { color: g_color, depth: g_depth }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    /// Fraction of pixels with `max(pred/gt, gt/pred) < 1.25`.
    pub delta_1_25: f64,
    pub count: usize,
}

pub fn eval_depth(pred: &ScalarMap, gt: &ScalarMap, mask: &[bool]) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("predicted depth", gt.shape(), pred.shape()));
    }
    if mask.len() != gt.data.len() {
        return Err(Error::Shape(alloc::format!("mask has {} entries, depth has {}", mask.len(), gt.data.len())));
    }
    let (mut abs_rel, mut sq, mut inliers, mut count) = (0.0, 0.0, 0usize, 0usize);
    for ((p, g), m) in pred.data.iter().zip(&gt.data).zip(mask) {
        if !m {
            continue;
        }
        if !(*g > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!("ground-truth depth {g} inside the mask")));
        }
        abs_rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        if *p > 0.0 && (p / g).max(g / p) < 1.25 {
            inliers += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let n = count as f64;
    Ok(DepthMetrics { abs_rel: abs_rel / n, rmse: math::sqrt(sq / n), delta_1_25: inliers as f64 / n, count })
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_same(pred, gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { 10.0 * math::log10(1.0 / mse) })
}

/// `(PSNR in dB, SSIM)`.
pub fn eval_view_synthesis(pred: &Image, gt: &Image) -> Result<(f64, f64)> {
    Ok((psnr(pred, gt)?, ssim(pred, gt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..w * h * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Image::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn dssim_identical_is_zero() {
        let a = noise_image(16, 12, 1);
        assert!(dssim(&a, &a).unwrap().abs() < 1e-15);
    }

    #[test]
    fn dssim_black_vs_white_is_half() {
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(16, 16, [1.0; 3]);
        assert!((dssim(&a, &b).unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dssim_shape_mismatch() {
        let err = dssim(&Image::new(4, 4), &Image::new(5, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn dssim_gradient_matches_finite_differences() {
        let x = noise_image(9, 7, 3);
        let y = noise_image(9, 7, 4);
        let (_, g) = dssim_with_grad(&x, &y).unwrap();
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (dssim(&xp, &y).unwrap() - dssim(&xm, &y).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-8, "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn total_loss_examples() {
        let img = noise_image(8, 8, 5);
        let depth = ScalarMap::new(8, 8);
        let mask = vec![true; 64];
        let b = total_loss(&img, &img, DepthTerm { prior: None, rendered: &depth, mask: &mask }, 0.2, 0.1).unwrap();
        assert_eq!(b.total, 0.0);

        let a = Image::filled(8, 8, [0.2; 3]);
        let c = Image::filled(8, 8, [0.7; 3]);
        let b = total_loss(&a, &c, DepthTerm { prior: None, rendered: &depth, mask: &mask }, 0.0, 0.1).unwrap();
        assert!((b.total - 0.5).abs() < 1e-12);

        let total = LossBreakdown::combine(0.5, 0.1, 2.0, 0.2, 0.1);
        assert!((total - 0.62).abs() < 1e-12);
    }

    #[test]
    fn depth_term_uses_joint_mask() {
        let img = Image::filled(2, 2, [0.5; 3]);
        let rendered = ScalarMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut prior = DepthMap::new(2, 2);
        prior.depth = vec![2.0, 2.0, 5.0, 100.0];
        prior.valid = vec![true, true, true, false];
        let mask = [true, true, false, true];
        let term = DepthTerm { prior: Some(&prior), rendered: &rendered, mask: &mask };
        let b = total_loss(&img, &img, term, 0.2, 0.5).unwrap();
        assert!((b.depth_l1 - 0.5).abs() < 1e-15);
        assert!((b.depth_valid_fraction - 0.5).abs() < 1e-15);
        assert!((b.total - 0.25).abs() < 1e-15);

        let empty_mask = [false; 4];
        let term = DepthTerm { prior: Some(&prior), rendered: &rendered, mask: &empty_mask };
        assert_eq!(total_loss(&img, &img, term, 0.2, 0.5).unwrap().depth_l1, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let target = noise_image(10, 8, 7);
        let rendered = noise_image(10, 8, 8);
        let rdepth = ScalarMap::from_vec(10, 8, (0..80).map(|i| 2.0 + (i % 7) as f64 * 0.3).collect()).unwrap();
        let mut prior = DepthMap::new(10, 8);
        for p in 0..80 {
            prior.depth[p] = 2.1 + (p % 5) as f64 * 0.37;
            prior.valid[p] = p % 3 != 0;
        }
        let mask: Vec<bool> = (0..80).map(|p| p % 4 != 1).collect();
        let (_, g) = total_loss_with_grad(&target, &rendered, DepthTerm { prior: Some(&prior), rendered: &rdepth, mask: &mask }, 0.2, 0.1).unwrap();
        let h = 1e-6;
        for i in (0..rendered.data.len()).step_by(7) {
            let mut p = rendered.clone();
            p.data[i] += h;
            let mut m = rendered.clone();
            m.data[i] -= h;
            let fd = (total_loss(&target, &p, DepthTerm { prior: Some(&prior), rendered: &rdepth, mask: &mask }, 0.2, 0.1).unwrap().total
                - total_loss(&target, &m, DepthTerm { prior: Some(&prior), rendered: &rdepth, mask: &mask }, 0.2, 0.1).unwrap().total)
                / (2.0 * h);
            assert!((fd - g.color.data[i]).abs() < 1e-8);
        }
        for i in 0..80 {
            let mut p = rdepth.clone();
            p.data[i] += h;
            let mut m = rdepth.clone();
            m.data[i] -= h;
            let fd = (total_loss(&target, &rendered, DepthTerm { prior: Some(&prior), rendered: &p, mask: &mask }, 0.2, 0.1).unwrap().total
                - total_loss(&target, &rendered, DepthTerm { prior: Some(&prior), rendered: &m, mask: &mask }, 0.2, 0.1).unwrap().total)
                / (2.0 * h);
            assert!((fd - g.depth.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn eval_depth_examples() {
        let gt = ScalarMap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mask = [true; 4];
        let m = eval_depth(&gt, &gt, &mask).unwrap();
        assert_eq!((m.abs_rel, m.rmse, m.delta_1_25), (0.0, 0.0, 1.0));
        let scaled = |k: f64| ScalarMap::from_vec(2, 2, gt.data.iter().map(|v| v * k).collect()).unwrap();
        let m = eval_depth(&scaled(1.2), &gt, &mask).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!(m.delta_1_25, 1.0);
        assert_eq!(eval_depth(&scaled(1.3), &gt, &mask).unwrap().delta_1_25, 0.0);
        assert_eq!(eval_depth(&gt, &gt, &[false; 4]).unwrap_err(), Error::EmptyEvaluation);
    }

    #[test]
    fn view_synthesis_examples() {
        let a = noise_image(12, 12, 9);
        let (p, s) = eval_view_synthesis(&a, &a).unwrap();
        assert_eq!(p, PSNR_CAP);
        assert!((s - 1.0).abs() < 1e-15);
        let b = Image::filled(4, 4, [0.5; 3]);
        let c = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&b, &c).unwrap() - 20.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn dssim_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = noise_image(13, 11, s1);
            let b = noise_image(13, 11, s2 + 1000);
            prop_assert!((dssim(&a, &b).unwrap() - dssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn abs_rel_of_scaled_gt(k in 0.1f64..3.0) {
            let gt = ScalarMap::from_vec(3, 1, vec![1.5, 2.5, 7.0]).unwrap();
            let pred = ScalarMap::from_vec(3, 1, gt.data.iter().map(|v| v * k).collect()).unwrap();
            let m = eval_depth(&pred, &gt, &[true; 3]).unwrap();
            prop_assert!((m.abs_rel - (k - 1.0).abs()).abs() < 1e-12);
        }

        #[test]
        fn recombination_identity(l1 in 0.0f64..2.0, ds in 0.0f64..0.5, dl in 0.0f64..10.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let t = LossBreakdown::combine(l1, ds, dl, a, b);
            prop_assert!((t - ((1.0 - a) * l1 + a * ds + b * dl)).abs() < 1e-12);
        }
    }
}
