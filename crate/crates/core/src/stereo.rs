//! Rectified stereo matching: census transform, windowed Hamming cost,
//! winner-take-all with parabola subpixel refinement, and a left-right
//! consistency check.
//!
//! Disparity convention: a left pixel `x` matches right pixel `x - d`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ScalarMap};
use crate::math;

/// Disparity value stored at invalid pixels.
pub const INVALID_DISPARITY: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StereoParams {
    /// Largest disparity searched; `None` means `width / 4`.
    pub d_max: Option<usize>,
    pub census_window: usize,
    pub aggregation_window: usize,
    /// Left-right consistency tolerance in pixels.
    pub lr_tolerance: f64,
    /// The best aggregated cost must be below this fraction of the best cost
    /// more than one disparity away.
    pub uniqueness: f64,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self { d_max: None, census_window: 7, aggregation_window: 9, lr_tolerance: 1.0, uniqueness: 0.9 }
    }
}

impl StereoParams {
    pub fn d_max_for(&self, width: usize) -> usize {
        self.d_max.unwrap_or(width / 4).max(1)
    }

    fn validate(&self, width: usize) -> Result<()> {
        let d_max = self.d_max_for(width);
        if d_max >= width {
            return Err(Error::Config(alloc::format!("d_max {d_max} must be below the image width {width}")));
        }
        for (name, w) in [("census", self.census_window), ("aggregation", self.aggregation_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::Config(alloc::format!("{name} window {w} must be odd and >= 3")));
            }
        }
        if self.census_window > 7 {
            return Err(Error::Config("census windows above 7x7 do not fit a 64-bit descriptor".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    /// Pixels; [`INVALID_DISPARITY`] where invalid.
    pub disparity: Vec<f64>,
    pub valid: Vec<bool>,
    pub d_max: usize,
}

impl DisparityMap {
    pub fn invalid(width: usize, height: usize, d_max: usize) -> Self {
        Self { width, height, disparity: vec![INVALID_DISPARITY; width * height], valid: vec![false; width * height], d_max }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let p = y * self.width + x;
        self.valid[p].then_some(self.disparity[p])
    }

    pub fn invalidate(&mut self, p: usize) {
        self.valid[p] = false;
        self.disparity[p] = INVALID_DISPARITY;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + x;
                let dst = y * self.width + (self.width - 1 - x);
                out.disparity[dst] = self.disparity[src];
                out.valid[dst] = self.valid[src];
            }
        }
        out
    }
}

fn census(gray: &ScalarMap, window: usize) -> Vec<u64> {
    let (w, h) = gray.shape();
    let r = (window / 2) as isize;
    let mut out = vec![0u64; w * h];
    for y in 0..h {
        for x in 0..w {
            let center = gray.get(x, y);
            let mut bits = 0u64;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    bits = (bits << 1) | u64::from(gray.get(xx, yy) < center);
                }
            }
            out[y * w + x] = bits;
        }
    }
    out
}

/// Box sums over a `window x window` neighborhood (in-bounds samples only).
fn box_sum(values: &[u32], w: usize, h: usize, window: usize) -> Vec<u32> {
    let r = window / 2;
    let mut integral = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += u64::from(values[y * w + x]);
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0u32; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let s = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            out[y * w + x] = s as u32;
        }
    }
    out
}

/// Largest minus smallest gray level within the aggregation window.
fn local_range(gray: &ScalarMap, window: usize) -> Vec<f64> {
    let (w, h) = gray.shape();
    let r = window / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let v = gray.get(xx, yy);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out[y * w + x] = hi - lo;
        }
    }
    out
}

/// Left-referenced disparity with default census and uniqueness settings.
pub fn compute_disparity(left: &Image, right: &Image, d_max: usize, window: usize) -> Result<DisparityMap> {
    let params = StereoParams { d_max: Some(d_max), aggregation_window: window, ..StereoParams::default() };
    compute_disparity_with(left, right, &params)
}

pub fn compute_disparity_with(left: &Image, right: &Image, params: &StereoParams) -> Result<DisparityMap> {
    if left.shape() != right.shape() {
        return Err(Error::shape("right image", left.shape(), right.shape()));
    }
    let (w, h) = left.shape();
    params.validate(w)?;
    let d_max = params.d_max_for(w);
    let mut out = DisparityMap::invalid(w, h, d_max);

    let gray_l = left.luma();
    let gray_r = right.luma();
    let census_l = census(&gray_l, params.census_window);
    let census_r = census(&gray_r, params.census_window);
    let texture = local_range(&gray_l, params.aggregation_window);
    let n_bits = (params.census_window * params.census_window - 1) as u32;

    let levels = d_max + 1;
    let mut volume = vec![0u32; w * h * levels];
    let mut slice = vec![0u32; w * h];
    for d in 0..levels {
        for y in 0..h {
            for x in 0..w {
                slice[y * w + x] = if x >= d {
                    (census_l[y * w + x] ^ census_r[y * w + x - d]).count_ones()
                } else {
                    n_bits
                };
            }
        }
        let agg = box_sum(&slice, w, h, params.aggregation_window);
        for (p, c) in agg.into_iter().enumerate() {
            volume[p * levels + d] = c;
        }
    }

    let margin = params.aggregation_window / 2;
    let x_start = d_max + margin;
    if x_start + margin >= w || 2 * margin >= h {
        return Ok(out);
    }
    for y in margin..h - margin {
        for x in x_start..w - margin {
            let p = y * w + x;
            if !(texture[p] > 1e-9) {
                continue;
            }
            let costs = &volume[p * levels..(p + 1) * levels];
            let (best_d, best) = costs
                .iter()
                .enumerate()
                .min_by_key(|(_, c)| **c)
                .map(|(d, c)| (d, *c))
                .expect("at least one disparity level");
            let rival = costs
                .iter()
                .enumerate()
                .filter(|(d, _)| d.abs_diff(best_d) > 1)
                .map(|(_, c)| *c)
                .min()
                .unwrap_or(u32::MAX);
            if !((best as f64) < params.uniqueness * rival as f64) {
                continue;
            }
            let mut disparity = best_d as f64;
            if best_d > 0 && best_d < d_max {
                let (cm, c0, cp) = (costs[best_d - 1] as f64, best as f64, costs[best_d + 1] as f64);
                let denom = cm - 2.0 * c0 + cp;
                if denom > 0.0 {
                    disparity += ((cm - cp) / (2.0 * denom)).clamp(-0.5, 0.5);
                }
            }
            out.disparity[p] = disparity;
            out.valid[p] = true;
        }
    }
    Ok(out)
}

/// Right-referenced disparity (a right pixel `x` matches left pixel `x + d`),
/// computed by mirroring the pair.
pub fn compute_disparity_right(left: &Image, right: &Image, params: &StereoParams) -> Result<DisparityMap> {
    let mirrored = compute_disparity_with(&right.flip_horizontal(), &left.flip_horizontal(), params)?;
    Ok(mirrored.flip_horizontal())
}

/// Invalidates left pixels whose match disagrees with the right map by more
/// than `tol` pixels. An infinite tolerance disables the check.
pub fn lr_consistency(d_left: &DisparityMap, d_right: &DisparityMap, tol: f64) -> Result<DisparityMap> {
    if (d_left.width, d_left.height) != (d_right.width, d_right.height) {
        return Err(Error::shape(
            "right disparity",
            (d_left.width, d_left.height),
            (d_right.width, d_right.height),
        ));
    }
    let mut out = d_left.clone();
    if tol.is_infinite() && tol > 0.0 {
        return Ok(out);
    }
    let w = d_left.width;
    for y in 0..d_left.height {
        for x in 0..w {
            let p = y * w + x;
            let Some(dl) = d_left.get(x, y) else { continue };
            let xr = math::round(x as f64 - dl);
            let consistent = xr >= 0.0
                && (xr as usize) < w
                && d_right.get(xr as usize, y).is_some_and(|dr| (dl - dr).abs() <= tol);
            if !consistent {
                out.invalidate(p);
            }
        }
    }
    Ok(out)
}

/// Full matcher: left and right disparities followed by the consistency check.
pub fn match_pair(left: &Image, right: &Image, params: &StereoParams) -> Result<DisparityMap> {
    let dl = compute_disparity_with(left, right, params)?;
    let dr = compute_disparity_right(left, right, params)?;
    lr_consistency(&dl, &dr, params.lr_tolerance)
}
