//! Adam with per-parameter-group learning rates, over the flat Gaussian
//! layout.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::ParamGrads;
use crate::math;
use crate::scene::{layout, normalize_quaternion, Gaussian, GaussianCloud};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Position rate at step 0, multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub sh: f64,
    /// Higher-order SH coefficients use `sh * sh_rest_factor`.
    pub sh_rest_factor: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            sh: 2.5e-3,
            sh_rest_factor: 1.0 / 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.position_init,
            self.position_final,
            self.sh,
            self.sh_rest_factor,
            self.opacity,
            self.scale,
            self.rotation,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.position_init > 0.0 && self.position_final <= 0.0 {
            return Err(Error::Config("position_final must be positive when position_init is".into()));
        }
        Ok(())
    }

    /// Log-linear decay from `position_init` to `position_final` over
    /// `max_steps`, scaled by `extent`.
    pub fn position_at(&self, step: usize, max_steps: usize, extent: f64) -> f64 {
        if self.position_init == 0.0 {
            return 0.0;
        }
        let t = if max_steps == 0 { 1.0 } else { (step as f64 / max_steps as f64).clamp(0.0, 1.0) };
        let lr = math::exp(math::ln(self.position_init) * (1.0 - t) + math::ln(self.position_final) * t);
        lr * extent
    }

    /// One learning rate per slot of the flat Gaussian layout.
    pub fn slot_rates(&self, sh_degree: usize, step: usize, max_steps: usize, extent: f64) -> Vec<f64> {
        let stride = Gaussian::param_count(sh_degree);
        let mut out = vec![self.sh * self.sh_rest_factor; stride];
        out[layout::POSITION].fill(self.position_at(step, max_steps, extent));
        out[layout::ROTATION].fill(self.rotation);
        out[layout::LOG_SCALE].fill(self.scale);
        out[layout::OPACITY] = self.opacity;
        out[layout::SH_DC].fill(self.sh);
        out
    }
}

/// First and second moments for every parameter slot of the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub stride: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(count: usize, sh_degree: usize) -> Self {
        let stride = Gaussian::param_count(sh_degree);
        Self { stride, m: vec![0.0; count * stride], v: vec![0.0; count * stride], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Appends zeroed moments for `n` new Gaussians.
    pub fn extend_zeroed(&mut self, n: usize) {
        self.m.resize(self.m.len() + n * self.stride, 0.0);
        self.v.resize(self.v.len() + n * self.stride, 0.0);
    }

    /// Keeps the moments of Gaussians where `keep` is true, in order.
    pub fn retain(&mut self, keep: &[bool]) {
        let stride = self.stride;
        let compact = |data: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(data.len());
            for (i, chunk) in data.chunks_exact(stride).enumerate() {
                if keep[i] {
                    out.extend_from_slice(chunk);
                }
            }
            *data = out;
        };
        compact(&mut self.m);
        compact(&mut self.v);
    }
}

/// One bias-corrected Adam update. Quaternions whose slots moved are
/// renormalized. Nothing is modified when any updated value is non-finite.
pub fn adam_step(cloud: &mut GaussianCloud, grads: &ParamGrads, state: &mut OptimizerState, rates: &[f64]) -> Result<()> {
    let stride = Gaussian::param_count(cloud.sh_degree);
    if grads.stride != stride || state.stride != stride || rates.len() != stride {
        return Err(Error::Shape("parameter layout does not match the cloud's SH degree".into()));
    }
    if grads.len() != cloud.len() || state.len() != cloud.len() {
        return Err(Error::Shape(alloc::format!(
            "cloud has {} Gaussians, gradients {}, optimizer state {}",
            cloud.len(),
            grads.len(),
            state.len()
        )));
    }

    let step = state.step + 1;
    let bc1 = 1.0 - libm::pow(BETA1, step as f64);
    let bc2 = 1.0 - libm::pow(BETA2, step as f64);
    let mut params = cloud.to_flat();
    let mut m = state.m.clone();
    let mut v = state.v.clone();

    for (k, g) in grads.values.iter().enumerate() {
        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
        v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
        let update = rates[k % stride] * (m[k] / bc1) / (math::sqrt(v[k] / bc2) + EPSILON);
        params[k] -= update;
        if !params[k].is_finite() || !m[k].is_finite() || !v[k].is_finite() {
            return Err(Error::NonFiniteUpdate { index: k / stride, slot: k % stride });
        }
    }

    let old = cloud.to_flat();
    for i in 0..cloud.len() {
        let base = i * stride;
        let q = &mut params[base + layout::ROTATION.start..base + layout::ROTATION.end];
        if q != &old[base + layout::ROTATION.start..base + layout::ROTATION.end] {
            let n = normalize_quaternion([q[0], q[1], q[2], q[3]]);
            if n.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteUpdate { index: i, slot: layout::ROTATION.start });
            }
            q.copy_from_slice(&n);
        }
    }

    cloud.set_flat(&params);
    state.m = m;
    state.v = v;
    state.step = step;
    Ok(())
}
