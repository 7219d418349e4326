//! The optimization loop: initialization, Adam steps, adaptive density
//! control and the depth-loss schedule.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backward_render, ParamGrads};
use crate::loss::{eval_depth, eval_view_synthesis, total_loss_with_grad, DepthTerm};
use crate::math;
use crate::optim::{adam_step, LearningRates, OptimizerState};
use crate::priors::{baseline_interval, NoPrior, PriorProvider, PriorRequest, SparsePriors, StereoPriors};
use crate::raster::{render_frame, ALPHA_MASK};
use crate::scene::{Gaussian, GaussianCloud};
use crate::sh;
use crate::stereo::StereoParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Mean view-space positional gradient (normalized device units).
    pub grad_threshold: f64,
    /// Gaussians larger than this fraction of the scene extent are split.
    pub percent_dense: f64,
    pub prune_opacity: f64,
    /// No clone or split happens once the cloud holds this many Gaussians.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 200,
            stop: 1500,
            grad_threshold: 1e-3,
            percent_dense: 0.01,
            prune_opacity: 0.005,
            max_gaussians: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Random points used when the dataset has no sparse points.
    pub random_points: usize,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { random_points: 2000, opacity: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorMode {
    None,
    /// Self-evolving stereo from rendered rectified pairs.
    Stereo,
    /// Depth of the sparse points each view observes.
    Sparse,
    /// Relative maps `<view_id>.pfm` in `dir`, aligned to the sparse points.
    External { dir: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda_dssim: f64,
    pub lambda_depth: f64,
    /// First iteration with an active depth term.
    pub depth_start: usize,
    pub refresh_interval: usize,
    /// Stereo baseline interval in world units; derived from the sparse
    /// points when absent.
    pub baseline: Option<[f64; 2]>,
    /// Median disparity (pixels) the derived interval is centered on;
    /// defaults to half the matcher's disparity range.
    pub baseline_target_disparity: Option<f64>,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
    pub init: InitConfig,
    pub prior: PriorMode,
    pub stereo: StereoParams,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda_dssim: 0.2,
            lambda_depth: 0.1,
            depth_start: 1000,
            refresh_interval: 100,
            baseline: None,
            baseline_target_disparity: None,
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            init: InitConfig::default(),
            prior: PriorMode::Stereo,
            stereo: StereoParams::default(),
            sh_degree: 0,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Plain photometric training without a depth term.
    pub fn vanilla() -> Self {
        Self { lambda_depth: 0.0, prior: PriorMode::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return err(alloc::format!("lambda_dssim {} outside [0, 1]", self.lambda_dssim));
        }
        if !(self.lambda_depth >= 0.0) || !self.lambda_depth.is_finite() {
            return err(alloc::format!("lambda_depth {} must be >= 0", self.lambda_depth));
        }
        if self.depth_start > self.iterations {
            return err(alloc::format!("depth_start {} exceeds iterations {}", self.depth_start, self.iterations));
        }
        if self.refresh_interval == 0 {
            return err("refresh_interval must be >= 1".into());
        }
        if let Some([lo, hi]) = self.baseline {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return err(alloc::format!("baseline interval [{lo}, {hi}] must satisfy 0 < b_min <= b_max"));
            }
        }
        if let Some(t) = self.baseline_target_disparity {
            if !(t > 0.0) {
                return err(alloc::format!("baseline_target_disparity {t} must be positive"));
            }
        }
        if self.sh_degree > sh::MAX_DEGREE {
            return err(alloc::format!("sh_degree {} exceeds {}", self.sh_degree, sh::MAX_DEGREE));
        }
        if self.densify.interval == 0 {
            return err("densify.interval must be >= 1".into());
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            return err(alloc::format!("init.opacity {} must be in (0, 1)", self.init.opacity));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return err("background must lie in [0, 1]".into());
        }
        self.learning_rates.validate()
    }

    /// Baseline interval, either configured or derived from the median
    /// sparse-point depth.
    pub fn baseline_interval(&self, dataset: &Dataset) -> Result<[f64; 2]> {
        if let Some(b) = self.baseline {
            return Ok(b);
        }
        let view = dataset.train_views().next().ok_or_else(|| Error::Config("no training views".into()))?;
        let median = dataset
            .median_point_depth()
            .ok_or_else(|| Error::Config("no sparse points to derive a stereo baseline; set `baseline`".into()))?;
        let target = self
            .baseline_target_disparity
            .unwrap_or(self.stereo.d_max_for(view.camera.width) as f64 / 2.0);
        baseline_interval(median, view.camera.fx, target)
    }
}

/// Builds the provider for the configured in-memory prior modes. External
/// priors need file access and are built by the caller.
pub fn build_provider(cfg: &TrainConfig, dataset: &Dataset) -> Result<Box<dyn PriorProvider>> {
    Ok(match &cfg.prior {
        PriorMode::None => Box::new(NoPrior),
        PriorMode::Stereo => Box::new(StereoPriors::new(
            cfg.depth_start,
            cfg.refresh_interval,
            cfg.baseline_interval(dataset)?,
            cfg.stereo.clone(),
            cfg.background,
        )?),
        PriorMode::Sparse => Box::new(SparsePriors::new(dataset.points.clone(), cfg.depth_start)),
        PriorMode::External { dir } => {
            return Err(Error::Config(alloc::format!("external priors in {dir} must be loaded by the caller")));
        }
    })
}

/// Per-Gaussian positional gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub visible: Vec<u32>,
}

impl DensifyStats {
    pub fn new(count: usize) -> Self {
        Self { grad_sum: vec![0.0; count], visible: vec![0; count] }
    }

    /// Adds one view's screen-space gradient norms, rescaled to normalized
    /// device units.
    pub fn accumulate(&mut self, grads: &ParamGrads, width: usize, height: usize) {
        let ndc = width.max(height) as f64 / 2.0;
        for i in 0..grads.len() {
            if grads.visible[i] {
                self.grad_sum[i] += grads.screen_grad[i] * ndc;
                self.visible[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.visible[i] == 0 { 0.0 } else { self.grad_sum[i] / self.visible[i] as f64 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large Gaussians whose mean positional gradient
/// reaches the threshold, then prunes nearly transparent ones. Moments of new
/// Gaussians start at zero; statistics are reset.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &mut DensifyStats,
    state: &mut OptimizerState,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    if stats.grad_sum.len() != n || state.len() != n {
        return Err(Error::Shape(alloc::format!(
            "cloud has {n} Gaussians, statistics {}, optimizer state {}",
            stats.grad_sum.len(),
            state.len()
        )));
    }
    let mut outcome = DensifyOutcome::default();
    let mut keep = vec![true; n];
    let mut added = Vec::new();
    if n < cfg.max_gaussians {
        for i in 0..n {
            if stats.mean(i) < cfg.grad_threshold || n + added.len() >= cfg.max_gaussians {
                continue;
            }
            let g = &cloud.gaussians[i];
            let scale = g.scale();
            if scale.max() <= cfg.percent_dense * extent {
                added.push(g.clone());
                outcome.cloned += 1;
            } else {
                let rot = g.rotation_matrix();
                for _ in 0..2 {
                    let z = Vector3::from_fn(|k, _| rng.sample::<f64, _>(StandardNormal) * scale[k]);
                    let mut child = g.clone();
                    child.position = g.position + rot * z;
                    child.log_scale = scale.map(|s| math::ln(0.8 * s));
                    added.push(child);
                }
                keep[i] = false;
                outcome.split += 1;
            }
        }
    }
    state.extend_zeroed(added.len());
    keep.resize(n + added.len(), true);
    cloud.gaussians.extend(added);

    for (i, g) in cloud.gaussians.iter().enumerate() {
        if keep[i] && g.opacity() < cfg.prune_opacity {
            keep[i] = false;
            outcome.pruned += 1;
        }
    }
    if keep.iter().all(|k| !k) {
        return Err(Error::EmptyScene("densification pruned every Gaussian".into()));
    }
    let mut it = keep.iter();
    cloud.gaussians.retain(|_| *it.next().unwrap());
    state.retain(&keep);
    *stats = DensifyStats::new(cloud.len());
    Ok(outcome)
}

/// Mean squared distance to the `k` nearest other points.
fn mean_nn_sq_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            let k = k.min(3);
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let mut s = k - 1;
                    while s > 0 && best[s - 1] > d {
                        best[s] = best[s - 1];
                        s -= 1;
                    }
                    best[s] = d;
                }
            }
            let found: Vec<f64> = best[..k].iter().copied().filter(|d| d.is_finite()).collect();
            if found.is_empty() { 1e-4 } else { found.iter().sum::<f64>() / found.len() as f64 }
        })
        .collect()
}

/// Point closest (least squares) to every camera's optical axis.
fn axes_focus(dataset: &Dataset) -> Option<Vector3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for v in &dataset.views {
        let c = v.camera.center();
        let d = v.camera.rotation.row(2).transpose();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * c;
    }
    let x = a.try_inverse()? * b;
    (x.iter().all(|v| v.is_finite()) && a.determinant().abs() > 1e-9).then_some(x)
}

/// Initial Gaussians: one per sparse point, or uniform random points in a
/// box around where the cameras look.
pub fn initialize(dataset: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<GaussianCloud> {
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    if !dataset.points.is_empty() {
        for p in &dataset.points {
            let color = match p.color {
                Some(c) => c,
                None => {
                    let o = &p.observations[0];
                    let view = dataset.view(o.view).ok_or(Error::UnknownView(o.view))?;
                    let (w, h) = view.image.shape();
                    let x = (math::floor(o.pixel.x).max(0.0) as usize).min(w - 1);
                    let y = (math::floor(o.pixel.y).max(0.0) as usize).min(h - 1);
                    view.image.pixel(x, y)
                }
            };
            positions.push(p.position);
            colors.push(color);
        }
    } else {
        if cfg.init.random_points == 0 {
            return Err(Error::EmptyScene("no sparse points and no random points requested".into()));
        }
        let extent = dataset.scene_extent();
        let (lo, hi) = match axes_focus(dataset) {
            Some(f) => (f.add_scalar(-extent), f.add_scalar(extent)),
            None => {
                let (lo, hi) = dataset.camera_bounds().ok_or_else(|| Error::EmptyScene("dataset has no views".into()))?;
                (lo.add_scalar(-extent), hi.add_scalar(extent))
            }
        };
        for _ in 0..cfg.init.random_points {
            positions.push(Vector3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k])));
            colors.push([rng.random(), rng.random(), rng.random()]);
        }
    }
    let dist = mean_nn_sq_distance(&positions, 3);
    let mut cloud = GaussianCloud::new(cfg.sh_degree);
    for ((p, c), d) in positions.iter().zip(&colors).zip(&dist) {
        let scale = math::sqrt(d.max(1e-14));
        cloud.push(Gaussian::new(*p, scale, cfg.init.opacity, *c, cfg.sh_degree))?;
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub view: u32,
    pub l1: f64,
    pub dssim: f64,
    pub depth_l1: f64,
    pub total: f64,
    pub depth_valid_fraction: f64,
    pub gaussians: usize,
    /// Creation iteration of the prior used, if any.
    pub prior_created_at: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<IterationRecord>,
    pub densify: Vec<(usize, DensifyOutcome)>,
    /// `(view, iteration)` of every prior generation.
    pub prior_generations: Vec<(u32, usize)>,
    pub scene_extent: f64,
    pub initial_gaussians: usize,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainConfig,
    cloud: GaussianCloud,
    state: OptimizerState,
    stats: DensifyStats,
    rng: ChaCha8Rng,
    /// Separate stream so prior sampling never perturbs view selection.
    prior_rng: ChaCha8Rng,
    order: Vec<usize>,
    train: Vec<usize>,
    iter: usize,
    extent: f64,
    report: RunReport,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train: Vec<usize> = (0..dataset.views.len()).filter(|&i| !dataset.views[i].holdout).collect();
        if train.is_empty() {
            return Err(Error::Config("dataset has no training views".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prior_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        prior_rng.set_stream(1);
        let cloud = initialize(dataset, &cfg, &mut rng)?;
        let extent = dataset.scene_extent();
        let report = RunReport { scene_extent: extent, initial_gaussians: cloud.len(), ..RunReport::default() };
        Ok(Self {
            dataset,
            state: OptimizerState::new(cloud.len(), cfg.sh_degree),
            stats: DensifyStats::new(cloud.len()),
            cfg,
            cloud,
            rng,
            prior_rng,
            order: Vec::new(),
            train,
            iter: 0,
            extent,
            report,
        })
    }

    /// Starts from a given cloud instead of the dataset initialization.
    pub fn with_cloud(dataset: &'a Dataset, cfg: TrainConfig, cloud: GaussianCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyScene("initial cloud is empty".into()));
        }
        if cloud.sh_degree != cfg.sh_degree {
            return Err(Error::Config(alloc::format!(
                "cloud SH degree {} differs from configured {}",
                cloud.sh_degree,
                cfg.sh_degree
            )));
        }
        let mut t = Self::new(dataset, cfg)?;
        t.state = OptimizerState::new(cloud.len(), t.cfg.sh_degree);
        t.stats = DensifyStats::new(cloud.len());
        t.report.initial_gaussians = cloud.len();
        t.cloud = cloud;
        Ok(t)
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.iterations
    }

    fn next_view(&mut self) -> usize {
        if self.order.is_empty() {
            self.order = self.train.clone();
            self.order.shuffle(&mut self.rng);
        }
        self.order.pop().expect("refilled above")
    }

    /// One optimization step on a randomly chosen training view.
    pub fn step(&mut self, provider: &mut dyn PriorProvider) -> Result<IterationRecord> {
        let iter = self.iter;
        let view = &self.dataset.views[self.next_view()];
        let cam = &view.camera;
        let frame = render_frame(&self.cloud, cam, self.cfg.background)?;
        let mask = frame.depth_mask();

        let depth_active = self.cfg.lambda_depth > 0.0 && iter >= self.cfg.depth_start;
        let prior = if depth_active {
            let req = PriorRequest { cloud: &self.cloud, view, iter, rng: &mut self.prior_rng };
            match provider.prior(req)? {
                Some(p) => Some(p),
                None => {
                    return Err(Error::Config(alloc::format!(
                        "depth weight is {} at iteration {iter} but no prior is available for view {}",
                        self.cfg.lambda_depth,
                        view.id
                    )))
                }
            }
        } else {
            None
        };
        let prior_created_at = prior.map(|p| p.created_at);
        let lambda_depth = if depth_active { self.cfg.lambda_depth } else { 0.0 };
        let term = DepthTerm { prior: prior.map(|p| &p.map), rendered: &frame.depth, mask: &mask };
        let (loss, lg) = total_loss_with_grad(&view.image, &frame.color, term, self.cfg.lambda_dssim, lambda_depth)?;
        let grads = backward_render(&self.cloud, cam, &frame, &lg.color, &lg.depth)?;

        let k = iter + 1;
        let d = &self.cfg.densify;
        if k <= d.stop {
            self.stats.accumulate(&grads, cam.width, cam.height);
        }
        let rates = self.cfg.learning_rates.slot_rates(self.cfg.sh_degree, iter, self.cfg.iterations, self.extent);
        adam_step(&mut self.cloud, &grads, &mut self.state, &rates)?;

        if k > d.start && k <= d.stop && k % d.interval == 0 {
            let outcome =
                densify_and_prune(&mut self.cloud, &mut self.stats, &mut self.state, d, self.extent, &mut self.rng)?;
            self.report.densify.push((k, outcome));
        }

        let record = IterationRecord {
            iteration: iter,
            view: view.id,
            l1: loss.l1,
            dssim: loss.dssim,
            depth_l1: loss.depth_l1,
            total: loss.total,
            depth_valid_fraction: loss.depth_valid_fraction,
            gaussians: self.cloud.len(),
            prior_created_at,
        };
        self.report.records.push(record);
        self.iter += 1;
        Ok(record)
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self, provider: &mut dyn PriorProvider) -> Result<()> {
        while !self.is_done() {
            self.step(provider)?;
        }
        if let Some(cache) = provider.cache() {
            self.report.prior_generations = cache.generated.clone();
        }
        Ok(())
    }

    pub fn finish(self) -> (GaussianCloud, RunReport) {
        (self.cloud, self.report)
    }
}

/// Trains a cloud on the dataset's training views.
pub fn train(dataset: &Dataset, cfg: TrainConfig, provider: &mut dyn PriorProvider) -> Result<(GaussianCloud, RunReport)> {
    let mut trainer = Trainer::new(dataset, cfg)?;
    trainer.run(provider)?;
    Ok(trainer.finish())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: u32,
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub delta_1_25: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

/// Means over the evaluated views. Depth metrics use pixels where the ground
/// truth is valid and the rendered alpha exceeds the mask threshold; depth is
/// the alpha-normalized map, without rescaling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub delta_1_25: Option<f64>,
    pub psnr: f64,
    pub ssim: f64,
    pub views: Vec<ViewMetrics>,
}

/// Evaluates the held-out views, or every view when none is held out.
pub fn evaluate(cloud: &GaussianCloud, dataset: &Dataset, background: [f64; 3]) -> Result<EvalSummary> {
    let held: Vec<_> = dataset.test_views().collect();
    let views: Vec<_> = if held.is_empty() { dataset.views.iter().collect() } else { held };
    if views.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut out = EvalSummary::default();
    for view in &views {
        let frame = render_frame(cloud, &view.camera, background)?;
        let (psnr, ssim) = eval_view_synthesis(&frame.color, &view.image)?;
        let mut m = ViewMetrics { view: view.id, psnr, ssim, ..ViewMetrics::default() };
        if let Some(gt) = &view.gt_depth {
            let mask: Vec<bool> = gt.valid.iter().zip(&frame.alpha.data).map(|(v, a)| *v && *a > ALPHA_MASK).collect();
            let gt_map = crate::image::ScalarMap::from_vec(gt.width, gt.height, gt.depth.clone())?;
            match eval_depth(&frame.depth, &gt_map, &mask) {
                Ok(d) => {
                    m.abs_rel = Some(d.abs_rel);
                    m.rmse = Some(d.rmse);
                    m.delta_1_25 = Some(d.delta_1_25);
                }
                Err(Error::EmptyEvaluation) => {}
                Err(e) => return Err(e),
            }
        }
        out.views.push(m);
    }
    let n = out.views.len() as f64;
    out.psnr = out.views.iter().map(|v| v.psnr).sum::<f64>() / n;
    out.ssim = out.views.iter().map(|v| v.ssim).sum::<f64>() / n;
    let mean_of = |f: fn(&ViewMetrics) -> Option<f64>| {
        let vals: Vec<f64> = out.views.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    out.abs_rel = mean_of(|v| v.abs_rel);
    out.rmse = mean_of(|v| v.rmse);
    out.delta_1_25 = mean_of(|v| v.delta_1_25);
    Ok(out)
}
