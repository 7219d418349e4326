//! Depth priors for the depth term of the training loss: self-evolving
//! stereo, sparse SfM depth, and affinely aligned external maps.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::View;
use crate::error::{Error, Result};
use crate::image::{DepthMap, ScalarMap};
use crate::raster::render_frame;
use crate::scene::{project_point, right_pose, Camera, GaussianCloud, SparsePoint};
use crate::stereo::{match_pair, DisparityMap, StereoParams};

/// Smallest disparity (pixels) converted to depth.
pub const D_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    StereoSelf,
    SfmSparse,
    ExternalAligned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrior {
    pub map: DepthMap,
    pub source: PriorSource,
    pub created_at: usize,
    /// Stereo baseline used to build the prior.
    pub baseline: Option<f64>,
}

/// Cached priors per view, plus a log of every generation event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorCache {
    entries: BTreeMap<u32, DepthPrior>,
    /// `(view, iteration)` of each generation, in call order.
    pub generated: Vec<(u32, usize)>,
    /// `(view, iteration)` of each request at or after the start step.
    pub requests: Vec<(u32, usize)>,
}

impl PriorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, view: u32) -> Option<&DepthPrior> {
        self.entries.get(&view)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serves the cached prior of `view`, regenerating it with `generate`
    /// when missing or when `iter - created_at >= refresh`. Nothing is served
    /// before `start`.
    pub fn get_or_refresh(
        &mut self,
        view: u32,
        iter: usize,
        start: usize,
        refresh: usize,
        generate: impl FnOnce() -> Result<DepthPrior>,
    ) -> Result<Option<&DepthPrior>> {
        if iter < start {
            return Ok(None);
        }
        self.requests.push((view, iter));
        let stale = self.entries.get(&view).is_none_or(|p| iter.saturating_sub(p.created_at) >= refresh);
        if stale {
            let prior = generate()?;
            self.generated.push((view, iter));
            self.entries.insert(view, prior);
        }
        Ok(self.entries.get(&view))
    }
}

/// Triangulated depth `fx * b / d` on valid pixels with `d >= d_min`.
pub fn disparity_to_depth(disparity: &DisparityMap, fx: f64, baseline: f64, d_min: f64) -> DepthMap {
    let mut map = DepthMap::new(disparity.width, disparity.height);
    for (p, (d, ok)) in disparity.disparity.iter().zip(&disparity.valid).enumerate() {
        if *ok && *d >= d_min && *d > 0.0 {
            map.depth[p] = fx * baseline / d;
            map.valid[p] = true;
        }
    }
    map
}

/// Renders a virtual rectified pair from the cloud and converts the matched
/// disparity to depth.
pub fn stereo_prior(
    cloud: &GaussianCloud,
    cam: &Camera,
    baseline: f64,
    iter: usize,
    params: &StereoParams,
    background: [f64; 3],
) -> Result<DepthPrior> {
    if !(baseline > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("stereo baseline {baseline} must be positive")));
    }
    let left = render_frame(cloud, cam, background)?;
    if left.alpha.data.iter().all(|a| *a <= 1e-6) {
        return Err(Error::EmptyPrior("the rendered view is empty".into()));
    }
    let right = render_frame(cloud, &right_pose(cam, baseline)?, background)?;
    let disparity = match_pair(&left.color, &right.color, params)?;
    Ok(DepthPrior {
        map: disparity_to_depth(&disparity, cam.fx, baseline, D_MIN),
        source: PriorSource::StereoSelf,
        created_at: iter,
        baseline: Some(baseline),
    })
}

/// Projects points into `cam`; the nearest depth wins at the pixel containing the projection.
pub fn sparse_prior_from_points(points: &[SparsePoint], cam: &Camera, iter: usize) -> Result<DepthPrior> {
    let mut map = DepthMap::new(cam.width, cam.height);
    let mut any = false;
    for p in points {
        let Ok((px, z)) = project_point(&p.position, cam) else { continue };
        // Pixel (x, y) covers [x, x + 1).
        let (x, y) = (libm::floor(px.x), libm::floor(px.y));
        if x < 0.0 || y < 0.0 || x >= cam.width as f64 || y >= cam.height as f64 {
            continue;
        }
        let i = y as usize * cam.width + x as usize;
        if !map.valid[i] || z < map.depth[i] {
            map.depth[i] = z;
            map.valid[i] = true;
        }
        any = true;
    }
    if !any {
        return Err(Error::EmptyPrior("no sparse point projects into the view".into()));
    }
    Ok(DepthPrior { map, source: PriorSource::SfmSparse, created_at: iter, baseline: None })
}

/// Result of fitting `m * pred + q` to sparse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub shift: f64,
    pub prior: DepthPrior,
}

/// Least-squares scale and shift of a relative depth map against sparse
/// metric depth, in closed form.
pub fn align_external_prior(pred: &ScalarMap, sparse: &DepthPrior) -> Result<Alignment> {
    if pred.shape() != sparse.map.shape() {
        return Err(Error::shape("sparse prior", pred.shape(), sparse.map.shape()));
    }
    let pairs: Vec<(f64, f64)> = pred
        .data
        .iter()
        .zip(sparse.map.depth.iter().zip(&sparse.map.valid))
        .filter(|(x, (_, ok))| **ok && x.is_finite())
        .map(|(x, (y, _))| (*x, *y))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::DegenerateFit(alloc::format!("{} usable sparse pixels, need 2", pairs.len())));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (lo, hi) = pairs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if lo == hi || !(sxx > 0.0) {
        return Err(Error::DegenerateFit("prediction is constant at the sparse pixels".into()));
    }
    let scale = sxy / sxx;
    let shift = my - scale * mx;
    let values = pred.data.iter().map(|x| scale * x + shift).collect();
    let map = DepthMap::from_values(pred.width, pred.height, values)?;
    Ok(Alignment {
        scale,
        shift,
        prior: DepthPrior { map, source: PriorSource::ExternalAligned, created_at: 0, baseline: None },
    })
}

/// Baseline interval `[0.5, 2] * median_depth / fx * target_disparity`.
pub fn baseline_interval(median_depth: f64, fx: f64, target_disparity: f64) -> Result<[f64; 2]> {
    let b = median_depth / fx * target_disparity;
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::Config(alloc::format!(
            "cannot derive a baseline from median depth {median_depth}, fx {fx}, target disparity {target_disparity}"
        )));
    }
    Ok([0.5 * b, 2.0 * b])
}

/// Everything a provider may look at when asked for a prior.
pub struct PriorRequest<'a> {
    pub cloud: &'a GaussianCloud,
    pub view: &'a View,
    pub iter: usize,
    pub rng: &'a mut ChaCha8Rng,
}

pub trait PriorProvider {
    /// Prior for the requested view, or `None` when none applies yet.
    fn prior(&mut self, req: PriorRequest<'_>) -> Result<Option<&DepthPrior>>;

    /// Cache with the generation log, when the provider keeps one.
    fn cache(&self) -> Option<&PriorCache> {
        None
    }
}

/// Provider that never supplies a prior.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPrior;

impl PriorProvider for NoPrior {
    fn prior(&mut self, _req: PriorRequest<'_>) -> Result<Option<&DepthPrior>> {
        Ok(None)
    }
}

/// Self-evolving stereo priors, cached per view and refreshed every
/// `refresh` iterations.
#[derive(Debug, Clone)]
pub struct StereoPriors {
    pub cache: PriorCache,
    pub start: usize,
    pub refresh: usize,
    pub baseline: [f64; 2],
    pub params: StereoParams,
    pub background: [f64; 3],
}

impl StereoPriors {
    pub fn new(start: usize, refresh: usize, baseline: [f64; 2], params: StereoParams, background: [f64; 3]) -> Result<Self> {
        if refresh == 0 {
            return Err(Error::Config("refresh interval must be >= 1".into()));
        }
        if !(baseline[0] > 0.0 && baseline[0] <= baseline[1] && baseline[1].is_finite()) {
            return Err(Error::Config(alloc::format!("invalid baseline interval {baseline:?}")));
        }
        Ok(Self { cache: PriorCache::new(), start, refresh, baseline, params, background })
    }
}

impl PriorProvider for StereoPriors {
    fn prior(&mut self, req: PriorRequest<'_>) -> Result<Option<&DepthPrior>> {
        let [lo, hi] = self.baseline;
        let (params, background) = (&self.params, self.background);
        let PriorRequest { cloud, view, iter, rng } = req;
        self.cache.get_or_refresh(view.id, iter, self.start, self.refresh, || {
            let b = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            stereo_prior(cloud, &view.camera, b, iter, params, background)
        })
    }

    fn cache(&self) -> Option<&PriorCache> {
        Some(&self.cache)
    }
}

/// Sparse SfM depth from the points each view observes. Built once per view.
#[derive(Debug, Clone)]
pub struct SparsePriors {
    pub cache: PriorCache,
    pub start: usize,
    points: Vec<SparsePoint>,
}

impl SparsePriors {
    pub fn new(points: Vec<SparsePoint>, start: usize) -> Self {
        Self { cache: PriorCache::new(), start, points }
    }
}

impl PriorProvider for SparsePriors {
    fn prior(&mut self, req: PriorRequest<'_>) -> Result<Option<&DepthPrior>> {
        let points = &self.points;
        let view = req.view;
        self.cache.get_or_refresh(view.id, req.iter, self.start, usize::MAX, || {
            let seen: Vec<SparsePoint> = points.iter().filter(|p| p.observed_in(view.id)).cloned().collect();
            sparse_prior_from_points(&seen, &view.camera, req.iter)
        })
    }

    fn cache(&self) -> Option<&PriorCache> {
        Some(&self.cache)
    }
}

/// Dense priors aligned once at startup.
#[derive(Debug, Clone)]
pub struct ExternalPriors {
    pub start: usize,
    priors: BTreeMap<u32, DepthPrior>,
}

impl ExternalPriors {
    pub fn new(priors: BTreeMap<u32, DepthPrior>, start: usize) -> Self {
        Self { start, priors }
    }

    /// Aligns each relative map against the sparse depth of the points its
    /// view observes.
    pub fn align(preds: &BTreeMap<u32, ScalarMap>, views: &[View], points: &[SparsePoint], start: usize) -> Result<Self> {
        let mut priors = BTreeMap::new();
        for (id, pred) in preds {
            let view = views.iter().find(|v| v.id == *id).ok_or(Error::UnknownView(*id))?;
            let seen: Vec<SparsePoint> = points.iter().filter(|p| p.observed_in(*id)).cloned().collect();
            let sparse = sparse_prior_from_points(&seen, &view.camera, 0)?;
            priors.insert(*id, align_external_prior(pred, &sparse)?.prior);
        }
        Ok(Self { start, priors })
    }
}

impl PriorProvider for ExternalPriors {
    fn prior(&mut self, req: PriorRequest<'_>) -> Result<Option<&DepthPrior>> {
        if req.iter < self.start {
            return Ok(None);
        }
        Ok(self.priors.get(&req.view.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::scene::{Gaussian, Observation};
    use alloc::vec;
    use nalgebra::{Matrix3, Vector2, Vector3};
    use rand::SeedableRng;

    fn cam(w: usize, h: usize, f: f64) -> Camera {
        Camera::identity(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn point(x: f64, y: f64, z: f64) -> SparsePoint {
        SparsePoint {
            position: Vector3::new(x, y, z),
            observations: vec![Observation { view: 0, pixel: Vector2::zeros() }],
            color: None,
        }
    }

    #[test]
    fn disparity_conversion() {
        let mut d = DisparityMap::invalid(3, 1, 8);
        d.disparity = vec![2.0, 0.0, 0.4];
        d.valid = vec![true, true, true];
        let m = disparity_to_depth(&d, 100.0, 0.1, D_MIN);
        assert!((m.depth[0] - 5.0).abs() < 1e-12);
        assert_eq!(m.valid, vec![true, false, false]);
    }

    /// Dense grid of small Gaussians textured with random colors on the
    /// plane z = 5.
    fn textured_plane(cam: &Camera, z: f64, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cloud = GaussianCloud::new(0);
        let step = z / cam.fx * 1.0;
        let half_w = (cam.width as f64 / 2.0 + 4.0) * z / cam.fx;
        let half_h = (cam.height as f64 / 2.0 + 4.0) * z / cam.fy;
        let mut y = -half_h;
        while y <= half_h {
            let mut x = -half_w - 0.2 * z;
            while x <= half_w {
                let c = [rng.random(), rng.random(), rng.random()];
                cloud.push(Gaussian::new(Vector3::new(x, y, z), step * 0.6, 0.95, c, 0)).unwrap();
                x += step;
            }
            y += step;
        }
        cloud
    }

    #[test]
    fn stereo_prior_on_textured_plane() {
        let c = cam(96, 48, 100.0);
        let cloud = textured_plane(&c, 5.0, 3);
        let params = StereoParams { d_max: Some(12), ..StereoParams::default() };
        let prior = stereo_prior(&cloud, &c, 0.3, 10, &params, [0.0; 3]).unwrap();
        let mut depths: Vec<f64> = prior.map.depth.iter().zip(&prior.map.valid).filter(|(_, v)| **v).map(|(d, _)| *d).collect();
        assert!(depths.len() > 300, "{} valid", depths.len());
        let median = crate::math::median(&mut depths).unwrap();
        assert!((median - 5.0).abs() / 5.0 <= 0.02, "median {median}");
        assert_eq!(prior.created_at, 10);
        assert_eq!(prior.baseline, Some(0.3));
    }

    #[test]
    fn stereo_prior_of_empty_render_fails() {
        let c = cam(32, 16, 50.0);
        let params = StereoParams::default();
        let err = stereo_prior(&GaussianCloud::new(0), &c, 0.1, 0, &params, [0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptyPrior(_)));
    }

    #[test]
    fn sparse_examples() {
        let c = cam(100, 100, 100.0);
        let one = sparse_prior_from_points(&[point(0.0, 0.0, 5.0)], &c, 0).unwrap();
        assert_eq!(one.map.valid_count(), 1);
        assert_eq!(one.map.depth[50 * 100 + 50], 5.0);

        let both = sparse_prior_from_points(&[point(0.0, 0.0, 7.0), point(0.0, 0.0, 3.0)], &c, 0).unwrap();
        assert_eq!(both.map.valid_count(), 1);
        assert_eq!(both.map.depth[50 * 100 + 50], 3.0);

        assert!(matches!(sparse_prior_from_points(&[point(0.0, 0.0, -1.0)], &c, 0), Err(Error::EmptyPrior(_))));
    }

    #[test]
    fn sparse_depths_match_projection() {
        let c = cam(64, 48, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<SparsePoint> = (0..100)
            .map(|_| point(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..9.0)))
            .collect();
        let prior = sparse_prior_from_points(&pts, &c, 0).unwrap();
        assert!(prior.map.valid_count() <= 100);
        let zs: Vec<f64> = pts.iter().filter_map(|p| project_point(&p.position, &c).ok()).map(|(_, z)| z).collect();
        for (d, v) in prior.map.depth.iter().zip(&prior.map.valid) {
            if *v {
                assert!(zs.contains(d));
            }
        }
    }

    fn fit_case(m: f64, q: f64) -> Alignment {
        let w = 8;
        let pred = ScalarMap::from_vec(w, w, (0..w * w).map(|i| 1.0 + 0.37 * (i % 11) as f64 + 0.01 * i as f64).collect()).unwrap();
        let mut sparse = DepthMap::new(w, w);
        for i in (0..w * w).step_by(5) {
            sparse.depth[i] = m * pred.data[i] + q;
            sparse.valid[i] = true;
        }
        let prior = DepthPrior { map: sparse, source: PriorSource::SfmSparse, created_at: 0, baseline: None };
        align_external_prior(&pred, &prior).unwrap()
    }

    #[test]
    fn alignment_recovers_scale_and_shift() {
        for (m, q) in [(1.0, 0.0), (2.0, 3.0), (0.5, -1.5)] {
            let a = fit_case(m, q);
            assert!((a.scale - m).abs() < 1e-9 && (a.shift - q).abs() < 1e-9, "{m} {q}: {a:?}");
        }
    }

    #[test]
    fn alignment_of_constant_prediction_is_degenerate() {
        let pred = ScalarMap::filled(4, 4, 0.1);
        let prior = DepthPrior {
            map: DepthMap::from_values(4, 4, vec![2.0; 16]).unwrap(),
            source: PriorSource::SfmSparse,
            created_at: 0,
            baseline: None,
        };
        assert!(matches!(align_external_prior(&pred, &prior), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn alignment_is_affine_invariant() {
        let base = fit_case(2.0, 3.0);
        let w = 8;
        let pred = ScalarMap::from_vec(w, w, (0..w * w).map(|i| 1.0 + 0.37 * (i % 11) as f64 + 0.01 * i as f64).collect()).unwrap();
        let shifted = ScalarMap::from_vec(w, w, pred.data.iter().map(|x| -0.7 * x + 4.0).collect()).unwrap();
        let mut sparse = DepthMap::new(w, w);
        for i in (0..w * w).step_by(5) {
            sparse.depth[i] = 2.0 * pred.data[i] + 3.0;
            sparse.valid[i] = true;
        }
        let prior = DepthPrior { map: sparse, source: PriorSource::SfmSparse, created_at: 0, baseline: None };
        let other = align_external_prior(&shifted, &prior).unwrap();
        for (a, b) in base.prior.map.depth.iter().zip(&other.prior.map.depth) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn dummy_prior(iter: usize) -> Result<DepthPrior> {
        Ok(DepthPrior { map: DepthMap::new(1, 1), source: PriorSource::StereoSelf, created_at: iter, baseline: Some(1.0) })
    }

    #[test]
    fn cache_schedule() {
        let (t, tau) = (100, 10);
        let mut cache = PriorCache::new();
        assert!(cache.get_or_refresh(0, t - 1, t, tau, || dummy_prior(t - 1)).unwrap().is_none());
        let a = cache.get_or_refresh(0, t, t, tau, || dummy_prior(t)).unwrap().cloned().unwrap();
        let b = cache.get_or_refresh(0, t + tau - 1, t, tau, || dummy_prior(t + tau - 1)).unwrap().cloned().unwrap();
        assert_eq!(a, b);
        assert_eq!(b.created_at, t);
        let c = cache.get_or_refresh(0, t + tau, t, tau, || dummy_prior(t + tau)).unwrap().unwrap();
        assert_eq!(c.created_at, t + tau);
        assert_eq!(cache.generated, vec![(0, t), (0, t + tau)]);
    }

    #[test]
    fn stereo_provider_samples_baseline_in_interval() {
        let c = Camera::new(60.0, 60.0, 32.0, 24.0, 64, 48, Matrix3::identity(), Vector3::zeros()).unwrap();
        let cloud = textured_plane(&c, 5.0, 1);
        let view = View { id: 3, name: "v".into(), camera: c, image: Image::new(64, 48), gt_depth: None, holdout: false };
        let mut provider = StereoPriors::new(5, 4, [0.2, 0.4], StereoParams::default(), [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(provider.prior(PriorRequest { cloud: &cloud, view: &view, iter: 4, rng: &mut rng }).unwrap().is_none());
        let p = provider.prior(PriorRequest { cloud: &cloud, view: &view, iter: 5, rng: &mut rng }).unwrap().unwrap();
        let b = p.baseline.unwrap();
        assert!((0.2..=0.4).contains(&b));
        assert!(StereoPriors::new(5, 0, [0.2, 0.4], StereoParams::default(), [0.0; 3]).is_err());
        assert!(StereoPriors::new(5, 1, [0.5, 0.4], StereoParams::default(), [0.0; 3]).is_err());
    }

    #[test]
    fn baseline_rule() {
        let [lo, hi] = baseline_interval(5.0, 100.0, 32.0).unwrap();
        assert!((lo - 0.8).abs() < 1e-12 && (hi - 3.2).abs() < 1e-12);
        assert!(baseline_interval(0.0, 100.0, 32.0).is_err());
    }
}
