//! Posed images plus sparse points: the input to training and evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::math;
use crate::scene::{Camera, SparsePoint};

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: u32,
    pub name: String,
    pub camera: Camera,
    pub image: Image,
    pub gt_depth: Option<DepthMap>,
    /// Held out for evaluation; never used for training.
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    pub points: Vec<SparsePoint>,
}

impl Dataset {
    /// Validates ids, shapes and observation references.
    pub fn new(views: Vec<View>, points: Vec<SparsePoint>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for v in &views {
            if !ids.insert(v.id) {
                return Err(Error::InvalidParameter(alloc::format!("duplicate view id {}", v.id)));
            }
            v.camera.validate()?;
            let cam_shape = (v.camera.width, v.camera.height);
            if v.image.shape() != cam_shape {
                return Err(Error::shape(&alloc::format!("image of view {}", v.id), cam_shape, v.image.shape()));
            }
            if let Some(d) = &v.gt_depth {
                if d.shape() != cam_shape {
                    return Err(Error::shape(&alloc::format!("depth of view {}", v.id), cam_shape, d.shape()));
                }
            }
        }
        for p in &points {
            if p.observations.is_empty() {
                return Err(Error::InvalidParameter("sparse point without observations".into()));
            }
            if let Some(o) = p.observations.iter().find(|o| !ids.contains(&o.view)) {
                return Err(Error::UnknownView(o.view));
            }
        }
        Ok(Self { views, points })
    }

    pub fn view(&self, id: u32) -> Option<&View> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| !v.holdout)
    }

    pub fn test_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.holdout)
    }

    pub fn cameras(&self) -> BTreeMap<u32, Camera> {
        self.views.iter().map(|v| (v.id, v.camera.clone())).collect()
    }

    /// Radius enclosing the camera centers around their mean, inflated by
    /// 10%. Falls back to 1 for a single camera.
    pub fn scene_extent(&self) -> f64 {
        if self.views.is_empty() {
            return 1.0;
        }
        let centers: Vec<Vector3<f64>> = self.views.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().fold(Vector3::zeros(), |a, c| a + c) / centers.len() as f64;
        let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
        if radius > 1e-9 { radius } else { 1.0 }
    }

    /// Median camera-space depth of the sparse points over their observing
    /// views.
    pub fn median_point_depth(&self) -> Option<f64> {
        let cams = self.cameras();
        let mut depths: Vec<f64> = self
            .points
            .iter()
            .flat_map(|p| p.observations.iter().map(move |o| (p, o.view)))
            .filter_map(|(p, id)| {
                let z = cams.get(&id)?.world_to_camera(&p.position).z;
                (z > 0.0).then_some(z)
            })
            .collect();
        math::median(&mut depths)
    }

    /// Axis-aligned bounds of the camera centers.
    pub fn camera_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.views.iter().map(|v| v.camera.center());
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), c| (lo.inf(&c), hi.sup(&c))))
    }
}
