//! Dataset directories.
//!
//! ```text
//! <dir>/cameras.txt, images.txt, points3D.txt   COLMAP text model
//! <dir>/images/<name>                           8-bit PNG per view
//! <dir>/depth/<view_id>.pfm                     optional ground-truth depth
//! <dir>/split.json                              optional {"test": [view ids]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use gsdepth_core::dataset::Dataset;
use gsdepth_core::priors::ExternalPriors;
use serde::{Deserialize, Serialize};

use crate::colmap::{load_colmap_text, ColmapModel};
use crate::config::{read_json, write_json};
use crate::error::{Error, Result};
use crate::{pfm, png};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub test: Vec<u32>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut ds = load_colmap_text(dir)?;
    for v in &mut ds.views {
        let p = dir.join("depth").join(format!("{}.pfm", v.id));
        if p.exists() {
            let d = pfm::read_depth(&p)?;
            if d.shape() != v.image.shape() {
                return Err(Error::Mismatch(format!(
                    "{}: depth is {}x{} but view {} is {}x{}",
                    p.display(),
                    d.width,
                    d.height,
                    v.id,
                    v.image.width,
                    v.image.height
                )));
            }
            v.gt_depth = Some(d);
        }
    }
    let split = dir.join("split.json");
    if split.exists() {
        let s: Split = read_json(&split)?;
        let test: BTreeSet<u32> = s.test.into_iter().collect();
        if let Some(id) = test.iter().find(|id| ds.view(**id).is_none()) {
            return Err(gsdepth_core::Error::UnknownView(*id).into());
        }
        for v in &mut ds.views {
            v.holdout = test.contains(&v.id);
        }
    }
    Ok(ds)
}

/// Images are quantized to 8 bits; depth is stored as float32.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    ColmapModel::from_dataset(dataset).write(dir)?;
    for v in &dataset.views {
        png::write_png(&dir.join("images").join(&v.name), &v.image)?;
        if let Some(d) = &v.gt_depth {
            pfm::write_depth(&dir.join("depth").join(format!("{}.pfm", v.id)), d)?;
        }
    }
    let test = dataset.test_views().map(|v| v.id).collect();
    write_json(&dir.join("split.json"), &Split { test })
}

/// Reads `<dir>/<view_id>.pfm` for every training view and aligns each map
/// to the sparse points that view observes.
pub fn load_external_priors(dir: &Path, dataset: &Dataset, start: usize) -> Result<ExternalPriors> {
    let mut preds = BTreeMap::new();
    for v in dataset.train_views() {
        let p = dir.join(format!("{}.pfm", v.id));
        let map = pfm::read_pfm(&p)?.to_scalar_map()?;
        if map.shape() != v.image.shape() {
            return Err(Error::Mismatch(format!(
                "{}: prior is {}x{} but view {} is {}x{}",
                p.display(),
                map.width,
                map.height,
                v.id,
                v.image.width,
                v.image.height
            )));
        }
        preds.insert(v.id, map);
    }
    Ok(ExternalPriors::align(&preds, &dataset.views, &dataset.points, start)?)
}
