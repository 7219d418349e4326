//! Line-delimited JSON run reports.

use std::io::Write as _;
use std::path::Path;

use gsdepth_core::train::{DensifyOutcome, IterationRecord, RunReport, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{self, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReportLine {
    Run {
        config: TrainConfig,
        /// Stereo baseline interval used for sampling, when stereo priors ran.
        baseline: Option<[f64; 2]>,
        scene_extent: f64,
        initial_gaussians: usize,
    },
    Iteration(IterationRecord),
    Densify {
        iteration: usize,
        #[serde(flatten)]
        outcome: DensifyOutcome,
    },
    Prior {
        view: u32,
        iteration: usize,
    },
}

pub fn report_lines(cfg: &TrainConfig, baseline: Option<[f64; 2]>, report: &RunReport) -> Vec<ReportLine> {
    let mut out = vec![ReportLine::Run {
        config: cfg.clone(),
        baseline,
        scene_extent: report.scene_extent,
        initial_gaussians: report.initial_gaussians,
    }];
    out.extend(report.records.iter().map(|r| ReportLine::Iteration(*r)));
    out.extend(report.densify.iter().map(|(iteration, outcome)| ReportLine::Densify { iteration: *iteration, outcome: *outcome }));
    out.extend(report.prior_generations.iter().map(|(view, iteration)| ReportLine::Prior { view: *view, iteration: *iteration }));
    out
}

pub fn write_report(path: &Path, lines: &[ReportLine]) -> Result<()> {
    let mut buf = Vec::new();
    for line in lines {
        serde_json::to_writer(&mut buf, line).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        buf.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    error::write(path, &buf)
}

pub fn read_report(path: &Path) -> Result<Vec<ReportLine>> {
    let text = String::from_utf8(error::read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
