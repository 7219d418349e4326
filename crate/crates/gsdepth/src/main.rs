use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsdepth::config::{load_config, load_synth_spec, write_json};
use gsdepth::dataset::{load_dataset, load_external_priors, write_dataset};
use gsdepth::ply::{read_ply, write_ply, PlyMeta};
use gsdepth::report::{report_lines, write_report};
use gsdepth::{pfm, png, Error, Result};
use gsdepth_core::dataset::Dataset;
use gsdepth_core::priors::PriorProvider;
use gsdepth_core::raster::render_frame;
use gsdepth_core::scene::right_pose;
use gsdepth_core::stereo::{match_pair, StereoParams};
use gsdepth_core::synth::{gen_synth_scene, SynthSceneSpec};
use gsdepth_core::train::{build_provider, evaluate, PriorMode, TrainConfig, Trainer};
use serde::Serialize;

/// Gaussian splatting with self-evolving stereo depth supervision.
#[derive(Parser)]
#[command(name = "gsdepth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Gaussian cloud and write the PLY checkpoint and run report.
    Train(TrainArgs),
    /// Render one view to PNG color and PFM depth.
    Render(RenderArgs),
    /// Evaluate a checkpoint on the held-out views.
    Eval(EvalArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Match a rectified pair and write the disparity PFM.
    Match(MatchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory, or a synthetic scene spec JSON.
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ply: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    camera_id: u32,
    /// Also render the virtual right view at this baseline (world units).
    #[arg(long)]
    right_baseline: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ply: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f64>,
    /// Metrics JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; the two-plane scene when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Matcher parameters as JSON.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    d_max: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn rgb(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

fn load_data(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_dataset(path)
    } else {
        Ok(gen_synth_scene(&load_synth_spec(path)?)?)
    }
}

fn image_size(ds: &Dataset) -> Option<(usize, usize)> {
    ds.views.first().map(|v| v.image.shape())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let mut provider: Box<dyn PriorProvider> = match &cfg.prior {
        PriorMode::External { dir } => Box::new(load_external_priors(Path::new(dir), &data, cfg.depth_start)?),
        _ => build_provider(&cfg, &data)?,
    };
    let baseline = match cfg.prior {
        PriorMode::Stereo if cfg.lambda_depth > 0.0 => Some(cfg.baseline_interval(&data)?),
        _ => None,
    };
    if !a.quiet {
        eprintln!("{} views, {} sparse points, baseline {baseline:?}", data.views.len(), data.points.len());
    }
    let mut trainer = Trainer::new(&data, cfg.clone())?;
    while !trainer.is_done() {
        let r = trainer.step(provider.as_mut())?;
        if !a.quiet && (r.iteration % 100 == 0 || trainer.is_done()) {
            eprintln!(
                "iter {:5}  loss {:.5}  l1 {:.5}  depth {:.5}  gaussians {}",
                r.iteration, r.total, r.l1, r.depth_l1, r.gaussians
            );
        }
    }
    let mut report = trainer.report().clone();
    if let Some(cache) = provider.cache() {
        report.prior_generations = cache.generated.clone();
    }
    let (cloud, _) = trainer.finish();
    write_ply(&a.out.join("point_cloud.ply"), &cloud, &PlyMeta { image_size: image_size(&data) })?;
    write_report(&a.out.join("report.jsonl"), &report_lines(&cfg, baseline, &report))?;
    write_json(&a.out.join("config.json"), &cfg)
}

fn render(a: RenderArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (cloud, _) = read_ply(&a.ply)?;
    let view = data.view(a.camera_id).ok_or(gsdepth_core::Error::UnknownView(a.camera_id))?;
    let bg = rgb(&a.background);
    let frame = render_frame(&cloud, &view.camera, bg)?;
    png::write_png(&a.out.join("color.png"), &frame.color)?;
    pfm::write_pfm(&a.out.join("depth.pfm"), &pfm::Pfm::from_values(frame.depth.width, frame.depth.height, frame.depth.data.iter().copied()))?;
    if let Some(b) = a.right_baseline {
        let right = render_frame(&cloud, &right_pose(&view.camera, b)?, bg)?;
        png::write_png(&a.out.join("right.png"), &right.color)?;
        pfm::write_pfm(&a.out.join("right_depth.pfm"), &pfm::Pfm::from_values(right.depth.width, right.depth.height, right.depth.data.iter().copied()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    abs_rel: Option<f64>,
    rmse: Option<f64>,
    delta_1_25: Option<f64>,
    psnr: f64,
    ssim: f64,
    /// Not computed: needs a learned network.
    lpips: Option<f64>,
    views: Vec<gsdepth_core::train::ViewMetrics>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (cloud, meta) = read_ply(&a.ply)?;
    if let Some((w, h)) = meta.image_size {
        if let Some(v) = data.views.iter().find(|v| v.image.shape() != (w, h)) {
            return Err(Error::Mismatch(format!(
                "resolution mismatch: {} was trained at {w}x{h} but view {} is {}x{}",
                a.ply.display(),
                v.id,
                v.image.width,
                v.image.height
            )));
        }
    }
    let s = evaluate(&cloud, &data, rgb(&a.background))?;
    let m = Metrics { abs_rel: s.abs_rel, rmse: s.rmse, delta_1_25: s.delta_1_25, psnr: s.psnr, ssim: s.ssim, lpips: None, views: s.views };
    match &a.out {
        Some(p) => write_json(p, &m),
        None => {
            println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize"));
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => load_synth_spec(p)?,
        None => SynthSceneSpec::two_planes(),
    };
    let data = gen_synth_scene(&spec)?;
    write_dataset(&data, &a.out)?;
    write_json(&a.out.join("scene.json"), &spec)
}

fn match_cmd(a: MatchArgs) -> Result<()> {
    let left = png::read_png(&a.left)?;
    let right = png::read_png(&a.right)?;
    let mut params: StereoParams = match &a.params {
        Some(p) => gsdepth::config::read_json(p)?,
        None => StereoParams::default(),
    };
    if a.d_max.is_some() {
        params.d_max = a.d_max;
    }
    let disp = match_pair(&left, &right, &params)?;
    pfm::write_disparity(&a.out, &disp)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Match(a) => match_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
