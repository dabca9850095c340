//! `gazemap`: runs the mapping and gaze analytics stages on a dataset
//! directory. Errors end with one line `error: <category>: <message>` on
//! stderr and exit code 2 (config), 3 (input) or 4 (numerical failure).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gazemap_core::pipeline::{self, PipelineConfig, PipelineError};
use gazemap_core::synth::dataset::Dataset;
use gazemap_core::synth::demo;

#[derive(Parser)]
#[command(name = "gazemap", version, about = "3D gaze mapping and region-of-interest analytics")]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory: stage artifacts, or the dataset for `synth`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Dataset directory as written by `synth`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Depth and color scan to occupancy grid, sparse map and mesh.
    MapBuild(Data),
    /// Eye-tracker frames to poses and a localized/total report.
    Localize(Data),
    /// Poses and gaze samples to fixation hits and saliency.
    GazeMap(Data),
    /// Scan frames and reference logos to 2D detections.
    RoiDetect(Data),
    /// Detections to 3D regions on the mesh.
    RoiMap(Data),
    /// All artifacts to the metrics report.
    Analyze(Data),
    /// Renders a synthetic dataset; the bundled demo scene by default.
    Synth {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        session: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline(Data),
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::parse(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let out = &cli.out;
    match &cli.command {
        Command::MapBuild(d) => {
            let s = pipeline::map_build(&Dataset::new(&d.data), out, &cfg)?;
            println!(
                "tracked {}/{} frames, {} keyframes, {} landmarks, {} triangles",
                s.tracked, s.frames, s.keyframes, s.landmarks, s.triangles
            );
        }
        Command::Localize(d) => {
            let s = pipeline::localize(&Dataset::new(&d.data), out, &cfg)?;
            println!("localized = {}", gazemap_core::metrics::format_ratio(s.localized, s.total));
        }
        Command::GazeMap(d) => {
            let s = pipeline::gaze_map(&Dataset::new(&d.data), out, &cfg)?;
            println!("{} samples, {} valid, {} localized, {} hits", s.samples, s.valid, s.localized, s.hits);
        }
        Command::RoiDetect(d) => {
            let s = pipeline::roi_detect(&Dataset::new(&d.data), out, &cfg)?;
            println!("{} detections, {} kept", s.raw, s.kept);
        }
        Command::RoiMap(d) => {
            let n = pipeline::roi_map(&Dataset::new(&d.data), out, &cfg)?;
            println!("{n} regions");
        }
        Command::Analyze(d) => {
            let r = pipeline::analyze(&Dataset::new(&d.data), out, &cfg)?;
            print!("{}", r.to_text());
        }
        Command::Synth { scene, session } => {
            let scene = match scene {
                Some(p) => read(p)?,
                None => demo::SCENE.to_string(),
            };
            let session = match session {
                Some(p) => read(p)?,
                None => demo::SESSION.to_string(),
            };
            let s = pipeline::synth(&scene, &session, out, &cfg)?;
            println!(
                "{} scan frames, {} eye-tracker frames, {} gaze samples ({} valid), {} logo polygons, {} blurred frames",
                s.scan_frames, s.etg_frames, s.gaze_samples, s.valid_gaze, s.gt_polygons, s.blurred_frames
            );
        }
        Command::Pipeline(d) => {
            let r = pipeline::run_all(&Dataset::new(&d.data), out, &cfg)?;
            print!("{}", r.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
