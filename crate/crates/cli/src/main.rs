mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pillar_core::Error;

#[derive(Parser)]
#[command(
    name = "pillar",
    about = "Sparse pillar-query multi-camera 3D detection decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic scene and its ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for scene.json and gt.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Initialize model parameters from a run config.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the decoder and write per-layer detections as JSONL.
    Infer {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Decoder depth; defaults to the model config.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        score_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit parameters to a scene with SPSA.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Run config whose `fit` section supplies the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        perturbation: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        out_params: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Score detections against ground truth.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Layer to score; defaults to the deepest layer present.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw first-layer sampling points per frame and view.
    PlotSampling {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Half-open frame range, e.g. `0..2`.
        #[arg(long, default_value = "0..1")]
        frames: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Draw receptive-field statistics.
    PlotTau {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(&config, &out, seed),
        Command::Init { config, out, seed } => commands::init(&config, &out, seed),
        Command::Infer {
            scene,
            params,
            layers,
            score_threshold,
            out,
        } => commands::infer(&scene, &params, layers, score_threshold, &out),
        Command::Fit {
            scene,
            params,
            config,
            steps,
            seed,
            step_size,
            perturbation,
            layers,
            out_params,
            trace,
        } => commands::fit(
            &scene,
            &params,
            config.as_deref(),
            commands::FitOverrides {
                steps,
                seed,
                step_size,
                perturbation,
                layers,
            },
            &out_params,
            &trace,
        ),
        Command::Eval {
            detections,
            ground_truth,
            layer,
            frame,
            out,
        } => commands::eval(&detections, &ground_truth, layer, frame, &out),
        Command::PlotSampling {
            scene,
            params,
            frames,
            out_dir,
        } => commands::plot_sampling(&scene, &params, &frames, &out_dir),
        Command::PlotTau {
            scene,
            params,
            layers,
            out_dir,
        } => commands::plot_tau(&scene, &params, layers, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Contract(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
