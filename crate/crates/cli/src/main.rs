//! Command-line front end: synthesize datasets, map them into a hybrid
//! Gaussian scene, evaluate checkpoints, render views, export meshes.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use splatmap_core::ingest::synth::{synth_scene_with, SynthParams};
use splatmap_core::ingest::Dataset;
use splatmap_core::pipeline::{
    load_config, run_eval, run_map, run_mesh, run_render, MapOptions,
};
use splatmap_core::scene::SceneConfig;

#[derive(Parser)]
#[command(name = "splatmap", about = "Online dense mapping with hybrid Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic street dataset with ground-truth depth.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Image size (square), pixels.
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// Camera yaw per frame, degrees.
        #[arg(long, default_value_t = 0.25)]
        yaw: f64,
    },
    /// Map a dataset into a scene checkpoint with a per-frame report.
    Map {
        /// Dataset directory.
        dataset: PathBuf,
        /// Output directory (checkpoint.bin, report.csv, summary.txt).
        #[arg(long)]
        out: PathBuf,
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint against a dataset (PSNR/SSIM/depth errors).
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one dataset view from a checkpoint (PNG + PFM depth).
    Render {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse rendered depth into a TSDF and export a PLY mesh.
    Mesh {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Output PLY path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        voxel: f64,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            out,
            seed,
            frames,
            resolution,
            yaw,
        } => {
            let mut params = SynthParams::new(seed, frames, (resolution, resolution));
            params.yaw_deg_per_frame = yaw;
            synth_scene_with(&out, &params).context("generating synthetic dataset")?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Map {
            dataset,
            out,
            config,
            seed,
        } => {
            let dataset = Dataset::open(&dataset).context("opening dataset")?;
            let config = match config {
                Some(path) => load_config(&path).context("loading config")?,
                None => SceneConfig::default(),
            };
            let opts = MapOptions {
                config,
                seed,
                out_dir: Some(out.clone()),
            };
            let (_, report) = run_map(&dataset, &opts).context("mapping")?;
            print!("{}", report.summary());
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let dataset = Dataset::open(&dataset).context("opening dataset")?;
            let (_, report) = run_eval(&checkpoint, &dataset).context("evaluating")?;
            print!("{}", report.summary());
            if let Some(path) = out {
                report.write_csv(&path).context("writing csv")?;
                println!("csv written to {}", path.display());
            }
        }
        Command::Render {
            checkpoint,
            dataset,
            frame,
            out,
        } => {
            let dataset = Dataset::open(&dataset).context("opening dataset")?;
            run_render(&checkpoint, &dataset, frame, &out).context("rendering")?;
            println!("rendered frame {frame} into {}", out.display());
        }
        Command::Mesh {
            checkpoint,
            dataset,
            out,
            voxel,
        } => {
            let dataset = Dataset::open(&dataset).context("opening dataset")?;
            let mesh = run_mesh(&checkpoint, &dataset, &out, voxel).context("meshing")?;
            println!(
                "wrote {} vertices / {} faces to {}",
                mesh.vertices.len(),
                mesh.faces.len(),
                out.display()
            );
        }
    }
    Ok(())
}
