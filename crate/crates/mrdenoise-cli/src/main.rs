//! Command-line entry point for the MR denoising pipeline.
//!
//! Subcommands: generate-phantoms, add-noise, train, denoise, evaluate,
//! ablate. Every run writes a manifest next to its outputs; given the same
//! inputs and seed, output files are byte-identical across reruns.

mod commands;
mod error;
mod manifest;
mod pngout;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mrdenoise",
    version,
    about = "3D MR image denoising with a hybrid residual MLP-CNN model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic lesion phantoms as .vol files (plus lesion masks).
    GeneratePhantoms {
        /// Number of phantoms to write.
        #[arg(long)]
        count: usize,
        /// Volume shape as HxWxC, e.g. 64x64x6.
        #[arg(long, default_value = "64x64x6")]
        shape: String,
        /// Lesions per phantom.
        #[arg(long, default_value_t = 3)]
        lesions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Background smoothness scale in voxels.
        #[arg(long, default_value_t = 8.0)]
        smoothness: f64,
        #[arg(long, default_value_t = 1.0)]
        radius_min: f64,
        #[arg(long, default_value_t = 3.0)]
        radius_max: f64,
        /// Lesion intensity boost over its surroundings.
        #[arg(long, default_value_t = 1.5)]
        contrast: f32,
    },
    /// Corrupt a volume with Rician noise.
    AddNoise {
        #[arg(long = "in")]
        input: PathBuf,
        /// Noise fraction in [0, 1]; the study levels are 0.03, 0.09, 0.15.
        #[arg(long)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on clean volumes in a directory (noise added per config).
    Train {
        /// JSON file deserialising into the training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Directory of clean .vol volumes (files ending in _mask.vol are skipped).
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the config noise level.
        #[arg(long)]
        noise_level: Option<f64>,
    },
    /// Denoise one volume with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Patch grid stride for inference (defaults to the training stride).
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Denoise noisy volumes and report PSNR/SSIM against clean references.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of clean reference volumes.
        #[arg(long)]
        clean_dir: PathBuf,
        /// Directory of noisy volumes with matching filenames.
        #[arg(long)]
        noisy_dir: PathBuf,
        /// Output JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Optional directory for clean|noisy|denoised slice triptych PNGs.
        #[arg(long)]
        png_dir: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train the three block combinations and emit the comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Output JSON table path.
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GeneratePhantoms {
            count,
            shape,
            lesions,
            seed,
            out_dir,
            smoothness,
            radius_min,
            radius_max,
            contrast,
        } => commands::generate_phantoms(
            count, &shape, lesions, seed, &out_dir, smoothness, radius_min, radius_max, contrast,
        ),
        Command::AddNoise {
            input,
            level,
            seed,
            out,
        } => commands::add_noise(&input, level, seed, &out),
        Command::Train {
            config,
            data_dir,
            out_dir,
            seed,
            epochs,
            noise_level,
        } => commands::train(&config, &data_dir, &out_dir, seed, epochs, noise_level),
        Command::Denoise {
            checkpoint,
            input,
            out,
            stride,
        } => commands::denoise(&checkpoint, &input, &out, stride),
        Command::Evaluate {
            checkpoint,
            clean_dir,
            noisy_dir,
            report,
            png_dir,
            stride,
        } => commands::evaluate(
            &checkpoint,
            &clean_dir,
            &noisy_dir,
            &report,
            png_dir.as_deref(),
            stride,
        ),
        Command::Ablate {
            config,
            data_dir,
            report,
        } => commands::ablate(&config, &data_dir, &report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
