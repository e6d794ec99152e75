//! Subcommand implementations.

use crate::error::CliError;
use crate::manifest::ManifestBuilder;
use crate::pngout;
use mrdenoise::data::{generate_phantom, load_volume, save_volume, PhantomSpec, Volume};
use mrdenoise::metrics::MetricReport;
use mrdenoise::noise::{add_rician, NoiseSpec};
use mrdenoise::train::{
    self, evaluate as evaluate_rows, load_checkpoint, noisy_baseline, prepare_data,
    save_checkpoint, TrainConfig,
};
use serde::Serialize;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

fn parse_shape(s: &str) -> Result<(usize, usize, usize), CliError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "shape must look like 64x64x6, got {s:?}"
        )));
    }
    let dim = |p: &str| -> Result<usize, CliError> {
        p.parse::<usize>()
            .map_err(|_| CliError::config(format!("bad shape component {p:?} in {s:?}")))
    };
    Ok((dim(parts[0])?, dim(parts[1])?, dim(parts[2])?))
}

/// Clean volumes in a directory, sorted by filename; `*_mask.vol` skipped.
fn list_volumes(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut out = Vec::new();
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(e.to_string()))?;
        let path = entry.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n.to_string(),
            None => continue,
        };
        if name.ends_with(".vol") && !name.ends_with("_mask.vol") {
            out.push((name, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::io(format!(
            "no .vol volumes found in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn load_train_config(
    path: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    noise_level: Option<f64>,
) -> Result<TrainConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        config.seed = s;
        config.model.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(n) = noise_level {
        config.noise_level = n;
    }
    config.validate()?;
    Ok(config)
}

#[allow(clippy::too_many_arguments)]
pub fn generate_phantoms(
    count: usize,
    shape: &str,
    lesions: usize,
    seed: u64,
    out_dir: &Path,
    smoothness: f64,
    radius_min: f64,
    radius_max: f64,
    contrast: f32,
) -> Result<(), CliError> {
    let shape = parse_shape(shape)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("{}: {e}", out_dir.display())))?;
    let mut manifest = ManifestBuilder::new(
        "generate-phantoms",
        Some(seed),
        serde_json::json!({
            "count": count,
            "shape": [shape.0, shape.1, shape.2],
            "lesions": lesions,
            "smoothness": smoothness,
            "radius": [radius_min, radius_max],
            "contrast": contrast,
        }),
    );
    for i in 0..count {
        let spec = PhantomSpec {
            shape,
            smoothness,
            n_lesions: lesions,
            lesion_radius: (radius_min, radius_max),
            lesion_contrast: contrast,
            seed: seed.wrapping_add(i as u64),
        };
        let (clean, mask) = generate_phantom(&spec)?;
        let vol_path = out_dir.join(format!("phantom_{i:03}.vol"));
        let mask_path = out_dir.join(format!("phantom_{i:03}_mask.vol"));
        save_volume(&clean, &vol_path)?;
        save_volume(&mask, &mask_path)?;
        manifest.output(&vol_path);
        manifest.output(&mask_path);
    }
    manifest.write(&out_dir.join("manifest.json"))?;
    println!("wrote {count} phantoms to {}", out_dir.display());
    Ok(())
}

pub fn add_noise(input: &Path, level: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let spec = NoiseSpec::new(level, seed)?;
    let volume = load_volume(input)?;
    let noisy = add_rician(&volume, &spec)?;
    save_volume(&noisy, out)?;
    let mut manifest = ManifestBuilder::new(
        "add-noise",
        Some(seed),
        serde_json::json!({ "level": level }),
    );
    manifest.input(input);
    manifest.output(out);
    manifest.write(&manifest_path(out))?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    name.push_str(".manifest.json");
    out.with_file_name(name)
}

pub fn train(
    config_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    noise_level: Option<f64>,
) -> Result<(), CliError> {
    let config = load_train_config(config_path, seed, epochs, noise_level)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(format!("{}: {e}", out_dir.display())))?;

    let volumes = load_clean_volumes(data_dir)?;
    let (data, _test) = prepare_data(&volumes, &config)?;
    println!(
        "training {} on {} patch pairs ({} epochs, batch {})",
        config.model.variant.label(),
        data.train_pairs.len,
        config.epochs,
        config.batch_size
    );

    let best_path = out_dir.join("best.ckpt");
    let mut last_best: Option<usize> = None;
    let outcome = train::train_with(&config, &data, |ckpt, summary| {
        println!(
            "epoch {:3}  loss {:.6}  val PSNR {:.3} dB  val SSIM {:.4}",
            summary.epoch, summary.mean_loss, summary.val_psnr, summary.val_ssim
        );
        if ckpt.best_epoch != last_best && ckpt.best_epoch == Some(summary.epoch) {
            last_best = ckpt.best_epoch;
            save_checkpoint(ckpt, &best_path)?;
        }
        if config.checkpoint_every > 0 && (summary.epoch + 1) % config.checkpoint_every == 0 {
            save_checkpoint(ckpt, &out_dir.join(format!("epoch_{:04}.ckpt", summary.epoch)))?;
        }
        Ok(())
    })?;

    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&outcome.final_checkpoint, &final_path)?;

    let loss_path = out_dir.join("loss.csv");
    let mut csv = String::from("epoch,batch,loss\n");
    for r in &outcome.losses {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.batch, r.loss));
    }
    fs::write(&loss_path, csv).map_err(|e| CliError::io(format!("{}: {e}", loss_path.display())))?;

    let mut manifest = ManifestBuilder::new(
        "train",
        Some(config.seed),
        serde_json::to_value(&config)?,
    );
    manifest.input(config_path);
    manifest.input(data_dir);
    manifest.output(&final_path);
    if best_path.exists() {
        manifest.output(&best_path);
    }
    manifest.output(&loss_path);
    manifest.write(&out_dir.join("manifest.json"))?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn load_clean_volumes(data_dir: &Path) -> Result<Vec<(String, Volume)>, CliError> {
    list_volumes(data_dir)?
        .into_iter()
        .map(|(name, path)| Ok((name, load_volume(&path)?)))
        .collect()
}

pub fn denoise(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    stride: Option<usize>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let stride = stride.unwrap_or(ckpt.config.stride);
    let noisy = load_volume(input)?;
    let mut params = ckpt.params;
    let denoised = train::denoise_volume(&mut params, &noisy, stride)?;
    save_volume(&denoised, out)?;
    let mut manifest = ManifestBuilder::new(
        "denoise",
        Some(ckpt.config.seed),
        serde_json::json!({ "stride": stride, "checkpoint": checkpoint }),
    );
    manifest.input(checkpoint);
    manifest.input(input);
    manifest.output(out);
    manifest.write(&manifest_path(out))?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport {
    denoised: MetricReport,
    noisy_input: MetricReport,
}

pub fn evaluate(
    checkpoint: &Path,
    clean_dir: &Path,
    noisy_dir: &Path,
    report_path: &Path,
    png_dir: Option<&Path>,
    stride: Option<usize>,
) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let stride = stride.unwrap_or(ckpt.config.stride);

    // pair volumes by file name
    let clean = list_volumes(clean_dir)?;
    let mut rows = Vec::new();
    for (name, clean_path) in clean {
        let noisy_path = noisy_dir.join(&name);
        if !noisy_path.exists() {
            continue;
        }
        rows.push((
            name.trim_end_matches(".vol").to_string(),
            load_volume(&noisy_path)?,
            load_volume(&clean_path)?,
        ));
    }
    if rows.is_empty() {
        return Err(CliError::io(format!(
            "no volume pairs shared between {} and {}",
            clean_dir.display(),
            noisy_dir.display()
        )));
    }

    let mut params = ckpt.params;
    let denoised_report = evaluate_rows(&mut params, &rows, stride)?;
    let noisy_report = noisy_baseline(&rows)?;

    let mut manifest = ManifestBuilder::new(
        "evaluate",
        Some(ckpt.config.seed),
        serde_json::json!({ "stride": stride, "checkpoint": checkpoint }),
    );
    manifest.input(checkpoint);
    manifest.input(clean_dir);
    manifest.input(noisy_dir);

    if let Some(png_dir) = png_dir {
        fs::create_dir_all(png_dir)
            .map_err(|e| CliError::io(format!("{}: {e}", png_dir.display())))?;
        let mut windows = serde_json::Map::new();
        for (id, noisy, clean) in &rows {
            let den = train::denoise_volume(&mut params, noisy, stride)?;
            let (_, _, c) = clean.shape();
            for ci in 0..c {
                let path = png_dir.join(format!("{id}_slice{ci}.png"));
                let (lo, hi) = pngout::write_triptych(clean, noisy, &den, ci, &path)?;
                manifest.output(&path);
                windows.insert(
                    format!("{id}_slice{ci}"),
                    serde_json::json!({ "lo": lo, "hi": hi }),
                );
            }
        }
        manifest.note("png_windowing", serde_json::Value::Object(windows));
    }

    let report = EvaluateReport {
        denoised: denoised_report,
        noisy_input: noisy_report,
    };
    fs::write(report_path, serde_json::to_vec_pretty(&report)?)
        .map_err(|e| CliError::io(format!("{}: {e}", report_path.display())))?;
    manifest.output(report_path);
    manifest.write(&manifest_path(report_path))?;
    println!(
        "mean PSNR {:.3} dB (noisy {:.3}), mean SSIM {:.4} (noisy {:.4})",
        report.denoised.mean_psnr,
        report.noisy_input.mean_psnr,
        report.denoised.mean_ssim,
        report.noisy_input.mean_ssim
    );
    Ok(())
}

pub fn ablate(config_path: &Path, data_dir: &Path, report_path: &Path) -> Result<(), CliError> {
    let config = load_train_config(config_path, None, None, None)?;
    let volumes = load_clean_volumes(data_dir)?;
    let (data, _) = prepare_data(&volumes, &config)?;
    let table = train::ablate(&config, &data)?;

    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{:<10} {:>10} {:>8}", "model", "PSNR", "SSIM");
    for row in &table.rows {
        let _ = writeln!(
            out,
            "{:<10} {:>10.4} {:>8.4}{}",
            row.model,
            row.psnr,
            row.ssim,
            if row.converged { "" } else { "  [did not converge]" }
        );
    }
    drop(out);

    fs::write(report_path, serde_json::to_vec_pretty(&table)?)
        .map_err(|e| CliError::io(format!("{}: {e}", report_path.display())))?;
    let mut manifest = ManifestBuilder::new(
        "ablate",
        Some(config.seed),
        serde_json::to_value(&config)?,
    );
    manifest.input(config_path);
    manifest.input(data_dir);
    manifest.output(report_path);
    manifest.write(&manifest_path(report_path))?;
    Ok(())
}
