//! Adam-optimised training on the patch MSE objective, checkpointing,
//! full-volume evaluation, and the block-combination ablation harness.
//!
//! Determinism contract: a (seed, config, dataset) triple fully determines
//! every logged loss and the final checkpoint. Epoch shuffles are derived
//! from (seed, epoch), so resuming from a checkpoint after epoch k replays
//! exactly what an uninterrupted run would have done.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::data::{
    build_patch_dataset, epoch_permutation, DataError, DatasetSplit, PatchPairs, Volume,
};
use crate::metrics::{psnr, ssim, MetricError, MetricReport};
use crate::model::{
    assemble, forward, init_params, patchify, ModelConfig, ModelError, ModelParams,
};
use crate::noise::{add_rician, NoiseError, NoiseSpec};
use crate::tensor::{NormMode, Tape};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss is not finite at epoch {epoch}, batch {batch}; parameter norms: {}",
        .param_norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect::<Vec<_>>().join(", "))]
    NanLoss {
        epoch: usize,
        batch: usize,
        param_norms: Vec<(String, f64)>,
    },
    #[error("missing gradient for trainable parameter {0}")]
    MissingGrad(String),
    #[error("gradient list has {got} entries, expected {expected}")]
    GradCount { expected: usize, got: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn default_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    32
}

/// Training hyperparameters plus the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Rician noise fraction applied to the clean volumes.
    pub noise_level: f64,
    /// Patch grid stride for both training extraction and inference.
    pub stride: usize,
    /// Volumes per split, assigned in input order.
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Write a numbered checkpoint every this many epochs (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// The desk-scale preset: 20/5/5 phantoms of 64 x 64 x 6 at 15% noise,
    /// batch 32, 50 epochs, lr 5e-4. Stride 12 tiles 64 voxels exactly
    /// ((64 - 16) % 12 == 0), so assembly covers every voxel.
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            batch_size: default_batch(),
            epochs: 50,
            seed,
            noise_level: 0.15,
            stride: 12,
            n_train: 20,
            n_val: 5,
            n_test: 5,
            checkpoint_every: 0,
            model: ModelConfig::desk_scale(seed),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(TrainError::Checkpoint(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Checkpoint("batch_size must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(TrainError::Checkpoint("stride must be >= 1".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One logged minibatch loss.
#[derive(Debug, Clone, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Per-epoch summary with validation metrics.
#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

/// Everything a training run produces in memory.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the best validation PSNR seen during this run.
    pub best_checkpoint: Option<Checkpoint>,
    pub losses: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Training patches plus validation volumes.
pub struct TrainData {
    pub train_pairs: PatchPairs,
    /// (id, noisy, clean) validation volumes.
    pub val: Vec<(String, Volume, Volume)>,
}

/// Splits clean volumes by the configured counts, corrupts each with Rician
/// noise at `config.noise_level` (per-volume derived seeds) and builds the
/// training patch set. Returns the train/val data and the held-out test rows.
#[allow(clippy::type_complexity)]
pub fn prepare_data(
    clean_volumes: &[(String, Volume)],
    config: &TrainConfig,
) -> Result<(TrainData, Vec<(String, Volume, Volume)>), TrainError> {
    let ids: Vec<String> = clean_volumes.iter().map(|(id, _)| id.clone()).collect();
    let split = DatasetSplit::by_counts(&ids, config.n_train, config.n_val, config.n_test)?;
    split.validate()?;

    let noisy_of = |idx: usize, v: &Volume| -> Result<Volume, TrainError> {
        let seed = config
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(idx as u64 + 1));
        Ok(add_rician(v, &NoiseSpec::new(config.noise_level, seed)?)?)
    };

    let mut train_pairs_vols = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (idx, (id, clean)) in clean_volumes.iter().enumerate() {
        let noisy = noisy_of(idx, clean)?;
        if split.train.contains(id) {
            train_pairs_vols.push((noisy, clean.clone()));
        } else if split.val.contains(id) {
            val.push((id.clone(), noisy, clean.clone()));
        } else if split.test.contains(id) {
            test.push((id.clone(), noisy, clean.clone()));
        }
    }
    let train_pairs = build_patch_dataset(&train_pairs_vols, config.model.p, config.stride)?;
    Ok((TrainData { train_pairs, val }, test))
}

/// Patch-wise denoising of one volume: patchify with `stride`, run the model
/// in eval mode over all patches, and average the overlapping predictions.
pub fn denoise_volume(
    params: &mut ModelParams<f32>,
    noisy: &Volume,
    stride: usize,
) -> Result<Volume, TrainError> {
    let ps = patchify(noisy, params.config.p, stride)?;
    let d = ps.dim();
    let mut predictions = Vec::with_capacity(ps.values.len());
    // chunked batches bound the tape's activation memory on large volumes;
    // eval-mode ops are per-sample so chunking cannot change the values
    const CHUNK: usize = 256;
    let mut row = 0;
    while row < ps.k() {
        let take = CHUNK.min(ps.k() - row);
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            ps.values[row * d..(row + take) * d].to_vec(),
            &[take, d],
            false,
        )?;
        let pass = forward(&mut tape, params, x, NormMode::Eval)?;
        predictions.extend_from_slice(tape.values(pass.output));
        row += take;
    }
    let out = ps.with_values(predictions)?;
    Ok(assemble(&out)?)
}

/// Denoises every (id, noisy, clean) row and reports PSNR/SSIM vs clean.
pub fn evaluate(
    params: &mut ModelParams<f32>,
    rows: &[(String, Volume, Volume)],
    stride: usize,
) -> Result<MetricReport, TrainError> {
    let mut denoised = Vec::with_capacity(rows.len());
    for (id, noisy, _) in rows {
        denoised.push((id.clone(), denoise_volume(params, noisy, stride)?));
    }
    let triples: Vec<(String, &Volume, &Volume)> = denoised
        .iter()
        .zip(rows)
        .map(|((id, den), (_, _, clean))| (id.clone(), den, clean))
        .collect();
    Ok(MetricReport::evaluate(&triples)?)
}

/// Metrics of the noisy inputs themselves against clean (the no-op baseline).
pub fn noisy_baseline(rows: &[(String, Volume, Volume)]) -> Result<MetricReport, TrainError> {
    let triples: Vec<(String, &Volume, &Volume)> = rows
        .iter()
        .map(|(id, noisy, clean)| (id.clone(), noisy, clean))
        .collect();
    Ok(MetricReport::evaluate(&triples)?)
}

fn param_norms(params: &ModelParams<f32>) -> Vec<(String, f64)> {
    params
        .tensors
        .iter()
        .map(|t| {
            let sq: f64 = t.values.iter().map(|&v| (v as f64) * (v as f64)).sum();
            (t.name.clone(), sq.sqrt())
        })
        .collect()
}

struct TrainState {
    params: ModelParams<f32>,
    adam: AdamState,
    best_val_psnr: Option<f64>,
    best_epoch: Option<usize>,
}

fn make_checkpoint(config: &TrainConfig, state: &TrainState, epoch_done: usize) -> Checkpoint {
    Checkpoint {
        config: config.clone(),
        epoch: epoch_done,
        params: state.params.clone(),
        adam: state.adam.clone(),
        best_val_psnr: state.best_val_psnr,
        best_epoch: state.best_epoch,
    }
}

fn run_epochs(
    config: &TrainConfig,
    data: &TrainData,
    mut state: TrainState,
    start_epoch: usize,
    on_epoch: &mut dyn FnMut(&Checkpoint, &EpochSummary) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let n = data.train_pairs.len;
    let d = data.train_pairs.dim;
    let bs = config.batch_size;
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best_checkpoint: Option<Checkpoint> = None;

    for epoch in start_epoch..config.epochs {
        let perm = epoch_permutation(config.seed, epoch, n);
        let mut epoch_loss = 0.0f64;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in perm.chunks(bs).enumerate() {
            let mut noisy = Vec::with_capacity(chunk.len() * d);
            let mut clean = Vec::with_capacity(chunk.len() * d);
            for &row in chunk {
                noisy.extend_from_slice(data.train_pairs.noisy_patch(row));
                clean.extend_from_slice(data.train_pairs.clean_patch(row));
            }
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(noisy, &[chunk.len(), d], false)?;
            let t = tape.leaf(clean, &[chunk.len(), d], false)?;
            let pass = forward(&mut tape, &mut state.params, x, NormMode::Train)?;
            let loss_t = tape.mse_loss(pass.output, t)?;
            let loss = tape.value_scalar(loss_t) as f64;
            if !loss.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    param_norms: param_norms(&state.params),
                });
            }
            tape.backward(loss_t)?;
            let grads: Vec<Vec<f32>> = pass
                .bound
                .leaves
                .iter()
                .zip(&state.params.tensors)
                .map(|(&leaf, tensor)| {
                    tape.grad(leaf)
                        .map(|g| g.to_vec())
                        .ok_or_else(|| TrainError::MissingGrad(tensor.name.clone()))
                })
                .collect::<Result<_, _>>()?;
            adam_step(&mut state.params, &grads, &mut state.adam, config)?;
            losses.push(LossRecord {
                epoch,
                batch: batch_idx,
                loss,
            });
            epoch_loss += loss;
            n_batches += 1;
        }

        // validation pass in eval mode (running stats frozen)
        let (mut vp, mut vs) = (0.0f64, 0.0f64);
        for (_, noisy, clean) in &data.val {
            let den = denoise_volume(&mut state.params, noisy, config.stride)?;
            vp += psnr(&den, clean)?;
            vs += ssim(&den, clean)?;
        }
        let nv = data.val.len().max(1) as f64;
        let summary = EpochSummary {
            epoch,
            mean_loss: epoch_loss / n_batches.max(1) as f64,
            val_psnr: vp / nv,
            val_ssim: vs / nv,
        };

        if !data.val.is_empty()
            && state
                .best_val_psnr
                .map_or(true, |best| summary.val_psnr > best)
        {
            state.best_val_psnr = Some(summary.val_psnr);
            state.best_epoch = Some(epoch);
            best_checkpoint = Some(make_checkpoint(config, &state, epoch + 1));
        }
        let ckpt = make_checkpoint(config, &state, epoch + 1);
        on_epoch(&ckpt, &summary)?;
        epochs.push(summary);
    }

    Ok(TrainOutcome {
        final_checkpoint: make_checkpoint(config, &state, config.epochs),
        best_checkpoint,
        losses,
        epochs,
    })
}

/// Trains from freshly initialised parameters.
pub fn train(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome, TrainError> {
    train_with(config, data, |_, _| Ok(()))
}

/// Like [`train`], invoking `on_epoch` with the checkpoint and summary after
/// every epoch (checkpoint cadence and streaming logs hang off this).
pub fn train_with(
    config: &TrainConfig,
    data: &TrainData,
    mut on_epoch: impl FnMut(&Checkpoint, &EpochSummary) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let params = init_params(&config.model)?;
    let adam = AdamState::new(&params);
    let state = TrainState {
        params,
        adam,
        best_val_psnr: None,
        best_epoch: None,
    };
    run_epochs(config, data, state, 0, &mut on_epoch)
}

/// Continues a run from a checkpoint (training resumes at `ckpt.epoch`).
pub fn resume_with(
    ckpt: Checkpoint,
    data: &TrainData,
    mut on_epoch: impl FnMut(&Checkpoint, &EpochSummary) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    let config = ckpt.config.clone();
    config.validate()?;
    let state = TrainState {
        params: ckpt.params,
        adam: ckpt.adam,
        best_val_psnr: ckpt.best_val_psnr,
        best_epoch: ckpt.best_epoch,
    };
    run_epochs(&config, data, state, ckpt.epoch, &mut on_epoch)
}

/// One row of the ablation comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub psnr: f64,
    pub ssim: f64,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    /// Final epoch loss fell below half of the first epoch loss.
    pub converged: bool,
}

/// The three-variant comparison, evaluated on the validation volumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub noise_level: f64,
    pub rows: Vec<AblationRow>,
    /// Whether the hybrid row scored the best PSNR (recorded, not asserted).
    pub mlp_cnn_best: bool,
}

/// Trains MLP+MLP, CNN+CNN and MLP+CNN with identical seeds and epochs on
/// the same data, evaluating each on the validation set.
pub fn ablate(base: &TrainConfig, data: &TrainData) -> Result<AblationTable, TrainError> {
    use crate::model::Variant;
    let mut rows = Vec::new();
    let mut best: Option<(String, f64)> = None;
    for variant in [Variant::MlpMlp, Variant::CnnCnn, Variant::MlpCnn] {
        let mut config = base.clone();
        config.model.variant = variant;
        let outcome = train(&config, data)?;
        let mut ckpt = outcome.final_checkpoint;
        let report = evaluate(&mut ckpt.params, &data.val, config.stride)?;
        let first = outcome.epochs.first().map(|e| e.mean_loss).unwrap_or(0.0);
        let last = outcome.epochs.last().map(|e| e.mean_loss).unwrap_or(0.0);
        let row = AblationRow {
            model: variant.label().to_string(),
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            first_epoch_loss: first,
            final_epoch_loss: last,
            converged: last < 0.5 * first,
        };
        if best.as_ref().map_or(true, |(_, p)| row.psnr > *p) {
            best = Some((row.model.clone(), row.psnr));
        }
        rows.push(row);
    }
    Ok(AblationTable {
        noise_level: base.noise_level,
        rows,
        mlp_cnn_best: matches!(best, Some((ref m, _)) if m == "MLP+CNN"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::model::Variant;
    use std::fs;

    fn micro_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            noise_level: 0.15,
            stride: 4,
            n_train: 3,
            n_val: 1,
            n_test: 1,
            model: ModelConfig {
                p: 4,
                c: 2,
                l: 1,
                mlp_hidden: 32,
                j: 1,
                channels: vec![2],
                variant: Variant::MlpCnn,
                seed,
                ..ModelConfig::desk_scale(seed)
            },
            ..TrainConfig::desk_scale(seed)
        }
    }

    fn micro_volumes(n: usize, seed: u64) -> Vec<(String, Volume)> {
        (0..n)
            .map(|i| {
                let spec = PhantomSpec {
                    shape: (12, 12, 2),
                    smoothness: 3.0,
                    n_lesions: 0,
                    ..PhantomSpec::desk_scale(seed + i as u64)
                };
                (
                    format!("vol{i:03}"),
                    generate_phantom(&spec).unwrap().0,
                )
            })
            .collect()
    }

    fn micro_setup(seed: u64) -> (TrainConfig, TrainData, Vec<(String, Volume, Volume)>) {
        let cfg = micro_train_config(seed);
        let vols = micro_volumes(5, seed * 100 + 7);
        let (data, test) = prepare_data(&vols, &cfg).unwrap();
        (cfg, data, test)
    }

    #[test]
    fn prepare_data_splits_and_noises_deterministically() {
        let (cfg, data, test) = micro_setup(1);
        // 3 train volumes of 12x12x2 at P=4, stride 4: 9 patches each
        assert_eq!(data.train_pairs.len, 27);
        assert_eq!(data.val.len(), 1);
        assert_eq!(test.len(), 1);
        let (_, data2, _) = micro_setup(1);
        assert_eq!(data.train_pairs.noisy, data2.train_pairs.noisy);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let (mut cfg, data, _) = micro_setup(2);
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        let outcome = train(&cfg, &data).unwrap();
        let fresh = init_params(&cfg.model).unwrap();
        for (a, b) in outcome
            .final_checkpoint
            .params
            .tensors
            .iter()
            .zip(&fresh.tensors)
        {
            assert_eq!(a.values, b.values, "{} changed under lr = 0", a.name);
        }
    }

    #[test]
    fn loss_decreases_on_a_micro_run() {
        let (cfg, data, _) = micro_setup(3);
        let outcome = train(&cfg, &data).unwrap();
        let first = outcome.epochs.first().unwrap().mean_loss;
        let last = outcome.epochs.last().unwrap().mean_loss;
        assert!(
            last < first,
            "loss did not descend: first {first}, last {last}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = micro_train_config(4);
        let d = cfg.model.flat_dim();
        let data = TrainData {
            train_pairs: PatchPairs {
                dim: d,
                len: 8,
                noisy: vec![0.0; 8 * d],
                clean: vec![1e20; 8 * d],
            },
            val: vec![],
        };
        let err = train(&cfg, &data).unwrap_err();
        match &err {
            TrainError::NanLoss {
                epoch,
                batch,
                param_norms,
            } => {
                assert_eq!((*epoch, *batch), (0, 0));
                assert!(!param_norms.is_empty());
            }
            other => panic!("expected NanLoss, got {other:?}"),
        }
        assert!(err.to_string().contains("epoch 0"));
    }

    #[test]
    fn training_is_deterministic_and_resume_matches_uninterrupted() {
        let (mut cfg, data, _) = micro_setup(5);
        cfg.epochs = 4;

        let full_a = train(&cfg, &data).unwrap();
        let full_b = train(&cfg, &data).unwrap();

        let mut at_two: Option<Checkpoint> = None;
        let _ = train_with(&cfg, &data, |ckpt, _| {
            if ckpt.epoch == 2 {
                at_two = Some(ckpt.clone());
            }
            Ok(())
        })
        .unwrap();
        let resumed = resume_with(at_two.unwrap(), &data, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.ckpt");
        let pb = dir.path().join("b.ckpt");
        let pr = dir.path().join("r.ckpt");
        save_checkpoint(&full_a.final_checkpoint, &pa).unwrap();
        save_checkpoint(&full_b.final_checkpoint, &pb).unwrap();
        save_checkpoint(&resumed.final_checkpoint, &pr).unwrap();
        let ba = fs::read(&pa).unwrap();
        assert_eq!(ba, fs::read(&pb).unwrap(), "identical runs diverged");
        assert_eq!(ba, fs::read(&pr).unwrap(), "resumed run diverged");
    }

    #[test]
    fn zero_weight_model_evaluates_as_identity_baseline() {
        let (mut cfg, data, test) = micro_setup(6);
        cfg.learning_rate = 0.0;
        cfg.epochs = 1;
        // train at lr 0 from zeroed weights: parameters stay zero, batch-norm
        // running statistics get initialised so eval mode can run
        let params = init_params(&cfg.model).unwrap();
        let mut zeroed = params.clone();
        zeroed.zero_group("");
        let adam = AdamState::new(&zeroed);
        let state = TrainState {
            params: zeroed,
            adam,
            best_val_psnr: None,
            best_epoch: None,
        };
        let outcome = run_epochs(&cfg, &data, state, 0, &mut |_, _| Ok(())).unwrap();
        let mut trained = outcome.final_checkpoint.params;
        assert!(trained
            .tensors
            .iter()
            .all(|t| t.values.iter().all(|&v| v == 0.0)));

        let (_, noisy, clean) = &test[0];
        let denoised = denoise_volume(&mut trained, noisy, cfg.stride).unwrap();
        for (a, b) in denoised.voxels().iter().zip(noisy.voxels()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3), "{a} vs {b}");
        }
        let p_den = psnr(&denoised, clean).unwrap();
        let p_noisy = psnr(noisy, clean).unwrap();
        assert!(
            (p_den - p_noisy).abs() < 1e-4,
            "identity baseline PSNR drifted: {p_den} vs {p_noisy}"
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (mut cfg, data, test) = micro_setup(7);
        cfg.epochs = 1;
        let outcome = train(&cfg, &data).unwrap();
        let mut params = outcome.final_checkpoint.params;
        let r1 = evaluate(&mut params, &test, cfg.stride).unwrap();
        let r2 = evaluate(&mut params, &test, cfg.stride).unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn best_checkpoint_tracks_validation_psnr() {
        let (cfg, data, _) = micro_setup(8);
        let outcome = train(&cfg, &data).unwrap();
        let best = outcome.best_checkpoint.expect("validation ran");
        let max_psnr = outcome
            .epochs
            .iter()
            .map(|e| e.val_psnr)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.best_val_psnr.unwrap(), max_psnr);
        assert!(best.best_epoch.unwrap() < cfg.epochs);
    }

    #[test]
    fn ablation_emits_three_rows_in_table_order() {
        let (mut cfg, data, _) = micro_setup(9);
        cfg.epochs = 2;
        let table = ablate(&cfg, &data).unwrap();
        let labels: Vec<&str> = table.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(labels, vec!["MLP+MLP", "CNN+CNN", "MLP+CNN"]);
        assert_eq!(table.noise_level, cfg.noise_level);
        for row in &table.rows {
            assert!(row.psnr.is_finite());
            assert!(row.ssim.is_finite());
        }
    }
}
