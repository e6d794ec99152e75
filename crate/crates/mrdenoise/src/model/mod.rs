//! The hybrid residual MLP-CNN denoising model and its ablation variants.
//!
//! A flattened noisy patch runs through L pre-norm residual MLP blocks, is
//! reshaped into a single-channel 3D volume, and passes through a residual
//! encoder-decoder CNN whose mirrored conv/deconv levels are linked by skip
//! additions; the final decoder level adds the CNN input itself and applies
//! the output activation. Ablation variants swap either half for a doubled
//! copy of the other.

pub mod patch;

pub use patch::{assemble, grid_starts, patchify, PatchSet};

use crate::tensor::{Activation, NormMode, RunningStats, Scalar, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("volume {shape:?} smaller than patch side {p} in-plane")]
    VolumeTooSmall {
        shape: (usize, usize, usize),
        p: usize,
    },
    #[error("voxel ({h}, {w}, {c}) not covered by any patch")]
    UncoveredVoxel { h: usize, w: usize, c: usize },
    #[error("patch value buffer must hold {expected} values, got {got}")]
    PatchValues { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which block combination to run (the ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MLP_CNN")]
    MlpCnn,
    #[serde(rename = "MLP_MLP")]
    MlpMlp,
    #[serde(rename = "CNN_CNN")]
    CnnCnn,
}

impl Variant {
    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::MlpMlp => "MLP+MLP",
            Variant::CnnCnn => "CNN+CNN",
            Variant::MlpCnn => "MLP+CNN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Relu,
    LeakyRelu,
}

fn default_leaky_slope() -> f64 {
    0.2
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}
fn default_final_activation() -> FinalActivation {
    FinalActivation::Relu
}
fn default_variant() -> Variant {
    Variant::MlpCnn
}

/// All architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side length in voxels.
    pub p: usize,
    /// Slice count per patch.
    pub c: usize,
    /// Number of residual MLP encoder blocks (the MLP_MLP variant uses 2L).
    pub l: usize,
    /// Hidden width of the first fully connected layer in each MLP block.
    pub mlp_hidden: usize,
    /// Conv/deconv level count of the encoder-decoder CNN.
    pub j: usize,
    /// Encoder output channels per level; the decoder mirrors them.
    pub channels: Vec<usize>,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_final_activation")]
    pub final_activation: FinalActivation,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Flattened patch dimension d = P^2 * C.
    pub fn flat_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    /// Full-size defaults (16 x 16 x 6 patches, four levels on each side).
    pub fn full_scale(seed: u64) -> Self {
        let d = 16 * 16 * 6;
        ModelConfig {
            p: 16,
            c: 6,
            l: 4,
            mlp_hidden: 4 * d,
            j: 4,
            channels: vec![32, 64, 128, 256],
            leaky_slope: default_leaky_slope(),
            variant: Variant::MlpCnn,
            final_activation: FinalActivation::Relu,
            ln_eps: default_eps(),
            bn_eps: default_eps(),
            bn_momentum: default_momentum(),
            seed,
        }
    }

    /// Desk-scale preset trained in the acceptance runs.
    pub fn desk_scale(seed: u64) -> Self {
        let d = 16 * 16 * 6;
        ModelConfig {
            l: 2,
            mlp_hidden: 2 * d,
            j: 2,
            channels: vec![16, 32],
            ..Self::full_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.p < 4 {
            return fail(format!("p must be >= 4, got {}", self.p));
        }
        if self.c < 1 {
            return fail("c must be >= 1".into());
        }
        if self.l < 1 {
            return fail(format!("l must be >= 1, got {}", self.l));
        }
        if self.j < 1 {
            return fail(format!("j must be >= 1, got {}", self.j));
        }
        if self.mlp_hidden < 1 {
            return fail("mlp_hidden must be >= 1".into());
        }
        if self.channels.len() != self.j {
            return fail(format!(
                "channels has {} entries but j = {}",
                self.channels.len(),
                self.j
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return fail("channel counts must be >= 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

/// Running statistics for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<T: Scalar> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// All trainable tensors plus batch-norm running state, in a fixed order.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor<T>>,
    pub bn: Vec<BnLayer<T>>,
    index: HashMap<String, usize>,
    bn_index: HashMap<String, usize>,
}

enum Init {
    Ones,
    Zeros,
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
}

struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Encoder/decoder channel plan of one CNN stack.
/// Encoder level j maps chans (in, out); decoder mirrors them and ends at 1.
fn cnn_plan(cfg: &ModelConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let j = cfg.j;
    let enc: Vec<(usize, usize)> = (0..j)
        .map(|lvl| {
            let cin = if lvl == 0 { 1 } else { cfg.channels[lvl - 1] };
            (cin, cfg.channels[lvl])
        })
        .collect();
    let dec: Vec<(usize, usize)> = (0..j)
        .map(|lvl| {
            let cin = cfg.channels[j - 1 - lvl];
            let cout = if lvl == j - 1 { 1 } else { cfg.channels[j - 2 - lvl] };
            (cin, cout)
        })
        .collect();
    (enc, dec)
}

fn mlp_block_count(cfg: &ModelConfig) -> usize {
    match cfg.variant {
        Variant::MlpMlp => 2 * cfg.l,
        _ => cfg.l,
    }
}

fn cnn_prefixes(cfg: &ModelConfig) -> Vec<&'static str> {
    match cfg.variant {
        Variant::MlpCnn => vec!["cnn"],
        Variant::CnnCnn => vec!["cnn", "cnn2"],
        Variant::MlpMlp => vec![],
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Vec<(String, usize)>) {
    let d = cfg.flat_dim();
    let h = cfg.mlp_hidden;
    let mut tensors = Vec::new();
    let mut bn = Vec::new();

    if cfg.variant != Variant::CnnCnn {
        for i in 0..mlp_block_count(cfg) {
            let p = |s: &str| format!("mlp.{i}.{s}");
            tensors.push(TensorSpec {
                name: p("ln.gain"),
                shape: vec![d],
                init: Init::Ones,
            });
            tensors.push(TensorSpec {
                name: p("ln.shift"),
                shape: vec![d],
                init: Init::Zeros,
            });
            tensors.push(TensorSpec {
                name: p("fc1.weight"),
                shape: vec![h, d],
                init: Init::FanIn(d),
            });
            tensors.push(TensorSpec {
                name: p("fc1.bias"),
                shape: vec![h],
                init: Init::FanIn(d),
            });
            tensors.push(TensorSpec {
                name: p("fc2.weight"),
                shape: vec![d, h],
                init: Init::FanIn(h),
            });
            tensors.push(TensorSpec {
                name: p("fc2.bias"),
                shape: vec![d],
                init: Init::FanIn(h),
            });
        }
    }

    for prefix in cnn_prefixes(cfg) {
        let (enc, dec) = cnn_plan(cfg);
        for (lvl, &(cin, cout)) in enc.iter().enumerate() {
            let p = |s: &str| format!("{prefix}.enc.{lvl}.{s}");
            tensors.push(TensorSpec {
                name: p("kernel"),
                shape: vec![cout, cin, 3, 3, 3],
                init: Init::FanIn(cin * 27),
            });
            tensors.push(TensorSpec {
                name: p("bias"),
                shape: vec![cout],
                init: Init::FanIn(cin * 27),
            });
            tensors.push(TensorSpec {
                name: p("bn.gain"),
                shape: vec![cout],
                init: Init::Ones,
            });
            tensors.push(TensorSpec {
                name: p("bn.shift"),
                shape: vec![cout],
                init: Init::Zeros,
            });
            bn.push((p("bn"), cout));
        }
        for (lvl, &(cin, cout)) in dec.iter().enumerate() {
            let p = |s: &str| format!("{prefix}.dec.{lvl}.{s}");
            // deconv kernel layout is [c_in, c_out, 3, 3, 3]
            tensors.push(TensorSpec {
                name: p("kernel"),
                shape: vec![cin, cout, 3, 3, 3],
                init: Init::FanIn(cin * 27),
            });
            tensors.push(TensorSpec {
                name: p("bias"),
                shape: vec![cout],
                init: Init::FanIn(cin * 27),
            });
            if lvl != cfg.j - 1 {
                tensors.push(TensorSpec {
                    name: p("bn.gain"),
                    shape: vec![cout],
                    init: Init::Ones,
                });
                tensors.push(TensorSpec {
                    name: p("bn.shift"),
                    shape: vec![cout],
                    init: Init::Zeros,
                });
                bn.push((p("bn"), cout));
            }
        }
    }
    (tensors, bn)
}

/// Draws `n` samples from Uniform(-bound, bound) with fan-in scaling.
fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64((2.0 * rng.gen::<f64>() - 1.0) * bound))
        .collect()
}

/// Builds freshly initialised parameters: fan-in-scaled uniform weights,
/// unit norm gains, zero shifts. Deterministic in `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams<f32>, ModelError> {
    config.validate()?;
    let (specs, bn_specs) = layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let values = match spec.init {
            Init::Ones => vec![1.0f32; n],
            Init::Zeros => vec![0.0f32; n],
            Init::FanIn(fan_in) => fan_in_uniform(&mut rng, fan_in, n),
        };
        tensors.push(ParamTensor {
            name: spec.name,
            shape: spec.shape,
            values,
        });
    }
    let bn = bn_specs
        .into_iter()
        .map(|(name, channels)| BnLayer {
            name,
            stats: RunningStats::new(channels),
        })
        .collect();
    Ok(ModelParams::from_parts(config.clone(), tensors, bn))
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_parts(config: ModelConfig, tensors: Vec<ParamTensor<T>>, bn: Vec<BnLayer<T>>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        let bn_index = bn
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        ModelParams {
            config,
            tensors,
            bn,
            index,
            bn_index,
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.tensors[i])
    }

    fn bn_idx(&self, name: &str) -> usize {
        *self
            .bn_index
            .get(name)
            .unwrap_or_else(|| panic!("unknown batch-norm layer {name}"))
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_group(&mut self, prefix: &str) {
        for t in &mut self.tensors {
            if t.name.starts_with(prefix) {
                t.values.iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
    }

    /// All values concatenated in tensor order (gradient-check plumbing).
    pub fn flatten_f64(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter().map(|v| v.to_f64()))
            .collect()
    }

    /// Overwrites all values from a flat f64 vector in tensor order.
    pub fn set_flat_f64(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            for v in &mut t.values {
                *v = T::from_f64(flat[off]);
                off += 1;
            }
        }
        assert_eq!(off, flat.len());
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams::from_parts(
            self.config.clone(),
            self.tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: t.values.iter().map(|v| v.to_f64()).collect(),
                })
                .collect(),
            self.bn
                .iter()
                .map(|l| BnLayer {
                    name: l.name.clone(),
                    stats: RunningStats {
                        mean: l.stats.mean.iter().map(|v| v.to_f64()).collect(),
                        var: l.stats.var.iter().map(|v| v.to_f64()).collect(),
                        initialized: l.stats.initialized,
                    },
                })
                .collect(),
        )
    }
}

/// Tape leaves for every parameter tensor, aligned with `params.tensors`.
pub struct BoundParams {
    pub leaves: Vec<Tensor>,
}

impl BoundParams {
    pub fn leaf<T: Scalar>(&self, params: &ModelParams<T>, name: &str) -> Tensor {
        let i = *params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.leaves[i]
    }
}

/// Registers every parameter as a `requires_grad` leaf on the tape.
pub fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
) -> Result<BoundParams, ModelError> {
    let mut leaves = Vec::with_capacity(params.tensors.len());
    for t in &params.tensors {
        leaves.push(tape.leaf(t.values.clone(), &t.shape, true)?);
    }
    Ok(BoundParams { leaves })
}

/// Structural trace of one CNN stack, used to verify skip wiring.
pub struct CnnTrace {
    /// The stack input x0.
    pub input: Tensor,
    /// Encoder activations x_1 .. x_J.
    pub enc: Vec<Tensor>,
    /// The tensor each decoder level adds as its skip source
    /// (x_{J-1} .. x_1, then x0 at the final level).
    pub skip_src: Vec<Tensor>,
    /// Decoder pre-activation sums U_j y_{j-1} + skip.
    pub dec_preact: Vec<Tensor>,
    /// Inputs of every kinked activation (ReLU / LeakyReLU). Finite-difference
    /// checks exclude points sitting within the step of a kink.
    pub kink_inputs: Vec<Tensor>,
}

/// Applies `count` pre-norm residual MLP blocks: z + W2 gelu(W1 LN(z)).
pub fn mlp_encoder_stack<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bound: &BoundParams,
    count: usize,
    z0: Tensor,
) -> Result<Tensor, ModelError> {
    let cfg = &params.config;
    let mut z = z0;
    for i in 0..count {
        let p = |s: &str| format!("mlp.{i}.{s}");
        let ln = tape.layer_norm(
            z,
            bound.leaf(params, &p("ln.gain")),
            bound.leaf(params, &p("ln.shift")),
            cfg.ln_eps,
        )?;
        let hidden = tape.linear(
            ln,
            bound.leaf(params, &p("fc1.weight")),
            bound.leaf(params, &p("fc1.bias")),
        )?;
        let act = tape.activation(Activation::Gelu, hidden)?;
        let proj = tape.linear(
            act,
            bound.leaf(params, &p("fc2.weight")),
            bound.leaf(params, &p("fc2.bias")),
        )?;
        z = tape.add(z, proj)?;
    }
    Ok(z)
}

/// Runs one residual encoder-decoder CNN stack on `[N, 1, C, P, P]` input.
///
/// Encoder: x_j = LeakyReLU(BN(conv(x_{j-1}))). Decoder levels 1..J-1:
/// y_j = LeakyReLU(BN(deconv(y_{j-1}) + x_{J-j})). Final level (no BN):
/// y_J = final_activation(deconv(y_{J-1}) + x_0).
pub fn cnn_encoder_decoder<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    bound: &BoundParams,
    prefix: &str,
    x0: Tensor,
    mode: NormMode,
) -> Result<(Tensor, CnnTrace), ModelError> {
    let cfg = params.config.clone();
    let j = cfg.j;
    let leaky = Activation::LeakyRelu {
        slope: cfg.leaky_slope,
    };

    let mut trace = CnnTrace {
        input: x0,
        enc: Vec::with_capacity(j),
        skip_src: Vec::with_capacity(j),
        dec_preact: Vec::with_capacity(j),
        kink_inputs: Vec::new(),
    };

    let mut cur = x0;
    for lvl in 0..j {
        let p = |s: &str| format!("{prefix}.enc.{lvl}.{s}");
        let conv = tape.conv3d(
            cur,
            bound.leaf(params, &p("kernel")),
            bound.leaf(params, &p("bias")),
        )?;
        let gain = bound.leaf(params, &p("bn.gain"));
        let shift = bound.leaf(params, &p("bn.shift"));
        let bn_i = params.bn_idx(&p("bn"));
        let normed = tape.batch_norm3d(
            conv,
            gain,
            shift,
            &mut params.bn[bn_i].stats,
            mode,
            cfg.bn_momentum,
            cfg.bn_eps,
        )?;
        trace.kink_inputs.push(normed);
        cur = tape.activation(leaky, normed)?;
        trace.enc.push(cur);
    }

    let mut y = cur; // y_0 = x_J
    for lvl in 0..j.saturating_sub(1) {
        let p = |s: &str| format!("{prefix}.dec.{lvl}.{s}");
        let deconv = tape.deconv3d(
            y,
            bound.leaf(params, &p("kernel")),
            bound.leaf(params, &p("bias")),
        )?;
        let skip = trace.enc[j - 2 - lvl];
        let pre = tape.add(deconv, skip)?;
        trace.skip_src.push(skip);
        trace.dec_preact.push(pre);
        let gain = bound.leaf(params, &p("bn.gain"));
        let shift = bound.leaf(params, &p("bn.shift"));
        let bn_i = params.bn_idx(&p("bn"));
        let normed = tape.batch_norm3d(
            pre,
            gain,
            shift,
            &mut params.bn[bn_i].stats,
            mode,
            cfg.bn_momentum,
            cfg.bn_eps,
        )?;
        trace.kink_inputs.push(normed);
        y = tape.activation(leaky, normed)?;
    }

    let p = |s: &str| format!("{prefix}.dec.{}.{s}", j - 1);
    let deconv = tape.deconv3d(
        y,
        bound.leaf(params, &p("kernel")),
        bound.leaf(params, &p("bias")),
    )?;
    let pre = tape.add(deconv, x0)?;
    trace.skip_src.push(x0);
    trace.dec_preact.push(pre);
    trace.kink_inputs.push(pre);
    let out = match cfg.final_activation {
        FinalActivation::Relu => tape.activation(Activation::Relu, pre)?,
        FinalActivation::LeakyRelu => tape.activation(leaky, pre)?,
    };
    Ok((out, trace))
}

/// Result of a full forward pass.
pub struct ForwardPass {
    pub output: Tensor,
    pub bound: BoundParams,
    pub cnn_traces: Vec<CnnTrace>,
}

/// Reshapes `[N, d]` into the CNN volume layout `[N, 1, C, P, P]`.
/// Patch flattening is (row, col, slice)-major, so moving the slice axis in
/// front of the in-plane axes requires a data permutation, not just a view.
fn to_volume<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    z: Tensor,
    n: usize,
) -> Result<Tensor, ModelError> {
    let (p, c) = (cfg.p, cfg.c);
    let grid = tape.reshape(z, &[n, p, p, c])?;
    let chan_first = tape.permute(grid, &[0, 3, 1, 2])?;
    Ok(tape.reshape(chan_first, &[n, 1, c, p, p])?)
}

/// Inverse of [`to_volume`]: `[N, 1, C, P, P]` back to `[N, d]`.
fn from_volume<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    v: Tensor,
    n: usize,
) -> Result<Tensor, ModelError> {
    let (p, c) = (cfg.p, cfg.c);
    let chan_first = tape.reshape(v, &[n, c, p, p])?;
    let grid = tape.permute(chan_first, &[0, 2, 3, 1])?;
    Ok(tape.reshape(grid, &[n, cfg.flat_dim()])?)
}

/// Full model forward pass on a flattened patch `[d]` or batch `[N, d]`.
/// The output predicts the clean patch directly and keeps the input shape.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut ModelParams<T>,
    input: Tensor,
    mode: NormMode,
) -> Result<ForwardPass, ModelError> {
    let cfg = params.config.clone();
    cfg.validate()?;
    let d = cfg.flat_dim();
    let shape = tape.shape(input).to_vec();
    let (n, rank1) = match shape.as_slice() {
        [dd] if *dd == d => (1, true),
        [n, dd] if *dd == d => (*n, false),
        _ => {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {shape:?} does not match flattened patch dimension {d}"
            )))
        }
    };
    let bound = bind(tape, params)?;
    let x = if rank1 {
        tape.reshape(input, &[1, d])?
    } else {
        input
    };

    let mut traces = Vec::new();
    let out = match cfg.variant {
        Variant::MlpCnn => {
            let z = mlp_encoder_stack(tape, params, &bound, cfg.l, x)?;
            let v = to_volume(tape, &cfg, z, n)?;
            let (v, trace) = cnn_encoder_decoder(tape, params, &bound, "cnn", v, mode)?;
            traces.push(trace);
            from_volume(tape, &cfg, v, n)?
        }
        Variant::MlpMlp => mlp_encoder_stack(tape, params, &bound, 2 * cfg.l, x)?,
        Variant::CnnCnn => {
            let v = to_volume(tape, &cfg, x, n)?;
            let (v, t1) = cnn_encoder_decoder(tape, params, &bound, "cnn", v, mode)?;
            let (v, t2) = cnn_encoder_decoder(tape, params, &bound, "cnn2", v, mode)?;
            traces.push(t1);
            traces.push(t2);
            from_volume(tape, &cfg, v, n)?
        }
    };
    let output = if rank1 { tape.reshape(out, &[d])? } else { out };
    Ok(ForwardPass {
        output,
        bound,
        cnn_traces: traces,
    })
}

/// Smallest |input| over every kinked activation of a forward pass.
/// Gradient checks re-sample when this comes too close to the finite
/// difference step, per the kink-exclusion rule.
pub fn min_abs_kink_input<T: Scalar>(tape: &Tape<T>, pass: &ForwardPass) -> f64 {
    let mut min = f64::INFINITY;
    for trace in &pass.cnn_traces {
        for &t in &trace.kink_inputs {
            for v in tape.values(t) {
                min = min.min(v.to_f64().abs());
            }
        }
    }
    min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            p: 4,
            c: 2,
            l: 1,
            mlp_hidden: 64,
            j: 1,
            channels: vec![2],
            variant,
            seed: 9,
            ..ModelConfig::desk_scale(9)
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = micro_config(Variant::MlpCnn);
        cfg.l = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config(Variant::MlpCnn);
        cfg.channels = vec![2, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config(Variant::MlpCnn);
        cfg.p = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config(Variant::MlpCnn);
        cfg.leaky_slope = 1.5;
        assert!(cfg.validate().is_err());
        assert!(micro_config(Variant::MlpCnn).validate().is_ok());
    }

    #[test]
    fn config_json_round_trip_uses_table_names() {
        let cfg = micro_config(Variant::CnnCnn);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"CNN_CNN\""));
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = micro_config(Variant::MlpCnn);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(ta, tb);
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 10;
        let c = init_params(&cfg2).unwrap();
        assert!(a
            .tensors
            .iter()
            .zip(&c.tensors)
            .any(|(x, y)| x.values != y.values));
    }

    #[test]
    fn init_weight_std_matches_fan_in_bound() {
        // uniform(-b, b) has std b / sqrt(3) with b = 1 / sqrt(fan_in)
        let params = init_params(&ModelConfig::desk_scale(0)).unwrap();
        let w = params.get("mlp.0.fc1.weight").unwrap();
        let d = 1536.0f64;
        let n = w.values.len() as f64;
        let mean: f64 = w.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = w
            .values
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        let expected = (1.0 / d.sqrt()) / 3.0f64.sqrt();
        let std = var.sqrt();
        assert!(
            (std - expected).abs() / expected < 0.2,
            "std {std} vs expected {expected}"
        );
    }

    #[test]
    fn mlp_block_matches_hand_arithmetic() {
        // d = 2, hidden = 2 block with hand-set weights, against an
        // independent f64 evaluation of LN -> linear -> GELU -> linear -> add
        let cfg = ModelConfig {
            p: 4,
            c: 1,
            l: 1,
            mlp_hidden: 2,
            j: 1,
            channels: vec![1],
            variant: Variant::MlpMlp,
            seed: 0,
            ..ModelConfig::desk_scale(0)
        };
        let x = [1.0f64, 2.0];
        let gain = [1.2f64, 0.8];
        let shift = [0.1f64, -0.1];
        let w1 = [0.5f64, -0.25, 0.1, 0.3];
        let b1 = [0.05f64, -0.02];
        let w2 = [1.0f64, -0.5, 0.25, 0.75];
        let b2 = [-0.1f64, 0.2];

        let mk = |name: &str, shape: &[usize], values: &[f64]| ParamTensor {
            name: format!("mlp.0.{name}"),
            shape: shape.to_vec(),
            values: values.to_vec(),
        };
        let params = ModelParams::from_parts(
            cfg,
            vec![
                mk("ln.gain", &[2], &gain),
                mk("ln.shift", &[2], &shift),
                mk("fc1.weight", &[2, 2], &w1),
                mk("fc1.bias", &[2], &b1),
                mk("fc2.weight", &[2, 2], &w2),
                mk("fc2.bias", &[2], &b2),
            ],
            vec![],
        );
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params).unwrap();
        let z0 = tape.leaf(x.to_vec(), &[1, 2], false).unwrap();
        let out = mlp_encoder_stack(&mut tape, &params, &bound, 1, z0).unwrap();
        let got = tape.values(out);

        // independent oracle
        let mean = (x[0] + x[1]) / 2.0;
        let var = ((x[0] - mean).powi(2) + (x[1] - mean).powi(2)) / 2.0;
        let rstd = 1.0 / (var + 1e-5).sqrt();
        let ln: Vec<f64> = (0..2)
            .map(|i| (x[i] - mean) * rstd * gain[i] + shift[i])
            .collect();
        let u: Vec<f64> = (0..2)
            .map(|j| w1[2 * j] * ln[0] + w1[2 * j + 1] * ln[1] + b1[j])
            .collect();
        let gelu = |t: f64| t * 0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2));
        let g: Vec<f64> = u.iter().map(|&t| gelu(t)).collect();
        let v: Vec<f64> = (0..2)
            .map(|j| w2[2 * j] * g[0] + w2[2 * j + 1] * g[1] + b2[j])
            .collect();
        let want: Vec<f64> = (0..2).map(|i| x[i] + v[i]).collect();

        assert!((got[0] - want[0]).abs() < 1e-12, "{got:?} vs {want:?}");
        assert!((got[1] - want[1]).abs() < 1e-12);
        // frozen values from the oracle above
        let frozen = [0.7100854175096236, 2.1897518666968385];
        assert!((got[0] - frozen[0]).abs() < 1e-5, "{}", got[0]);
        assert!((got[1] - frozen[1]).abs() < 1e-5, "{}", got[1]);
    }

    #[test]
    fn zeroed_mlp_stack_is_bit_exact_identity() {
        let cfg = micro_config(Variant::MlpMlp);
        let mut params = init_params(&cfg).unwrap();
        params.zero_group("mlp.");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = cfg.flat_dim();
        let zv: Vec<f32> = (0..3 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, &params).unwrap();
        let z0 = tape.leaf(zv.clone(), &[3, d], false).unwrap();
        let out = mlp_encoder_stack(&mut tape, &params, &bound, 2 * cfg.l, z0).unwrap();
        assert_eq!(tape.values(out), zv.as_slice());
    }

    #[test]
    fn zeroed_cnn_with_relu_final_maps_nonpositive_input_to_zero() {
        let cfg = micro_config(Variant::MlpCnn);
        let mut params = init_params(&cfg).unwrap();
        params.zero_group("");
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = cfg.flat_dim();
        let xv: Vec<f32> = (0..2 * d).map(|_| rng.gen_range(-1.0..-0.01)).collect();
        let mut tape = Tape::<f32>::new();
        let input = tape.leaf(xv, &[2, d], false).unwrap();
        let pass = forward(&mut tape, &mut params, input, NormMode::Train).unwrap();
        assert!(tape.values(pass.output).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_j1_single_skip_from_input() {
        // J = 1: y_1 = act(U_1 x_1 + x_0)
        let cfg = micro_config(Variant::MlpCnn);
        let mut params = init_params(&cfg).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, &params).unwrap();
        let n = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv: Vec<f32> = (0..n * 2 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x0 = tape.leaf(xv, &[n, 1, 2, 4, 4], false).unwrap();
        let (_, trace) =
            cnn_encoder_decoder(&mut tape, &mut params, &bound, "cnn", x0, NormMode::Train)
                .unwrap();
        assert_eq!(trace.enc.len(), 1);
        assert_eq!(trace.skip_src.len(), 1);
        assert_eq!(trace.skip_src[0], x0);
    }

    #[test]
    fn skip_wiring_pairs_mirrored_levels() {
        let cfg = ModelConfig {
            j: 2,
            channels: vec![2, 3],
            mlp_hidden: 8,
            ..micro_config(Variant::MlpCnn)
        };
        let mut params = init_params(&cfg).unwrap().to_f64();
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv: Vec<f64> = (0..2 * 2 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x0 = tape.leaf(xv, &[2, 1, 2, 4, 4], false).unwrap();
        let (_, trace) =
            cnn_encoder_decoder(&mut tape, &mut params, &bound, "cnn", x0, NormMode::Train)
                .unwrap();
        // structural: decoder level j reads encoder level J-j, final reads x0
        assert_eq!(trace.skip_src[0], trace.enc[0]);
        assert_eq!(trace.skip_src[1], x0);

        // numeric: with y_{j-1} held fixed, a perturbation of the skip source
        // moves the decoder pre-activation by exactly that amount
        let y_prev = tape.values(trace.enc[1]).to_vec(); // y_0 = x_2
        let skip = tape.values(trace.enc[0]).to_vec();
        let pre = tape.values(trace.dec_preact[0]).to_vec();
        let k = params.get("cnn.dec.0.kernel").unwrap();
        let b = params.get("cnn.dec.0.bias").unwrap();

        let eps = 0.125f64;
        let mut tape2 = Tape::<f64>::new();
        let y = tape2.leaf(y_prev, &[2, 3, 2, 4, 4], false).unwrap();
        let kk = tape2.leaf(k.values.clone(), &k.shape, false).unwrap();
        let bb = tape2.leaf(b.values.clone(), &b.shape, false).unwrap();
        let perturbed: Vec<f64> = skip.iter().map(|v| v + eps).collect();
        let s2 = tape2.leaf(perturbed, &[2, 2, 2, 4, 4], false).unwrap();
        let dec = tape2.deconv3d(y, kk, bb).unwrap();
        let pre2 = tape2.add(dec, s2).unwrap();
        for (a, b) in tape2.values(pre2).iter().zip(&pre) {
            assert!((a - b - eps).abs() < 1e-12, "{a} - {b} != {eps}");
        }
    }

    #[test]
    fn forward_preserves_shape_for_all_variants() {
        for variant in [Variant::MlpCnn, Variant::MlpMlp, Variant::CnnCnn] {
            let cfg = micro_config(variant);
            let mut params = init_params(&cfg).unwrap();
            let d = cfg.flat_dim();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(vec![0.5; 5 * d], &[5, d], false).unwrap();
            let pass = forward(&mut tape, &mut params, x, NormMode::Train).unwrap();
            assert_eq!(tape.shape(pass.output), &[5, d]);

            let mut tape = Tape::<f32>::new();
            let x1 = tape.leaf(vec![0.5; d], &[d], false).unwrap();
            let mut params = init_params(&cfg).unwrap();
            let pass = forward(&mut tape, &mut params, x1, NormMode::Train).unwrap();
            assert_eq!(tape.shape(pass.output), &[d]);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let cfg = micro_config(Variant::MlpCnn);
        let mut params = init_params(&cfg).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(vec![0.0; 31], &[31], false).unwrap();
        assert!(forward(&mut tape, &mut params, x, NormMode::Train).is_err());
    }

    #[test]
    fn forward_is_deterministic_per_seed_config_input() {
        let cfg = micro_config(Variant::MlpCnn);
        let d = cfg.flat_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xv: Vec<f32> = (0..4 * d).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = || {
            let mut params = init_params(&cfg).unwrap();
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(xv.clone(), &[4, d], false).unwrap();
            let pass = forward(&mut tape, &mut params, x, NormMode::Train).unwrap();
            tape.values(pass.output).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let cfg = micro_config(Variant::MlpCnn);
        let d = cfg.flat_dim();
        let base = init_params(&cfg).unwrap().to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // resample until no kinked activation sits near the FD step
        let (xv, tv) = loop {
            let xv: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(0.1..0.9)).collect();
            let tv: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(0.1..0.9)).collect();
            let mut probe = base.clone();
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), &[2, d], false).unwrap();
            let pass = forward(&mut tape, &mut probe, x, NormMode::Train).unwrap();
            if min_abs_kink_input(&tape, &pass) > 5e-3 {
                break (xv, tv);
            }
        };

        // analytic gradients
        let mut params = base.clone();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv.clone(), &[2, d], false).unwrap();
        let t = tape.leaf(tv.clone(), &[2, d], false).unwrap();
        let pass = forward(&mut tape, &mut params, x, NormMode::Train).unwrap();
        let loss = tape.mse_loss(pass.output, t).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = pass
            .bound
            .leaves
            .iter()
            .flat_map(|&leaf| tape.grad(leaf).unwrap().to_vec())
            .collect();

        // finite differences over every parameter
        let flat = base.flatten_f64();
        let mut f = |theta: &[f64]| {
            let mut params = base.clone();
            params.set_flat_f64(theta);
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xv.clone(), &[2, d], false).unwrap();
            let t = tape.leaf(tv.clone(), &[2, d], false).unwrap();
            let pass = forward(&mut tape, &mut params, x, NormMode::Train).unwrap();
            let loss = tape.mse_loss(pass.output, t).unwrap();
            tape.value_scalar(loss)
        };
        let err = gradcheck::check(&mut f, &flat, &analytic, 1e-3);
        assert!(err < 1e-3, "full-model max rel err {err}");
    }
}
