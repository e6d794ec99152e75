//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the records in reverse and accumulates gradients into each node.
//! The engine provides exactly the operators the denoising model needs.
//! It is generic over the element type: training runs in `f32`, gradient
//! verification runs the same code in `f64`.
//!
//! Shapes are explicit and there is no broadcasting; every shape error names
//! the offending axis.

pub mod gradcheck;
#[doc(hidden)]
pub mod kernels;
mod scalar;

pub use scalar::Scalar;

use crate::exec;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {axis} mismatch: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("reshape: element count mismatch: {from} -> {to}")]
    CountMismatch { from: usize, to: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tape already consumed; run a new forward pass first")]
    TapeConsumed,
    #[error("layer_norm: degenerate normalisation axis (d = {d})")]
    DegenerateVariance { d: usize },
    #[error("batch_norm: eval mode before any train-mode update")]
    UninitializedStats,
    #[error("batch_norm: train mode needs >= 2 elements per channel, got {count}")]
    TooFewPerChannel { count: usize },
    #[error("leaky_relu: slope must lie in (0, 1), got {slope}")]
    BadSlope { slope: f64 },
    #[error("permute: {0:?} is not a permutation of the axes")]
    BadPermutation(Vec<usize>),
}

/// Element-wise nonlinearity selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// Exact Gaussian-CDF form: x * Phi(x).
    Gelu,
    Relu,
    LeakyRelu { slope: f64 },
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running mean/variance for one batch-norm layer, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
            initialized: false,
        }
    }
}

/// Lightweight handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

enum Record<T: Scalar> {
    Linear {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        out: Tensor,
        rows: usize,
        d_in: usize,
        d_out: usize,
    },
    Conv {
        x: Tensor,
        k: Tensor,
        b: Tensor,
        out: Tensor,
        n: usize,
        c_in: usize,
        c_out: usize,
        dims: (usize, usize, usize),
    },
    Deconv {
        x: Tensor,
        k: Tensor,
        b: Tensor,
        out: Tensor,
        n: usize,
        c_in: usize,
        c_out: usize,
        dims: (usize, usize, usize),
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        shift: Tensor,
        out: Tensor,
        rows: usize,
        d: usize,
        saved: Vec<(T, T)>,
    },
    BatchNorm {
        x: Tensor,
        gain: Tensor,
        shift: Tensor,
        out: Tensor,
        n: usize,
        c: usize,
        dhw: usize,
        saved: Vec<(T, T)>,
        train: bool,
    },
    Act {
        x: Tensor,
        out: Tensor,
        kind: Activation,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Sum {
        x: Tensor,
        out: Tensor,
    },
    Mse {
        pred: Tensor,
        target: Tensor,
        out: Tensor,
    },
    Reshape {
        x: Tensor,
        out: Tensor,
    },
    Permute {
        x: Tensor,
        out: Tensor,
        axes: Vec<usize>,
    },
}

/// Records a forward pass and drives one backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Record<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    /// Registers an input node. `requires_grad` marks it as a trainable leaf.
    pub fn leaf(
        &mut self,
        values: Vec<T>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        let count: usize = shape.iter().product();
        if count != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("shape does not describe {} values", values.len()),
            });
        }
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "non-finite values entering the tape via leaf"
        );
        Ok(self.push(shape.to_vec(), values, requires_grad))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].values
    }

    pub fn value_scalar(&self, t: Tensor) -> T {
        self.nodes[t.0].values[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient of a node, populated by [`Tape::backward`].
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
        });
        Tensor(id)
    }

    fn push_op_output(&mut self, op: &'static str, shape: Vec<usize>, values: Vec<T>) -> Tensor {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "{op}: non-finite values in forward output"
        );
        let _ = op;
        self.push(shape, values, false)
    }

    // -- operators ----------------------------------------------------------

    /// `out = weight . x + bias` applied to a vector `[d_in]` or row batch
    /// `[rows, d_in]`.
    pub fn linear(&mut self, x: Tensor, weight: Tensor, bias: Tensor) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if ws.len() != 2 {
            return Err(TensorError::BadShape {
                op: "linear",
                shape: ws,
                reason: "weight must be rank 2 [d_out, d_in]".into(),
            });
        }
        let (d_out, d_in) = (ws[0], ws[1]);
        let (rows, x_in) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => {
                return Err(TensorError::BadShape {
                    op: "linear",
                    shape: xs,
                    reason: "input must be rank 1 or 2".into(),
                })
            }
        };
        if x_in != d_in {
            return Err(TensorError::DimMismatch {
                op: "linear",
                axis: "d_in",
                expected: d_in,
                got: x_in,
            });
        }
        if bs != [d_out] {
            return Err(TensorError::DimMismatch {
                op: "linear",
                axis: "d_out (bias)",
                expected: d_out,
                got: bs.first().copied().unwrap_or(0),
            });
        }
        let mut out = vec![T::ZERO; rows * d_out];
        kernels::linear_fwd(
            self.values(x),
            self.values(weight),
            self.values(bias),
            rows,
            d_in,
            d_out,
            &mut out,
        );
        let out_shape = if xs.len() == 1 {
            vec![d_out]
        } else {
            vec![rows, d_out]
        };
        let t = self.push_op_output("linear", out_shape, out);
        self.ops.push(Record::Linear {
            x,
            w: weight,
            b: bias,
            out: t,
            rows,
            d_in,
            d_out,
        });
        Ok(t)
    }

    fn conv_geometry(
        op: &'static str,
        xs: &[usize],
    ) -> Result<(usize, usize, (usize, usize, usize)), TensorError> {
        match xs.len() {
            4 => Ok((1, xs[0], (xs[1], xs[2], xs[3]))),
            5 => Ok((xs[0], xs[1], (xs[2], xs[3], xs[4]))),
            _ => Err(TensorError::BadShape {
                op,
                shape: xs.to_vec(),
                reason: "input must be [C,D,H,W] or [N,C,D,H,W]".into(),
            }),
        }
    }

    fn check_kernel(op: &'static str, ks: &[usize]) -> Result<(), TensorError> {
        if ks.len() != 5 || ks[2] != 3 || ks[3] != 3 || ks[4] != 3 {
            return Err(TensorError::BadShape {
                op,
                shape: ks.to_vec(),
                reason: "kernel must be rank 5 with 3x3x3 spatial taps".into(),
            });
        }
        Ok(())
    }

    /// Shape-preserving 3D cross-correlation (padding 1, stride 1) with
    /// kernel `[c_out, c_in, 3, 3, 3]`.
    pub fn conv3d(&mut self, x: Tensor, kernel: Tensor, bias: Tensor) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        Self::check_kernel("conv3d", &ks)?;
        let (n, c_in, dims) = Self::conv_geometry("conv3d", &xs)?;
        let (c_out, k_cin) = (ks[0], ks[1]);
        if k_cin != c_in {
            return Err(TensorError::DimMismatch {
                op: "conv3d",
                axis: "input channels",
                expected: k_cin,
                got: c_in,
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::DimMismatch {
                op: "conv3d",
                axis: "output channels (bias)",
                expected: c_out,
                got: self.shape(bias).first().copied().unwrap_or(0),
            });
        }
        let dhw = dims.0 * dims.1 * dims.2;
        let mut out = vec![T::ZERO; n * c_out * dhw];
        {
            let bvals = self.values(bias);
            exec::for_each_chunk_mut(&mut out, dhw, n * c_out * dhw, |plane, p| {
                let c = plane % c_out;
                p.fill(bvals[c]);
            });
        }
        kernels::corr3(
            self.values(x),
            self.values(kernel),
            kernels::KernelMap::conv(c_in),
            n,
            c_in,
            c_out,
            dims,
            &mut out,
        );
        let mut out_shape = xs.clone();
        let ch_axis = xs.len() - 4;
        out_shape[ch_axis] = c_out;
        let t = self.push_op_output("conv3d", out_shape, out);
        self.ops.push(Record::Conv {
            x,
            k: kernel,
            b: bias,
            out: t,
            n,
            c_in,
            c_out,
            dims,
        });
        Ok(t)
    }

    /// Transposed convolution, the adjoint of [`Tape::conv3d`] under the same
    /// geometry. Kernel layout is `[c_in, c_out, 3, 3, 3]`, so a kernel shared
    /// with `conv3d` satisfies `<conv(x), y> == <x, deconv(y)>`.
    pub fn deconv3d(
        &mut self,
        x: Tensor,
        kernel: Tensor,
        bias: Tensor,
    ) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        Self::check_kernel("deconv3d", &ks)?;
        let (n, c_in, dims) = Self::conv_geometry("deconv3d", &xs)?;
        let (k_cin, c_out) = (ks[0], ks[1]);
        if k_cin != c_in {
            return Err(TensorError::DimMismatch {
                op: "deconv3d",
                axis: "input channels",
                expected: k_cin,
                got: c_in,
            });
        }
        if self.shape(bias) != [c_out] {
            return Err(TensorError::DimMismatch {
                op: "deconv3d",
                axis: "output channels (bias)",
                expected: c_out,
                got: self.shape(bias).first().copied().unwrap_or(0),
            });
        }
        let dhw = dims.0 * dims.1 * dims.2;
        let mut out = vec![T::ZERO; n * c_out * dhw];
        {
            let bvals = self.values(bias);
            exec::for_each_chunk_mut(&mut out, dhw, n * c_out * dhw, |plane, p| {
                let c = plane % c_out;
                p.fill(bvals[c]);
            });
        }
        kernels::corr3(
            self.values(x),
            self.values(kernel),
            kernels::KernelMap::deconv(c_out),
            n,
            c_in,
            c_out,
            dims,
            &mut out,
        );
        let mut out_shape = xs.clone();
        let ch_axis = xs.len() - 4;
        out_shape[ch_axis] = c_out;
        let t = self.push_op_output("deconv3d", out_shape, out);
        self.ops.push(Record::Deconv {
            x,
            k: kernel,
            b: bias,
            out: t,
            n,
            c_in,
            c_out,
            dims,
        });
        Ok(t)
    }

    /// Normalises each row of `[d]` or `[rows, d]` to zero mean / unit
    /// variance over the full axis, then applies the affine `gain`/`shift`.
    pub fn layer_norm(
        &mut self,
        x: Tensor,
        gain: Tensor,
        shift: Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let (rows, d) = match xs.len() {
            1 => (1, xs[0]),
            2 => (xs[0], xs[1]),
            _ => {
                return Err(TensorError::BadShape {
                    op: "layer_norm",
                    shape: xs,
                    reason: "input must be rank 1 or 2".into(),
                })
            }
        };
        if d < 2 {
            return Err(TensorError::DegenerateVariance { d });
        }
        for (t, name) in [(gain, "gain"), (shift, "shift")] {
            if self.shape(t) != [d] {
                return Err(TensorError::DimMismatch {
                    op: "layer_norm",
                    axis: name,
                    expected: d,
                    got: self.shape(t).first().copied().unwrap_or(0),
                });
            }
        }
        let mut out = vec![T::ZERO; rows * d];
        let mut saved = vec![(T::ZERO, T::ZERO); rows];
        kernels::layer_norm_fwd(
            self.values(x),
            self.values(gain),
            self.values(shift),
            rows,
            d,
            eps,
            &mut out,
            &mut saved,
        );
        let t = self.push_op_output("layer_norm", xs, out);
        self.ops.push(Record::LayerNorm {
            x,
            gain,
            shift,
            out: t,
            rows,
            d,
            saved,
        });
        Ok(t)
    }

    /// Per-channel batch normalisation of `[N, C, D, H, W]`. Train mode uses
    /// batch statistics and updates `stats` with `momentum`; eval mode uses
    /// the recorded running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm3d(
        &mut self,
        x: Tensor,
        gain: Tensor,
        shift: Tensor,
        stats: &mut RunningStats<T>,
        mode: NormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::BadShape {
                op: "batch_norm3d",
                shape: xs,
                reason: "input must be [N, C, D, H, W]".into(),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let dhw = xs[2] * xs[3] * xs[4];
        let m = n * dhw;
        for (t, name) in [(gain, "gain"), (shift, "shift")] {
            if self.shape(t) != [c] {
                return Err(TensorError::DimMismatch {
                    op: "batch_norm3d",
                    axis: name,
                    expected: c,
                    got: self.shape(t).first().copied().unwrap_or(0),
                });
            }
        }
        if stats.mean.len() != c {
            return Err(TensorError::DimMismatch {
                op: "batch_norm3d",
                axis: "running stats channels",
                expected: c,
                got: stats.mean.len(),
            });
        }

        let train = match mode {
            NormMode::Train => {
                if m < 2 {
                    return Err(TensorError::TooFewPerChannel { count: m });
                }
                true
            }
            NormMode::Eval => {
                if !stats.initialized {
                    return Err(TensorError::UninitializedStats);
                }
                false
            }
        };

        // Per-channel (mean, rstd) actually used for normalisation.
        let mut saved = vec![(T::ZERO, T::ZERO); c];
        if train {
            let xv = self.values(x);
            let mut batch = vec![(0.0f64, 0.0f64); c];
            for (ci, entry) in batch.iter_mut().enumerate() {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let plane = &xv[(ni * c + ci) * dhw..(ni * c + ci + 1) * dhw];
                    for v in plane {
                        s += v.to_f64();
                    }
                }
                let mean = s / m as f64;
                let mut q = 0.0f64;
                for ni in 0..n {
                    let plane = &xv[(ni * c + ci) * dhw..(ni * c + ci + 1) * dhw];
                    for v in plane {
                        let dv = v.to_f64() - mean;
                        q += dv * dv;
                    }
                }
                *entry = (mean, q / m as f64);
            }
            for ci in 0..c {
                let (mean, var) = batch[ci];
                saved[ci] = (T::from_f64(mean), T::from_f64(1.0 / (var + eps).sqrt()));
                let prior_mean = if stats.initialized {
                    stats.mean[ci].to_f64()
                } else {
                    0.0
                };
                let prior_var = if stats.initialized {
                    stats.var[ci].to_f64()
                } else {
                    1.0
                };
                let unbiased = if m > 1 {
                    var * m as f64 / (m as f64 - 1.0)
                } else {
                    var
                };
                stats.mean[ci] = T::from_f64((1.0 - momentum) * prior_mean + momentum * mean);
                stats.var[ci] = T::from_f64((1.0 - momentum) * prior_var + momentum * unbiased);
            }
            stats.initialized = true;
        } else {
            for ci in 0..c {
                let rstd = 1.0 / (stats.var[ci].to_f64() + eps).sqrt();
                saved[ci] = (stats.mean[ci], T::from_f64(rstd));
            }
        }

        let mut out = vec![T::ZERO; n * c * dhw];
        {
            let xv = self.values(x);
            let g = self.values(gain);
            let s = self.values(shift);
            let saved_ref = &saved;
            exec::for_each_chunk_mut(&mut out, dhw, 4 * n * c * dhw, |plane, oplane| {
                let ci = plane % c;
                let (mean, rstd) = saved_ref[ci];
                let xp = &xv[plane * dhw..(plane + 1) * dhw];
                for i in 0..dhw {
                    oplane[i] = (xp[i] - mean) * rstd * g[ci] + s[ci];
                }
            });
        }
        let t = self.push_op_output("batch_norm3d", xs, out);
        self.ops.push(Record::BatchNorm {
            x,
            gain,
            shift,
            out: t,
            n,
            c,
            dhw,
            saved,
            train,
        });
        Ok(t)
    }

    /// Element-wise nonlinearity.
    pub fn activation(&mut self, kind: Activation, x: Tensor) -> Result<Tensor, TensorError> {
        if let Activation::LeakyRelu { slope } = kind {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(TensorError::BadSlope { slope });
            }
        }
        let xs = self.shape(x).to_vec();
        let xv = self.values(x);
        let mut out = vec![T::ZERO; xv.len()];
        match kind {
            Activation::Gelu => exec::fill_indexed(&mut out, |i| gelu(xv[i])),
            Activation::Relu => exec::fill_indexed(&mut out, |i| {
                if xv[i] > T::ZERO {
                    xv[i]
                } else {
                    T::ZERO
                }
            }),
            Activation::LeakyRelu { slope } => {
                let s = T::from_f64(slope);
                exec::fill_indexed(&mut out, |i| {
                    if xv[i] > T::ZERO {
                        xv[i]
                    } else {
                        s * xv[i]
                    }
                })
            }
        }
        let t = self.push_op_output("activation", xs, out);
        self.ops.push(Record::Act { x, out: t, kind });
        Ok(t)
    }

    /// Element-wise sum of two identically shaped tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::BadShape {
                op: "add",
                shape: self.shape(b).to_vec(),
                reason: format!("does not match lhs shape {:?}", self.shape(a)),
            });
        }
        let shape = self.shape(a).to_vec();
        let mut out = vec![T::ZERO; self.values(a).len()];
        kernels::ew_add(self.values(a), self.values(b), &mut out);
        let t = self.push_op_output("add", shape, out);
        self.ops.push(Record::Add { a, b, out: t });
        Ok(t)
    }

    /// Element-wise product (used by tests and diagnostics).
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::BadShape {
                op: "mul",
                shape: self.shape(b).to_vec(),
                reason: format!("does not match lhs shape {:?}", self.shape(a)),
            });
        }
        let shape = self.shape(a).to_vec();
        let mut out = vec![T::ZERO; self.values(a).len()];
        kernels::ew_mul(self.values(a), self.values(b), &mut out);
        let t = self.push_op_output("mul", shape, out);
        self.ops.push(Record::Mul { a, b, out: t });
        Ok(t)
    }

    /// Sum of all elements as a scalar (shape `[1]`).
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor, TensorError> {
        let total = T::from_f64(kernels::sum_f64(self.values(x)));
        let t = self.push_op_output("sum", vec![1], vec![total]);
        self.ops.push(Record::Sum { x, out: t });
        Ok(t)
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse_loss(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor, TensorError> {
        if self.shape(pred) != self.shape(target) {
            return Err(TensorError::BadShape {
                op: "mse_loss",
                shape: self.shape(target).to_vec(),
                reason: format!("does not match prediction shape {:?}", self.shape(pred)),
            });
        }
        let v = T::from_f64(kernels::mse(self.values(pred), self.values(target)));
        // no finiteness assertion here: a diverging loss is a runtime
        // condition the training loop must observe and report, not a bug
        let t = self.push(vec![1], vec![v], false);
        self.ops.push(Record::Mse {
            pred,
            target,
            out: t,
        });
        Ok(t)
    }

    /// Same values, new shape (row-major order preserved).
    pub fn reshape(&mut self, x: Tensor, new_shape: &[usize]) -> Result<Tensor, TensorError> {
        let from: usize = self.shape(x).iter().product();
        let to: usize = new_shape.iter().product();
        if from != to {
            return Err(TensorError::CountMismatch { from, to });
        }
        let values = self.values(x).to_vec();
        let t = self.push_op_output("reshape", new_shape.to_vec(), values);
        self.ops.push(Record::Reshape { x, out: t });
        Ok(t)
    }

    /// Axis reordering: output axis `a` is input axis `axes[a]`.
    pub fn permute(&mut self, x: Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let rank = xs.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::BadPermutation(axes.to_vec()));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let xv = self.values(x);
        let mut out = vec![T::ZERO; xv.len()];
        permute_map(&xs, axes, |src, dst| out[dst] = xv[src]);
        let t = self.push_op_output("permute", out_shape, out);
        self.ops.push(Record::Permute {
            x,
            out: t,
            axes: axes.to_vec(),
        });
        Ok(t)
    }

    // -- backward ------------------------------------------------------------

    /// Propagates gradients from a scalar loss to every node on the tape.
    /// Gradients accumulate across multiple uses of a tensor. A tape supports
    /// exactly one backward pass.
    pub fn backward(&mut self, loss: Tensor) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::TapeConsumed);
        }
        if self.shape(loss) != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for idx in (0..self.ops.len()).rev() {
            self.backprop_op(idx, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter()) {
            node.grad = g;
        }
        Ok(())
    }

    fn backprop_op(&self, idx: usize, grads: &mut [Option<Vec<T>>]) {
        // Take the output gradient out of the arena, accumulate into the
        // inputs one at a time, then restore it.
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out.0].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        fn buf<'g, T: Scalar>(
            grads: &'g mut [Option<Vec<T>>],
            t: Tensor,
            len: usize,
        ) -> &'g mut Vec<T> {
            grads[t.0].get_or_insert_with(|| vec![T::ZERO; len])
        }
        let nodes = &self.nodes;
        let numel = |t: Tensor| nodes[t.0].values.len();

        match &self.ops[idx] {
            Record::Linear {
                x,
                w,
                b,
                out,
                rows,
                d_in,
                d_out,
            } => {
                let g = out_grad!(out);
                kernels::linear_bwd_x(
                    &g,
                    &nodes[w.0].values,
                    *rows,
                    *d_in,
                    *d_out,
                    buf(grads, *x, numel(*x)),
                );
                kernels::linear_bwd_w(
                    &g,
                    &nodes[x.0].values,
                    *rows,
                    *d_in,
                    *d_out,
                    buf(grads, *w, numel(*w)),
                );
                kernels::linear_bwd_b(&g, *rows, *d_out, buf(grads, *b, numel(*b)));
                grads[out.0] = Some(g);
            }
            Record::Conv {
                x,
                k,
                b,
                out,
                n,
                c_in,
                c_out,
                dims,
            } => {
                let g = out_grad!(out);
                kernels::corr3(
                    &g,
                    &nodes[k.0].values,
                    kernels::KernelMap::conv_bwd_x(*c_in),
                    *n,
                    *c_out,
                    *c_in,
                    *dims,
                    buf(grads, *x, numel(*x)),
                );
                kernels::corr3_kernel_grad(
                    &g,
                    &nodes[x.0].values,
                    *n,
                    *c_out,
                    *c_in,
                    *dims,
                    buf(grads, *k, numel(*k)),
                );
                kernels::channel_bias_grad(
                    &g,
                    *n,
                    *c_out,
                    dims.0 * dims.1 * dims.2,
                    buf(grads, *b, numel(*b)),
                );
                grads[out.0] = Some(g);
            }
            Record::Deconv {
                x,
                k,
                b,
                out,
                n,
                c_in,
                c_out,
                dims,
            } => {
                let g = out_grad!(out);
                kernels::corr3(
                    &g,
                    &nodes[k.0].values,
                    kernels::KernelMap::deconv_bwd_x(*c_out),
                    *n,
                    *c_out,
                    *c_in,
                    *dims,
                    buf(grads, *x, numel(*x)),
                );
                kernels::corr3_kernel_grad(
                    &nodes[x.0].values,
                    &g,
                    *n,
                    *c_in,
                    *c_out,
                    *dims,
                    buf(grads, *k, numel(*k)),
                );
                kernels::channel_bias_grad(
                    &g,
                    *n,
                    *c_out,
                    dims.0 * dims.1 * dims.2,
                    buf(grads, *b, numel(*b)),
                );
                grads[out.0] = Some(g);
            }
            Record::LayerNorm {
                x,
                gain,
                shift,
                out,
                rows,
                d,
                saved,
            } => {
                let g = out_grad!(out);
                // dgain/dshift accumulate across rows; run the fused kernel
                // into temporaries then fold into the arena.
                let mut dgain = vec![T::ZERO; *d];
                let mut dshift = vec![T::ZERO; *d];
                kernels::layer_norm_bwd(
                    &g,
                    &nodes[x.0].values,
                    &nodes[gain.0].values,
                    saved,
                    *rows,
                    *d,
                    buf(grads, *x, numel(*x)),
                    &mut dgain,
                    &mut dshift,
                );
                let gg = buf(grads, *gain, numel(*gain));
                for (o, v) in gg.iter_mut().zip(dgain) {
                    *o += v;
                }
                let gs = buf(grads, *shift, numel(*shift));
                for (o, v) in gs.iter_mut().zip(dshift) {
                    *o += v;
                }
                grads[out.0] = Some(g);
            }
            Record::BatchNorm {
                x,
                gain,
                shift,
                out,
                n,
                c,
                dhw,
                saved,
                train,
            } => {
                let g = out_grad!(out);
                let xv = &nodes[x.0].values;
                let gv = &nodes[gain.0].values;
                let m = (*n * *dhw) as f64;
                // Per-channel sums of dout and dout*xhat.
                let mut s1 = vec![0.0f64; *c];
                let mut s2 = vec![0.0f64; *c];
                for ci in 0..*c {
                    let (mean, rstd) = saved[ci];
                    let mut a1 = 0.0f64;
                    let mut a2 = 0.0f64;
                    for ni in 0..*n {
                        let base = (ni * *c + ci) * *dhw;
                        for i in 0..*dhw {
                            let d = g[base + i].to_f64();
                            a1 += d;
                            a2 += d * ((xv[base + i] - mean) * rstd).to_f64();
                        }
                    }
                    s1[ci] = a1;
                    s2[ci] = a2;
                }
                {
                    let dx = buf(grads, *x, numel(*x));
                    let saved_ref = saved;
                    let s1r = &s1;
                    let s2r = &s2;
                    exec::for_each_chunk_mut(dx, *dhw, 8 * *n * *c * *dhw, |plane, dxp| {
                        let ci = plane % *c;
                        let (mean, rstd) = saved_ref[ci];
                        let base = plane * *dhw;
                        if *train {
                            let c1 = T::from_f64(s1r[ci] / m);
                            let c2 = T::from_f64(s2r[ci] / m);
                            for i in 0..*dhw {
                                let xhat = (xv[base + i] - mean) * rstd;
                                dxp[i] += gv[ci] * rstd * (g[base + i] - c1 - xhat * c2);
                            }
                        } else {
                            for i in 0..*dhw {
                                dxp[i] += gv[ci] * rstd * g[base + i];
                            }
                        }
                    });
                }
                let gg = buf(grads, *gain, numel(*gain));
                for ci in 0..*c {
                    gg[ci] += T::from_f64(s2[ci]);
                }
                let gs = buf(grads, *shift, numel(*shift));
                for ci in 0..*c {
                    gs[ci] += T::from_f64(s1[ci]);
                }
                grads[out.0] = Some(g);
            }
            Record::Act { x, out, kind } => {
                let g = out_grad!(out);
                let xv = &nodes[x.0].values;
                let dx = buf(grads, *x, numel(*x));
                match kind {
                    Activation::Gelu => {
                        for i in 0..dx.len() {
                            dx[i] += gelu_grad(xv[i]) * g[i];
                        }
                    }
                    Activation::Relu => {
                        for i in 0..dx.len() {
                            if xv[i] > T::ZERO {
                                dx[i] += g[i];
                            }
                        }
                    }
                    Activation::LeakyRelu { slope } => {
                        let s = T::from_f64(*slope);
                        for i in 0..dx.len() {
                            dx[i] += if xv[i] > T::ZERO { g[i] } else { s * g[i] };
                        }
                    }
                }
                grads[out.0] = Some(g);
            }
            Record::Add { a, b, out } => {
                let g = out_grad!(out);
                let da = buf(grads, *a, numel(*a));
                for i in 0..g.len() {
                    da[i] += g[i];
                }
                let db = buf(grads, *b, numel(*b));
                for i in 0..g.len() {
                    db[i] += g[i];
                }
                grads[out.0] = Some(g);
            }
            Record::Mul { a, b, out } => {
                let g = out_grad!(out);
                let bv = &nodes[b.0].values;
                let da = buf(grads, *a, numel(*a));
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
                let av = &nodes[a.0].values;
                let db = buf(grads, *b, numel(*b));
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
                grads[out.0] = Some(g);
            }
            Record::Sum { x, out } => {
                let g = out_grad!(out);
                let s = g[0];
                let dx = buf(grads, *x, numel(*x));
                for v in dx.iter_mut() {
                    *v += s;
                }
                grads[out.0] = Some(g);
            }
            Record::Mse { pred, target, out } => {
                let g = out_grad!(out);
                let scale = g[0] * T::from_f64(2.0 / numel(*pred) as f64);
                let pv = &nodes[pred.0].values;
                let tv = &nodes[target.0].values;
                let dp = buf(grads, *pred, numel(*pred));
                for i in 0..dp.len() {
                    dp[i] += scale * (pv[i] - tv[i]);
                }
                let dt = buf(grads, *target, numel(*target));
                for i in 0..dt.len() {
                    dt[i] += -(scale * (pv[i] - tv[i]));
                }
                grads[out.0] = Some(g);
            }
            Record::Reshape { x, out } => {
                let g = out_grad!(out);
                let dx = buf(grads, *x, numel(*x));
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
                grads[out.0] = Some(g);
            }
            Record::Permute { x, out, axes } => {
                let g = out_grad!(out);
                let dx = buf(grads, *x, numel(*x));
                permute_map(&nodes[x.0].shape, axes, |src, dst| dx[src] += g[dst]);
                grads[out.0] = Some(g);
            }
        }
    }
}

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = T::from_f64(0.5);
    x * half * (T::ONE + (x * inv_sqrt2).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = T::from_f64(0.5);
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    let phi_cdf = half * (T::ONE + (x * inv_sqrt2).erf());
    let pdf = (-(x * x * half)).exp() * inv_sqrt_2pi;
    phi_cdf + x * pdf
}

/// Visits every element of a permutation: `visit(src_index, dst_index)`.
fn permute_map<F: FnMut(usize, usize)>(in_shape: &[usize], axes: &[usize], mut visit: F) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let total: usize = in_shape.iter().product();
    let mut out_coord = vec![0usize; rank];
    for dst in 0..total {
        // decompose dst into out coordinates (row-major)
        let mut rem = dst;
        for a in (0..rank).rev() {
            out_coord[a] = rem % out_shape[a];
            rem /= out_shape[a];
        }
        let mut src = 0usize;
        for a in 0..rank {
            src += out_coord[a] * in_strides[axes[a]];
        }
        visit(src, dst);
    }
}
