//! Low-level compute kernels behind the tape operators.
//!
//! All reductions run in a fixed order (multi-lane accumulators combine in a
//! fixed tree), and parallelism is only ever applied across disjoint output
//! chunks, so results are bit-identical whether the `parallel` feature is on
//! or off. Exposed for the bench suite; not part of the supported API
//! surface.

use super::scalar::Scalar;
use crate::exec;

const LANES: usize = 8;

/// Fixed-order dot product with eight accumulator lanes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; LANES];
    dot_acc(a, b, &mut acc);
    reduce_lanes(&acc)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

// ---------------------------------------------------------------------------
// Linear (fully connected)
// ---------------------------------------------------------------------------

/// out[b, j] = bias[j] + x[b, :] . w[j, :]
///
/// Looped j-outer so the weight matrix is streamed exactly once; the batch
/// stays cache-resident. Results land in a [j, b] scratch first.
pub fn linear_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), rows * d_out);
    let mut tmp = vec![T::ZERO; d_out * rows];
    exec::for_each_chunk_mut(&mut tmp, rows, rows * d_in * d_out, |j, trow| {
        let wr = &w[j * d_in..(j + 1) * d_in];
        for b in 0..rows {
            trow[b] = bias[j] + dot(&x[b * d_in..(b + 1) * d_in], wr);
        }
    });
    for b in 0..rows {
        for j in 0..d_out {
            out[b * d_out + j] = tmp[j * rows + b];
        }
    }
}

/// Number of fixed reduction partials in [`linear_bwd_x`]; constant so the
/// summation order never depends on the thread count.
const BWD_X_BLOCKS: usize = 8;

/// dx[b, :] += sum_j dout[b, j] * w[j, :]
///
/// The j-range is split into a fixed number of blocks, each accumulated into
/// its own partial, and the partials are folded in block order.
pub fn linear_bwd_x<T: Scalar>(
    dout: &[T],
    w: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [T],
) {
    let blocks = BWD_X_BLOCKS.min(d_out.max(1));
    let mut partials = vec![T::ZERO; blocks * rows * d_in];
    exec::for_each_chunk_mut(&mut partials, rows * d_in, rows * d_in * d_out, |blk, part| {
        let j_lo = blk * d_out / blocks;
        let j_hi = (blk + 1) * d_out / blocks;
        for j in j_lo..j_hi {
            let wr = &w[j * d_in..(j + 1) * d_in];
            for b in 0..rows {
                axpy(dout[b * d_out + j], wr, &mut part[b * d_in..(b + 1) * d_in]);
            }
        }
    });
    for blk in 0..blocks {
        let part = &partials[blk * rows * d_in..(blk + 1) * rows * d_in];
        for (o, p) in dx.iter_mut().zip(part.iter()) {
            *o += *p;
        }
    }
}

/// dw[j, :] += sum_b dout[b, j] * x[b, :]
pub fn linear_bwd_w<T: Scalar>(
    dout: &[T],
    x: &[T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
) {
    exec::for_each_chunk_mut(dw, d_in, rows * d_in * d_out, |j, dwj| {
        for b in 0..rows {
            axpy(dout[b * d_out + j], &x[b * d_in..(b + 1) * d_in], dwj);
        }
    });
}

/// db[j] += sum_b dout[b, j]
pub fn linear_bwd_b<T: Scalar>(dout: &[T], rows: usize, d_out: usize, db: &mut [T]) {
    for b in 0..rows {
        let row = &dout[b * d_out..(b + 1) * d_out];
        for j in 0..d_out {
            db[j] += row[j];
        }
    }
}

// ---------------------------------------------------------------------------
// 3x3x3 correlation family (conv3d / deconv3d, forward and input gradients)
// ---------------------------------------------------------------------------

/// Kernel element addressing for [`corr3`]: which axis of the stored kernel
/// is the summed channel, and whether the spatial taps are flipped.
#[derive(Clone, Copy)]
pub struct KernelMap {
    /// Stride between consecutive summed-channel entries.
    pub sum_stride: usize,
    /// Stride between consecutive output-channel entries.
    pub out_stride: usize,
    /// Use taps (2-kd, 2-kh, 2-kw) instead of (kd, kh, kw).
    pub flip: bool,
}

impl KernelMap {
    /// conv3d forward with kernel [c_out, c_sum, 3, 3, 3].
    pub fn conv(c_sum: usize) -> Self {
        KernelMap { sum_stride: 27, out_stride: c_sum * 27, flip: false }
    }
    /// deconv3d forward with kernel [c_sum, c_out, 3, 3, 3].
    pub fn deconv(c_out: usize) -> Self {
        KernelMap { sum_stride: c_out * 27, out_stride: 27, flip: true }
    }
    /// Input gradient of conv3d: corr of dout with kernel [c_sum, c_out, 3, 3, 3] flipped.
    pub fn conv_bwd_x(c_out: usize) -> Self {
        KernelMap { sum_stride: c_out * 27, out_stride: 27, flip: true }
    }
    /// Input gradient of deconv3d: corr of dout with kernel [c_out, c_sum, 3, 3, 3].
    pub fn deconv_bwd_x(c_sum: usize) -> Self {
        KernelMap { sum_stride: 27, out_stride: c_sum * 27, flip: false }
    }
}

/// Shared 3x3x3 shape-preserving correlation (padding 1, stride 1):
///
/// out[n, co, p] += sum_{cs, k} x[n, cs, p + k - 1] * kernel(cs, co, k)
///
/// `out` must be pre-initialised (bias for a forward pass, existing gradient
/// for a backward pass). Accumulation order per output plane is fixed.
pub fn corr3<T: Scalar>(
    x: &[T],
    kernel: &[T],
    map: KernelMap,
    n: usize,
    c_sum: usize,
    c_out: usize,
    dims: (usize, usize, usize),
    out: &mut [T],
) {
    let (d, h, w) = dims;
    let dhw = d * h * w;
    debug_assert_eq!(x.len(), n * c_sum * dhw);
    debug_assert_eq!(out.len(), n * c_out * dhw);
    debug_assert_eq!(kernel.len(), c_sum * c_out * 27);

    // One task per sample. Input and output planes carry a one-voxel halo in
    // w: halo cells are zero on the input side (so shifted products vanish
    // exactly like zero padding) and scratch on the output side (discarded at
    // copy-back). Each (tap, depth) contribution is then a single contiguous
    // axpy spanning all valid rows at once.
    let wp = w + 2;
    let hwp = h * wp;
    let plane_len = d * hwp;
    // one guard cell on each side of every padded plane absorbs the w-shift
    // at the first/last row; guards stay zero so shifted products vanish
    let plane_stride = plane_len + 2;
    exec::for_each_chunk_mut(out, c_out * dhw, n * c_sum * c_out * dhw * 27, |ni, oblock| {
        let mut padded = vec![T::ZERO; c_sum * plane_stride];
        for cs in 0..c_sum {
            let base = cs * plane_stride + 1;
            let xp = &x[(ni * c_sum + cs) * dhw..(ni * c_sum + cs + 1) * dhw];
            for r in 0..d * h {
                padded[base + r * wp + 1..base + r * wp + 1 + w]
                    .copy_from_slice(&xp[r * w..(r + 1) * w]);
            }
        }
        let mut out_pad = vec![T::ZERO; plane_len];
        for co in 0..c_out {
            out_pad.iter_mut().for_each(|v| *v = T::ZERO);
            for cs in 0..c_sum {
                let kbase = cs * map.sum_stride + co * map.out_stride;
                let base = cs * plane_stride + 1;
                for kd in 0..3usize {
                    let dz = kd as isize - 1;
                    let d_lo = (-dz).max(0) as usize;
                    let d_hi = (d as isize - dz).min(d as isize) as usize;
                    for kh in 0..3usize {
                        let hz = kh as isize - 1;
                        let h_lo = (-hz).max(0) as usize;
                        let h_hi = (h as isize - hz).min(h as isize) as usize;
                        if h_lo >= h_hi || d_lo >= d_hi {
                            continue;
                        }
                        let span = (h_hi - h_lo) * wp;
                        for kw in 0..3usize {
                            let idx = if map.flip {
                                ((2 - kd) * 3 + (2 - kh)) * 3 + (2 - kw)
                            } else {
                                (kd * 3 + kh) * 3 + kw
                            };
                            let kval = kernel[kbase + idx];
                            let wz = kw as isize - 1;
                            for od in d_lo..d_hi {
                                let id = (od as isize + dz) as usize;
                                let o0 = od * hwp + h_lo * wp;
                                let s0 = (base as isize
                                    + (id * hwp) as isize
                                    + ((h_lo as isize + hz) * wp as isize)
                                    + wz) as usize;
                                axpy(
                                    kval,
                                    &padded[s0..s0 + span],
                                    &mut out_pad[o0..o0 + span],
                                );
                            }
                        }
                    }
                }
            }
            let oplane = &mut oblock[co * dhw..(co + 1) * dhw];
            for r in 0..d * h {
                let src = &out_pad[r * wp + 1..r * wp + 1 + w];
                let dst = &mut oplane[r * w..(r + 1) * w];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += *v;
                }
            }
        }
    });
}

/// Kernel gradient shared by conv3d and deconv3d:
///
/// dk[cb, ca, k] += sum_{n, p} a[n, cb, p] * b[n, ca, p + k - 1]
///
/// conv3d:   a = dout (cb = c_out), b = x    (ca = c_in)
/// deconv3d: a = x    (cb = c_in),  b = dout (ca = c_out)
pub fn corr3_kernel_grad<T: Scalar>(
    a: &[T],
    b: &[T],
    n: usize,
    cb: usize,
    ca: usize,
    dims: (usize, usize, usize),
    dk: &mut [T],
) {
    let (d, h, w) = dims;
    let dhw = d * h * w;
    debug_assert_eq!(dk.len(), cb * ca * 27);
    let wp = w + 2;
    let hwp = h * wp;
    let plane_len = d * hwp;
    let plane_stride = plane_len + 2;

    // both operands get zero halo columns so shifted spans read zeros at the
    // row edges; the whole valid (h, w) region of one depth slice then folds
    // into a single contiguous dot product
    let pad = |src: &[T], channels: usize| -> Vec<T> {
        let mut out = vec![T::ZERO; n * channels * plane_stride];
        for plane in 0..n * channels {
            let base = plane * plane_stride + 1;
            let sp = &src[plane * dhw..(plane + 1) * dhw];
            for r in 0..d * h {
                out[base + r * wp + 1..base + r * wp + 1 + w]
                    .copy_from_slice(&sp[r * w..(r + 1) * w]);
            }
        }
        out
    };
    let pa = pad(a, cb);
    let pb = pad(b, ca);

    exec::for_each_chunk_mut(dk, 27, n * cb * ca * dhw * 27, |pair, dk27| {
        let icb = pair / ca;
        let ica = pair % ca;
        for kd in 0..3usize {
            let dz = kd as isize - 1;
            let d_lo = (-dz).max(0) as usize;
            let d_hi = (d as isize - dz).min(d as isize) as usize;
            for kh in 0..3usize {
                let hz = kh as isize - 1;
                let h_lo = (-hz).max(0) as usize;
                let h_hi = (h as isize - hz).min(h as isize) as usize;
                if h_lo >= h_hi || d_lo >= d_hi {
                    continue;
                }
                let span = (h_hi - h_lo) * wp;
                for kw in 0..3usize {
                    let wz = kw as isize - 1;
                    let mut acc = T::ZERO;
                    for ni in 0..n {
                        let abase = (ni * cb + icb) * plane_stride + 1;
                        let bbase = (ni * ca + ica) * plane_stride + 1;
                        for pd in d_lo..d_hi {
                            let id = (pd as isize + dz) as usize;
                            let a0 = abase + pd * hwp + h_lo * wp;
                            let b0 = (bbase as isize
                                + (id * hwp) as isize
                                + ((h_lo as isize + hz) * wp as isize)
                                + wz) as usize;
                            acc += dot(&pa[a0..a0 + span], &pb[b0..b0 + span]);
                        }
                    }
                    dk27[(kd * 3 + kh) * 3 + kw] += acc;
                }
            }
        }
    });
}

/// Accumulates element products into fixed lanes without reducing.
#[inline]
fn dot_acc<T: Scalar>(a: &[T], b: &[T], acc: &mut [T; LANES]) {
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    for (l, (xa, xb)) in ra.iter().zip(rb.iter()).enumerate() {
        acc[l] += *xa * *xb;
    }
}

#[inline]
fn reduce_lanes<T: Scalar>(acc: &[T; LANES]) -> T {
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67)
}

/// db[c] += sum over batch and spatial positions of dout[n, c, p]
pub fn channel_bias_grad<T: Scalar>(dout: &[T], n: usize, c: usize, dhw: usize, db: &mut [T]) {
    for ni in 0..n {
        for ci in 0..c {
            let plane = &dout[(ni * c + ci) * dhw..(ni * c + ci + 1) * dhw];
            let mut acc = 0.0f64;
            for v in plane {
                acc += v.to_f64();
            }
            db[ci] += T::from_f64(acc);
        }
    }
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

/// Biased mean and variance of a slice, accumulated in f64.
pub fn mean_var<T: Scalar>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut s = 0.0f64;
    for v in x {
        s += v.to_f64();
    }
    let mean = s / n;
    let mut q = 0.0f64;
    for v in x {
        let d = v.to_f64() - mean;
        q += d * d;
    }
    (mean, q / n)
}

/// Per-row layer norm over the last axis. Saves (mean, rstd) per row.
pub fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    gain: &[T],
    shift: &[T],
    rows: usize,
    d: usize,
    eps: f64,
    out: &mut [T],
    saved: &mut [(T, T)],
) {
    debug_assert_eq!(saved.len(), rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let (mean, var) = mean_var(xr);
        let rstd = 1.0 / (var + eps).sqrt();
        let m = T::from_f64(mean);
        let rs = T::from_f64(rstd);
        saved[r] = (m, rs);
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = (xr[i] - m) * rs * gain[i] + shift[i];
        }
    }
}

/// Layer norm input gradient for one row batch; gain/shift gradients are
/// accumulated separately so rows can share them.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<T: Scalar>(
    dout: &[T],
    x: &[T],
    gain: &[T],
    saved: &[(T, T)],
    rows: usize,
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dshift: &mut [T],
) {
    let dn = d as f64;
    for r in 0..rows {
        let (m, rs) = saved[r];
        let xr = &x[r * d..(r + 1) * d];
        let dr = &dout[r * d..(r + 1) * d];
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for i in 0..d {
            let xhat = ((xr[i] - m) * rs).to_f64();
            let dxh = (dr[i] * gain[i]).to_f64();
            s1 += dxh;
            s2 += dxh * xhat;
        }
        let c1 = T::from_f64(s1 / dn);
        let c2 = T::from_f64(s2 / dn);
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - m) * rs;
            let dxh = dr[i] * gain[i];
            dxr[i] += rs * (dxh - c1 - xhat * c2);
            dgain[i] += dr[i] * xhat;
            dshift[i] += dr[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Element-wise helpers
// ---------------------------------------------------------------------------

pub fn ew_add<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() == b.len() && a.len() == out.len());
    exec::fill_indexed(out, |i| a[i] + b[i]);
}

pub fn ew_mul<T: Scalar>(a: &[T], b: &[T], out: &mut [T]) {
    debug_assert!(a.len() == b.len() && a.len() == out.len());
    exec::fill_indexed(out, |i| a[i] * b[i]);
}

/// Sum with f64 accumulation, fixed order.
pub fn sum_f64<T: Scalar>(x: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for v in x {
        acc += v.to_f64();
    }
    acc
}

/// Mean squared error with f64 accumulation.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = p.to_f64() - t.to_f64();
        acc += d * d;
    }
    acc / pred.len() as f64
}
