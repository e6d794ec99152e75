//! Full-reference image quality metrics: PSNR and single-scale SSIM.
//!
//! PSNR uses the reference maximum as the peak (volumes are floating point
//! with data-dependent range); identical inputs report an infinity sentinel.
//! SSIM is computed per in-plane slice with an 11 x 11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03), then averaged over windows and slices;
//! the dynamic range defaults to max(reference) - min(reference).

use crate::data::Volume;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("reference volume is all zero; peak undefined")]
    AllZeroReference,
    #[error("slice {h} x {w} smaller than the {window} x {window} SSIM window")]
    SliceTooSmall { h: usize, w: usize, window: usize },
    #[error("degenerate dynamic range (reference is constant)")]
    DegenerateRange,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB with peak = max(reference).
/// Identical volumes yield `f64::INFINITY` (reported as `"inf"` in JSON).
pub fn psnr(test: &Volume, reference: &Volume) -> Result<f64, MetricError> {
    if test.shape() != reference.shape() {
        return Err(MetricError::ShapeMismatch {
            a: test.shape(),
            b: reference.shape(),
        });
    }
    let peak = reference.max() as f64;
    if peak <= 0.0 {
        return Err(MetricError::AllZeroReference);
    }
    let mut acc = 0.0f64;
    for (a, b) in test.voxels().iter().zip(reference.voxels()) {
        let d = *a as f64 - *b as f64;
        acc += d * d;
    }
    let mse = acc / test.voxels().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean PSNR over in-plane slices (peak still from the full reference).
pub fn psnr_slice_mean(test: &Volume, reference: &Volume) -> Result<f64, MetricError> {
    if test.shape() != reference.shape() {
        return Err(MetricError::ShapeMismatch {
            a: test.shape(),
            b: reference.shape(),
        });
    }
    let peak = reference.max() as f64;
    if peak <= 0.0 {
        return Err(MetricError::AllZeroReference);
    }
    let (h, w, c) = test.shape();
    let mut total = 0.0;
    for ci in 0..c {
        let ts = test.slice(ci);
        let rs = reference.slice(ci);
        let mut acc = 0.0f64;
        for (a, b) in ts.iter().zip(&rs) {
            let d = *a as f64 - *b as f64;
            acc += d * d;
        }
        let mse = acc / (h * w) as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += 10.0 * (peak * peak / mse).log10();
    }
    Ok(total / c as f64)
}

/// SSIM with the dynamic range taken from the reference volume.
pub fn ssim(test: &Volume, reference: &Volume) -> Result<f64, MetricError> {
    let range = (reference.max() - reference.min()) as f64;
    if range <= 0.0 {
        return Err(MetricError::DegenerateRange);
    }
    ssim_with_range(test, reference, range)
}

/// SSIM with an explicit dynamic range (fixing the range makes the metric
/// symmetric under argument swap).
pub fn ssim_with_range(test: &Volume, reference: &Volume, range: f64) -> Result<f64, MetricError> {
    if test.shape() != reference.shape() {
        return Err(MetricError::ShapeMismatch {
            a: test.shape(),
            b: reference.shape(),
        });
    }
    if range <= 0.0 {
        return Err(MetricError::DegenerateRange);
    }
    let (h, w, c) = test.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::SliceTooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let c1 = (K1 * range) * (K1 * range);
    let c2 = (K2 * range) * (K2 * range);
    let kernel = gaussian_kernel();
    let mut total = 0.0f64;
    for ci in 0..c {
        let x: Vec<f64> = test.slice(ci).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = reference.slice(ci).iter().map(|&v| v as f64).collect();
        total += ssim_slice(&x, &y, h, w, c1, c2, &kernel);
    }
    Ok(total / c as f64)
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter, valid region only: output is (h-10) x (w-10).
fn blur_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let wv = w - k + 1;
    let hv = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * wv];
    for row in 0..h {
        for col in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * img[row * w + col + i];
            }
            tmp[row * wv + col] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; hv * wv];
    for row in 0..hv {
        for col in 0..wv {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(row + i) * wv + col];
            }
            out[row * wv + col] = acc;
        }
    }
    out
}

fn ssim_slice(x: &[f64], y: &[f64], h: usize, w: usize, c1: f64, c2: f64, kernel: &[f64]) -> f64 {
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur_valid(x, h, w, kernel);
    let mu_y = blur_valid(y, h, w, kernel);
    let m_xx = blur_valid(&xx, h, w, kernel);
    let m_yy = blur_valid(&yy, h, w, kernel);
    let m_xy = blur_valid(&xy, h, w, kernel);
    let mut total = 0.0f64;
    for i in 0..mu_x.len() {
        let mx = mu_x[i];
        let my = mu_y[i];
        let vx = m_xx[i] - mx * mx;
        let vy = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
    }
    total / mu_x.len() as f64
}

/// A metric value that serialises non-finite values as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str("inf")
        }
    }
}

/// Per-volume metric row.
#[derive(Debug, Clone, Serialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub psnr: MetricValue,
    pub psnr_slice_mean: MetricValue,
    pub ssim: MetricValue,
}

/// Per-volume metric rows plus their mean, in the shape of a results table.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub mean_psnr: f64,
    pub mean_psnr_slice: f64,
    pub mean_ssim: f64,
}

impl Serialize for MetricReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("MetricReport", 3)?;
        s.serialize_field("peak_convention", "reference-max")?;
        s.serialize_field("per_volume", &self.per_volume)?;
        let mean = VolumeMetrics {
            id: "mean".into(),
            psnr: MetricValue(self.mean_psnr),
            psnr_slice_mean: MetricValue(self.mean_psnr_slice),
            ssim: MetricValue(self.mean_ssim),
        };
        s.serialize_field("mean", &mean)?;
        s.end()
    }
}

impl MetricReport {
    /// Evaluates PSNR/SSIM for (id, test, reference) triples and averages.
    pub fn evaluate(rows: &[(String, &Volume, &Volume)]) -> Result<MetricReport, MetricError> {
        let mut per_volume = Vec::with_capacity(rows.len());
        let (mut sp, mut sps, mut ss) = (0.0, 0.0, 0.0);
        for (id, test, reference) in rows {
            let p = psnr(test, reference)?;
            let psl = psnr_slice_mean(test, reference)?;
            let s = ssim(test, reference)?;
            sp += p;
            sps += psl;
            ss += s;
            per_volume.push(VolumeMetrics {
                id: id.clone(),
                psnr: MetricValue(p),
                psnr_slice_mean: MetricValue(psl),
                ssim: MetricValue(s),
            });
        }
        let n = rows.len().max(1) as f64;
        Ok(MetricReport {
            per_volume,
            mean_psnr: sp / n,
            mean_psnr_slice: sps / n,
            mean_ssim: ss / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::noise::{add_rician, NoiseSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phantom(seed: u64) -> Volume {
        generate_phantom(&PhantomSpec::desk_scale(seed)).unwrap().0
    }

    #[test]
    fn identical_volumes_hit_the_sentinels() {
        let v = phantom(1);
        assert!(psnr(&v, &v).unwrap().is_infinite());
        assert!((ssim(&v, &v).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_closed_form() {
        // reference in [0,1] with max 1 and MSE 0.01 gives exactly 20 dB
        let n = 1000;
        let mut rv = vec![0.5f32; n];
        rv[0] = 1.0;
        let mut tv = rv.clone();
        for v in tv.iter_mut() {
            *v += 0.1;
        }
        let reference = Volume::new((10, 10, 10), rv).unwrap();
        let test = Volume::new((10, 10, 10), tv).unwrap();
        let p = psnr(&test, &reference).unwrap();
        assert!((p - 20.0).abs() < 1e-4, "{p}");
    }

    #[test]
    fn psnr_matches_independent_reimplementation() {
        // cross-check 10 log10(peak^2 / mse) against 20 log10(peak) - 10 log10(mse)
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..100 {
            let n = 4 * 5 * 3;
            let rv: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let tv: Vec<f32> = rv.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            let reference = Volume::new((4, 5, 3), rv.clone()).unwrap();
            let test = Volume::new((4, 5, 3), tv.clone()).unwrap();
            let got = psnr(&test, &reference).unwrap();

            let peak = rv.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mse: f64 = rv
                .iter()
                .zip(&tv)
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                / n as f64;
            let independent = 20.0 * peak.log10() - 10.0 * mse.log10();
            assert!((got - independent).abs() < 1e-9, "{got} vs {independent}");
        }
    }

    #[test]
    fn psnr_shape_mismatch_and_zero_reference_errors() {
        let a = Volume::zeros((16, 16, 2));
        let b = Volume::zeros((16, 16, 3));
        assert!(matches!(
            psnr(&a, &b),
            Err(MetricError::ShapeMismatch { .. })
        ));
        let z = Volume::zeros((16, 16, 2));
        assert!(matches!(psnr(&a, &z), Err(MetricError::AllZeroReference)));
    }

    #[test]
    fn psnr_positive_when_mse_below_peak_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rv: Vec<f32> = (0..200).map(|_| rng.gen_range(0.2..1.0)).collect();
        let tv: Vec<f32> = rv.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
        let reference = Volume::new((10, 10, 2), rv).unwrap();
        let test = Volume::new((10, 10, 2), tv).unwrap();
        assert!(psnr(&test, &reference).unwrap() > 0.0);
    }

    #[test]
    fn ssim_degrades_under_contrast_inversion() {
        let v = phantom(3);
        let (max, min) = (v.max(), v.min());
        let inverted = Volume::new(
            v.shape(),
            v.voxels().iter().map(|&x| max + min - x).collect(),
        )
        .unwrap();
        let s = ssim(&inverted, &v).unwrap();
        assert!(s < 0.5, "inverted-contrast SSIM {s} not < 0.5");
        // golden value pinned when the metric was first brought up
        let golden = -0.125906531;
        assert!(
            (s - golden).abs() < 5e-4,
            "SSIM {s} drifted from golden {golden}"
        );
    }

    #[test]
    fn ssim_is_symmetric_with_fixed_range() {
        let a = phantom(4);
        let noisy = add_rician(&a, &NoiseSpec::new(0.09, 8).unwrap()).unwrap();
        let s1 = ssim_with_range(&noisy, &a, 1.0).unwrap();
        let s2 = ssim_with_range(&a, &noisy, 1.0).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn ssim_slice_too_small_is_an_error() {
        let v = Volume::zeros((8, 20, 2));
        assert!(matches!(
            ssim_with_range(&v, &v, 1.0),
            Err(MetricError::SliceTooSmall { .. })
        ));
    }

    #[test]
    fn metrics_degrade_monotonically_with_noise_level() {
        let clean = phantom(11);
        let mut last_psnr = f64::INFINITY;
        let mut last_ssim = 1.0f64;
        for level in [0.03, 0.09, 0.15] {
            let noisy = add_rician(&clean, &NoiseSpec::new(level, 47).unwrap()).unwrap();
            let p = psnr(&noisy, &clean).unwrap();
            let s = ssim(&noisy, &clean).unwrap();
            assert!(p < last_psnr, "PSNR not strictly decreasing at {level}");
            assert!(s < last_ssim, "SSIM not strictly decreasing at {level}");
            last_psnr = p;
            last_ssim = s;
        }
    }

    #[test]
    fn report_serialises_rows_mean_and_inf_sentinel() {
        let v = phantom(5);
        let noisy = add_rician(&v, &NoiseSpec::new(0.09, 6).unwrap()).unwrap();
        let report = MetricReport::evaluate(&[
            ("a".into(), &noisy, &v),
            ("b".into(), &v, &v),
        ])
        .unwrap();
        let json: serde_json::Value = serde_json::from_str(
            &serde_json::to_string(&report).unwrap(),
        )
        .unwrap();
        assert_eq!(json["per_volume"].as_array().unwrap().len(), 2);
        assert_eq!(json["per_volume"][1]["psnr"], "inf");
        assert!(json["mean"]["ssim"].is_number());
        assert_eq!(json["peak_convention"], "reference-max");
    }
}
