//! Synthetic lesion phantoms.
//!
//! A phantom is a smooth low-frequency intensity field inside an ellipsoidal
//! tissue mask (zero outside), plus a handful of small bright ellipsoidal
//! lesions. A binary lesion mask is returned alongside the clean volume so
//! lesion recovery can be measured later. Generation is fully determined by
//! the seed.

use super::{DataError, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub shape: (usize, usize, usize),
    /// Correlation length of the background field, in voxels.
    pub smoothness: f64,
    pub n_lesions: usize,
    /// Inclusive in-plane lesion radius range, in voxels.
    pub lesion_radius: (f64, f64),
    /// Multiplicative intensity boost of a lesion over its surroundings.
    pub lesion_contrast: f32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Desk-scale default: 64 x 64 x 6 with up to three small lesions.
    pub fn desk_scale(seed: u64) -> Self {
        PhantomSpec {
            shape: (64, 64, 6),
            smoothness: 8.0,
            n_lesions: 3,
            lesion_radius: (1.0, 3.0),
            lesion_contrast: 1.5,
            seed,
        }
    }
}

const PLACEMENT_TRIES: usize = 200;
/// Chebyshev dilation radius around a lesion that defines its reference
/// neighbourhood: the lesion level is `contrast * max(background)` over it,
/// and neighbourhoods of different lesions never overlap.
const NEIGHBOURHOOD: usize = 3;

struct Ellipsoid {
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, h: f64, w: f64, c: f64) -> bool {
        let dh = (h - self.center.0) / self.radii.0;
        let dw = (w - self.center.1) / self.radii.1;
        let dc = (c - self.center.2) / self.radii.2;
        dh * dh + dw * dw + dc * dc <= 1.0
    }

}

/// Chebyshev dilation of a voxel set, clipped to the volume.
fn dilate(
    voxels: &[(usize, usize, usize)],
    radius: usize,
    shape: (usize, usize, usize),
) -> Vec<(usize, usize, usize)> {
    let (h, w, c) = shape;
    let mut marked = vec![false; h * w * c];
    for &(vh, vw, vc) in voxels {
        for dh in vh.saturating_sub(radius)..=(vh + radius).min(h - 1) {
            for dw in vw.saturating_sub(radius)..=(vw + radius).min(w - 1) {
                for dc in vc.saturating_sub(radius)..=(vc + radius).min(c - 1) {
                    marked[(dh * w + dw) * c + dc] = true;
                }
            }
        }
    }
    let mut out = Vec::new();
    for hh in 0..h {
        for ww in 0..w {
            for cc in 0..c {
                if marked[(hh * w + ww) * c + cc] {
                    out.push((hh, ww, cc));
                }
            }
        }
    }
    out
}

fn separable_blur(field: &mut [f32], shape: (usize, usize, usize), sigma: f64) {
    let (h, w, c) = shape;
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        kernel.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    // blur one axis at a time, renormalising the kernel at the borders
    let strides = [(w * c, h), (c, w), (1, c)];
    let mut tmp = vec![0.0f32; field.len()];
    for &(stride, len) in &strides {
        for base in 0..field.len() {
            // only positions at offset 0 along this axis start a line
            if (base / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                let mut acc = 0.0f64;
                let mut norm = 0.0f64;
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len - 1);
                for j in lo..=hi {
                    let kv = kernel[j + radius - i];
                    acc += kv * field[base + j * stride] as f64;
                    norm += kv;
                }
                tmp[base + i * stride] = (acc / norm) as f32;
            }
        }
        field.copy_from_slice(&tmp);
    }
}

/// Generates a clean phantom and its binary lesion mask.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Volume), DataError> {
    let (h, w, c) = spec.shape;
    if h < 8 || w < 8 || c < 1 {
        return Err(DataError::InvalidSpec(format!(
            "shape {:?} too small for a phantom",
            spec.shape
        )));
    }
    if spec.lesion_radius.0 < 1.0 || spec.lesion_radius.1 < spec.lesion_radius.0 {
        return Err(DataError::InvalidSpec(
            "lesion radii must satisfy 1 <= min <= max".into(),
        ));
    }
    if spec.lesion_contrast <= 0.0 {
        return Err(DataError::InvalidSpec("lesion contrast must be > 0".into()));
    }
    if spec.smoothness <= 0.0 {
        return Err(DataError::InvalidSpec("smoothness must be > 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let tissue = Ellipsoid {
        center: (
            (h as f64 - 1.0) / 2.0,
            (w as f64 - 1.0) / 2.0,
            (c as f64 - 1.0) / 2.0,
        ),
        radii: (0.45 * h as f64, 0.45 * w as f64, 0.55 * c as f64),
    };

    // smooth background field
    let mut field: Vec<f32> = (0..h * w * c).map(|_| rng.gen::<f32>()).collect();
    separable_blur(&mut field, spec.shape, spec.smoothness);

    let mut clean = Volume::zeros(spec.shape);
    let mut in_tissue = vec![false; h * w * c];
    let mut fmin = f32::INFINITY;
    let mut fmax = f32::NEG_INFINITY;
    for hh in 0..h {
        for ww in 0..w {
            for cc in 0..c {
                if tissue.contains(hh as f64, ww as f64, cc as f64) {
                    let idx = clean.index(hh, ww, cc);
                    in_tissue[idx] = true;
                    fmin = fmin.min(field[idx]);
                    fmax = fmax.max(field[idx]);
                }
            }
        }
    }
    let span = if fmax > fmin { fmax - fmin } else { 1.0 };
    for idx in 0..h * w * c {
        if in_tissue[idx] {
            let t = (field[idx] - fmin) / span;
            clean.voxels_mut()[idx] = 0.35 + 0.45 * t;
        }
    }

    // lesions: bright ellipsoids fully inside the tissue mask, their
    // reference neighbourhoods kept disjoint
    let mut mask = Volume::zeros(spec.shape);
    let mut claimed = vec![false; h * w * c];
    for lesion_idx in 0..spec.n_lesions {
        let mut placed_ok = false;
        for _try in 0..PLACEMENT_TRIES {
            let ch = rng.gen_range((tissue.center.0 - tissue.radii.0)..=(tissue.center.0 + tissue.radii.0));
            let cw = rng.gen_range((tissue.center.1 - tissue.radii.1)..=(tissue.center.1 + tissue.radii.1));
            let cc = rng.gen_range((tissue.center.2 - tissue.radii.2)..=(tissue.center.2 + tissue.radii.2));
            let r = rng.gen_range(spec.lesion_radius.0..=spec.lesion_radius.1);
            let rc = r.min(tissue.radii.2 / 2.0).max(1.0);
            let lesion = Ellipsoid {
                center: (ch, cw, cc),
                radii: (r, r, rc),
            };

            let lesion_voxels: Vec<(usize, usize, usize)> =
                voxels_in(&lesion, spec.shape).collect();
            if lesion_voxels.is_empty() {
                continue;
            }
            let inside = lesion_voxels
                .iter()
                .all(|&(vh, vw, vc)| in_tissue[(vh * w + vw) * c + vc]);
            if !inside {
                continue;
            }
            let neighbourhood = dilate(&lesion_voxels, NEIGHBOURHOOD, spec.shape);
            if neighbourhood
                .iter()
                .any(|&(vh, vw, vc)| claimed[(vh * w + vw) * c + vc])
            {
                continue;
            }

            // reference level: the brightest background in the neighbourhood,
            // so the lesion exceeds every voxel of its shell by `contrast`
            let mut local_max = 0.0f32;
            for &(vh, vw, vc) in &neighbourhood {
                local_max = local_max.max(clean.get(vh, vw, vc));
            }
            let level = spec.lesion_contrast * local_max;
            for &(vh, vw, vc) in &lesion_voxels {
                clean.set(vh, vw, vc, level);
                mask.set(vh, vw, vc, 1.0);
            }
            for &(vh, vw, vc) in &neighbourhood {
                claimed[(vh * w + vw) * c + vc] = true;
            }
            placed_ok = true;
            break;
        }
        if !placed_ok {
            return Err(DataError::LesionPlacement {
                index: lesion_idx,
                tries: PLACEMENT_TRIES,
            });
        }
    }

    // normalise intensities to [0, 1]
    let max = clean.max();
    if max > 0.0 {
        for v in clean.voxels_mut() {
            *v /= max;
        }
    }
    Ok((clean, mask))
}

/// Integer voxel coordinates inside an ellipsoid, clipped to the volume.
fn voxels_in(
    e: &Ellipsoid,
    shape: (usize, usize, usize),
) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let lo = |x: f64| (x.floor().max(0.0)) as usize;
    let hi = |x: f64, n: usize| (x.ceil().min(n as f64 - 1.0)) as usize;
    let (h0, h1) = (lo(e.center.0 - e.radii.0), hi(e.center.0 + e.radii.0, shape.0));
    let (w0, w1) = (lo(e.center.1 - e.radii.1), hi(e.center.1 + e.radii.1, shape.1));
    let (c0, c1) = (lo(e.center.2 - e.radii.2), hi(e.center.2 + e.radii.2, shape.2));
    (h0..=h1).flat_map(move |vh| {
        (w0..=w1).flat_map(move |vw| {
            (c0..=c1).filter_map(move |vc| {
                if e.contains(vh as f64, vw as f64, vc as f64) {
                    Some((vh, vw, vc))
                } else {
                    None
                }
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec::desk_scale(42);
        let (a, ma) = generate_phantom(&spec).unwrap();
        let (b, mb) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = generate_phantom(&PhantomSpec::desk_scale(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_lesions_means_empty_mask() {
        let spec = PhantomSpec {
            n_lesions: 0,
            ..PhantomSpec::desk_scale(7)
        };
        let (_, mask) = generate_phantom(&spec).unwrap();
        assert!(mask.voxels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intensities_are_normalized_and_nonnegative() {
        let (clean, _) = generate_phantom(&PhantomSpec::desk_scale(1)).unwrap();
        assert!(clean.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((clean.max() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lesion_mask_lies_inside_tissue() {
        let (clean, mask) = generate_phantom(&PhantomSpec::desk_scale(5)).unwrap();
        assert!(mask.voxels().iter().any(|&v| v == 1.0));
        for (i, &m) in mask.voxels().iter().enumerate() {
            if m == 1.0 {
                assert!(clean.voxels()[i] > 0.0, "lesion voxel outside tissue");
            }
        }
    }

    #[test]
    fn lesions_exceed_shell_by_contrast_factor() {
        let spec = PhantomSpec {
            n_lesions: 1,
            ..PhantomSpec::desk_scale(11)
        };
        let (clean, mask) = generate_phantom(&spec).unwrap();
        let (h, w, c) = clean.shape();
        // shell: non-lesion voxels within 2 voxels of the mask
        let mut near = vec![false; h * w * c];
        for hh in 0..h {
            for ww in 0..w {
                for cc in 0..c {
                    if mask.get(hh, ww, cc) == 1.0 {
                        for dh in hh.saturating_sub(2)..=(hh + 2).min(h - 1) {
                            for dw in ww.saturating_sub(2)..=(ww + 2).min(w - 1) {
                                for dc in cc.saturating_sub(2)..=(cc + 2).min(c - 1) {
                                    near[(dh * w + dw) * c + dc] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut lesion_sum = 0.0f64;
        let mut lesion_n = 0usize;
        let mut shell_sum = 0.0f64;
        let mut shell_n = 0usize;
        for i in 0..h * w * c {
            if mask.voxels()[i] == 1.0 {
                lesion_sum += clean.voxels()[i] as f64;
                lesion_n += 1;
            } else if near[i] && clean.voxels()[i] > 0.0 {
                shell_sum += clean.voxels()[i] as f64;
                shell_n += 1;
            }
        }
        assert!(lesion_n > 0 && shell_n > 0);
        let mean_lesion = lesion_sum / lesion_n as f64;
        let mean_shell = shell_sum / shell_n as f64;
        assert!(
            mean_lesion + 1e-6 >= spec.lesion_contrast as f64 * mean_shell,
            "lesion {mean_lesion} vs contrast * shell {}",
            spec.lesion_contrast as f64 * mean_shell
        );
    }

    #[test]
    fn sub_voxel_or_inverted_radii_are_rejected() {
        let bad_min = PhantomSpec {
            lesion_radius: (0.5, 2.0),
            ..PhantomSpec::desk_scale(1)
        };
        assert!(matches!(
            generate_phantom(&bad_min),
            Err(DataError::InvalidSpec(_))
        ));
        let inverted = PhantomSpec {
            lesion_radius: (3.0, 2.0),
            ..PhantomSpec::desk_scale(1)
        };
        assert!(matches!(
            generate_phantom(&inverted),
            Err(DataError::InvalidSpec(_))
        ));
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let spec = PhantomSpec {
            shape: (12, 12, 2),
            n_lesions: 1,
            lesion_radius: (6.0, 6.0),
            ..PhantomSpec::desk_scale(3)
        };
        assert!(matches!(
            generate_phantom(&spec),
            Err(DataError::LesionPlacement { .. })
        ));
    }
}
