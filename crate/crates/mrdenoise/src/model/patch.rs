//! Overlapping patch extraction and volume reassembly.
//!
//! Volumes are cut into P x P x C blocks on a regular stride grid; each block
//! is flattened row-major (in-plane row, in-plane column, slice). Reassembly
//! averages overlapping predictions voxel-wise.

use super::ModelError;
use crate::data::Volume;

/// Flattened patches with enough bookkeeping to reassemble a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// Patch side length in voxels.
    pub p: usize,
    /// Shape (H, W, C) of the source volume.
    pub source_shape: (usize, usize, usize),
    /// Top-left (row, col) origin of each patch, row-major over the grid.
    pub origins: Vec<(usize, usize)>,
    /// K x (P*P*C) values, one flattened patch per row.
    pub values: Vec<f32>,
}

impl PatchSet {
    pub fn k(&self) -> usize {
        self.origins.len()
    }

    /// Flattened length of one patch.
    pub fn dim(&self) -> usize {
        self.p * self.p * self.source_shape.2
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    /// Same geometry, new patch values (e.g. model predictions).
    pub fn with_values(&self, values: Vec<f32>) -> Result<PatchSet, ModelError> {
        if values.len() != self.values.len() {
            return Err(ModelError::PatchValues {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        Ok(PatchSet {
            p: self.p,
            source_shape: self.source_shape,
            origins: self.origins.clone(),
            values,
        })
    }
}

/// Grid start positions: `{0, stride, 2*stride, ...}` while `start + p <= dim`.
pub fn grid_starts(dim: usize, p: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + p <= dim {
        starts.push(s);
        s += stride;
    }
    starts
}

/// Cuts `volume` into overlapping P x P x C patches on a stride grid.
pub fn patchify(volume: &Volume, p: usize, stride: usize) -> Result<PatchSet, ModelError> {
    let (h, w, c) = volume.shape();
    if stride == 0 {
        return Err(ModelError::InvalidConfig("stride must be >= 1".into()));
    }
    if h < p || w < p {
        return Err(ModelError::VolumeTooSmall {
            shape: (h, w, c),
            p,
        });
    }
    let rows = grid_starts(h, p, stride);
    let cols = grid_starts(w, p, stride);
    let d = p * p * c;
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    let mut values = Vec::with_capacity(rows.len() * cols.len() * d);
    let vox = volume.voxels();
    for &r in &rows {
        for &col in &cols {
            origins.push((r, col));
            for i in 0..p {
                for j in 0..p {
                    let base = ((r + i) * w + (col + j)) * c;
                    values.extend_from_slice(&vox[base..base + c]);
                }
            }
        }
    }
    Ok(PatchSet {
        p,
        source_shape: (h, w, c),
        origins,
        values,
    })
}

/// Averages overlapping patches back into a volume. Every voxel must be
/// covered by at least one patch.
pub fn assemble(patches: &PatchSet) -> Result<Volume, ModelError> {
    let (h, w, c) = patches.source_shape;
    let p = patches.p;
    let mut sums = vec![0.0f32; h * w * c];
    let mut counts = vec![0u32; h * w * c];
    for (k, &(r, col)) in patches.origins.iter().enumerate() {
        let patch = patches.patch(k);
        for i in 0..p {
            for j in 0..p {
                let base = ((r + i) * w + (col + j)) * c;
                let pbase = (i * p + j) * c;
                for ci in 0..c {
                    sums[base + ci] += patch[pbase + ci];
                    counts[base + ci] += 1;
                }
            }
        }
    }
    if let Some(idx) = counts.iter().position(|&n| n == 0) {
        let (hh, rest) = (idx / (w * c), idx % (w * c));
        return Err(ModelError::UncoveredVoxel {
            h: hh,
            w: rest / c,
            c: rest % c,
        });
    }
    for (s, &n) in sums.iter_mut().zip(counts.iter()) {
        *s /= n as f32;
    }
    Volume::new((h, w, c), sums).map_err(|e| ModelError::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_of(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f32) -> Volume {
        Volume::new((h, w, c), (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn patch_count_matches_grid_arithmetic() {
        // 176x256x6 with P=16, stride 10: 17 * 25 = 425 patches
        let v = volume_of(176, 256, 6, |_| 0.0);
        let ps = patchify(&v, 16, 10).unwrap();
        assert_eq!(ps.k(), 425);
    }

    #[test]
    fn single_patch_volume() {
        let v = volume_of(16, 16, 6, |i| i as f32);
        let ps = patchify(&v, 16, 10).unwrap();
        assert_eq!(ps.k(), 1);
        assert_eq!(ps.origins, vec![(0, 0)]);
        assert_eq!(ps.patch(0), v.voxels());
    }

    #[test]
    fn grid_26_is_a_2x2_grid() {
        let v = volume_of(26, 26, 6, |_| 0.0);
        let ps = patchify(&v, 16, 10).unwrap();
        assert_eq!(ps.origins, vec![(0, 0), (0, 10), (10, 0), (10, 10)]);
    }

    #[test]
    fn zero_stride_is_rejected() {
        let v = volume_of(16, 16, 2, |_| 0.0);
        assert!(matches!(
            patchify(&v, 8, 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn volume_smaller_than_patch_is_an_error() {
        let v = volume_of(10, 26, 6, |_| 0.0);
        assert!(matches!(
            patchify(&v, 16, 10),
            Err(ModelError::VolumeTooSmall { .. })
        ));
    }

    #[test]
    fn patch_values_match_direct_indexing() {
        let v = volume_of(26, 26, 2, |i| (i % 97) as f32);
        let ps = patchify(&v, 16, 10).unwrap();
        let (_, w, c) = v.shape();
        for (k, &(r, col)) in ps.origins.iter().enumerate() {
            let patch = ps.patch(k);
            for i in 0..16 {
                for j in 0..16 {
                    for ci in 0..c {
                        assert_eq!(
                            patch[(i * 16 + j) * c + ci],
                            v.voxels()[((r + i) * w + (col + j)) * c + ci]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn assemble_single_patch_is_identity() {
        let v = volume_of(8, 8, 3, |i| (i as f32).sin().abs());
        let ps = patchify(&v, 8, 8).unwrap();
        let out = assemble(&ps).unwrap();
        assert_eq!(out.voxels(), v.voxels());
    }

    #[test]
    fn assemble_averages_overlap() {
        // two 2x2 patches on a 2x3 volume overlapping in the middle column
        let ps = PatchSet {
            p: 2,
            source_shape: (2, 3, 1),
            origins: vec![(0, 0), (0, 1)],
            values: vec![0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0],
        };
        let out = assemble(&ps).unwrap();
        assert_eq!(out.voxels(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn uncovered_voxel_is_an_error() {
        let ps = PatchSet {
            p: 2,
            source_shape: (2, 3, 1),
            origins: vec![(0, 0)],
            values: vec![1.0; 4],
        };
        assert!(matches!(
            assemble(&ps),
            Err(ModelError::UncoveredVoxel { h: 0, w: 2, c: 0 })
        ));
    }

    #[test]
    fn patchify_assemble_round_trip() {
        // strides that tile the volume exactly guarantee coverage
        for (h, w, stride) in [(16, 16, 4), (20, 12, 4), (13, 9, 1), (24, 24, 8)] {
            let v = volume_of(h, w, 3, |i| ((i * 31 % 113) as f32) / 113.0);
            let ps = patchify(&v, 8, stride).unwrap();
            let out = assemble(&ps).unwrap();
            for (a, b) in out.voxels().iter().zip(v.voxels()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
