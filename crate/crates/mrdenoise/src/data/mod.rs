//! Volumes, synthetic phantoms, bit-exact file I/O, and dataset management.

mod dataset;
mod io;
mod phantom;

pub use dataset::{build_patch_dataset, epoch_permutation, DatasetSplit, PatchPairs};
pub use io::{load_volume, save_volume};
pub use phantom::{generate_phantom, PhantomSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },
    #[error("truncated file {path}: expected {expected} bytes, got {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("header/payload mismatch in {path}: shape {shape:?} needs {expected} payload bytes, got {got}")]
    PayloadMismatch {
        path: String,
        shape: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("malformed header in {path}: {reason}")]
    BadHeader { path: String, reason: String },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("could not place lesion {index} inside the tissue mask after {tries} tries")]
    LesionPlacement { index: usize, tries: usize },
    #[error("volume pair shape mismatch: {a:?} vs {b:?}")]
    PairShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("dataset split is not disjoint: {id:?} appears twice")]
    SplitOverlap { id: String },
}

/// A 3D array of voxel intensities, shape (H, W, C), row-major with H
/// outermost and C fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: (usize, usize, usize),
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self, DataError> {
        let (h, w, c) = shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(DataError::InvalidVolume(format!(
                "all dimensions must be >= 1, got {shape:?}"
            )));
        }
        if voxels.len() != h * w * c {
            return Err(DataError::InvalidVolume(format!(
                "shape {shape:?} needs {} voxels, got {}",
                h * w * c,
                voxels.len()
            )));
        }
        Ok(Volume { shape, voxels })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Volume {
            shape,
            voxels: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.shape.1 + w) * self.shape.2 + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.voxels[self.index(h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f32) {
        let i = self.index(h, w, c);
        self.voxels[i] = v;
    }

    pub fn max(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// One in-plane H x W slice at channel `c`.
    pub fn slice(&self, c: usize) -> Vec<f32> {
        let (h, w, cc) = self.shape;
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                out.push(self.voxels[(i * w + j) * cc + c]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_rejects_bad_shapes() {
        assert!(Volume::new((0, 2, 2), vec![]).is_err());
        assert!(Volume::new((2, 2, 2), vec![0.0; 7]).is_err());
    }

    #[test]
    fn indexing_is_row_major_hwc() {
        let mut v = Volume::zeros((2, 3, 4));
        v.set(1, 2, 3, 9.0);
        assert_eq!(v.voxels()[(1 * 3 + 2) * 4 + 3], 9.0);
        assert_eq!(v.get(1, 2, 3), 9.0);
    }
}
