//! Train/val/test split management and paired patch datasets.

use super::{DataError, Volume};
use crate::model::patch::patchify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Volume identifiers per split. Splits are by whole volume, never by patch.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// First `n_train` ids go to train, the next `n_val` to val, the next
    /// `n_test` to test.
    pub fn by_counts(
        ids: &[String],
        n_train: usize,
        n_val: usize,
        n_test: usize,
    ) -> Result<Self, DataError> {
        if ids.len() < n_train + n_val + n_test {
            return Err(DataError::InvalidSpec(format!(
                "need {} volumes for a {}/{}/{} split, got {}",
                n_train + n_val + n_test,
                n_train,
                n_val,
                n_test,
                ids.len()
            )));
        }
        let split = DatasetSplit {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..n_train + n_val + n_test].to_vec(),
        };
        split.validate()?;
        Ok(split)
    }

    /// Checks pairwise disjointness.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(DataError::SplitOverlap { id: id.clone() });
            }
        }
        Ok(())
    }
}

/// Paired (noisy, clean) patches, flattened K x d row-major.
#[derive(Debug, Clone)]
pub struct PatchPairs {
    pub dim: usize,
    pub len: usize,
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
}

impl PatchPairs {
    pub fn noisy_patch(&self, i: usize) -> &[f32] {
        &self.noisy[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clean_patch(&self, i: usize) -> &[f32] {
        &self.clean[i * self.dim..(i + 1) * self.dim]
    }
}

/// Extracts aligned patch pairs from (noisy, clean) volume pairs. Patches of
/// a pair share origins, and patches never cross volumes.
pub fn build_patch_dataset(
    pairs: &[(Volume, Volume)],
    p: usize,
    stride: usize,
) -> Result<PatchPairs, DataError> {
    let mut noisy = Vec::new();
    let mut clean = Vec::new();
    let mut len = 0;
    let mut dim = 0;
    for (vn, vc) in pairs {
        if vn.shape() != vc.shape() {
            return Err(DataError::PairShapeMismatch {
                a: vn.shape(),
                b: vc.shape(),
            });
        }
        let pn = patchify(vn, p, stride).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let pc = patchify(vc, p, stride).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        debug_assert_eq!(pn.origins, pc.origins);
        dim = pn.dim();
        len += pn.k();
        noisy.extend_from_slice(&pn.values);
        clean.extend_from_slice(&pc.values);
    }
    Ok(PatchPairs {
        dim,
        len,
        noisy,
        clean,
    })
}

/// Deterministic Fisher-Yates permutation of `0..len` for one epoch.
pub fn epoch_permutation(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    // derive a per-epoch stream so resume-at-epoch-k replays identically
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut perm: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}
