//! Bit-exact volume file format.
//!
//! Layout of a `.vol` file:
//!
//! ```text
//! bytes 0..4    magic "VOL1"
//! bytes 4..8    u32 little-endian header length N
//! bytes 8..8+N  UTF-8 JSON {"dtype":"f32","shape":[H,W,C],"order":"row-major-HWC"}
//! remainder     exactly 4*H*W*C bytes of little-endian f32
//! ```
//!
//! No padding, no trailing bytes; save -> load round trips are bit-exact.

use super::{DataError, Volume};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"VOL1";

#[derive(Serialize, Deserialize)]
struct VolHeader {
    dtype: String,
    shape: [usize; 3],
    order: String,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), DataError> {
    let (h, w, c) = volume.shape();
    let header = VolHeader {
        dtype: "f32".into(),
        shape: [h, w, c],
        order: "row-major-HWC".into(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut bytes = Vec::with_capacity(8 + header_bytes.len() + 4 * volume.voxels().len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for v in volume.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn load_volume(path: &Path) -> Result<Volume, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let pstr = || path.display().to_string();
    if bytes.len() < 8 {
        return Err(DataError::Truncated {
            path: pstr(),
            expected: 8,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(DataError::BadMagic {
            path: pstr(),
            expected: "VOL1",
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(DataError::Truncated {
            path: pstr(),
            expected: 8 + header_len,
            got: bytes.len(),
        });
    }
    let header: VolHeader =
        serde_json::from_slice(&bytes[8..8 + header_len]).map_err(|e| DataError::BadHeader {
            path: pstr(),
            reason: e.to_string(),
        })?;
    if header.dtype != "f32" || header.order != "row-major-HWC" {
        return Err(DataError::BadHeader {
            path: pstr(),
            reason: format!(
                "unsupported dtype {:?} / order {:?}",
                header.dtype, header.order
            ),
        });
    }
    let [h, w, c] = header.shape;
    let payload = &bytes[8 + header_len..];
    let expected = 4 * h * w * c;
    if payload.len() != expected {
        return Err(DataError::PayloadMismatch {
            path: pstr(),
            shape: (h, w, c),
            expected,
            got: payload.len(),
        });
    }
    let voxels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Volume::new((h, w, c), voxels)
}
