//! Near-duplicate image removal: a 64-bit mean-threshold hash over an 8×8
//! grayscale reduction, compared by Hamming distance against the eval-set
//! hashes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GRID: usize = 8;

/// 64-bit perceptual hash: average the image to grayscale, pool into an 8×8
/// grid, and emit one bit per cell (1 = at or above the grid mean). Bit i
/// (from the most significant end) is cell (i/8, i%8).
pub fn ahash64(image: &Tensor) -> Result<u64> {
    let dims = image.shape();
    if dims.len() != 3 || dims[2] != 3 {
        return Err(Error::InvalidArg {
            op: "ahash64",
            detail: format!("expected [h,w,3], got {dims:?}"),
        });
    }
    let (h, w) = (dims[0], dims[1]);
    if h < GRID || w < GRID {
        return Err(Error::InvalidArg {
            op: "ahash64",
            detail: format!("image {h}x{w} smaller than the {GRID}x{GRID} hash grid"),
        });
    }
    let data = image.data();
    let mut cells = [0.0f64; GRID * GRID];
    for gy in 0..GRID {
        let y0 = gy * h / GRID;
        let y1 = (gy + 1) * h / GRID;
        for gx in 0..GRID {
            let x0 = gx * w / GRID;
            let x1 = (gx + 1) * w / GRID;
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let base = (y * w + x) * 3;
                    sum += (data[base] + data[base + 1] + data[base + 2]) / 3.0;
                }
            }
            cells[gy * GRID + gx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let mut hash = 0u64;
    for &c in &cells {
        hash <<= 1;
        if c >= mean {
            hash |= 1;
        }
    }
    Ok(hash)
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Indices of corpus records whose hash is farther than `threshold` from
/// every eval hash, in input order.
pub fn keep_non_duplicates(corpus: &[u64], eval: &[u64], threshold: u32) -> Vec<usize> {
    corpus
        .iter()
        .enumerate()
        .filter(|&(_, &h)| eval.iter().all(|&e| hamming(h, e) > threshold))
        .map(|(i, _)| i)
        .collect()
}

pub const DEDUP_THRESHOLD: u32 = 4;

// ── Tests ───────────────────────────────────────────────────────────────────
