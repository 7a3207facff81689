//! Align-corners bilinear resize for learned positional-embedding grids.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resize a `[h, w, c]` grid to `[new_h, new_w, c]` with align-corners
/// bilinear interpolation: output corners sample input corners exactly, and
/// a same-size resize returns the input bit-identically.
pub fn bilinear_resize_grid(grid: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_resize_grid",
            detail: format!("expected [h, w, c], got {:?}", shape),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h < 2 || w < 2 || new_h < 2 || new_w < 2 {
        return Err(Error::InvalidArg {
            op: "bilinear_resize_grid",
            detail: format!("extents must be >= 2, got {h}x{w} -> {new_h}x{new_w}"),
        });
    }
    if new_h == h && new_w == w {
        return Ok(grid.clone());
    }

    let src = grid.data();
    let mut out = vec![0.0; new_h * new_w * c];
    let y_scale = (h - 1) as f64 / (new_h - 1) as f64;
    let x_scale = (w - 1) as f64 / (new_w - 1) as f64;

    for oy in 0..new_h {
        // Clamp: rounding in scale*index can land a hair past the last cell.
        let sy = (oy as f64 * y_scale).min((h - 1) as f64);
        let y0 = sy.floor() as usize;
        let ty = sy - y0 as f64;
        let y1 = if ty > 0.0 { y0 + 1 } else { y0 };
        for ox in 0..new_w {
            let sx = (ox as f64 * x_scale).min((w - 1) as f64);
            let x0 = sx.floor() as usize;
            let tx = sx - x0 as f64;
            let x1 = if tx > 0.0 { x0 + 1 } else { x0 };
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                // lerp as a + t*(b-a): exact at t=0 and on constant grids.
                let top = p(y0, x0) + tx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + tx * (p(y1, x1) - p(y1, x0));
                out[(oy * new_w + ox) * c + ch] = top + ty * (bot - top);
            }
        }
    }
    Tensor::from_vec(vec![new_h, new_w, c], out)
}

// ── Tests ───────────────────────────────────────────────────────────────────
