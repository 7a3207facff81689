//! Vision tower: patchify, patch projection plus a learned 2-D positional
//! grid, pre-norm transformer blocks, final layer norm. No pooling and no
//! class token — every patch comes out as one visual token.

use crate::error::{Error, Result};
use crate::resize::bilinear_resize_grid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::ViTConfig;
use super::layers::{dropout, ln_affine, linear, mlp, multi_head_attention, DropCtx, ModelVars};
use super::params::ParamSet;

/// Cut an `[r, r, 3]` image into non-overlapping `p x p` patches, flattened
/// row-major: patch order scans the grid left-to-right, top-to-bottom, and
/// within a patch pixels keep (y, x, channel) order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            detail: format!("expected square [r, r, 3] image, got {shape:?}"),
        });
    }
    let r = shape[0];
    if patch == 0 || r % patch != 0 {
        return Err(Error::InvalidArg {
            op: "patchify",
            detail: format!("resolution {r} not divisible by patch size {patch}"),
        });
    }
    let g = r / patch;
    let src = image.data();
    let mut out = Vec::with_capacity(g * g * patch * patch * 3);
    for py in 0..g {
        for px in 0..g {
            for dy in 0..patch {
                let y = py * patch + dy;
                let x0 = px * patch;
                let row = &src[(y * r + x0) * 3..(y * r + x0 + patch) * 3];
                out.extend_from_slice(row);
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![g * g, patch * patch * 3], out))
}

/// Full tower forward: `[r, r, 3]` image to `[num_patches, width]` visual
/// tokens. The positional grid bound in `vars` must match the image's patch
/// grid — resize it first when changing resolution.
pub fn vit_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    trace: &mut Vec<(String, Var)>,
    cfg: &ViTConfig,
    image: &Tensor,
    drop: &mut Option<DropCtx>,
) -> Result<Var> {
    let r = image.shape().first().copied().unwrap_or(0);
    let patches = patchify(image, cfg.patch_size)?;
    let n = patches.shape()[0];
    let g = r / cfg.patch_size;

    let pos = vars.get("vit.pos")?;
    let pos_shape = tape.value(pos).shape().to_vec();
    if pos_shape != [g, g, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "vit_forward",
            detail: format!(
                "positional grid {pos_shape:?} does not cover a {g}x{g} patch grid; resize it first"
            ),
        });
    }

    let patches = tape.leaf(patches);
    let mut x = linear(tape, vars, "vit.patch_proj.w", Some("vit.patch_proj.b"), patches)?;
    let pos_flat = tape.reshape(pos, vec![n, cfg.width])?;
    x = tape.add(x, pos_flat)?;

    for i in 0..cfg.depth {
        let pre = format!("vit.block{i}");
        let h = ln_affine(tape, vars, &format!("{pre}.ln1"), x)?;
        let a = multi_head_attention(tape, vars, trace, &format!("{pre}.attn"), cfg.heads, h, h, None)?;
        let a = dropout(tape, a, drop)?;
        x = tape.add(x, a)?;
        let h = ln_affine(tape, vars, &format!("{pre}.ln2"), x)?;
        let m = mlp(tape, vars, &format!("{pre}.mlp"), h)?;
        let m = dropout(tape, m, drop)?;
        x = tape.add(x, m)?;
    }
    ln_affine(tape, vars, "vit.ln_f", x)
}

/// Adapt a parameter set to a new input resolution by bilinear-resizing the
/// positional grid. Every other parameter is carried over bit-identically;
/// returns the updated set plus the config at the new resolution.
pub fn resize_positional_embeddings(
    params: &ParamSet,
    cfg: &ViTConfig,
    new_resolution: usize,
) -> Result<(ParamSet, ViTConfig)> {
    if new_resolution == 0 || new_resolution % cfg.patch_size != 0 {
        return Err(Error::InvalidArg {
            op: "resize_positional_embeddings",
            detail: format!(
                "resolution {new_resolution} not divisible by patch size {}",
                cfg.patch_size
            ),
        });
    }
    let new_g = new_resolution / cfg.patch_size;
    let pos = &params
        .get("vit.pos")
        .ok_or_else(|| Error::InvalidArg {
            op: "resize_positional_embeddings",
            detail: "no vit.pos parameter".into(),
        })?
        .value;
    let resized = bilinear_resize_grid(pos, new_g, new_g)?;
    let mut out = params.clone();
    out.replace("vit.pos", resized)?;
    let mut new_cfg = cfg.clone();
    new_cfg.resolution = new_resolution;
    Ok((out, new_cfg))
}

// ── Tests ───────────────────────────────────────────────────────────────────
