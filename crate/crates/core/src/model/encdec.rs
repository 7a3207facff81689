//! Multimodal encoder-decoder. The encoder runs full bidirectional attention
//! over [projected visual tokens; embedded text tokens]; the decoder is
//! causal over the target and reaches the encoder output through
//! cross-attention. Text positions use T5-style bucketed relative biases
//! (one table for the encoder, one for the decoder, shared across layers,
//! per-head); the visual side's geometry comes from the tower's 2-D grid.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::config::{ModelConfig, EOS_ID, PAD_ID};
use super::layers::{
    dropout, ln_affine, linear, mlp, multi_head_attention, DropCtx, ModelVars, MASK,
};

/// T5 relative-position bucket for `relative_position = key_pos - query_pos`.
/// Bidirectional splits the buckets between past and future; unidirectional
/// only distinguishes lookback. Half of each side's buckets cover small exact
/// offsets, the rest are log-spaced out to `max_distance`.
pub fn rel_bucket(
    relative_position: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut ret = 0usize;
    let mut nb = num_buckets;
    let mut n = -relative_position;
    if bidirectional {
        nb /= 2;
        if n < 0 {
            ret += nb;
            n = -n;
        }
    } else {
        n = n.max(0);
    }
    let n = n as usize;
    let max_exact = nb / 2;
    if n < max_exact {
        ret + n
    } else {
        let log_ratio = ((n as f64 / max_exact as f64).ln()
            / (max_distance as f64 / max_exact as f64).ln())
            * (nb - max_exact) as f64;
        ret + (max_exact + log_ratio as usize).min(nb - 1)
    }
}

/// Bucket ids for a `[tq, tk]` attention pattern, row-major.
fn bucket_matrix(tq: usize, tk: usize, bidirectional: bool, nb: usize, maxd: usize) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for j in 0..tk {
            ids.push(rel_bucket(j as i64 - i as i64, bidirectional, nb, maxd));
        }
    }
    ids
}

/// Per-head additive bias tensors `[tq, tk]` from a `[buckets, heads]` table,
/// plus an optional shared mask folded in.
fn head_biases(
    tape: &mut Tape,
    table: Var,
    bucket_ids: &[usize],
    tq: usize,
    tk: usize,
    heads: usize,
    extra_mask: Option<Var>,
) -> Result<Vec<Var>> {
    let gathered = tape.embed(table, bucket_ids)?; // [tq*tk, heads]
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let col = tape.slice(gathered, 1, h, 1)?;
        let bias = tape.reshape(col, vec![tq, tk])?;
        let bias = match extra_mask {
            Some(m) => tape.add(bias, m)?,
            None => bias,
        };
        out.push(bias);
    }
    Ok(out)
}

/// Encoder output plus the key-padding layout the decoder needs.
pub struct Encoded {
    pub states: Var,
    /// Per-position "this key is padding" flags over the combined sequence.
    pub key_pad: Vec<bool>,
    pub visual_len: usize,
    pub text_len: usize,
}

fn check_text(ids: &[u32], cfg: &ModelConfig, op: &'static str) -> Result<()> {
    if ids.len() > cfg.encdec.max_text_len {
        return Err(Error::InvalidArg {
            op,
            detail: format!("{} tokens exceed max_text_len {}", ids.len(), cfg.encdec.max_text_len),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= cfg.encdec.vocab_size) {
        return Err(Error::InvalidArg {
            op,
            detail: format!("token {bad} out of range for vocab {}", cfg.encdec.vocab_size),
        });
    }
    Ok(())
}

/// Joint encoding of visual tokens (`[n, width]`, straight from the tower)
/// and prompt text. Text may be empty; padding text positions are masked out
/// of everyone's attention.
pub fn encode_multimodal(
    tape: &mut Tape,
    vars: &ModelVars,
    trace: &mut Vec<(String, Var)>,
    cfg: &ModelConfig,
    visual: Var,
    text_ids: &[u32],
    drop: &mut Option<DropCtx>,
) -> Result<Encoded> {
    check_text(text_ids, cfg, "encode_multimodal")?;
    let e = &cfg.encdec;
    let n = tape.value(visual).shape()[0];
    let t = text_ids.len();
    let s = n + t;

    let vis = linear(tape, vars, "proj.w", Some("proj.b"), visual)?;
    let mut x = if t > 0 {
        let ids: Vec<usize> = text_ids.iter().map(|&v| v as usize).collect();
        let table = vars.get("encdec.embed")?;
        let emb = tape.embed(table, &ids)?;
        tape.concat(&[vis, emb], 0)?
    } else {
        vis
    };

    let key_pad: Vec<bool> = (0..s)
        .map(|p| p >= n && text_ids[p - n] == PAD_ID)
        .collect();
    let pad_mask = if key_pad.iter().any(|&b| b) {
        let mut m = vec![0.0; s * s];
        for (j, &is_pad) in key_pad.iter().enumerate() {
            if is_pad {
                for i in 0..s {
                    m[i * s + j] = MASK;
                }
            }
        }
        Some(tape.leaf(Tensor::from_vec_unchecked(vec![s, s], m)))
    } else {
        None
    };

    let table = vars.get("encdec.enc.relbias")?;
    let buckets = bucket_matrix(s, s, true, e.rel_buckets, e.rel_max_distance);
    let biases = head_biases(tape, table, &buckets, s, s, e.heads, pad_mask)?;

    for i in 0..e.enc_layers {
        let pre = format!("encdec.enc.block{i}");
        let h = ln_affine(tape, vars, &format!("{pre}.ln1"), x)?;
        let a = multi_head_attention(
            tape,
            vars,
            trace,
            &format!("{pre}.attn"),
            e.heads,
            h,
            h,
            Some(&biases),
        )?;
        let a = dropout(tape, a, drop)?;
        x = tape.add(x, a)?;
        let h = ln_affine(tape, vars, &format!("{pre}.ln2"), x)?;
        let m = mlp(tape, vars, &format!("{pre}.mlp"), h)?;
        let m = dropout(tape, m, drop)?;
        x = tape.add(x, m)?;
    }
    let states = ln_affine(tape, vars, "encdec.enc.ln_f", x)?;
    Ok(Encoded { states, key_pad, visual_len: n, text_len: t })
}

/// Decoder stack on already-shifted inputs; returns logits `[t, vocab]`.
/// Row `i` conditions on `dec_inputs[..=i]` and the encoder output only.
pub fn decoder_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    trace: &mut Vec<(String, Var)>,
    cfg: &ModelConfig,
    enc: &Encoded,
    dec_inputs: &[u32],
    drop: &mut Option<DropCtx>,
) -> Result<Var> {
    check_text(dec_inputs, cfg, "decoder_forward")?;
    if dec_inputs.is_empty() {
        return Err(Error::InvalidArg {
            op: "decoder_forward",
            detail: "empty decoder input".into(),
        });
    }
    let e = &cfg.encdec;
    let t = dec_inputs.len();
    let s = enc.key_pad.len();

    let ids: Vec<usize> = dec_inputs.iter().map(|&v| v as usize).collect();
    let table = vars.get("encdec.embed")?;
    let mut x = tape.embed(table, &ids)?;

    // Causal mask folded into the self-attention relative bias.
    let mut causal = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            causal[i * t + j] = MASK;
        }
    }
    let causal = tape.leaf(Tensor::from_vec_unchecked(vec![t, t], causal));
    let rel_table = vars.get("encdec.dec.relbias")?;
    let buckets = bucket_matrix(t, t, false, e.rel_buckets, e.rel_max_distance);
    let self_biases = head_biases(tape, rel_table, &buckets, t, t, e.heads, Some(causal))?;

    // Cross-attention mask: hide encoder padding keys. No position bias.
    let cross_mask = if enc.key_pad.iter().any(|&b| b) {
        let mut m = vec![0.0; t * s];
        for (j, &is_pad) in enc.key_pad.iter().enumerate() {
            if is_pad {
                for i in 0..t {
                    m[i * s + j] = MASK;
                }
            }
        }
        Some(tape.leaf(Tensor::from_vec_unchecked(vec![t, s], m)))
    } else {
        None
    };
    let cross_biases: Option<Vec<Var>> = cross_mask.map(|m| vec![m; e.heads]);

    for i in 0..e.dec_layers {
        let pre = format!("encdec.dec.block{i}");
        let h = ln_affine(tape, vars, &format!("{pre}.ln1"), x)?;
        let a = multi_head_attention(
            tape,
            vars,
            trace,
            &format!("{pre}.attn"),
            e.heads,
            h,
            h,
            Some(&self_biases),
        )?;
        let a = dropout(tape, a, drop)?;
        x = tape.add(x, a)?;

        let h = ln_affine(tape, vars, &format!("{pre}.ln2"), x)?;
        let c = multi_head_attention(
            tape,
            vars,
            trace,
            &format!("{pre}.cross"),
            e.heads,
            h,
            enc.states,
            cross_biases.as_deref(),
        )?;
        let c = dropout(tape, c, drop)?;
        x = tape.add(x, c)?;

        let h = ln_affine(tape, vars, &format!("{pre}.ln3"), x)?;
        let m = mlp(tape, vars, &format!("{pre}.mlp"), h)?;
        let m = dropout(tape, m, drop)?;
        x = tape.add(x, m)?;
    }
    let x = ln_affine(tape, vars, "encdec.dec.ln_f", x)?;
    linear(tape, vars, "encdec.out.w", None, x)
}

/// Teacher-forced logits for a target that must end with EOS. Inputs are the
/// target shifted right behind a PAD start token.
pub fn decode_teacher_forced(
    tape: &mut Tape,
    vars: &ModelVars,
    trace: &mut Vec<(String, Var)>,
    cfg: &ModelConfig,
    enc: &Encoded,
    targets: &[u32],
    drop: &mut Option<DropCtx>,
) -> Result<Var> {
    if targets.last() != Some(&EOS_ID) {
        return Err(Error::InvalidArg {
            op: "decode_teacher_forced",
            detail: "target must be non-empty and end with EOS".into(),
        });
    }
    let mut inputs = Vec::with_capacity(targets.len());
    inputs.push(PAD_ID);
    inputs.extend_from_slice(&targets[..targets.len() - 1]);
    decoder_forward(tape, vars, trace, cfg, enc, &inputs, drop)
}

// ── Tests ───────────────────────────────────────────────────────────────────
