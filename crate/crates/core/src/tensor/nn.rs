//! Attention, feed-forward, normalization, and loss, composed from graph
//! primitives. These are the validated entry points: shape or argument
//! problems come back as errors rather than panics.

use super::graph::{Graph, NodeId};
use super::Scalar;
use crate::error::{Error, Result};

/// How a loss aggregates over positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// `softmax(Q K^T / sqrt(d_k)) V` with optional binary visibility mask.
///
/// `mask` is row-major n×m with `1` where attention is allowed; masked
/// positions receive exactly zero weight (the additive penalty underflows in
/// the softmax). A row with no visible position is rejected.
pub fn scaled_dot_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&[u8]>,
) -> Result<NodeId> {
    let (n, dk) = g.shape(q);
    let (m, dk2) = g.shape(k);
    let (m2, _dv) = g.shape(v);
    if dk != dk2 {
        return Err(Error::invalid(format!(
            "attention: query dim {dk} vs key dim {dk2}"
        )));
    }
    if m != m2 {
        return Err(Error::invalid(format!(
            "attention: {m} keys vs {m2} values"
        )));
    }
    if let Some(bits) = mask {
        if bits.len() != n * m {
            return Err(Error::invalid(format!(
                "attention: mask has {} entries, expected {n}x{m}",
                bits.len()
            )));
        }
        for (i, row) in bits.chunks(m).enumerate() {
            if !row.contains(&1) {
                return Err(Error::invalid(format!(
                    "attention: mask row {i} hides every position"
                )));
            }
        }
    }

    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, F::from_f64(1.0 / (dk as f64).sqrt()));
    let masked = match mask {
        Some(bits) => {
            let penalty: Vec<F> = bits
                .iter()
                .map(|&b| if b == 1 { F::zero() } else { F::mask_penalty() })
                .collect();
            let bias = g.constant(n, m, penalty);
            g.add(scaled, bias)
        }
        None => scaled,
    };
    let weights = g.softmax_rows(masked);
    Ok(g.matmul(weights, v))
}

/// Per-layer attention weights: combined head projections plus the output
/// projection, all `d_model x d_model`.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub heads: usize,
}

/// Multi-head attention: project, attend per head, concatenate, project.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    mask: Option<&[u8]>,
    w: &MhaWeights,
) -> Result<NodeId> {
    let (_, d_model) = g.shape(q_in);
    if w.heads == 0 || d_model % w.heads != 0 {
        return Err(Error::invalid(format!(
            "multi_head_attention: {} heads do not divide d_model {d_model}",
            w.heads
        )));
    }
    for (name, id) in [("wq", w.wq), ("wk", w.wk), ("wv", w.wv), ("wo", w.wo)] {
        if g.shape(id) != (d_model, d_model) {
            return Err(Error::invalid(format!(
                "multi_head_attention: {name} must be {d_model}x{d_model}, got {:?}",
                g.shape(id)
            )));
        }
    }
    if g.shape(k_in).1 != d_model || g.shape(v_in).1 != d_model {
        return Err(Error::invalid(
            "multi_head_attention: key/value width differs from query".to_string(),
        ));
    }

    let dk = d_model / w.heads;
    let q = g.matmul(q_in, w.wq);
    let k = g.matmul(k_in, w.wk);
    let v = g.matmul(v_in, w.wv);
    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        heads.push(scaled_dot_attention(g, qh, kh, vh, mask)?);
    }
    let concat = g.concat_cols(&heads);
    Ok(g.matmul(concat, w.wo))
}

/// Position-wise feed-forward: `max(0, x W1 + b1) W2 + b2`.
pub fn ffn<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let (_, d_model) = g.shape(x);
    let (d1, d_ff) = g.shape(w1);
    let (d2, d_out) = g.shape(w2);
    if d1 != d_model || d2 != d_ff || d_out != d_model {
        return Err(Error::invalid(format!(
            "ffn: weight shapes {:?}/{:?} incompatible with d_model {d_model}",
            g.shape(w1),
            g.shape(w2)
        )));
    }
    if g.shape(b1) != (1, d_ff) || g.shape(b2) != (1, d_model) {
        return Err(Error::invalid("ffn: bias shape mismatch".to_string()));
    }
    let h = g.matmul(x, w1);
    let hb = g.add_row_bias(h, b1);
    let act = g.relu(hb);
    let out = g.matmul(act, w2);
    Ok(g.add_row_bias(out, b2))
}

/// Row-wise layer normalization with learned gain and bias.
pub fn layer_norm<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    eps: F,
) -> Result<NodeId> {
    let (_, c) = g.shape(x);
    if g.shape(gain) != (1, c) || g.shape(bias) != (1, c) {
        return Err(Error::invalid(format!(
            "layer_norm: gain/bias must be 1x{c}"
        )));
    }
    Ok(g.layer_norm(x, gain, bias, eps))
}

/// Cross entropy of `logits` against the label-smoothed distribution that
/// puts `1 - smooth_mass` on the target and `smooth_mass / (V-1)` elsewhere.
/// Rows whose target is `pad` contribute zero and do not count in the mean.
pub fn label_smoothed_cross_entropy<F: Scalar>(
    g: &mut Graph<F>,
    logits: NodeId,
    targets: &[u32],
    smooth_mass: f32,
    pad: Option<u32>,
    reduction: Reduction,
) -> Result<NodeId> {
    let (rows, vocab) = g.shape(logits);
    if targets.len() != rows {
        return Err(Error::invalid(format!(
            "cross entropy: {} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&smooth_mass) {
        return Err(Error::invalid(format!(
            "cross entropy: smoothing mass {smooth_mass} outside [0, 1)"
        )));
    }
    for &y in targets {
        if (y as usize) >= vocab && pad != Some(y) {
            return Err(Error::invalid(format!(
                "cross entropy: target {y} outside vocabulary of {vocab}"
            )));
        }
    }
    Ok(g.cross_entropy(
        logits,
        targets,
        F::from_f32(smooth_mass),
        pad,
        reduction == Reduction::Mean,
    ))
}
