//! The guided-attention block.
//!
//! Cross-attention where queries come from a guidance token stream and
//! keys/values from the input stream. Each head is bound to one
//! geospatial category: a two-layer score network reads that category's
//! mean-pooled raw variables and emits a sigmoid gate that scales the
//! head's output after the attention-weighted value product, before
//! concatenation and the output projection. Gates therefore depend only
//! on geospatial information, and head `i` depends on category `i` alone.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Layer-norm epsilon used throughout the encoder blocks.
pub const LN_EPS: f64 = 1e-5;

/// Raw geospatial variables are percentages in [0, 100]; the score
/// networks consume them scaled to [0, 1] so their sigmoids start in the
/// responsive range.
pub const SCORE_INPUT_SCALE: f64 = 1e-2;

/// Affine map registered on a tape: `(weight, bias)`.
#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: TensorId,
    pub b: TensorId,
}

/// Per-head query/key/value projections, all `[d_model -> d_head]` affine.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub query: AffineIds,
    pub key: AffineIds,
    pub value: AffineIds,
}

/// Two affine layers with GELU between: `[n_vars -> hidden -> 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreNetIds {
    pub layer1: AffineIds,
    pub layer2: AffineIds,
}

/// Tape-registered parameters of one guided-attention module.
///
/// `heads.len() == score.len()`: head `i` is permanently bound to
/// category `i`, and the per-head widths sum to the model width.
#[derive(Debug, Clone)]
pub struct GuidedAttentionParams {
    pub heads: Vec<HeadIds>,
    pub score: Vec<ScoreNetIds>,
    pub output: AffineIds,
}

/// Guidance stream: tokens for the query side plus the pre-projection
/// per-category mean-pooled raw variables the gates are computed from.
#[derive(Debug, Clone)]
pub struct GuidancePacket {
    pub tokens: TensorId,
    pub raw_categories: Vec<Vec<f64>>,
}

/// How head gates are produced for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum GateMode {
    /// Sigmoid of the per-category score networks (the trained path).
    Learned,
    /// Gates pinned to 1 and score networks inert (image-only ablation).
    Disabled,
    /// Gates pinned to explicit constants (test fixtures, explain demos).
    Forced(Vec<f64>),
}

/// Per-call observability: pre-gating attention, resolved gate values,
/// and tape handles for gradient-level checks.
#[derive(Debug, Clone)]
pub struct GaDiagnostics {
    /// Pre-gating attention matrix per head, `[n_G x n_I]`, rows sum to 1.
    pub attention: Vec<TensorId>,
    /// Resolved gate value per head.
    pub head_weights: Vec<f64>,
    /// Gate nodes when learned (None for disabled/forced gates).
    pub gate_ids: Vec<Option<TensorId>>,
    /// Raw-variable leaves feeding each score net when learned.
    pub raw_ids: Vec<Option<TensorId>>,
}

/// Gate vector `H = sigmoid(score_i(raw_i))`, one scalar node per head.
///
/// Returns `(gate nodes, raw input leaves)`; the raw leaves are
/// gradient-tracked so the category/head exclusivity can be verified
/// through `backward` directly.
pub fn head_weights(
    tape: &mut Tape<f64>,
    packet: &GuidancePacket,
    params: &GuidedAttentionParams,
) -> Result<(Vec<TensorId>, Vec<TensorId>)> {
    if packet.raw_categories.len() != params.score.len() {
        return Err(Error::Config(format!(
            "head_weights: {} raw categories but {} score networks",
            packet.raw_categories.len(),
            params.score.len()
        )));
    }
    let mut gates = Vec::with_capacity(params.score.len());
    let mut raws = Vec::with_capacity(params.score.len());
    for (raw, net) in packet.raw_categories.iter().zip(&params.score) {
        let (n_in, _) = tape.value(net.layer1.w).dims2()?;
        if raw.len() != n_in {
            return Err(Error::Config(format!(
                "head_weights: category supplies {} variables but score net expects {n_in}",
                raw.len()
            )));
        }
        let scaled: Vec<f64> = raw.iter().map(|v| v * SCORE_INPUT_SCALE).collect();
        let x = tape.param(Tensor::matrix(1, raw.len(), scaled)?);
        let h1 = tape.linear(x, net.layer1.w, net.layer1.b)?;
        let a1 = tape.gelu(h1)?;
        let h2 = tape.linear(a1, net.layer2.w, net.layer2.b)?;
        let gate = tape.sigmoid(h2)?;
        gates.push(gate);
        raws.push(x);
    }
    Ok((gates, raws))
}

/// One guided-attention forward pass.
///
/// Per head `i`: `Q_i = X_G Wq_i`, `K_i = X_I Wk_i`, `V_i = X_I Wv_i`,
/// `P_i = softmax_rows(Q_i K_i^T / sqrt(d_head))`, head output
/// `h_i * P_i V_i`; heads are concatenated and sent through the output
/// projection. Diagnostics expose the pre-gating `P_i` and the gates.
pub fn guided_attention(
    tape: &mut Tape<f64>,
    x_input: TensorId,
    packet: &GuidancePacket,
    params: &GuidedAttentionParams,
    gates: &GateMode,
) -> Result<(TensorId, GaDiagnostics)> {
    let (n_i, d_i) = tape.value(x_input).dims2()?;
    let (n_g, d_g) = tape.value(packet.tokens).dims2()?;
    if n_g != n_i || d_g != d_i {
        return Err(Error::Shape {
            op: "guided_attention",
            detail: format!("input tokens [{n_i} x {d_i}] vs guidance tokens [{n_g} x {d_g}]"),
        });
    }
    if let GateMode::Forced(v) = gates {
        if v.len() != params.heads.len() {
            return Err(Error::Config(format!(
                "guided_attention: {} forced gates for {} heads",
                v.len(),
                params.heads.len()
            )));
        }
    }

    let (learned_gates, raw_ids) = match gates {
        GateMode::Learned => {
            let (g, r) = head_weights(tape, packet, params)?;
            (Some(g), Some(r))
        }
        _ => (None, None),
    };

    let n_heads = params.heads.len();
    let mut parts = Vec::with_capacity(n_heads);
    let mut attention = Vec::with_capacity(n_heads);
    let mut head_values = Vec::with_capacity(n_heads);
    let mut gate_ids = Vec::with_capacity(n_heads);

    for (i, head) in params.heads.iter().enumerate() {
        let q = tape.linear(packet.tokens, head.query.w, head.query.b)?;
        let k = tape.linear(x_input, head.key.w, head.key.b)?;
        let v = tape.linear(x_input, head.value.w, head.value.b)?;
        let (_, d_head) = tape.value(q).dims2()?;

        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(logits, 1.0 / (d_head as f64).sqrt())?;
        let p = tape.softmax_rows(scaled)?;
        attention.push(p);

        let ctx = tape.matmul(p, v)?;
        let (part, h_val, h_id) = match gates {
            GateMode::Learned => {
                let g = learned_gates.as_ref().unwrap()[i];
                (tape.scale(ctx, g)?, tape.data(g)[0], Some(g))
            }
            GateMode::Disabled => (ctx, 1.0, None),
            GateMode::Forced(v) => (tape.mul_scalar(ctx, v[i])?, v[i], None),
        };
        parts.push(part);
        head_values.push(h_val);
        gate_ids.push(h_id);
    }

    let concat = tape.concat_last_axis(&parts)?;
    let out = tape.linear(concat, params.output.w, params.output.b)?;
    let raw_ids = match raw_ids {
        Some(r) => r.into_iter().map(Some).collect(),
        None => vec![None; n_heads],
    };
    Ok((out, GaDiagnostics { attention, head_weights: head_values, gate_ids, raw_ids }))
}

/// Layer-norm parameter pair (gain, bias).
#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: TensorId,
    pub bias: TensorId,
}

/// One encoder block: guided attention plus MLP, both pre-norm residual.
#[derive(Debug, Clone)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attention: GuidedAttentionParams,
    pub norm2: NormIds,
    pub mlp_in: AffineIds,
    pub mlp_out: AffineIds,
}

/// Pre-norm residual block:
/// `x + GA(norm(x), packet)`, then `x + MLP(norm(x))` with an
/// affine-GELU-affine MLP. Guidance tokens pass through unchanged.
pub fn guided_block(
    tape: &mut Tape<f64>,
    x: TensorId,
    packet: &GuidancePacket,
    block: &BlockIds,
    gates: &GateMode,
) -> Result<(TensorId, GaDiagnostics)> {
    let n1 = tape.layer_norm(x, block.norm1.gain, block.norm1.bias, LN_EPS)?;
    let (ga, diag) = guided_attention(tape, n1, packet, &block.attention, gates)?;
    let x1 = tape.add(x, ga)?;

    let n2 = tape.layer_norm(x1, block.norm2.gain, block.norm2.bias, LN_EPS)?;
    let h = tape.linear(n2, block.mlp_in.w, block.mlp_in.b)?;
    let a = tape.gelu(h)?;
    let m = tape.linear(a, block.mlp_out.w, block.mlp_out.b)?;
    let out = tape.add(x1, m)?;
    Ok((out, diag))
}
