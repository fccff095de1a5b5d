//! Causal attention cores. Inputs are already split into heads:
//! `[B, heads, T, head_dim]`.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `softmax(QKᵀ/√d + causal mask)·V`.
pub fn standard_core<T: Scalar>(g: &mut Graph<T>, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let probs = causal_probs(g, q, k)?;
    g.batch_matmul(probs, v, false)
}

/// Causal attention weights of one softmax map.
pub fn causal_probs<T: Scalar>(g: &mut Graph<T>, q: NodeId, k: NodeId) -> Result<NodeId> {
    let hd = *g.shape(q).last().unwrap_or(&1);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    g.causal_softmax(scores)
}

/// Pairs heads `2i`/`2i+1` into the two softmax branches and returns
/// `[softmax(Q₁K₁ᵀ/√d) − λ·softmax(Q₂K₂ᵀ/√d)]·V`.
///
/// `q`, `k`: `[B, H, T, hd]`; `v`: `[B, H/2, T, 2·hd]`; `lambda` must
/// broadcast onto `[B, H/2, T, T]` (shape `[1]` or `[H/2, 1, 1]`).
pub fn differential_core<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    lambda: NodeId,
) -> Result<NodeId> {
    let heads = g.shape(q)[1];
    if heads % 2 != 0 {
        return Err(Error::Config(format!(
            "differential attention needs an even head count, got {heads}"
        )));
    }
    let even: Vec<usize> = (0..heads).step_by(2).collect();
    let odd: Vec<usize> = (1..heads).step_by(2).collect();
    let q1 = g.index_select(q, 1, &even)?;
    let k1 = g.index_select(k, 1, &even)?;
    let q2 = g.index_select(q, 1, &odd)?;
    let k2 = g.index_select(k, 1, &odd)?;
    let a1 = causal_probs(g, q1, k1)?;
    let a2 = causal_probs(g, q2, k2)?;
    let a2 = g.mul(a2, lambda)?;
    let diff = g.sub(a1, a2)?;
    g.batch_matmul(diff, v, false)
}

/// `exp(λq1·λk1) − exp(λq2·λk2) + offset`, shape `[1]`.
pub fn lambda_exp<T: Scalar>(
    g: &mut Graph<T>,
    [q1, k1, q2, k2]: [NodeId; 4],
    offset: f64,
) -> Result<NodeId> {
    let d1 = g.mul(q1, k1)?;
    let d1 = g.sum(d1)?;
    let d2 = g.mul(q2, k2)?;
    let d2 = g.sum(d2)?;
    let e1 = g.exp(d1)?;
    let e2 = g.exp(d2)?;
    let lambda = g.sub(e1, e2)?;
    if offset == 0.0 {
        Ok(lambda)
    } else {
        let c = g.constant(crate::Tensor::scalar(T::from_f64(offset)))?;
        g.add(lambda, c)
    }
}

/// `sigmoid(raw)` per head pair, reshaped to `[pairs, 1, 1]`.
pub fn lambda_sigmoid<T: Scalar>(g: &mut Graph<T>, raw: NodeId) -> Result<NodeId> {
    let pairs = g.value(raw).numel();
    let s = g.sigmoid(raw)?;
    g.reshape(s, &[pairs, 1, 1])
}
