//! Reverse-mode differentiation over a closed set of dense kernels.
//!
//! A [`Graph`] is a tape: every op appends one node whose inputs were created
//! earlier, so node ids are already in topological order and the backward pass
//! is a single reverse sweep. Every forward op checks its output for NaN/Inf
//! and fails with [`Error::NonFinite`] instead of letting it propagate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Tanh,
    /// tanh approximation of GELU, as in GPT-2.
    Gelu,
    Silu,
    Exp,
    Sigmoid,
    /// clamp to [-1, 1]
    HardTanh,
}

/// How the second operand of a binary op maps onto the first.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// `b` repeats every `n` elements (its shape is a suffix of `a`'s).
    Cycle(usize),
    /// explicit `b` index for every element of `a`
    Map(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if b.len() > a.len() {
            return Err(mismatch());
        }
        let offset = a.len() - b.len();
        for (i, &bd) in b.iter().enumerate() {
            if bd != 1 && bd != a[offset + i] {
                return Err(mismatch());
            }
        }
        let bn: usize = b.iter().product();
        if bn == 1 {
            return Ok(Broadcast::Cycle(1));
        }
        if a[offset..] == *b {
            return Ok(Broadcast::Cycle(bn));
        }
        // general case: stride 0 along broadcast dims
        let mut bstrides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                bstrides[offset + i] = s;
            }
            s *= b[i];
        }
        let n: usize = a.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; a.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            let mut d = a.len();
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                off += bstrides[d];
                if idx[d] < a[d] {
                    break;
                }
                off -= bstrides[d] * a[d];
                idx[d] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    /// Calls `f(i, j)` for every output index `i` of `n` and the `b`
    /// index `j` it reads.
    #[inline]
    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same => (0..n).for_each(|i| f(i, i)),
            Broadcast::Cycle(1) => (0..n).for_each(|i| f(i, 0)),
            Broadcast::Cycle(c) => {
                for base in (0..n).step_by(*c) {
                    for j in 0..*c {
                        f(base + j, j);
                    }
                }
            }
            Broadcast::Map(m) => m.iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Mul(NodeId, NodeId, Broadcast),
    Affine { x: NodeId, scale: f64 },
    Unary { x: NodeId, kind: UnaryKind },
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, eps: f64 },
    RmsNorm { x: NodeId, eps: f64 },
    Reshape { x: NodeId },
    Permute { x: NodeId, perm: Vec<usize> },
    IndexSelect { x: NodeId, dim: usize, indices: Vec<usize> },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Rope { x: NodeId, base: f64 },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// The tape. Ops append nodes; [`Graph::backward`] sweeps them in reverse.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn causal_mask_applies(shape: &[usize]) -> bool {
    shape.len() >= 2 && shape[shape.len() - 1] == shape[shape.len() - 2]
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let plan = Broadcast::plan(op, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<T> = match &plan {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Cycle(1) => ad.iter().map(|&x| f(x, bd[0])).collect(),
            Broadcast::Cycle(n) => {
                let mut out = Vec::with_capacity(ad.len());
                for chunk in ad.chunks(*n) {
                    out.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            Broadcast::Map(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        Ok((Tensor::new(av.shape().to_vec(), out)?, plan))
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape (trailing alignment).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, plan) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", v, Op::Add(a, b, plan), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, plan) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", v, Op::Sub(a, b, plan), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, plan) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", v, Op::Mul(a, b, plan), rg)
    }

    /// `x * scale`
    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        let s = T::from_f64(scale);
        let v = self.nodes[x.0].value.map(|e| e * s);
        let rg = self.rg(&[x]);
        self.push("scale", v, Op::Affine { x, scale }, rg)
    }

    pub fn unary(&mut self, x: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::new(xv.shape().to_vec(), unary_forward(kind, xv.data()))?;
        let rg = self.rg(&[x]);
        self.push(unary_name(kind), v, Op::Unary { x, kind }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Silu)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn hardtanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, UnaryKind::HardTanh)
    }

    /// `a[..., k] · b[k, n]` (or `b[n, k]ᵀ` when `trans_b`), leading dims of
    /// `a` flattened into rows.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.is_empty() || bsh.len() != 2 {
            return Err(mismatch());
        }
        let k = *ash.last().unwrap();
        let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if bk != k {
            return Err(mismatch());
        }
        let rows = self.nodes[a.0].value.numel() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            trans_b,
            &mut out,
            T::zero(),
        );
        let mut shape = ash.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false)
    }

    /// Batched product over identical leading dims:
    /// `a[.., m, k] · b[.., k, n]`, or `b[.., n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "batch_matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(mismatch());
        }
        let nd = ash.len();
        let (m, k) = (ash[nd - 2], ash[nd - 1]);
        let (bk, n) = if trans_b {
            (bsh[nd - 1], bsh[nd - 2])
        } else {
            (bsh[nd - 2], bsh[nd - 1])
        };
        if bk != k {
            return Err(mismatch());
        }
        let batch: usize = ash[..nd - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let mut shape = ash.clone();
        shape[nd - 1] = n;
        let rg = self.rg(&[a, b]);
        self.push("batch_matmul", Tensor::new(shape, out)?, Op::BatchMatMul { a, b, trans_b }, rg)
    }

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last dimension of `[.., T, T]` score maps, with key
    /// `j` masked out of query row `i` whenever `j > i`.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if !causal_mask_applies(self.shape(x)) {
            return Err(Error::InvalidShape {
                op: "causal_softmax",
                shape: self.shape(x).to_vec(),
                reason: "last two dims must be square".into(),
            });
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        let n = *shape.last().ok_or_else(|| Error::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "needs at least one dimension".into(),
        })?;
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape,
                reason: "last dimension must be >= 1".into(),
            });
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let valid = if causal { (r % n) + 1 } else { n };
            softmax_in_place(&mut row[..valid]);
            for v in &mut row[valid..] {
                *v = T::zero();
            }
        }
        let rg = self.rg(&[x]);
        // masked entries are exactly zero, so the backward formula needs no mask
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { x }, rg)
    }

    /// Standardize over the last dimension (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let (mean, rstd) = moments(row, eps);
            out.extend(row.iter().map(|&v| (v - mean) * rstd));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("layer_norm", v, Op::LayerNorm { x, eps }, rg)
    }

    /// Divide by the root-mean-square over the last dimension (no gain).
    pub fn rms_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let r = rms_inv(row, eps);
            out.extend(row.iter().map(|&v| v * r));
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("rms_norm", v, Op::RmsNorm { x, eps }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", v, Op::Reshape { x }, rg)
    }

    /// Output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let nd = xv.shape().len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: xv.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        let rg = self.rg(&[x]);
        self.push(
            "permute",
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Gather `indices` along `dim` (indices may repeat).
    pub fn index_select(&mut self, x: NodeId, dim: usize, indices: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if dim >= shape.len() {
            return Err(Error::InvalidShape {
                op: "index_select",
                shape: shape.to_vec(),
                reason: format!("dim {dim} out of range"),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[dim]) {
            return Err(Error::OutOfRange {
                what: "index_select dim",
                index: bad,
                bound: shape[dim],
            });
        }
        let outer: usize = shape[..dim].iter().product();
        let inner: usize = shape[dim + 1..].iter().product();
        let dsize = shape[dim];
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * dsize + i) * inner;
                out.extend_from_slice(&xv.data()[start..start + inner]);
            }
        }
        let mut oshape = shape.to_vec();
        oshape[dim] = indices.len();
        let rg = self.rg(&[x]);
        self.push(
            "index_select",
            Tensor::new(oshape, out)?,
            Op::IndexSelect {
                x,
                dim,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Row gather from a `[V, D]` table; output shape is `out_prefix ++ [D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], out_prefix: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        let (v, d) = match tv.shape() {
            &[v, d] => (v, d),
            s => {
                return Err(Error::InvalidShape {
                    op: "embedding",
                    shape: s.to_vec(),
                    reason: "table must be 2-D".into(),
                })
            }
        };
        if out_prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: out_prefix.to_vec(),
                reason: format!("{} ids", ids.len()),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_prefix.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits[..., V]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let v = *lv.shape().last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { lv.numel() / v };
        if rows != targets.len() || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0f64;
        for (row, &t) in lv.data().chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: t,
                    bound: v,
                });
            }
            total += (log_sum_exp(row) - row[t]).as_f64();
        }
        let loss = T::from_f64(total / rows as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let s = xv.data().iter().fold(T::zero(), |acc, &v| acc + v) / T::from_f64(xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Rotary position embedding on `[.., T, head_dim]`: coordinate pairs
    /// `(2i, 2i+1)` at position `t` rotate by `t · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: NodeId, base: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "rope",
                shape,
                reason: "needs [.., T, head_dim] with even head_dim".into(),
            });
        }
        let out = rope_rotate(xv.data(), &shape, base, false);
        let rg = self.rg(&[x]);
        self.push("rope", Tensor::new(shape, out)?, Op::Rope { x, base }, rg)
    }

    /// Gradients of the scalar node `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: lv.shape().to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g, &mut grads);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    plan.for_each(g.len(), |i, j| gb[j] = gb[j] + sign * g[i]);
                }
            }
            Op::Mul(a, b, plan) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    plan.for_each(g.len(), |i, j| ga[i] = ga[i] + g[i] * bv[j]);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    plan.for_each(g.len(), |i, j| gb[j] = gb[j] + g[i] * av[i]);
                }
            }
            Op::Affine { x, scale } => {
                let s = T::from_f64(*scale);
                if let Some(gx) = self.acc(grads, *x) {
                    for (v, &y) in gx.iter_mut().zip(g) {
                        *v = *v + y * s;
                    }
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.nodes[x.0].value.data();
                let yv = node.value.data();
                let kind = *kind;
                if let Some(gx) = self.acc(grads, *x) {
                    unary_backward(kind, xv, yv, g, gx);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let ash = self.nodes[a.0].value.shape();
                let k = *ash.last().unwrap();
                let n = *node.value.shape().last().unwrap();
                let rows = self.nodes[a.0].value.numel() / k.max(1);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    // ga[rows,k] += g[rows,n] · op(b)ᵀ
                    T::gemm(rows, n, k, g, false, bv, !trans_b, ga, T::one());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *trans_b {
                        // gb[n,k] += gᵀ · a
                        T::gemm(n, rows, k, g, true, av, false, gb, T::one());
                    } else {
                        // gb[k,n] += aᵀ · g
                        T::gemm(k, rows, n, av, true, g, false, gb, T::one());
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let ash = self.nodes[a.0].value.shape();
                let nd = ash.len();
                let (m, k) = (ash[nd - 2], ash[nd - 1]);
                let n = node.value.shape()[nd - 1];
                let batch: usize = ash[..nd - 2].iter().product();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            T::one(),
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gi, true, ai, false, out, T::one());
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, out, T::one());
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in 0..n {
                            out[j] = out[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.nodes[x.0].value.data();
                let y = node.value.data();
                let inv_d = T::from_f64(1.0 / d as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, out) in gx.chunks_mut(d).enumerate() {
                        let (_, rstd) = moments(&xv[r * d..(r + 1) * d], *eps);
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mg = gr.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) * inv_d;
                        for j in 0..d {
                            out[j] = out[j] + rstd * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::RmsNorm { x, eps } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.nodes[x.0].value.data();
                let y = node.value.data();
                let inv_d = T::from_f64(1.0 / d as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, out) in gx.chunks_mut(d).enumerate() {
                        let rinv = rms_inv(&xv[r * d..(r + 1) * d], *eps);
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b) * inv_d;
                        for j in 0..d {
                            out[j] = out[j] + rinv * (gr[j] - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (v, &y) in gx.iter_mut().zip(g) {
                        *v = *v + y;
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                if let Some(gx) = self.acc(grads, *x) {
                    for (v, y) in gx.iter_mut().zip(back) {
                        *v = *v + y;
                    }
                }
            }
            Op::IndexSelect { x, dim, indices } => {
                let shape = self.nodes[x.0].value.shape();
                let outer: usize = shape[..*dim].iter().product();
                let inner: usize = shape[dim + 1..].iter().product();
                let dsize = shape[*dim];
                if let Some(gx) = self.acc(grads, *x) {
                    let mut src = 0;
                    for o in 0..outer {
                        for &i in indices {
                            let start = (o * dsize + i) * inner;
                            for j in 0..inner {
                                gx[start + j] = gx[start + j] + g[src + j];
                            }
                            src += inner;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let v = *lv.shape().last().unwrap();
                let scale = g[0] / T::from_f64(targets.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((row, out), &t) in lv.data().chunks(v).zip(gl.chunks_mut(v)).zip(targets) {
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            let onehot = if j == t { T::one() } else { T::zero() };
                            out[j] = out[j] + scale * (p - onehot);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                let s = g[0] / T::from_f64(n as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for v in gx.iter_mut() {
                        *v = *v + s;
                    }
                }
            }
            Op::Rope { x, base } => {
                let back = rope_rotate(g, node.value.shape(), *base, true);
                if let Some(gx) = self.acc(grads, *x) {
                    for (v, y) in gx.iter_mut().zip(back) {
                        *v = *v + y;
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, exactly zero when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, id: NodeId) -> Tensor<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(id).to_vec()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::Tanh => "tanh",
        UnaryKind::Gelu => "gelu",
        UnaryKind::Silu => "silu",
        UnaryKind::Exp => "exp",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::HardTanh => "hardtanh",
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x)
}

fn unary_forward<T: Scalar>(kind: UnaryKind, xs: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    let one = T::one();
    match kind {
        UnaryKind::Tanh => xs.iter().map(|&x| x.fast_tanh()).collect(),
        UnaryKind::Gelu => xs
            .iter()
            .map(|&x| half * x * (one + gelu_inner(x).fast_tanh()))
            .collect(),
        UnaryKind::Silu => xs.iter().map(|&x| x * sigmoid(x)).collect(),
        UnaryKind::Exp => xs.iter().map(|&x| x.exp()).collect(),
        UnaryKind::Sigmoid => xs.iter().map(|&x| sigmoid(x)).collect(),
        UnaryKind::HardTanh => xs.iter().map(|&x| x.max(-one).min(one)).collect(),
    }
}

/// `gx += g · f'(x)`, with `ys = f(xs)` available.
fn unary_backward<T: Scalar>(kind: UnaryKind, xs: &[T], ys: &[T], g: &[T], gx: &mut [T]) {
    fn each<T: Scalar>(gx: &mut [T], g: &[T], xs: &[T], ys: &[T], d: impl Fn(T, T) -> T) {
        for (((o, &gi), &x), &y) in gx.iter_mut().zip(g).zip(xs).zip(ys) {
            *o = *o + gi * d(x, y);
        }
    }
    let one = T::one();
    let half = T::from_f64(0.5);
    match kind {
        UnaryKind::Tanh => each(gx, g, xs, ys, |_, y| one - y * y),
        UnaryKind::Gelu => {
            let c = T::from_f64(GELU_C);
            let a3 = T::from_f64(3.0 * GELU_A);
            each(gx, g, xs, ys, |x, _| {
                let t = gelu_inner(x).fast_tanh();
                half * (one + t) + half * x * (one - t * t) * c * (one + a3 * x * x)
            })
        }
        UnaryKind::Silu => each(gx, g, xs, ys, |x, _| {
            let s = sigmoid(x);
            s * (one + x * (one - s))
        }),
        UnaryKind::Exp => each(gx, g, xs, ys, |_, y| y),
        UnaryKind::Sigmoid => each(gx, g, xs, ys, |_, y| y * (one - y)),
        UnaryKind::HardTanh => each(gx, g, xs, ys, |x, _| {
            if x > -one && x < one {
                one
            } else {
                T::zero()
            }
        }),
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    max + s.ln()
}

fn moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

fn rms_inv<T: Scalar>(row: &[T], eps: f64) -> T {
    let n = T::from_f64(row.len() as f64);
    let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / n;
    T::one() / (ms + T::from_f64(eps)).sqrt()
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // keep the innermost dim as a contiguous chunk when it stays in place
    let (chunk, outer_nd) = if nd > 0 && perm[nd - 1] == nd - 1 {
        (shape[nd - 1], nd - 1)
    } else {
        (1, nd)
    };
    let src_strides: Vec<usize> = perm[..outer_nd].iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; outer_nd];
    let mut off = 0usize;
    let steps = if chunk == 0 { 0 } else { total / chunk };
    for _ in 0..steps {
        out.extend_from_slice(&data[off..off + chunk]);
        let mut d = outer_nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn rope_rotate<T: Scalar>(data: &[T], shape: &[usize], base: f64, inverse: bool) -> Vec<T> {
    let nd = shape.len();
    let hd = shape[nd - 1];
    let t_len = shape[nd - 2];
    let half = hd / 2;
    // angle table [t, i]
    let mut cos = vec![T::zero(); t_len * half];
    let mut sin = vec![T::zero(); t_len * half];
    for t in 0..t_len {
        for i in 0..half {
            let theta = t as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            cos[t * half + i] = T::from_f64(theta.cos());
            let s = theta.sin();
            sin[t * half + i] = T::from_f64(if inverse { -s } else { s });
        }
    }
    let mut out = vec![T::zero(); data.len()];
    for (r, (src, dst)) in data.chunks(hd).zip(out.chunks_mut(hd)).enumerate() {
        let t = r % t_len;
        for i in 0..half {
            let (c, s) = (cos[t * half + i], sin[t * half + i]);
            let (x0, x1) = (src[2 * i], src[2 * i + 1]);
            dst[2 * i] = x0 * c - x1 * s;
            dst[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0])).unwrap();
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), g.value(m).data());
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2, 3])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 3f64.ln(), 5.0, 5.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
        assert!((v[2] - 0.5).abs() < 1e-12 && (v[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_stable_at_large_magnitude() {
        let mut g = Graph::<f32>::new();
        let x = g
            .constant(Tensor::new([1, 4], vec![1e4, -1e4, 9999.0, 0.0]).unwrap())
            .unwrap();
        let y = g.softmax_rows(x).unwrap();
        let s: f32 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3, 3])).unwrap();
        let y = g.causal_softmax(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        );
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 3, 7])).unwrap();
        let l = g.cross_entropy(x, &[0, 1, 2, 3, 4, 6]).unwrap();
        assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_target_near_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.0, 60.0, 0.0])).unwrap();
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([1, 3])).unwrap();
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn unused_parameter_gets_exact_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&g, unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.])).unwrap();
        let b = g.constant(t(&[3, 1], &[10., 20., 30.])).unwrap();
        let c = g.mul(a, b).unwrap();
        assert_eq!(
            g.value(c).data(),
            &[10., 20., 60., 80., 150., 180., 70., 80., 180., 200., 330., 360.]
        );
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (p, s) = permute_data(&data, &[2, 3, 4], &[1, 2, 0]);
        assert_eq!(s, vec![3, 4, 2]);
        assert_eq!(p[1], 12.0);
        let (back, s2) = permute_data(&p, &s, &[2, 0, 1]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[0.3, -1.2, 2.0, 0.5])).unwrap();
        let y = g.rope(x, 10000.0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }
}
