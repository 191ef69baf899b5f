//! Tape-based reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Builders run the forward
//! computation eagerly and record enough attributes to replay the chain rule;
//! [`Graph::backward`] walks the tape in reverse. Node ids are always smaller
//! than the ids of nodes that consume them, so reverse id order is a reverse
//! topological order.
//!
//! Shape agreement between builder arguments is a programming error and
//! panics; user-facing validation lives in the composite ops one level up.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    /// Broadcast a 1×c bias over every row.
    AddRowBias(NodeId, NodeId),
    /// A[m,k] @ B[k,n].
    Matmul(NodeId, NodeId),
    /// A[m,k] @ B[n,k]^T.
    MatmulNT(NodeId, NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Per-row normalization; cache holds (mean, inv_std) per row.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cache: Vec<(F, F)>,
    },
    /// out[i, :] = table[ids[i], :].
    EmbedRows { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    SumAll(NodeId),
    /// Elementwise multiply by a frozen 0-or-1/(1-p) mask.
    DropoutMask { a: NodeId, mask: Vec<F> },
    /// Label-smoothed cross entropy, summed or averaged over non-pad rows.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        smoothing: F,
        pad: Option<u32>,
        mean: bool,
    },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
    /// Empty until the backward pass touches this node.
    grad: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<F>, op: Op<F>, rg: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: Vec::new(),
            op,
            requires_grad: rg,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a parameter or constant tensor, converting to the graph's
    /// element type. Gradient tracking follows `t.requires_grad`.
    pub fn tensor(&mut self, t: &Tensor) -> NodeId {
        let (rows, cols) = t.as_2d();
        let data = t.data().iter().map(|&v| F::from_f32(v)).collect();
        self.push(rows, cols, data, Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> NodeId {
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// A leaf that participates in gradient computation.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<F>) -> NodeId {
        self.push(rows, cols, data, Op::Leaf, true)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    /// Gradient as an owned dense vector (zeros if none flowed).
    pub fn grad_dense(&self, id: NodeId) -> Vec<F> {
        let n = &self.nodes[id.0];
        if n.grad.is_empty() {
            vec![F::zero(); n.data.len()]
        } else {
            n.grad.clone()
        }
    }

    // ── forward builders ─────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x + y);
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, data, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = zip_map(&self.nodes[a.0].data, &self.nodes[b.0].data, |x, y| x * y);
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, data, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let (r, cols) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, cols, data, Op::Scale(a, c), rg)
    }

    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "add_row_bias: bias shape");
        let mut data = self.nodes[a.0].data.clone();
        let b = self.nodes[bias.0].data.clone();
        for row in data.chunks_mut(c) {
            for (x, &bv) in row.iter_mut().zip(&b) {
                *x += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(r, c, data, Op::AddRowBias(a, bias), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = vec![F::zero(); m * n];
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                self.nodes[a.0].data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].data.as_ptr(),
                n as isize,
                1,
                F::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(m, n, out, Op::Matmul(a, b), rg)
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt: inner dimension mismatch");
        let mut out = vec![F::zero(); m * n];
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                self.nodes[a.0].data.as_ptr(),
                k as isize,
                1,
                self.nodes[b.0].data.as_ptr(),
                1,
                k as isize,
                F::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(m, n, out, Op::MatmulNT(a, b), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, c, data, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let rg = self.rg(a);
        self.push(r, c, data, Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: F) -> NodeId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm: gain shape");
        assert_eq!(self.shape(bias), (1, c), "layer_norm: bias shape");
        let dim = F::from_f64(c as f64);
        let mut data = vec![F::zero(); r * c];
        let mut cache = Vec::with_capacity(r);
        {
            let xs = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let mean = row.iter().cloned().sum::<F>() / dim;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dim;
                let inv = (var + eps).sqrt().recip();
                cache.push((mean, inv));
                for j in 0..c {
                    data[i * c + j] = g[j] * (row[j] - mean) * inv + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(r, c, data, Op::LayerNorm { x, gain, bias, cache }, rg)
    }

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (vocab, d) = self.shape(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embed_rows: id {id} out of range {vocab}");
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            ids.len(),
            d,
            data,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let (_, c) = self.shape(parts[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.shape(p);
            assert_eq!(pc, c, "concat_rows: column mismatch");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.rg(p);
        }
        self.push(rows, c, data, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "slice_rows: out of range");
        let data = self.nodes[a.0].data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(len, c, data, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let (r, _) = self.shape(parts[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![F::zero(); r * total];
        let mut offset = 0;
        let mut rg = false;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, r, "concat_cols: row mismatch");
            for i in 0..r {
                data[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&self.nodes[p.0].data[i * pc..(i + 1) * pc]);
            }
            offset += pc;
            rg |= self.rg(p);
        }
        self.push(r, total, data, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols: out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(r, len, data, Op::SliceCols { a, start }, rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].data.iter().cloned().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![total], Op::SumAll(a), rg)
    }

    /// Multiply by a frozen inverted-dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout_mask(&mut self, a: NodeId, mask: Vec<F>) -> NodeId {
        assert_eq!(mask.len(), self.nodes[a.0].data.len());
        let data = zip_map(&self.nodes[a.0].data, &mask, |x, m| x * m);
        let (r, c) = self.shape(a);
        let rg = self.rg(a);
        self.push(r, c, data, Op::DropoutMask { a, mask }, rg)
    }

    pub(super) fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        smoothing: F,
        pad: Option<u32>,
        mean: bool,
    ) -> NodeId {
        let (r, v) = self.shape(logits);
        assert_eq!(targets.len(), r, "cross_entropy: one target per row");
        let (on_minus_off, off) = smoothing_weights(smoothing, v);
        let mut total = F::zero();
        let mut count = 0usize;
        {
            let xs = &self.nodes[logits.0].data;
            let mut lsm = vec![F::zero(); v];
            for (i, &y) in targets.iter().enumerate() {
                if pad == Some(y) {
                    continue;
                }
                log_softmax_row(&xs[i * v..(i + 1) * v], &mut lsm);
                let sum_all: F = lsm.iter().cloned().sum();
                total -= on_minus_off * lsm[y as usize] + off * sum_all;
                count += 1;
            }
        }
        let value = if mean && count > 0 {
            total / F::from_f64(count as f64)
        } else {
            total
        };
        let rg = self.rg(logits);
        self.push(
            1,
            1,
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                pad,
                mean,
            },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root; leaves gradients on every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        {
            let node = &self.nodes[root.0];
            if node.rows * node.cols != 1 {
                return Err(Error::invalid(format!(
                    "backward: root must be a scalar, got {}x{}",
                    node.rows, node.cols
                )));
            }
        }
        self.ensure_grad(root);
        self.nodes[root.0].grad[0] = F::one();

        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_empty() || !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let gout = std::mem::take(&mut self.nodes[id].grad);
            self.backprop(NodeId(id), &op, &gout);
            self.nodes[id].op = op;
            self.nodes[id].grad = gout;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        let node = &mut self.nodes[id.0];
        if node.grad.is_empty() {
            node.grad = vec![F::zero(); node.data.len()];
        }
    }

    fn add_to_grad(&mut self, id: NodeId, contribution: &[F]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        if node.grad.is_empty() {
            node.grad = contribution.to_vec();
        } else {
            for (g, &c) in node.grad.iter_mut().zip(contribution) {
                *g += c;
            }
        }
    }

    /// Accumulate `A(m×k) @ B(k×n)` into `into`'s gradient (m×n), where each
    /// operand is either the upstream gradient slice or a node's value buffer
    /// with explicit strides. Value and gradient buffers never alias.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(
        &mut self,
        m: usize,
        k: usize,
        n: usize,
        a: GemmSrc<'_, F>,
        rsa: isize,
        csa: isize,
        b: GemmSrc<'_, F>,
        rsb: isize,
        csb: isize,
        into: NodeId,
    ) {
        if !self.nodes[into.0].requires_grad {
            return;
        }
        self.ensure_grad(into);
        let a_ptr = match a {
            GemmSrc::Slice(s) => s.as_ptr(),
            GemmSrc::Value(id) => self.nodes[id.0].data.as_ptr(),
        };
        let b_ptr = match b {
            GemmSrc::Slice(s) => s.as_ptr(),
            GemmSrc::Value(id) => self.nodes[id.0].data.as_ptr(),
        };
        let c_ptr = self.nodes[into.0].grad.as_mut_ptr();
        unsafe {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                a_ptr,
                rsa,
                csa,
                b_ptr,
                rsb,
                csb,
                F::one(),
                c_ptr,
                n as isize,
                1,
            );
        }
    }

    fn backprop(&mut self, _out: NodeId, op: &Op<F>, gout: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to_grad(a, gout);
                self.add_to_grad(b, gout);
            }
            Op::Mul(a, b) => {
                let da = zip_map(gout, &self.nodes[b.0].data, |g, y| g * y);
                self.add_to_grad(a, &da);
                let db = zip_map(gout, &self.nodes[a.0].data, |g, x| g * x);
                self.add_to_grad(b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<F> = gout.iter().map(|&g| g * c).collect();
                self.add_to_grad(a, &da);
            }
            Op::AddRowBias(a, bias) => {
                self.add_to_grad(a, gout);
                let (_, c) = self.shape(bias);
                let mut db = vec![F::zero(); c];
                for row in gout.chunks(c) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.add_to_grad(bias, &db);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                // dA += dC @ B^T
                self.gemm_acc(
                    m,
                    n,
                    k,
                    GemmSrc::Slice(gout),
                    n as isize,
                    1,
                    GemmSrc::Value(b),
                    1,
                    n as isize,
                    a,
                );
                // dB += A^T @ dC
                self.gemm_acc(
                    k,
                    m,
                    n,
                    GemmSrc::Value(a),
                    1,
                    k as isize,
                    GemmSrc::Slice(gout),
                    n as isize,
                    1,
                    b,
                );
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = self.shape(a);
                let (n, _) = self.shape(b);
                // C = A @ B^T, so dA += dC @ B
                self.gemm_acc(
                    m,
                    n,
                    k,
                    GemmSrc::Slice(gout),
                    n as isize,
                    1,
                    GemmSrc::Value(b),
                    k as isize,
                    1,
                    a,
                );
                // dB += dC^T @ A
                self.gemm_acc(
                    n,
                    m,
                    k,
                    GemmSrc::Slice(gout),
                    1,
                    n as isize,
                    GemmSrc::Value(a),
                    k as isize,
                    1,
                    b,
                );
            }
            Op::Relu(a) => {
                let da = zip_map(gout, &self.nodes[a.0].data, |g, x| {
                    if x > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                });
                self.add_to_grad(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.shape(a);
                let mut da = vec![F::zero(); r * c];
                {
                    let w = &self.nodes[_out.0].data;
                    for i in 0..r {
                        let wi = &w[i * c..(i + 1) * c];
                        let gi = &gout[i * c..(i + 1) * c];
                        let dot: F = wi.iter().zip(gi).map(|(&x, &g)| x * g).sum();
                        for j in 0..c {
                            da[i * c + j] = wi[j] * (gi[j] - dot);
                        }
                    }
                }
                self.add_to_grad(a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref cache,
            } => {
                let (r, c) = self.shape(x);
                let dim = F::from_f64(c as f64);
                let mut dx = vec![F::zero(); r * c];
                let mut dgain = vec![F::zero(); c];
                let mut dbias = vec![F::zero(); c];
                {
                    let xs = &self.nodes[x.0].data;
                    let g = &self.nodes[gain.0].data;
                    for i in 0..r {
                        let (mean, inv) = cache[i];
                        let xr = &xs[i * c..(i + 1) * c];
                        let gr = &gout[i * c..(i + 1) * c];
                        let mut mean_h = F::zero();
                        let mut mean_hx = F::zero();
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let h = gr[j] * g[j];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        mean_h /= dim;
                        mean_hx /= dim;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            dx[i * c + j] = inv * (gr[j] * g[j] - mean_h - xhat * mean_hx);
                        }
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }
            Op::EmbedRows { table, ref ids } => {
                if !self.rg(table) {
                    return;
                }
                self.ensure_grad(table);
                let (_, d) = self.shape(table);
                let node = &mut self.nodes[table.0];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        node.grad[id * d + j] += gout[i * d + j];
                    }
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let (r, c) = self.shape(p);
                    self.add_to_grad(p, &gout[offset..offset + r * c]);
                    offset += r * c;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, c) = self.shape(a);
                if !self.rg(a) {
                    return;
                }
                self.ensure_grad(a);
                let node = &mut self.nodes[a.0];
                for (g, &v) in node.grad[start * c..start * c + gout.len()]
                    .iter_mut()
                    .zip(gout)
                {
                    *g += v;
                }
            }
            Op::ConcatCols(ref parts) => {
                let parts = parts.clone();
                let (r, total) = self.shape(_out);
                let mut offset = 0;
                for &p in &parts {
                    let (_, pc) = self.shape(p);
                    let mut dp = vec![F::zero(); r * pc];
                    for i in 0..r {
                        dp[i * pc..(i + 1) * pc]
                            .copy_from_slice(&gout[i * total + offset..i * total + offset + pc]);
                    }
                    self.add_to_grad(p, &dp);
                    offset += pc;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.shape(a);
                let len = self.shape(_out).1;
                if !self.rg(a) {
                    return;
                }
                self.ensure_grad(a);
                let node = &mut self.nodes[a.0];
                for i in 0..r {
                    for j in 0..len {
                        node.grad[i * c + start + j] += gout[i * len + j];
                    }
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                let da = vec![gout[0]; r * c];
                self.add_to_grad(a, &da);
            }
            Op::DropoutMask { a, ref mask } => {
                let da = zip_map(gout, mask, |g, m| g * m);
                self.add_to_grad(a, &da);
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                smoothing,
                pad,
                mean,
            } => {
                let (r, v) = self.shape(logits);
                let (on_minus_off, off) = smoothing_weights(smoothing, v);
                let count = targets.iter().filter(|&&y| pad != Some(y)).count();
                let scale = if mean && count > 0 {
                    gout[0] / F::from_f64(count as f64)
                } else {
                    gout[0]
                };
                let mut dl = vec![F::zero(); r * v];
                {
                    let xs = &self.nodes[logits.0].data;
                    let mut lsm = vec![F::zero(); v];
                    for (i, &y) in targets.iter().enumerate() {
                        if pad == Some(y) {
                            continue;
                        }
                        log_softmax_row(&xs[i * v..(i + 1) * v], &mut lsm);
                        // d/dlogit = p - q, q = off + (on-off) * onehot(y)
                        for j in 0..v {
                            let p = lsm[j].exp();
                            let q = off
                                + if j == y as usize {
                                    on_minus_off
                                } else {
                                    F::zero()
                                };
                            dl[i * v + j] = scale * (p - q);
                        }
                    }
                }
                self.add_to_grad(logits, &dl);
            }
        }
    }
}

enum GemmSrc<'a, F> {
    Slice(&'a [F]),
    Value(NodeId),
}

/// `(on - off, off)` masses for the smoothed target distribution.
fn smoothing_weights<F: Scalar>(smoothing: F, vocab: usize) -> (F, F) {
    let off = if vocab > 1 {
        smoothing / F::from_f64((vocab - 1) as f64)
    } else {
        F::zero()
    };
    (F::one() - smoothing - off, off)
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Numerically stable log-softmax of one row into `out`.
pub fn log_softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &x in row {
        sum += (x - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(g: &mut Graph<f64>, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        g.variable(rows, cols, data.to_vec())
    }

    /// Central finite differences of a scalar-graph builder w.r.t. one input.
    fn numerical_grad(
        build: impl Fn(&mut Graph<f64>, &[f64]) -> NodeId,
        x: &[f64],
        eps: f64,
    ) -> Vec<f64> {
        let eval = |xs: &[f64]| {
            let mut g = Graph::<f64>::new();
            let root = build(&mut g, xs);
            g.value(root)[0]
        };
        let mut grad = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            grad[i] = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        }
        grad
    }

    fn analytic_grad(build: impl Fn(&mut Graph<f64>, &[f64]) -> NodeId, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        // Input is always the first node so the id is stable.
        let root = build(&mut g, x);
        g.backward(root).unwrap();
        g.grad_dense(NodeId(0))
    }

    fn check_grad(build: impl Fn(&mut Graph<f64>, &[f64]) -> NodeId + Copy, x: &[f64], tol: f64) {
        let a = analytic_grad(build, x);
        let n = numerical_grad(build, x, 1e-5);
        for (i, (ga, gn)) in a.iter().zip(&n).enumerate() {
            let denom = gn.abs().max(1.0);
            assert!(
                (ga - gn).abs() / denom < tol,
                "grad[{i}]: analytic {ga} vs numeric {gn}"
            );
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad_dense(x), vec![1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let x = [0.3, -0.7, 1.1, 0.4, 0.9, -0.2];
        check_grad(
            |g, xs| {
                let a = g.variable(2, 3, xs.to_vec());
                let b = g.constant(3, 2, vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2]);
                let c = g.matmul(a, b);
                g.sum_all(c)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_grad_matches_finite_differences() {
        let x = [0.3, -0.7, 1.1, 0.4];
        check_grad(
            |g, xs| {
                let a = g.variable(2, 2, xs.to_vec());
                let b = g.constant(3, 2, vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.2]);
                let c = g.matmul_nt(a, b);
                let c2 = g.mul(c, c);
                g.sum_all(c2)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = g.constant(4, 3, (0..12).map(|i| i as f64 * 0.1).collect());
        let nt = g.matmul_nt(a, b);
        // Same product with B transposed by hand.
        let mut bt = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = g.value(b)[i * 3 + j];
            }
        }
        let btn = g.constant(3, 4, bt);
        let reference = g.matmul(a, btn);
        assert_eq!(g.value(nt), g.value(reference));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_checks() {
        let x = [0.5, -1.0, 2.0, 0.1, 0.1, 0.1];
        let mut g = Graph::<f64>::new();
        let a = var(&mut g, 2, 3, &x);
        let s = g.softmax_rows(a);
        for row in g.value(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        check_grad(
            |g, xs| {
                let a = g.variable(2, 3, xs.to_vec());
                let s = g.softmax_rows(a);
                let w = g.constant(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.7]);
                let weighted = g.mul(s, w);
                g.sum_all(weighted)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_forward_and_grad() {
        // Constant row with unit gain collapses to the bias.
        let mut g = Graph::<f64>::new();
        let x = g.constant(1, 4, vec![3.0; 4]);
        let gain = g.constant(1, 4, vec![1.0; 4]);
        let bias = g.constant(1, 4, vec![0.25; 4]);
        let y = g.layer_norm(x, gain, bias, 1e-6);
        for &v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-9);
        }

        let xs = [0.3, -0.7, 1.1, 0.4, 2.0, -0.5, 0.0, 0.9];
        check_grad(
            |g, xs| {
                let x = g.variable(2, 4, xs.to_vec());
                let gain = g.constant(1, 4, vec![1.3, 0.7, 1.0, -0.4]);
                let bias = g.constant(1, 4, vec![0.1, -0.2, 0.0, 0.3]);
                let y = g.layer_norm(x, gain, bias, 1e-6);
                let w = g.constant(2, 4, (0..8).map(|i| 0.1 * i as f64 - 0.3).collect());
                let wy = g.mul(y, w);
                g.sum_all(wy)
            },
            &xs,
            1e-5,
        );
    }

    #[test]
    fn layer_norm_gain_bias_grads_check() {
        let gains = [1.3, 0.7, 1.0, -0.4];
        let a = |g: &mut Graph<f64>, gs: &[f64]| {
            let gain = g.variable(1, 4, gs.to_vec());
            let x = g.constant(2, 4, vec![0.3, -0.7, 1.1, 0.4, 2.0, -0.5, 0.0, 0.9]);
            let bias = g.constant(1, 4, vec![0.1, -0.2, 0.0, 0.3]);
            let y = g.layer_norm(x, gain, bias, 1e-6);
            g.sum_all(y)
        };
        check_grad(a, &gains, 1e-6);
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let mut g = Graph::<f64>::new();
        let table = g.variable(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = g.embed_rows(table, &[2, 0, 2]);
        assert_eq!(g.value(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(e);
        g.backward(s).unwrap();
        // Row 2 was gathered twice, row 1 never.
        assert_eq!(g.grad_dense(table), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_concat_roundtrip_grads() {
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        check_grad(
            |g, xs| {
                let a = g.variable(2, 4, xs.to_vec());
                let left = g.slice_cols(a, 0, 2);
                let right = g.slice_cols(a, 2, 2);
                let swapped = g.concat_cols(&[right, left]);
                let top = g.slice_rows(swapped, 0, 1);
                let bottom = g.slice_rows(swapped, 1, 1);
                let stacked = g.concat_rows(&[bottom, top]);
                let sq = g.mul(stacked, stacked);
                g.sum_all(sq)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn relu_and_bias_grads_check() {
        let x = [0.5, -0.5, 1.5, -1.5, 0.2, 0.9];
        check_grad(
            |g, xs| {
                let a = g.variable(2, 3, xs.to_vec());
                let b = g.constant(1, 3, vec![0.3, -0.1, 0.2]);
                let ab = g.add_row_bias(a, b);
                let r = g.relu(ab);
                g.sum_all(r)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn dropout_mask_scales_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let d = g.dropout_mask(x, vec![2.0, 0.0, 2.0, 0.0]);
        assert_eq!(g.value(d), &[2.0, 0.0, 6.0, 0.0]);
        let s = g.sum_all(d);
        g.backward(s).unwrap();
        assert_eq!(g.grad_dense(x), vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(2, 7, vec![0.0; 14]);
        let loss = g.cross_entropy(logits, &[3, 5], 0.0, None, true);
        assert!((g.value(loss)[0] - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_target_goes_to_zero() {
        let mut g = Graph::<f64>::new();
        let mut row = vec![-50.0; 5];
        row[2] = 50.0;
        let logits = g.constant(1, 5, row);
        let loss = g.cross_entropy(logits, &[2], 0.0, None, true);
        assert!(g.value(loss)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_smoothed_matches_direct_computation() {
        let logits = [0.4, -1.2, 0.7, 2.0];
        let eps = 0.1;
        // Direct evaluation of -sum q_j log p_j in long form.
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
        let logp: Vec<f64> = logits.iter().map(|x| x - max - z.ln()).collect();
        let target = 1usize;
        let q: Vec<f64> = (0..4)
            .map(|j| if j == target { 1.0 - eps } else { eps / 3.0 })
            .collect();
        let direct: f64 = -(0..4).map(|j| q[j] * logp[j]).sum::<f64>();

        let mut g = Graph::<f64>::new();
        let l = g.constant(1, 4, logits.to_vec());
        let loss = g.cross_entropy(l, &[target as u32], eps, None, true);
        assert!((g.value(loss)[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_pad_rows() {
        let mut g = Graph::<f64>::new();
        let logits = g.variable(3, 4, vec![0.1; 12]);
        let with_pad = g.cross_entropy(logits, &[1, 0, 2], 0.0, Some(0), true);
        let mut g2 = Graph::<f64>::new();
        let logits2 = g2.variable(2, 4, vec![0.1; 8]);
        let without = g2.cross_entropy(logits2, &[1, 2], 0.0, Some(0), true);
        assert_eq!(g.value(with_pad)[0], g2.value(without)[0]);

        g.backward(with_pad).unwrap();
        let grad = g.grad_dense(logits);
        assert!(grad[4..8].iter().all(|&v| v == 0.0), "pad row has zero grad");
    }

    #[test]
    fn cross_entropy_grad_checks() {
        let x = [0.4, -1.2, 0.7, 2.0, 0.0, 0.3, -0.5, 1.0];
        check_grad(
            |g, xs| {
                let l = g.variable(2, 4, xs.to_vec());
                g.cross_entropy(l, &[1, 3], 0.1, None, true)
            },
            &x,
            1e-6,
        );
        check_grad(
            |g, xs| {
                let l = g.variable(2, 4, xs.to_vec());
                g.cross_entropy(l, &[2, 0], 0.0, Some(0), false)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn grad_accumulates_over_shared_input() {
        // f(x) = sum(x*x) + sum(x) has gradient 2x + 1.
        let mut g = Graph::<f64>::new();
        let x = var(&mut g, 1, 3, &[1.0, 2.0, 3.0]);
        let sq = g.mul(x, x);
        let s1 = g.sum_all(sq);
        let s2 = g.sum_all(x);
        let total = g.add(s1, s2);
        g.backward(total).unwrap();
        assert_eq!(g.grad_dense(x), vec![3.0, 5.0, 7.0]);
    }
}
