//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] owns every value produced during a forward pass. Each recorded
//! operation stores the ids of its inputs and enough information to compute
//! local gradients, so [`Tape::backward`] can replay the tape once in reverse
//! order (which is a reverse topological order, because an operation can only
//! consume values recorded before it) and accumulate gradients additively
//! across shared subexpressions.
//!
//! Values are immutable after recording. The only mutation hook,
//! [`Tape::write`], bumps a per-node version counter; `backward` refuses to
//! run if any recorded operation saw a different version of its input than
//! the one currently stored, because the downstream values would be stale.
//!
//! Gradients are retained for leaf nodes only (inputs bound with
//! [`Tape::param`]); interior gradients are freed as soon as they have been
//! propagated.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddRow { x: ValueId, bias: ValueId },
    MulConst { x: ValueId, c: f64 },
    AddConst { x: ValueId },
    Relu { x: ValueId },
    Silu { x: ValueId },
    Softplus { x: ValueId },
    Sigmoid { x: ValueId },
    Exp { x: ValueId },
    Clamp { x: ValueId, lo: f64, hi: f64 },
    LayerNorm { x: ValueId, eps: f64 },
    SumAll { x: ValueId },
    MeanAll { x: ValueId },
    ConcatCols { a: ValueId, b: ValueId },
    SliceCols { x: ValueId, start: usize },
}

impl Op {
    fn parents(&self) -> [Option<ValueId>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b }
            | ConcatCols { a, b } => [Some(a), Some(b)],
            AddRow { x, bias } => [Some(x), Some(bias)],
            MulConst { x, .. } | AddConst { x } | Relu { x } | Silu { x }
            | Softplus { x } | Sigmoid { x } | Exp { x } | Clamp { x, .. }
            | LayerNorm { x, .. } | SumAll { x } | MeanAll { x }
            | SliceCols { x, .. } => [Some(x), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
    version: u32,
    parent_versions: [u32; 2],
}

impl Node {
    fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Bind a tensor as a constant input (no gradient).
    pub fn input(&mut self, t: &Tensor) -> Result<ValueId> {
        let (rows, cols) = t.dims2();
        self.push_leaf(rows, cols, t.data().to_vec(), false)
    }

    /// Bind a tensor as a differentiable leaf. The tensor must be flagged
    /// `requires_grad`; its gradient is retained by the tape after backward.
    pub fn param(&mut self, t: &Tensor) -> Result<ValueId> {
        if !t.requires_grad() {
            return Err(Error::Shape(
                "param() requires a tensor flagged requires_grad".into(),
            ));
        }
        let (rows, cols) = t.dims2();
        self.push_leaf(rows, cols, t.data().to_vec(), true)
    }

    /// Bind raw row-major data as a constant input.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<ValueId> {
        self.push_leaf(rows, cols, data, false)
    }

    fn push_leaf(
        &mut self,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        needs_grad: bool,
    ) -> Result<ValueId> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "leaf dims {rows}x{cols} do not match {} elements",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tape leaf at flat index {i}")));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, needs_grad))
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> ValueId {
        let mut parent_versions = [0u32; 2];
        for (slot, p) in op.parents().into_iter().enumerate() {
            if let Some(p) = p {
                parent_versions[slot] = self.nodes[p.0].version;
            }
        }
        self.nodes.push(Node { rows, cols, data, op, needs_grad, version: 0, parent_versions });
        ValueId(self.nodes.len() - 1)
    }

    fn derived(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> ValueId {
        let needs = op
            .parents()
            .into_iter()
            .flatten()
            .any(|p| self.nodes[p.0].needs_grad);
        self.push(rows, cols, data, op, needs)
    }

    // ── accessors ────────────────────────────────────────────────────

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn dims(&self, id: ValueId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: ValueId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.numel() != 1 {
            return Err(Error::Shape(format!(
                "scalar() on node with {} elements",
                n.numel()
            )));
        }
        Ok(n.data[0])
    }

    /// Overwrite a node's value in place, bumping its version. Operations
    /// recorded before this write that consumed the node will make
    /// `backward` fail, because their outputs are stale.
    pub fn write(&mut self, id: ValueId, data: &[f64]) -> Result<()> {
        let n = &mut self.nodes[id.0];
        if data.len() != n.data.len() {
            return Err(Error::Shape(format!(
                "write of {} elements into node with {}",
                data.len(),
                n.data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tape write at flat index {i}")));
        }
        n.data.copy_from_slice(data);
        n.version += 1;
        Ok(())
    }

    /// Gradient of the loss w.r.t. a leaf, if backward has run and the leaf
    /// participates in the loss.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node.
    pub fn grad_tensor(&self, id: ValueId) -> Result<Tensor> {
        let (rows, cols) = self.dims(id);
        let g = self
            .grad(id)
            .ok_or_else(|| Error::Shape(format!("no gradient recorded for v{}", id.0)))?;
        let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
        Tensor::from_vec(shape, g.to_vec())
    }

    /// Copy retained leaf gradients into the `grad` slots of the tensors the
    /// leaves were bound from. Order must match the binding order.
    pub fn write_back_grads(&self, ids: &[ValueId], params: &mut [&mut Tensor]) -> Result<()> {
        if ids.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} ids vs {} params in write_back_grads",
                ids.len(),
                params.len()
            )));
        }
        for (id, p) in ids.iter().zip(params.iter_mut()) {
            let g = self
                .grad(*id)
                .ok_or_else(|| Error::Shape(format!("no gradient recorded for v{}", id.0)))?;
            p.set_grad(g.to_vec())?;
        }
        Ok(())
    }

    // ── operations ───────────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims {ka} vs {kb} (shapes {m}x{ka} and {kb}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), m, ka, n, &mut out);
        Ok(self.derived(m, n, out, Op::MatMul { a, b }))
    }

    fn elementwise_pair(&self, a: ValueId, b: ValueId, name: &str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape(format!(
                "{name} requires equal shapes, got {da:?} and {db:?}"
            )));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.elementwise_pair(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.derived(r, c, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.elementwise_pair(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.derived(r, c, out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (r, c) = self.elementwise_pair(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.derived(r, c, out, Op::Mul { a, b }))
    }

    /// Broadcast a `[1,n]` bias over the rows of `[m,n]`.
    pub fn add_row(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        let (br, bn) = self.dims(bias);
        if br != 1 || bn != n {
            return Err(Error::Shape(format!(
                "add_row bias must be 1x{n}, got {br}x{bn}"
            )));
        }
        let bv = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        Ok(self.derived(m, n, out, Op::AddRow { x, bias }))
    }

    pub fn mul_const(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let (r, cd) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        Ok(self.derived(r, cd, out, Op::MulConst { x, c }))
    }

    pub fn add_const(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        let (r, cd) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v + c).collect();
        Ok(self.derived(r, cd, out, Op::AddConst { x }))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        Ok(self.derived(r, c, out, Op::Relu { x }))
    }

    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| v * crate::numerics::rng::sigmoid(v))
            .collect();
        Ok(self.derived(r, c, out, Op::Silu { x }))
    }

    pub fn softplus(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        Ok(self.derived(r, c, out, Op::Softplus { x }))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| crate::numerics::rng::sigmoid(v))
            .collect();
        Ok(self.derived(r, c, out, Op::Sigmoid { x }))
    }

    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v.exp()).collect();
        Ok(self.derived(r, c, out, Op::Exp { x }))
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient passes through inside the
    /// closed interval and is zero outside.
    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if !(lo <= hi) {
            return Err(Error::Shape(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        Ok(self.derived(r, c, out, Op::Clamp { x, lo, hi }))
    }

    /// Row-wise layer normalization without learned affine parameters.
    pub fn layer_norm(&mut self, x: ValueId, eps: f64) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        if n == 0 {
            return Err(Error::Shape("layer_norm over empty rows".into()));
        }
        let mut out = vec![0.0; m * n];
        for (row_in, row_out) in self.value(x).chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mean = row_in.iter().sum::<f64>() / n as f64;
            let var = row_in.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mean) * inv;
            }
        }
        Ok(self.derived(m, n, out, Op::LayerNorm { x, eps }))
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s: f64 = self.value(x).iter().sum();
        Ok(self.derived(1, 1, vec![s], Op::SumAll { x }))
    }

    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.nodes[x.0].numel();
        if n == 0 {
            return Err(Error::Shape("mean_all of empty node".into()));
        }
        let s: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        Ok(self.derived(1, 1, vec![s], Op::MeanAll { x }))
    }

    /// Concatenate along columns: `[m,p] ++ [m,q] -> [m,p+q]`.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ma, na) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if ma != mb {
            return Err(Error::Shape(format!(
                "concat_cols row mismatch: {ma} vs {mb}"
            )));
        }
        let mut out = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            out.extend_from_slice(&self.value(a)[i * na..(i + 1) * na]);
            out.extend_from_slice(&self.value(b)[i * nb..(i + 1) * nb]);
        }
        Ok(self.derived(ma, na + nb, out, Op::ConcatCols { a, b }))
    }

    /// Column slice `[m, start..end)`.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} out of bounds for width {n}"
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.value(x)[i * n + start..i * n + end]);
        }
        Ok(self.derived(m, w, out, Op::SliceCols { x, start }))
    }

    // ── compositions ─────────────────────────────────────────────────

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Sum of squared entries.
    pub fn sum_sq(&mut self, x: ValueId) -> Result<ValueId> {
        let sq = self.mul(x, x)?;
        self.sum_all(sq)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Populates gradients for every
    /// differentiable leaf that influences the loss; reads them back with
    /// [`Tape::grad`] / [`Tape::grad_tensor`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: ln.numel() });
        }
        if !ln.data[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", ln.data[0])));
        }
        // Any stale input invalidates the whole replay.
        for node in &self.nodes[..=loss.0] {
            for (slot, p) in node.op.parents().into_iter().enumerate() {
                if let Some(p) = p {
                    if self.nodes[p.0].version != node.parent_versions[slot] {
                        return Err(Error::MutatedAfterRecord { id: p.0 });
                    }
                }
            }
        }

        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // leaf gradients are retained
            }
            let Some(g) = self.grads[i].take() else {
                continue; // not an ancestor of the loss
            };
            self.propagate(i, &g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                if let Some(g) = &self.grads[i] {
                    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient for v{i} at flat index {j}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: ValueId, contribution: &[f64]) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[target.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.dims(a);
                let (_, n) = self.dims(b);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt(g, self.value(b), m, n, k, &mut ga);
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn(self.value(a), g, m, k, n, &mut gb);
                    self.accumulate(b, &gb);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let ga: Vec<f64> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::AddRow { x, bias } => {
                self.accumulate(x, g);
                if self.nodes[bias.0].needs_grad {
                    let (_, n) = self.dims(bias);
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (gbj, gj) in gb.iter_mut().zip(row) {
                            *gbj += gj;
                        }
                    }
                    self.accumulate(bias, &gb);
                }
            }
            Op::MulConst { x, c } => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(x, &gx);
            }
            Op::AddConst { x } => self.accumulate(x, g),
            Op::Relu { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Silu { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| {
                        let s = crate::numerics::rng::sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Softplus { x } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| g * crate::numerics::rng::sigmoid(v))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[i].data.clone();
                let gx: Vec<f64> = g.iter().zip(&y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                self.accumulate(x, &gx);
            }
            Op::Exp { x } => {
                let y = self.nodes[i].data.clone();
                let gx: Vec<f64> = g.iter().zip(&y).map(|(g, &e)| g * e).collect();
                self.accumulate(x, &gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| if (lo..=hi).contains(&v) { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::LayerNorm { x, eps } => {
                let (m, n) = self.dims(x);
                let y = self.nodes[i].data.clone();
                let xin = self.value(x);
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    let xr = &xin[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gy_mean =
                        gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    let out = &mut gx[r * n..(r + 1) * n];
                    for j in 0..n {
                        out[j] = inv * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::SumAll { x } => {
                let n = self.nodes[x.0].numel();
                let gx = vec![g[0]; n];
                self.accumulate(x, &gx);
            }
            Op::MeanAll { x } => {
                let n = self.nodes[x.0].numel();
                let gx = vec![g[0] / n as f64; n];
                self.accumulate(x, &gx);
            }
            Op::ConcatCols { a, b } => {
                let (m, na) = self.dims(a);
                let (_, nb) = self.dims(b);
                if self.nodes[a.0].needs_grad {
                    let mut ga = Vec::with_capacity(m * na);
                    for i in 0..m {
                        ga.extend_from_slice(&g[i * (na + nb)..i * (na + nb) + na]);
                    }
                    self.accumulate(a, &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = Vec::with_capacity(m * nb);
                    for i in 0..m {
                        gb.extend_from_slice(&g[i * (na + nb) + na..(i + 1) * (na + nb)]);
                    }
                    self.accumulate(b, &gb);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(x);
                let w = self.nodes[i].cols;
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(x, &gx);
            }
        }
    }
}

// ── raw matrix kernels ───────────────────────────────────────────────

/// `out[m,n] = a[m,k] @ b[k,n]`; `out` must be zeroed by the caller.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] = a[m,n] @ b[k,n]^T`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
}

/// `out[k,n] = a[m,k]^T @ b[m,n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
