//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Operations execute eagerly and record themselves in order, so the tape is
//! topological by construction: every node's inputs precede it. A single
//! reverse sweep from a scalar output visits each node exactly once and
//! accumulates vector-Jacobian products into every grad-enabled node,
//! including intermediate activations, not just leaves.
//!
//! One tape is single-threaded; independent tapes may run concurrently and
//! share read-only tensors.

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    /// `x[m×n] + bias[n]` broadcast over rows.
    AddRow { x: Var, bias: Var },
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    /// Row-wise softmax; masked entries were excluded and are exactly 0 in
    /// the stored output, which is all backward needs.
    SoftmaxRows { x: Var },
    SliceCols { x: Var, start: usize, width: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    /// Row gather: `out[i] = table[ids[i]]`. Duplicate ids allowed.
    GatherRows { table: Var, ids: Vec<usize> },
    /// Sum of selected entries of a 2-D tensor; the scalar reduction used to
    /// pool answer-token logits.
    GatherSum { x: Var, coords: Vec<(usize, usize)> },
    SumAll { x: Var },
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropyMean { logits: Var, targets: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of the backward target with respect to `v`; errors if `v`
    /// did not participate (not grad-enabled or not on the path).
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| contract(format!("no gradient recorded for node {}", v.0)))
    }
}

/// Linear record of primitive operations with eager evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Inserts a tensor as a leaf. Its `grad_enabled` flag decides whether
    /// backward accumulates into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        debug_assert!(value.all_finite(), "tape op produced non-finite values");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn out_enabled(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].value.grad_enabled())
    }

    fn result(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Var {
        let mut value = Tensor::new(shape, data).expect("internal shape bookkeeping");
        value.set_grad_enabled(self.out_enabled(inputs));
        self.push(op, value)
    }

    fn same_shape(&self, context: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context,
                expected: format!("{sa:?}"),
                got: format!("{sb:?}"),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.result(Op::Add { a, b }, shape, data, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.result(Op::Sub { a, b }, shape, data, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        Ok(self.result(Op::Mul { a, b }, shape, data, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.result(Op::Scale { x, factor }, shape, data, &[x])
    }

    /// Adds a length-`n` bias vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::ShapeMismatch {
                context: "add_row",
                expected: format!("[{n}]"),
                got: format!("{:?}", self.value(bias).shape()),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        Ok(self.result(Op::AddRow { x, bias }, vec![m, n], data, &[x, bias]))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: format!("inner dimension {ka}"),
                got: format!("{kb}"),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        Ok(self.result(Op::Matmul { a, b }, vec![m, n], data, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        Ok(self.result(Op::Transpose { x }, vec![n, m], data, &[x]))
    }

    // ── Nonlinearities and normalization ────────────────────────────────

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.result(Op::Gelu { x }, shape, data, &[x])
    }

    /// Per-row layer normalization with affine gain/bias over the last
    /// dimension of an `m×d` matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.value(v).shape() != [d] {
                return Err(Error::ShapeMismatch {
                    context: "layer_norm",
                    expected: format!("{name} of shape [{d}]"),
                    got: format!("{:?}", self.value(v).shape()),
                });
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let (mean, inv_std) = row_norm_stats(row, eps);
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        Ok(self.result(Op::LayerNorm { x, gain, bias, eps }, vec![m, d], data, &[x, gain, bias]))
    }

    /// Numerically stabilized row-wise softmax. Masked entries come out
    /// exactly 0; every row must keep at least one unmasked entry.
    pub fn softmax_rows(&mut self, x: Var, masked: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if let Some(mk) = masked {
            if mk.len() != m * n {
                return Err(Error::ShapeMismatch {
                    context: "softmax_rows",
                    expected: format!("mask of {} entries", m * n),
                    got: format!("{}", mk.len()),
                });
            }
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row_into(
                &xv[i * n..(i + 1) * n],
                masked.map(|mk| &mk[i * n..(i + 1) * n]),
                &mut data[i * n..(i + 1) * n],
            )
            .map_err(|_| Error::DegenerateRow { row: i })?;
        }
        Ok(self.result(Op::SoftmaxRows { x }, vec![m, n], data, &[x]))
    }

    // ── Structural ──────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + width > n || width == 0 {
            return Err(contract(format!(
                "slice_cols window {start}..{} out of 0..{n}",
                start + width
            )));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&xv[i * n + start..i * n + start + width]);
        }
        Ok(self.result(Op::SliceCols { x, start, width }, vec![m, width], data, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_cols needs at least one part"));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols",
                    expected: format!("{m} rows"),
                    got: format!("{pm}"),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for i in 0..m {
                data[i * n + offset..i * n + offset + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.result(Op::ConcatCols { parts: parts.to_vec() }, vec![m, n], data, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat_rows needs at least one part"));
        }
        let n = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    context: "concat_rows",
                    expected: format!("{n} columns"),
                    got: format!("{pn}"),
                });
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.result(Op::ConcatRows { parts: parts.to_vec() }, vec![m, n], data, parts))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(contract("gather_rows needs at least one row id"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("gather_rows id {bad} out of 0..{rows}")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let op = Op::GatherRows { table, ids: ids.to_vec() };
        Ok(self.result(op, vec![ids.len(), d], data, &[table]))
    }

    /// Scalar sum of the selected `(row, col)` entries of a 2-D tensor.
    pub fn gather_sum(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if coords.is_empty() {
            return Err(contract("gather_sum needs at least one coordinate"));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(contract(format!("gather_sum coordinate ({r},{c}) out of {m}x{n}")));
        }
        let xv = self.value(x).data();
        let mut total = 0.0;
        for &(r, c) in coords {
            total += xv[r * n + c];
        }
        let op = Op::GatherSum { x, coords: coords.to_vec() };
        Ok(self.result(op, vec![1], vec![total], &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        self.result(Op::SumAll { x }, vec![1], vec![total], &[x])
    }

    /// Mean negative log-likelihood of one target class per row.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(contract(format!(
                "cross_entropy_mean: {m} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(contract(format!("cross_entropy_mean target {bad} out of 0..{n}")));
        }
        let xv = self.value(logits).data();
        let mut probs = vec![0.0; n];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            softmax_row_into(&xv[i * n..(i + 1) * n], None, &mut probs)
                .map_err(|_| Error::DegenerateRow { row: i })?;
            loss -= probs[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= m as f64;
        let op = Op::CrossEntropyMean { logits, targets: targets.to_vec() };
        Ok(self.result(op, vec![1], vec![loss], &[logits]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar output. Returns the gradient of
    /// `output` with respect to every grad-enabled node that feeds it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(contract(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(output).shape()
            )));
        }
        if !self.value(output).grad_enabled() {
            return Err(contract(
                "backward target does not depend on any grad-enabled tensor",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    let mut t = Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape");
                    t.set_grad_enabled(false);
                    t
                })
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].value.grad_enabled() {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => grads[v.0] = Some(contribution.to_vec()),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da = zip_map(g, self.value(*b).data(), |x, y| x * y);
                self.accumulate(grads, *a, &da);
                let db = zip_map(g, self.value(*a).data(), |x, y| x * y);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, g);
                let (m, n) = self.value(*x).dims2().expect("recorded as 2-D");
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
                self.accumulate(grads, *bias, &db);
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2().expect("recorded as 2-D");
                let n = self.value(*b).shape()[1];
                // dA = g @ B^T
                let bv = self.value(*b).data();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * bv[p * n + j];
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                // dB = A^T @ g
                let av = self.value(*a).data();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                self.accumulate(grads, *b, &db);
            }
            Op::Transpose { x } => {
                let (m, n) = self.value(*x).dims2().expect("recorded as 2-D");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::Gelu { x } => {
                let dx = zip_map(g, self.value(*x).data(), |gi, xi| gi * gelu_prime(xi));
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, d) = self.value(*x).dims2().expect("recorded as 2-D");
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..m {
                    let row = &xv[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let (mean, inv_std) = row_norm_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    // h = dL/dxhat
                    let h: Vec<f64> = grow.iter().zip(gv).map(|(gi, wi)| gi * wi).collect();
                    let h_mean = h.iter().sum::<f64>() / d as f64;
                    let hx_mean =
                        h.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = inv_std * (h[j] - h_mean - xhat[j] * hx_mean);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = self.value(*x).dims2().expect("recorded as 2-D");
                let y = self.nodes[id].value.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        // Masked entries have y == 0 and receive no gradient.
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SliceCols { x, start, width } => {
                let (m, n) = self.value(*x).dims2().expect("recorded as 2-D");
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..*width {
                        dx[i * n + start + j] = g[i * width + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatCols { parts } => {
                let m = self.value(parts[0]).dims2().expect("recorded as 2-D").0;
                let n: usize = parts
                    .iter()
                    .map(|&p| self.value(p).shape()[1])
                    .sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = vec![0.0; m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * n + offset..i * n + offset + w]);
                    }
                    self.accumulate(grads, p, &dp);
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + numel]);
                    offset += numel;
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, d) = self.value(*table).dims2().expect("recorded as 2-D");
                let mut dt = vec![0.0; rows * d];
                for (i, &id_) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id_ * d + j] += g[i * d + j];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::GatherSum { x, coords } => {
                let (m, n) = self.value(*x).dims2().expect("recorded as 2-D");
                let mut dx = vec![0.0; m * n];
                for &(r, c) in coords {
                    dx[r * n + c] += g[0];
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SumAll { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(grads, *x, &dx);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let (m, n) = self.value(*logits).dims2().expect("recorded as 2-D");
                let xv = self.value(*logits).data();
                let scale = g[0] / m as f64;
                let mut dx = vec![0.0; m * n];
                let mut probs = vec![0.0; n];
                for (i, &t) in targets.iter().enumerate() {
                    softmax_row_into(&xv[i * n..(i + 1) * n], None, &mut probs)
                        .expect("unmasked row cannot degenerate");
                    for j in 0..n {
                        dx[i * n + j] = (probs[j] - if j == t { 1.0 } else { 0.0 }) * scale;
                    }
                }
                self.accumulate(grads, *logits, &dx);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Stabilized softmax of one row into `out`. Masked entries are written as
/// exactly 0. Fails when the row has no unmasked entry.
fn softmax_row_into(row: &[f64], masked: Option<&[bool]>, out: &mut [f64]) -> std::result::Result<(), ()> {
    let is_masked = |j: usize| masked.map_or(false, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if !is_masked(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut denom = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if is_masked(j) {
            out[j] = 0.0;
        } else {
            let e = (v - max).exp();
            out[j] = e;
            denom += e;
        }
    }
    for v in out.iter_mut() {
        *v /= denom;
    }
    Ok(())
}

const GELU_COEF: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Builds an `s×s` causal mask: entry `(i, j)` is masked when `j > i`.
pub fn causal_mask(s: usize) -> Vec<bool> {
    let mut mask = vec![false; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            mask[i * s + j] = true;
        }
    }
    mask
}
