//! Gradient tape: operation recording and the reverse sweep.

use super::Tensor;
use crate::error::{Error, Result};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// One recorded primitive. Holds handles to the exact tensors involved plus
/// whatever forward state the backward rule needs.
enum Op {
    MatMul { a: Tensor, b: Tensor, out: Tensor },
    Transpose { x: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    Div { a: Tensor, b: Tensor, out: Tensor },
    Scale { x: Tensor, c: f64, out: Tensor },
    AddScalar { x: Tensor, out: Tensor },
    AddRow { x: Tensor, row: Tensor, out: Tensor },
    Sum { x: Tensor, out: Tensor },
    Mean { x: Tensor, out: Tensor },
    Norm { x: Tensor, out: Tensor },
    Log { x: Tensor, out: Tensor },
    Softmax { x: Tensor, out: Tensor },
    Gelu { x: Tensor, out: Tensor },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        out: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embed { table: Tensor, ids: Vec<usize>, out: Tensor },
    Row { x: Tensor, index: usize, out: Tensor },
    ColSlice { x: Tensor, start: usize, len: usize, out: Tensor },
    ColConcat { parts: Vec<Tensor>, out: Tensor },
    Reshape { x: Tensor, out: Tensor },
}

/// Records primitive operations for one forward episode.
///
/// Operations are recorded in execution order, which makes the record
/// topologically sorted by construction. [`Tape::backward`] consumes the
/// tape; recording or backpropagating through a consumed tape is a state
/// error.
pub struct Tape {
    id: u64,
    ops: RefCell<Vec<Op>>,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            ops: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    fn ensure_recording(&self) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::State(
                "tape already consumed by backward(); start a new tape for the next episode"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Inputs must be leaves or nodes of this tape; a node of another tape
    /// must be detached first so that stale graph identity cannot leak
    /// between episodes.
    fn check_input(&self, t: &Tensor) -> Result<()> {
        match t.tape_id() {
            Some(id) if id != self.id => Err(Error::Contract(
                "input tensor is a node of a different tape; detach() it first".into(),
            )),
            _ => Ok(()),
        }
    }

    fn emit(&self, data: Vec<f64>, shape: &[usize], build: impl FnOnce(Tensor) -> Op) -> Tensor {
        let out = Tensor::new(data, shape).expect("op output shape is valid");
        out.mark_node(self.id);
        self.ops.borrow_mut().push(build(out.clone()));
        out
    }

    // ---- primitive operations -------------------------------------------

    /// Matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(a)?;
        self.check_input(b)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(&a.data(), &b.data(), m, k, n);
        Ok(self.emit(data, &[m, n], |out| Op::MatMul { a: a.clone(), b: b.clone(), out }))
    }

    /// Explicit-copy transpose of a matrix.
    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let s = x.shape();
        if s.len() != 2 {
            return Err(Error::Dimension { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_raw(&x.data(), r, c);
        Ok(self.emit(data, &[c, r], |out| Op::Transpose { x: x.clone(), out }))
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        build: impl FnOnce(Tensor, Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(a)?;
        self.check_input(b)?;
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.emit(data, &sa, |out| build(a.clone(), b.clone(), out)))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise("sub", a, b, |x, y| x - y, |a, b, out| Op::Sub { a, b, out })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise("mul", a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise("div", a, b, |x, y| x / y, |a, b, out| Op::Div { a, b, out })
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let shape = x.shape();
        let data: Vec<f64> = x.data().iter().map(|&v| c * v).collect();
        Ok(self.emit(data, &shape, |out| Op::Scale { x: x.clone(), c, out }))
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let shape = x.shape();
        let data: Vec<f64> = x.data().iter().map(|&v| v + c).collect();
        Ok(self.emit(data, &shape, |out| Op::AddScalar { x: x.clone(), out }))
    }

    /// Broadcast-add a row vector `[c]` to every row of a matrix `[r×c]`.
    pub fn add_row(&self, x: &Tensor, row: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        self.check_input(row)?;
        let (sx, sr) = (x.shape(), row.shape());
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(Error::Dimension { op: "add_row", lhs: sx, rhs: sr });
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = x.data();
        let rd = row.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xd[i * c + j] + rd[j];
            }
        }
        Ok(self.emit(data, &[r, c], |out| Op::AddRow { x: x.clone(), row: row.clone(), out }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let s: f64 = x.data().iter().sum();
        Ok(self.emit(vec![s], &[1], |out| Op::Sum { x: x.clone(), out }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let n = x.numel() as f64;
        let s: f64 = x.data().iter().sum::<f64>() / n;
        Ok(self.emit(vec![s], &[1], |out| Op::Mean { x: x.clone(), out }))
    }

    /// Euclidean norm over all elements, as a scalar.
    pub fn norm(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let s: f64 = x.data().iter().map(|&v| v * v).sum::<f64>().sqrt();
        Ok(self.emit(vec![s], &[1], |out| Op::Norm { x: x.clone(), out }))
    }

    /// Elementwise natural log. The domain is strictly positive values;
    /// anything else is rejected rather than silently producing NaN.
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        if x.data().iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric("log requires strictly positive finite inputs".into()));
        }
        let shape = x.shape();
        let data: Vec<f64> = x.data().iter().map(|&v| v.ln()).collect();
        Ok(self.emit(data, &shape, |out| Op::Log { x: x.clone(), out }))
    }

    /// Temperature-scaled softmax over the last axis.
    ///
    /// Rows of the output sum to 1 within 1e-12; inputs are stabilized by
    /// max subtraction before exponentiation.
    pub fn softmax(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let scaled = if temperature == 1.0 { x.clone() } else { self.scale(x, 1.0 / temperature)? };
        self.ensure_recording()?;
        self.check_input(&scaled)?;
        let shape = scaled.shape();
        let cols = *shape.last().expect("tensors have positive rank");
        let rows = scaled.numel() / cols;
        let data = softmax_rows(&scaled.data(), rows, cols);
        Ok(self.emit(data, &shape, |out| Op::Softmax { x: scaled.clone(), out }))
    }

    /// Gaussian error linear unit (tanh form).
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let shape = x.shape();
        let data: Vec<f64> = x.data().iter().map(|&v| gelu_raw(v)).collect();
        Ok(self.emit(data, &shape, |out| Op::Gelu { x: x.clone(), out }))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        self.check_input(gain)?;
        self.check_input(bias)?;
        let (sx, sg, sb) = (x.shape(), gain.shape(), bias.shape());
        if sx.len() != 2 || sg.len() != 1 || sg[0] != sx[1] || sb != sg {
            return Err(Error::Dimension { op: "layer_norm", lhs: sx, rhs: sg });
        }
        let (r, c) = (sx[0], sx[1]);
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let rowv = &xd[i * c..(i + 1) * c];
            let mean = rowv.iter().sum::<f64>() / c as f64;
            let var = rowv.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (rowv[j] - mean) * is;
                xhat[i * c + j] = xh;
                data[i * c + j] = gd[j] * xh + bd[j];
            }
        }
        Ok(self.emit(data, &[r, c], |out| Op::LayerNorm {
            x: x.clone(),
            gain: gain.clone(),
            bias: bias.clone(),
            out,
            xhat,
            inv_std,
        }))
    }

    /// Row gather from an embedding table: `out[t] = table[ids[t]]`.
    pub fn embed(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(table)?;
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::Dimension { op: "embed", lhs: s, rhs: vec![] });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for table with {v} rows"
            )));
        }
        let td = table.data();
        let mut data = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            data[t * d..(t + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        Ok(self.emit(data, &[ids.len(), d], |out| Op::Embed {
            table: table.clone(),
            ids: ids.to_vec(),
            out,
        }))
    }

    /// Copy one row of a matrix out as a vector.
    pub fn row(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let s = x.shape();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Dimension { op: "row", lhs: s, rhs: vec![index] });
        }
        let c = s[1];
        let data = x.data()[index * c..(index + 1) * c].to_vec();
        Ok(self.emit(data, &[c], |out| Op::Row { x: x.clone(), index, out }))
    }

    /// Copy a contiguous block of columns out of a matrix.
    pub fn col_slice(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let s = x.shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::Dimension { op: "col_slice", lhs: s, rhs: vec![start, len] });
        }
        let (r, c) = (s[0], s[1]);
        let xd = x.data();
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        Ok(self.emit(data, &[r, len], |out| Op::ColSlice { x: x.clone(), start, len, out }))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn col_concat(&self, parts: &[Tensor]) -> Result<Tensor> {
        self.ensure_recording()?;
        if parts.is_empty() {
            return Err(Error::Parameter("col_concat needs at least one part".into()));
        }
        for p in parts {
            self.check_input(p)?;
        }
        let first = parts[0].shape();
        if first.len() != 2 {
            return Err(Error::Dimension { op: "col_concat", lhs: first, rhs: vec![] });
        }
        let r = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != r {
                return Err(Error::Dimension { op: "col_concat", lhs: first, rhs: s });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..r {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Ok(self.emit(data, &[r, total], |out| Op::ColConcat { parts: parts.to_vec(), out }))
    }

    /// Same buffer, new shape (explicit copy; element count must match).
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.ensure_recording()?;
        self.check_input(x)?;
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension { op: "reshape", lhs: x.shape(), rhs: shape.to_vec() });
        }
        let data = x.value();
        Ok(self.emit(data, shape, |out| Op::Reshape { x: x.clone(), out }))
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Backpropagate from a scalar loss node of this tape.
    ///
    /// Every participating tensor (trainable leaf or intermediate node)
    /// receives a freshly zeroed gradient buffer before accumulation, so
    /// gradients never leak across episodes. Constants are skipped entirely.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::State(
                "backward() already ran on this tape; one backward pass per episode".into(),
            ));
        }
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if loss.tape_id() != Some(self.id) {
            return Err(Error::Contract(
                "loss tensor is not a node of this tape".into(),
            ));
        }
        self.consumed.set(true);

        let ops = self.ops.borrow();
        let mut seen = HashSet::new();
        for op in ops.iter() {
            for t in op_tensors(op) {
                if seen.insert(t.key()) && t.participates() {
                    t.init_zero_grad();
                }
            }
        }
        loss.accumulate_grad(&[1.0]);

        for op in ops.iter().rev() {
            backward_op(op);
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-12;

fn op_tensors(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::MatMul { a, b, out }
        | Op::Add { a, b, out }
        | Op::Sub { a, b, out }
        | Op::Mul { a, b, out }
        | Op::Div { a, b, out } => vec![a, b, out],
        Op::AddRow { x, row, out } => vec![x, row, out],
        Op::LayerNorm { x, gain, bias, out, .. } => vec![x, gain, bias, out],
        Op::Transpose { x, out }
        | Op::Scale { x, out, .. }
        | Op::AddScalar { x, out }
        | Op::Sum { x, out }
        | Op::Mean { x, out }
        | Op::Norm { x, out }
        | Op::Log { x, out }
        | Op::Softmax { x, out }
        | Op::Gelu { x, out }
        | Op::Row { x, out, .. }
        | Op::ColSlice { x, out, .. }
        | Op::Reshape { x, out } => vec![x, out],
        Op::Embed { table, out, .. } => vec![table, out],
        Op::ColConcat { parts, out } => {
            let mut v: Vec<&Tensor> = parts.iter().collect();
            v.push(out);
            v
        }
    }
}

fn backward_op(op: &Op) {
    match op {
        Op::MatMul { a, b, out } => {
            let g = out.grad_or_zeros();
            let (sa, sb) = (a.shape(), b.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let da = matmul_nt(&g, &b.data(), m, n, k);
            let db = matmul_tn(&a.data(), &g, m, k, n);
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Transpose { x, out } => {
            let g = out.grad_or_zeros();
            let s = x.shape();
            // g has shape [c, r]; transpose it back to [r, c].
            x.accumulate_grad(&transpose_raw(&g, s[1], s[0]));
        }
        Op::Add { a, b, out } => {
            let g = out.grad_or_zeros();
            a.accumulate_grad(&g);
            b.accumulate_grad(&g);
        }
        Op::Sub { a, b, out } => {
            let g = out.grad_or_zeros();
            a.accumulate_grad(&g);
            let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
            b.accumulate_grad(&neg);
        }
        Op::Mul { a, b, out } => {
            let g = out.grad_or_zeros();
            let da: Vec<f64> = g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
            let db: Vec<f64> = g.iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).collect();
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Div { a, b, out } => {
            let g = out.grad_or_zeros();
            let da: Vec<f64> = g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv / bv).collect();
            let db: Vec<f64> = {
                let od = out.data();
                let bd = b.data();
                g.iter()
                    .zip(od.iter().zip(bd.iter()))
                    .map(|(&gv, (&ov, &bv))| -gv * ov / bv)
                    .collect()
            };
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::Scale { x, c, out } => {
            let g = out.grad_or_zeros();
            let dx: Vec<f64> = g.iter().map(|&v| c * v).collect();
            x.accumulate_grad(&dx);
        }
        Op::AddScalar { x, out } => {
            x.accumulate_grad(&out.grad_or_zeros());
        }
        Op::AddRow { x, row, out } => {
            let g = out.grad_or_zeros();
            x.accumulate_grad(&g);
            let c = row.numel();
            let r = g.len() / c;
            let mut dr = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    dr[j] += g[i * c + j];
                }
            }
            row.accumulate_grad(&dr);
        }
        Op::Sum { x, out } => {
            let g = out.grad_or_zeros()[0];
            x.accumulate_grad(&vec![g; x.numel()]);
        }
        Op::Mean { x, out } => {
            let g = out.grad_or_zeros()[0] / x.numel() as f64;
            x.accumulate_grad(&vec![g; x.numel()]);
        }
        Op::Norm { x, out } => {
            let nv = out.item();
            if nv > 0.0 {
                let g = out.grad_or_zeros()[0];
                let dx: Vec<f64> = x.data().iter().map(|&v| g * v / nv).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Log { x, out } => {
            let g = out.grad_or_zeros();
            let dx: Vec<f64> = g.iter().zip(x.data().iter()).map(|(&gv, &xv)| gv / xv).collect();
            x.accumulate_grad(&dx);
        }
        Op::Softmax { x, out } => {
            let g = out.grad_or_zeros();
            let od = out.data();
            let shape = x.shape();
            let c = *shape.last().expect("positive rank");
            let r = g.len() / c;
            let mut dx = vec![0.0; g.len()];
            for i in 0..r {
                let s = &od[i * c..(i + 1) * c];
                let gr = &g[i * c..(i + 1) * c];
                let dot: f64 = s.iter().zip(gr).map(|(&sv, &gv)| sv * gv).sum();
                for j in 0..c {
                    dx[i * c + j] = s[j] * (gr[j] - dot);
                }
            }
            drop(od);
            x.accumulate_grad(&dx);
        }
        Op::Gelu { x, out } => {
            let g = out.grad_or_zeros();
            let dx: Vec<f64> = g
                .iter()
                .zip(x.data().iter())
                .map(|(&gv, &xv)| gv * gelu_grad(xv))
                .collect();
            x.accumulate_grad(&dx);
        }
        Op::LayerNorm { x, gain, bias, out, xhat, inv_std } => {
            let g = out.grad_or_zeros();
            let c = gain.numel();
            let r = g.len() / c;
            let gd = gain.data();
            let mut dx = vec![0.0; g.len()];
            let mut dgain = vec![0.0; c];
            let mut dbias = vec![0.0; c];
            for i in 0..r {
                let gr = &g[i * c..(i + 1) * c];
                let xh = &xhat[i * c..(i + 1) * c];
                let mut dxh = vec![0.0; c];
                for j in 0..c {
                    dxh[j] = gr[j] * gd[j];
                    dgain[j] += gr[j] * xh[j];
                    dbias[j] += gr[j];
                }
                let m1: f64 = dxh.iter().sum::<f64>() / c as f64;
                let m2: f64 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[i * c + j] = inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
                }
            }
            drop(gd);
            x.accumulate_grad(&dx);
            gain.accumulate_grad(&dgain);
            bias.accumulate_grad(&dbias);
        }
        Op::Embed { table, ids, out } => {
            let g = out.grad_or_zeros();
            let d = g.len() / ids.len();
            let mut dt = vec![0.0; table.numel()];
            for (t, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[t * d + j];
                }
            }
            table.accumulate_grad(&dt);
        }
        Op::Row { x, index, out } => {
            let g = out.grad_or_zeros();
            let c = g.len();
            let mut dx = vec![0.0; x.numel()];
            dx[index * c..(index + 1) * c].copy_from_slice(&g);
            x.accumulate_grad(&dx);
        }
        Op::ColSlice { x, start, len, out } => {
            let g = out.grad_or_zeros();
            let s = x.shape();
            let (r, c) = (s[0], s[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            x.accumulate_grad(&dx);
        }
        Op::ColConcat { parts, out } => {
            let g = out.grad_or_zeros();
            let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let r = g.len() / total;
            let mut offset = 0;
            for p in parts {
                let w = p.shape()[1];
                let mut dp = vec![0.0; r * w];
                for i in 0..r {
                    dp[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                }
                p.accumulate_grad(&dp);
                offset += w;
            }
        }
        Op::Reshape { x, out } => {
            x.accumulate_grad(&out.grad_or_zeros());
        }
    }
}

// ---- raw kernels ----------------------------------------------------------

/// `A[m×k] · B[k×n]`, ikj loop order.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `A[m×n] · B[k×n]ᵀ -> [m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// `A[m×k]ᵀ · G[m×n] -> [k×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let rowv = &x[i * cols..(i + 1) * cols];
        let max = rowv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (rowv[j] - max).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu_raw(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.value(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let tape = Tape::new();
        let a = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.value(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::new(vec![0.0; 6], &[2, 3]).unwrap();
        let b = Tensor::new(vec![0.0; 4], &[2, 2]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "got: {msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_squared() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = tape.scale(&x, 2.0).unwrap();
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn double_backward_is_a_state_error() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn recording_after_backward_is_a_state_error() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.sum(&x).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn foreign_tape_node_is_rejected() {
        let t1 = Tape::new();
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = t1.scale(&x, 2.0).unwrap();
        let t2 = Tape::new();
        let err = t2.scale(&y, 2.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // detaching makes it usable as a constant
        assert!(t2.scale(&y.detach(), 2.0).is_ok());
    }

    #[test]
    fn non_participating_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let dead = Tensor::param(vec![4.0], &[1]).unwrap();
        let _unused = tape.scale(&dead, 3.0).unwrap(); // dead branch
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(dead.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2.0, 3.0], &[2]).unwrap();
        let c = Tensor::new(vec![5.0, 7.0], &[2]).unwrap();
        let prod = tape.mul(&x, &c).unwrap();
        let loss = tape.sum(&prod).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, 7.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let tape = Tape::new();
        let x = Tensor::new(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let s = tape.softmax(&x, 1.0).unwrap();
        for v in s.value() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = Tensor::new(vec![2.0f64.ln(), 0.0], &[2]).unwrap();
        let sy = tape.softmax(&y, 1.0).unwrap();
        let val = sy.value();
        assert!((val[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((val[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_temperature_smooths() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1.0, 0.0, 0.0], &[3]).unwrap();
        let s = tape.softmax(&x, 1.1).unwrap();
        let v = s.value();
        let sum: f64 = v.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(v[0] > v[1] && (v[1] - v[2]).abs() < 1e-15);
        // exact values from e^{1/1.1} vs e^0
        let e = (1.0f64 / 1.1).exp();
        assert!((v[0] - e / (e + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let tape = Tape::new();
        let x = Tensor::new(vec![0.0], &[1]).unwrap();
        assert!(matches!(tape.softmax(&x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(tape.softmax(&x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let tape = Tape::new();
            let a = Tensor::new((0..12).map(|i| (i as f64) * 0.37 - 2.0).collect(), &[3, 4])
                .unwrap();
            let b = Tensor::new((0..8).map(|i| (i as f64) * -0.21 + 1.0).collect(), &[4, 2])
                .unwrap();
            let m = tape.matmul(&a, &b).unwrap();
            let s = tape.softmax(&m, 1.3).unwrap();
            s.value()
        };
        let v1 = run();
        let v2 = run();
        assertys_eq_bits(&v1, &v2);
    }

    fn assertys_eq_bits(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gradient_accumulates_over_multiple_consumers() {
        // loss = 2x + 3x => dx = 5
        let tape = Tape::new();
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let a = tape.scale(&x, 2.0).unwrap();
        let b = tape.scale(&x, 3.0).unwrap();
        let s = tape.add(&a, &b).unwrap();
        let loss = tape.sum(&s).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = Tensor::new(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(tape.log(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn embed_rejects_out_of_range_id() {
        let tape = Tape::new();
        let table = Tensor::new(vec![0.0; 8], &[4, 2]).unwrap();
        assert!(matches!(tape.embed(&table, &[0, 4]), Err(Error::Input(_))));
    }

    #[test]
    fn col_slice_concat_roundtrip() {
        let tape = Tape::new();
        let x = Tensor::new((0..12).map(|i| i as f64).collect(), &[3, 4]).unwrap();
        let left = tape.col_slice(&x, 0, 2).unwrap();
        let right = tape.col_slice(&x, 2, 2).unwrap();
        let back = tape.col_concat(&[left, right]).unwrap();
        assert_eq!(back.value(), x.value());
    }
}
