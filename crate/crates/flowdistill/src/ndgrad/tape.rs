//! Wengert-tape reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass into a
//! linear arena. [`Tape::backward`] replays the arena in reverse, accumulating
//! adjoints only along nodes that can reach a differentiable leaf. Operations
//! validate shapes up front and reject non-finite outputs immediately, naming
//! the offending primitive.

use super::kernels;
use super::params::ParamVector;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// (n,m) matrix plus a length-m row vector broadcast over rows.
    AddRow(usize, usize),
    MatMul(usize, usize),
    Silu(usize),
    Tanh(usize),
    Square(usize),
    /// Elementwise max(x, c).
    ClampMin(usize, f64),
    Scale(usize, f64),
    AddScalar(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Horizontal concatenation of rank-2 inputs with equal row counts.
    ConcatCols(Vec<usize>),
    /// Row lookup into a (c,d) table; backward scatter-adds into the table.
    GatherRows(usize, Vec<usize>),
    /// (n,m) -> (n,) sums over columns per row.
    RowSum(usize),
    StopGrad,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), requires: Vec::new() }
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input node; backward never propagates into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    /// `None` when no gradient reached the node.
    pub fn gradient(&self, v: Var, grads: &Gradients) -> Option<Tensor> {
        grads.0[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.vals[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.vals.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.vals.len() - 1)
    }

    fn finished(&mut self, op_name: &'static str, value: Tensor, op: Op, requires: bool) -> Result<Var> {
        if let Some(bad) = value.first_non_finite() {
            return Err(Error::numeric(op_name, format!("produced non-finite value {bad}")));
        }
        Ok(self.push(value, op, requires))
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::contract(
                "tape.add",
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.req(&[a.0, b.0]);
        self.finished("tape.add", out, Op::Add(a.0, b.0), requires)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::contract(
                "tape.sub",
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.req(&[a.0, b.0]);
        self.finished("tape.sub", out, Op::Sub(a.0, b.0), requires)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::contract(
                "tape.mul",
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.req(&[a.0, b.0]);
        self.finished("tape.mul", out, Op::Mul(a.0, b.0), requires)
    }

    /// (n,m) + row vector of length m, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (&self.vals[a.0], &self.vals[row.0]);
        if ta.rank() != 2 || tr.rank() != 1 || ta.cols() != tr.len() {
            return Err(Error::contract(
                "tape.add_row",
                format!("need (n,m) + (m,), got {:?} + {:?}", ta.shape(), tr.shape()),
            ));
        }
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.req(&[a.0, row.0]);
        self.finished("tape.add_row", out, Op::AddRow(a.0, row.0), requires)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::contract(
                "tape.matmul",
                format!("incompatible shapes {:?} @ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; n * m];
        kernels::matmul(ta.data(), tb.data(), &mut data, n, k, m);
        let out = Tensor::new(vec![n, m], data)?;
        let requires = self.req(&[a.0, b.0]);
        self.finished("tape.matmul", out, Op::MatMul(a.0, b.0), requires)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| kernels::silu(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.silu", out, Op::Silu(a.0), requires)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.tanh", out, Op::Tanh(a.0), requires)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| x * x).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.square", out, Op::Square(a.0), requires)
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| x.max(c)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.clamp_min", out, Op::ClampMin(a.0, c), requires)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.scale", out, Op::Scale(a.0, c), requires)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.vals[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| x + c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let requires = self.requires[a.0];
        self.finished("tape.add_scalar", out, Op::AddScalar(a.0), requires)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let s: f64 = ta.data().iter().sum();
        let requires = self.requires[a.0];
        self.finished("tape.sum_all", Tensor::scalar(s), Op::SumAll(a.0), requires)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.is_empty() {
            return Err(Error::contract("tape.mean_all", "mean of empty tensor"));
        }
        let s: f64 = ta.data().iter().sum();
        let out = Tensor::scalar(s / ta.len() as f64);
        let requires = self.requires[a.0];
        self.finished("tape.mean_all", out, Op::MeanAll(a.0), requires)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("tape.concat_cols", "no inputs"));
        }
        let n = self.vals[parts[0].0].rows();
        let mut total_cols = 0;
        for p in parts {
            let t = &self.vals[p.0];
            if t.rank() != 2 || t.rows() != n {
                return Err(Error::contract(
                    "tape.concat_cols",
                    format!("all inputs must be rank 2 with {} rows, got {:?}", n, t.shape()),
                ));
            }
            total_cols += t.cols();
        }
        let mut data = vec![0.0; n * total_cols];
        let mut col_off = 0;
        for p in parts {
            let t = &self.vals[p.0];
            let m = t.cols();
            for i in 0..n {
                data[i * total_cols + col_off..i * total_cols + col_off + m]
                    .copy_from_slice(t.row(i));
            }
            col_off += m;
        }
        let out = Tensor::new(vec![n, total_cols], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let requires = self.req(&ids);
        self.finished("tape.concat_cols", out, Op::ConcatCols(ids), requires)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = &self.vals[table.0];
        if tt.rank() != 2 {
            return Err(Error::contract("tape.gather_rows", "table must be rank 2"));
        }
        let (c, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::contract(
                "tape.gather_rows",
                format!("index {bad} out of range for table with {c} rows"),
            ));
        }
        let mut data = vec![0.0; idx.len() * d];
        for (i, &r) in idx.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(tt.row(r));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let requires = self.requires[table.0];
        self.finished("tape.gather_rows", out, Op::GatherRows(table.0, idx.to_vec()), requires)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 {
            return Err(Error::contract("tape.row_sum", "input must be rank 2"));
        }
        let data: Vec<f64> = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let out = Tensor::vector(data);
        let requires = self.requires[a.0];
        self.finished("tape.row_sum", out, Op::RowSum(a.0), requires)
    }

    /// Identity on values; gradients never flow past it.
    pub fn stop_grad(&mut self, a: Var) -> Result<Var> {
        let out = self.vals[a.0].clone();
        self.finished("tape.stop_grad", out, Op::StopGrad, false)
    }

    /// Reverse pass from a scalar output. Returns the adjoint table; read
    /// individual gradients with [`Tape::gradient`].
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.vals[output.0].rank() != 0 {
            return Err(Error::contract(
                "tape.backward",
                format!("output must be a scalar, shape is {:?}", self.vals[output.0].shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            if !self.requires[id] {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.iter().copied().find(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        "tape.backward",
                        format!("non-finite adjoint {bad} at node {id}"),
                    ));
                }
            }
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn slot<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            target: usize,
            len: usize,
        ) -> &'a mut [f64] {
            grads[target].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
        }
        macro_rules! slot {
            ($target:expr) => {
                slot(grads, $target, self.vals[$target].len())
            };
        }

        match &self.ops[id] {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.requires[*a] {
                    for (x, &d) in slot!(*a).iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if self.requires[*b] {
                    for (x, &d) in slot!(*b).iter_mut().zip(g) {
                        *x += d;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires[*a] {
                    for (x, &d) in slot!(*a).iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if self.requires[*b] {
                    for (x, &d) in slot!(*b).iter_mut().zip(g) {
                        *x -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires[*a] {
                    let vb = self.vals[*b].data();
                    for ((x, &d), &v) in slot!(*a).iter_mut().zip(g).zip(vb) {
                        *x += d * v;
                    }
                }
                if self.requires[*b] {
                    let va = self.vals[*a].data();
                    for ((x, &d), &v) in slot!(*b).iter_mut().zip(g).zip(va) {
                        *x += d * v;
                    }
                }
            }
            Op::AddRow(a, r) => {
                let m = self.vals[*r].len();
                if self.requires[*a] {
                    for (x, &d) in slot!(*a).iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if self.requires[*r] {
                    let gr = slot!(*r);
                    for chunk in g.chunks(m) {
                        for (x, &d) in gr.iter_mut().zip(chunk) {
                            *x += d;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let m = self.vals[*b].cols();
                if self.requires[*a] {
                    let vb = self.vals[*b].data();
                    kernels::matmul_nt_acc(g, vb, slot!(*a), n, k, m);
                }
                if self.requires[*b] {
                    let va = self.vals[*a].data();
                    kernels::matmul_tn_acc(va, g, slot!(*b), n, k, m);
                }
            }
            Op::Silu(a) => {
                if self.requires[*a] {
                    let va = self.vals[*a].data();
                    for ((x, &d), &v) in slot!(*a).iter_mut().zip(g).zip(va) {
                        *x += d * kernels::silu_deriv(v);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.requires[*a] {
                    let vo = self.vals[id].data();
                    for ((x, &d), &y) in slot!(*a).iter_mut().zip(g).zip(vo) {
                        *x += d * (1.0 - y * y);
                    }
                }
            }
            Op::Square(a) => {
                if self.requires[*a] {
                    let va = self.vals[*a].data();
                    for ((x, &d), &v) in slot!(*a).iter_mut().zip(g).zip(va) {
                        *x += d * 2.0 * v;
                    }
                }
            }
            Op::ClampMin(a, c) => {
                if self.requires[*a] {
                    let va = self.vals[*a].data();
                    let c = *c;
                    for ((x, &d), &v) in slot!(*a).iter_mut().zip(g).zip(va) {
                        if v > c {
                            *x += d;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires[*a] {
                    let c = *c;
                    for (x, &d) in slot!(*a).iter_mut().zip(g) {
                        *x += d * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if self.requires[*a] {
                    for (x, &d) in slot!(*a).iter_mut().zip(g) {
                        *x += d;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.requires[*a] {
                    let d = g[0];
                    for x in slot!(*a).iter_mut() {
                        *x += d;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.requires[*a] {
                    let d = g[0] / self.vals[*a].len() as f64;
                    for x in slot!(*a).iter_mut() {
                        *x += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.vals[id].rows();
                let total = self.vals[id].cols();
                let mut col_off = 0;
                for &p in parts {
                    let m = self.vals[p].cols();
                    if self.requires[p] {
                        let gp = slot!(p);
                        for i in 0..n {
                            let src = &g[i * total + col_off..i * total + col_off + m];
                            for (x, &d) in gp[i * m..(i + 1) * m].iter_mut().zip(src) {
                                *x += d;
                            }
                        }
                    }
                    col_off += m;
                }
            }
            Op::GatherRows(table, idx) => {
                if self.requires[*table] {
                    let d = self.vals[*table].cols();
                    let gt = slot!(*table);
                    for (i, &r) in idx.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        for (x, &dv) in gt[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *x += dv;
                        }
                    }
                }
            }
            Op::RowSum(a) => {
                if self.requires[*a] {
                    let m = self.vals[*a].cols();
                    let ga = slot!(*a);
                    for (i, &d) in g.iter().enumerate() {
                        for x in ga[i * m..(i + 1) * m].iter_mut() {
                            *x += d;
                        }
                    }
                }
            }
            Op::StopGrad => {}
        }
    }
}

/// Adjoint table produced by [`Tape::backward`].
pub struct Gradients(Vec<Option<Vec<f64>>>);

/// Evaluate a scalar loss of a [`ParamVector`] and return its value together
/// with the gradient. The closure receives the tape and one differentiable
/// leaf per layout entry, in layout order. The loss is evaluated exactly once
/// forward and once backward.
pub fn grad<F>(loss_fn: F, at: &ParamVector) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = at
        .layout()
        .entries()
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let t = Tensor::new(entry.shape.clone(), at.slice(i).to_vec()).expect("layout shape");
            tape.leaf(t)
        })
        .collect();

    let out = loss_fn(&mut tape, &leaves)?;
    let value = tape.value(out).item().map_err(|_| {
        Error::contract("ndgrad.grad", "loss function must return a scalar node")
    })?;
    let grads = tape.backward(out)?;

    let mut flat = vec![0.0; at.len()];
    for (i, leaf) in leaves.iter().enumerate() {
        if let Some(g) = tape.gradient(*leaf, &grads) {
            let (lo, hi) = at.layout().range(i);
            flat[lo..hi].copy_from_slice(g.data());
        }
    }
    Ok((value, ParamVector::from_flat(at.layout_arc(), flat)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{ParamLayout, ParamVector};
    use std::sync::Arc;

    fn single_layout(name: &str, shape: Vec<usize>) -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(vec![(name.to_string(), shape)]).unwrap())
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(w) = mean((w * w)) for w = [1, 2, 3]: df/dw_i = 2 w_i / 3.
        let layout = single_layout("w", vec![3]);
        let p = ParamVector::from_flat(layout, vec![1.0, 2.0, 3.0]).unwrap();
        let (val, g) = grad(
            |tape, leaves| {
                let sq = tape.square(leaves[0])?;
                tape.mean_all(sq)
            },
            &p,
        )
        .unwrap();
        assert!((val - 14.0 / 3.0).abs() < 1e-14);
        for (i, want) in [2.0 / 3.0, 4.0 / 3.0, 2.0].iter().enumerate() {
            assert!((g.flat()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_gradient_matches_hand_computation() {
        // f(W) = sum(x @ W), x fixed: df/dW[l,j] = sum_i x[i,l].
        let layout = single_layout("w", vec![2, 2]);
        let p = ParamVector::from_flat(layout, vec![0.3, -0.4, 0.1, 0.9]).unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, g) = grad(
            |tape, leaves| {
                let xc = tape.constant(x.clone());
                let y = tape.matmul(xc, leaves[0])?;
                tape.sum_all(y)
            },
            &p,
        )
        .unwrap();
        // Column sums of x are [9, 12], repeated for each output column.
        assert_eq!(g.flat(), &[9.0, 9.0, 12.0, 12.0]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let layout = single_layout("w", vec![2]);
        let p = ParamVector::from_flat(layout, vec![1.5, -2.0]).unwrap();
        let (val, g) = grad(
            |tape, leaves| {
                let frozen = tape.stop_grad(leaves[0])?;
                let prod = tape.mul(leaves[0], frozen)?;
                tape.sum_all(prod)
            },
            &p,
        )
        .unwrap();
        // f(w) = sum(w * sg(w)): value w.w, gradient only through the live branch.
        assert!((val - (1.5 * 1.5 + 4.0)).abs() < 1e-14);
        assert_eq!(g.flat(), &[1.5, -2.0]);
    }

    #[test]
    fn constant_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let l = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let m = tape.mul(c, l).unwrap();
        let s = tape.sum_all(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(tape.gradient(c, &grads).is_none());
        assert_eq!(tape.gradient(l, &grads).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let layout = single_layout("table", vec![3, 2]);
        let p = ParamVector::from_flat(layout, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let (_, g) = grad(
            |tape, leaves| {
                let rows = tape.gather_rows(leaves[0], &[1, 1, 0])?;
                tape.sum_all(rows)
            },
            &p,
        )
        .unwrap();
        // Row 1 gathered twice, row 0 once, row 2 never.
        assert_eq!(g.flat(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn nan_forward_names_the_primitive() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::scalar(1e308));
        let err = tape.add(l, l).unwrap_err();
        match err {
            crate::Error::Numeric { op, .. } => assert_eq!(op, "tape.add"),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn hinge_subgradient_is_zero_at_kink_and_beyond() {
        let layout = single_layout("w", vec![3]);
        let p = ParamVector::from_flat(layout, vec![-1.0, 0.0, 2.0]).unwrap();
        let (_, g) = grad(
            |tape, leaves| {
                let c = tape.clamp_min(leaves[0], 0.0)?;
                tape.sum_all(c)
            },
            &p,
        )
        .unwrap();
        assert_eq!(g.flat(), &[0.0, 0.0, 1.0]);
    }
}
