//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because a node can only refer
//! to nodes created before it, and accumulates adjoints additively.
//!
//! Trainable values live in a [`ParamStore`] outside the tape. A tape leaf
//! created with [`Tape::param`] remembers which parameter it came from, and
//! backward adds that leaf's adjoint into a caller-owned [`GradStore`]. The
//! caller zeroes the store; backward never does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, gemm_acc_at, gemm_acc_bt, MatmulDims, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, addressed by [`ParamId`] in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradient buffers mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            grads: params.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &GradStore) {
        for (g, o) in self.grads.iter_mut().zip(&other.grads) {
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    MaxScalar(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    NodeContract(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf whose adjoint is routed to `id` in the gradient store.
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> Var {
        self.push(params.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Elementwise `max(x, c)`; the subgradient at `x == c` is 0.
    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v.max(c));
        self.push(out, Op::MaxScalar(a, c))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_last(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_last(start, end)?;
        Ok(self.push(out, Op::Slice(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Row lookup into a `[rows, d]` table; output is `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[]));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("row index {i} out of range {rows}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(out, Op::Gather(table, indices.to_vec())))
    }

    /// Per-row vector–matrix product: `a: [n, d]`, `w: [n, d, h]` →
    /// `out[i] = a[i] · w[i]`, shape `[n, h]`.
    pub fn node_contract(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.len() != 2 || sw.len() != 3 || sa[0] != sw[0] || sa[1] != sw[1] {
            return Err(Error::shape("node_contract", sa, sw));
        }
        let (n, d, h) = (sw[0], sw[1], sw[2]);
        let (av, wv) = (self.value(a).data(), self.value(w).data());
        let mut out = vec![0.0; n * h];
        for i in 0..n {
            gemm_acc(
                &av[i * d..(i + 1) * d],
                &wv[i * d * h..(i + 1) * d * h],
                &mut out[i * h..(i + 1) * h],
                1,
                d,
                h,
            );
        }
        let out = Tensor::new(vec![n, h], out)?;
        Ok(self.push(out, Op::NodeContract(a, w)))
    }

    /// Adjoints of the leaves (constants and parameters) with respect to the
    /// scalar `root`, indexed by node. Interior and unreachable nodes are
    /// `None`.
    pub fn leaf_adjoints(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let d = MatmulDims::resolve(av.shape(), bv.shape())?;
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..d.batch {
                        let gs = &g.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let a_s = &av.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
                        let (b_s, gb_s) = if d.rhs_batched {
                            let r = bi * d.k * d.n..(bi + 1) * d.k * d.n;
                            (&bv.data()[r.clone()], &mut gb[r])
                        } else {
                            (bv.data(), &mut gb[..])
                        };
                        gemm_acc_bt(gs, b_s, &mut ga[bi * d.m * d.k..], d.m, d.k, d.n);
                        gemm_acc_at(a_s, gs, gb_s, d.m, d.k, d.n);
                    }
                    accumulate(&mut adj, *a, av.shape(), ga);
                    accumulate(&mut adj, *b, bv.shape(), gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let bshape = self.shape(*b).to_vec();
                    let gb = reduce_broadcast(g.data(), bshape.iter().product(), sign);
                    accumulate(&mut adj, *a, g.shape(), g.data().to_vec());
                    accumulate(&mut adj, *b, &bshape, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let w = bv.len();
                    let ga: Vec<f64> = g.data().iter().enumerate().map(|(i, &gi)| gi * bv.data()[i % w]).collect();
                    let mut gb = vec![0.0; w];
                    for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                        gb[i % w] += gi * ai;
                    }
                    accumulate(&mut adj, *a, av.shape(), ga);
                    accumulate(&mut adj, *b, bv.shape(), gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut adj, *a, g.shape(), ga);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut adj, *a, &shape, g.into_data());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = g.data().iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                    accumulate(&mut adj, *a, g.shape(), ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.data().iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                    accumulate(&mut adj, *a, g.shape(), ga);
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    let ga = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| {
                            if xi > 0.0 {
                                *gi
                            } else if xi < 0.0 {
                                -gi
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *a, g.shape(), ga);
                }
                Op::MaxScalar(a, c) => {
                    let x = self.value(*a).data();
                    let ga = g.data().iter().zip(x).map(|(gi, &xi)| if xi > *c { *gi } else { 0.0 }).collect();
                    accumulate(&mut adj, *a, g.shape(), ga);
                }
                Op::Concat(parts) => {
                    let total = *g.shape().last().unwrap();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.shape(p).to_vec();
                        let w = *shape.last().unwrap();
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut adj, p, &shape, gp);
                        offset += w;
                    }
                }
                Op::Slice(a, start) => {
                    let shape = self.shape(*a).to_vec();
                    let w_in = *shape.last().unwrap();
                    let w_out = *g.shape().last().unwrap();
                    let mut ga = vec![0.0; shape.iter().product()];
                    for r in 0..g.len() / w_out {
                        ga[r * w_in + start..r * w_in + start + w_out].copy_from_slice(&g.data()[r * w_out..(r + 1) * w_out]);
                    }
                    accumulate(&mut adj, *a, &shape, ga);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let shape = self.shape(*a).to_vec();
                    let n: usize = shape.iter().product();
                    let v = if matches!(node.op, Op::Mean(_)) {
                        g.item() / n as f64
                    } else {
                        g.item()
                    };
                    accumulate(&mut adj, *a, &shape, vec![v; n]);
                }
                Op::Gather(table, indices) => {
                    let shape = self.shape(*table).to_vec();
                    let d = shape[1];
                    let mut gt = vec![0.0; shape[0] * d];
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, v) in gt[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *table, &shape, gt);
                }
                Op::NodeContract(a, w) => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let (n, d, h) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let mut ga = vec![0.0; n * d];
                    let mut gw = vec![0.0; n * d * h];
                    for i in 0..n {
                        let gi = &g.data()[i * h..(i + 1) * h];
                        gemm_acc_bt(gi, &wv.data()[i * d * h..(i + 1) * d * h], &mut ga[i * d..], 1, d, h);
                        gemm_acc_at(&av.data()[i * d..(i + 1) * d], gi, &mut gw[i * d * h..], 1, d, h);
                    }
                    accumulate(&mut adj, *a, av.shape(), ga);
                    accumulate(&mut adj, *w, wv.shape(), gw);
                }
            }
        }
        Ok(adj)
    }

    /// Accumulates `∂root/∂param` into `grads` for every parameter leaf
    /// reachable from `root`.
    pub fn backward(&self, root: Var, grads: &mut GradStore) -> Result<()> {
        let adj = self.leaf_adjoints(root)?;
        for (node, g) in self.nodes.iter().zip(adj) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let buf = grads.get_mut(*id);
                if buf.shape() != g.shape() {
                    return Err(Error::shape("backward", buf.shape(), g.shape()));
                }
                for (b, v) in buf.data_mut().iter_mut().zip(g.data()) {
                    *b += v;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("adjoint shape"));
        }
    }
}

fn reduce_broadcast(g: &[f64], width: usize, sign: f64) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (i, v) in g.iter().enumerate() {
        out[i % width] += sign * v;
    }
    out
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Absolute floor in the relative-error denominator, so coordinates whose
/// true gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h` over every parameter coordinate.
///
/// Error per coordinate is `|analytic − numeric| / (|analytic| + 1e-6)`.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut grads = GradStore::zeros_like(params);
    let mut tape = Tape::new();
    let root = f(params, &mut tape)?;
    tape.backward(root, &mut grads)?;

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(p, &mut t)?;
        Ok(t.value(r).item())
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[i];
            let err = (analytic - numeric).abs() / (analytic.abs() + GRAD_CHECK_FLOOR);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.add(*n, v.clone());
        }
        s
    }

    #[test]
    fn sum_of_squares_gradient() {
        let s = store(&[("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())]);
        let mut tape = Tape::new();
        let w = tape.param(&s, ParamId(0));
        let sq = tape.mul(w, w).unwrap();
        let y = tape.sum(sq);
        let mut g = GradStore::zeros_like(&s);
        tape.backward(y, &mut g).unwrap();
        assert_eq!(g.get(ParamId(0)).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let s = store(&[("a", Tensor::full(&[2], 1.5)), ("b", Tensor::full(&[2], -1.0))]);
        let mut tape = Tape::new();
        let a = tape.param(&s, ParamId(0));
        let _b = tape.param(&s, ParamId(1));
        let y = tape.sum(a);
        let mut g = GradStore::zeros_like(&s);
        tape.backward(y, &mut g).unwrap();
        assert_eq!(g.get(ParamId(1)).data(), &[0.0, 0.0]);
        assert_eq!(g.get(ParamId(0)).data(), &[1.0, 1.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let s = store(&[("x", Tensor::scalar(0.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&s, ParamId(0));
        let y = tape.sigmoid(x);
        let mut g = GradStore::zeros_like(&s);
        tape.backward(y, &mut g).unwrap();
        assert_eq!(g.get(ParamId(0)).item(), 0.25);
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let s = store(&[("x", Tensor::scalar(2.0))]);
        let mut g = GradStore::zeros_like(&s);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&s, ParamId(0));
            let y = tape.scale(x, 3.0);
            tape.backward(y, &mut g).unwrap();
        }
        assert_eq!(g.get(ParamId(0)).item(), 6.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let s = store(&[("w", Tensor::zeros(&[2]))]);
        let mut tape = Tape::new();
        let w = tape.param(&s, ParamId(0));
        let mut g = GradStore::zeros_like(&s);
        assert!(tape.backward(w, &mut g).is_err());
    }

    #[test]
    fn quadratic_matches_finite_differences() {
        let s = store(&[
            ("a", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 1.1, -0.7, 0.4]).unwrap()),
            ("b", Tensor::new(vec![3, 2], vec![0.9, 0.1, -0.4, 0.6, 0.2, -0.3]).unwrap()),
        ]);
        let report = finite_diff_check(&s, 1e-5, |p, tape| {
            let a = tape.param(p, ParamId(0));
            let b = tape.param(p, ParamId(1));
            let m = tape.matmul(a, b)?;
            let sq = tape.mul(m, m)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert_eq!(report.coordinates, 12);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let s = store(&[("w", Tensor::full(&[3], 0.7))]);
        let report = finite_diff_check(&s, 1e-4, |_, tape| Ok(tape.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let s = store(&[
            ("x", Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.5, 1.2, -0.4, 0.9]).unwrap()),
            (
                "w",
                Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
            ),
            (
                "t",
                Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap(),
            ),
        ]);
        let report = finite_diff_check(&s, 1e-5, |p, tape| {
            let x = tape.param(p, ParamId(0));
            let w = tape.param(p, ParamId(1));
            let t = tape.param(p, ParamId(2));
            let rows = tape.gather_rows(t, &[3, 1])?;
            let mixed = tape.sub(x, rows)?;
            let s1 = tape.sigmoid(mixed);
            let t1 = tape.tanh(x);
            let cat = tape.concat_last(&[s1, t1])?;
            let part = tape.slice_last(cat, 1, 4)?;
            let contracted = tape.node_contract(part, w)?;
            let shifted = tape.add_scalar(contracted, 0.2);
            let a = tape.abs(shifted);
            let r = tape.reshape(a, &[4])?;
            let m = tape.max_scalar(r, 0.05);
            Ok(tape.mean(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    proptest! {
        #[test]
        fn gradient_is_independent_of_evaluation_order(
            a in prop::collection::vec(-2.0f64..2.0, 4),
            b in prop::collection::vec(-2.0f64..2.0, 4),
        ) {
            let s = store(&[
                ("a", Tensor::new(vec![4], a).unwrap()),
                ("b", Tensor::new(vec![4], b).unwrap()),
            ]);
            let run = |swap: bool| {
                let mut tape = Tape::new();
                let (x, y) = if swap {
                    let y = tape.param(&s, ParamId(1));
                    (tape.param(&s, ParamId(0)), y)
                } else {
                    let x = tape.param(&s, ParamId(0));
                    (x, tape.param(&s, ParamId(1)))
                };
                let (p, q) = if swap {
                    let q = tape.tanh(y);
                    (tape.mul(x, y).unwrap(), q)
                } else {
                    let p = tape.mul(x, y).unwrap();
                    (p, tape.tanh(y))
                };
                let z = tape.add(p, q).unwrap();
                let root = tape.sum(z);
                let mut g = GradStore::zeros_like(&s);
                tape.backward(root, &mut g).unwrap();
                g
            };
            let (g1, g2) = (run(false), run(true));
            for id in s.ids() {
                for (u, v) in g1.get(id).data().iter().zip(g2.get(id).data()) {
                    prop_assert!((u - v).abs() <= 1e-12);
                }
            }
        }
    }
}
