//! Dense row-major `f64` tensors and the value-level kernels shared by the
//! differentiation tape.
//!
//! Broadcasting is deliberately narrow. Binary elementwise ops accept either
//! equal shapes or a right operand whose shape is a suffix of the left
//! operand's shape (a bias `[h]` against `[n, h]`, a scalar `[]` against
//! anything). `matmul` contracts the trailing two axes and broadcasts a 2-D
//! right operand across the left operand's leading axes. Anything else is a
//! shape error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Tensor {
            shape: vec![r, c],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range {d}");
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Rows of a 2-D tensor, `[rows, cols]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().expect("rank >= 1");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        zip_broadcast("add", self, rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        zip_broadcast("sub", self, rhs, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        zip_broadcast("mul", self, rhs, |a, b| a * b)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let dims = MatmulDims::resolve(&self.shape, &rhs.shape)?;
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        for b in 0..dims.batch {
            let a = &self.data[b * dims.m * dims.k..(b + 1) * dims.m * dims.k];
            let w = if dims.rhs_batched {
                &rhs.data[b * dims.k * dims.n..(b + 1) * dims.k * dims.n]
            } else {
                &rhs.data[..]
            };
            gemm_acc(a, w, &mut out[b * dims.m * dims.n..], dims.m, dims.k, dims.n);
        }
        Tensor::new(dims.out_shape, out)
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", &self.shape, &[]));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Concatenates along the last axis; every other extent must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = &first.shape[..first.rank().saturating_sub(1)];
        for p in parts {
            if p.rank() == 0 || p.shape[..p.rank() - 1] != *lead {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, data)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let w = *self.shape.last().ok_or_else(|| Error::shape("slice", &self.shape, &[]))?;
        if start >= end || end > w {
            return Err(Error::invalid(format!("slice {start}..{end} of width {w}")));
        }
        let rows = self.len() / w;
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * w + start..r * w + end]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        Tensor::new(shape, data)
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub rhs_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        if k != k2 || !(b_lead.is_empty() || b_lead == a_lead) {
            return Err(Error::shape("matmul", a, b));
        }
        let mut out_shape = a_lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulDims {
            batch: a_lead.iter().product(),
            m,
            k,
            n,
            rhs_batched: !b_lead.is_empty(),
            out_shape,
        })
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn gemm_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// True when `rhs` broadcasts against `lhs` under the suffix rule.
pub(crate) fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn zip_broadcast(op: &'static str, lhs: &Tensor, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !broadcasts(&lhs.shape, &rhs.shape) {
        return Err(Error::shape(op, &lhs.shape, &rhs.shape));
    }
    let w = rhs.len();
    let data = lhs.data.iter().enumerate().map(|(i, &a)| f(a, rhs.data[i % w])).collect();
    Ok(Tensor {
        shape: lhs.shape.clone(),
        data,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
