//! Embedding tables and shared parameter pools.
//!
//! Parameters are never stored per node or per time step. A node (or a
//! sample's calendar position) owns only a short embedding row; everything
//! wider is generated on demand by multiplying that row into a pool shared
//! by all nodes and all times. The trainable footprint therefore depends on
//! the node count only through the spatial table and not at all on the
//! series length.

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DAYS_PER_WEEK: usize = 7;
pub const MONTHS_PER_YEAR: usize = 12;

/// Uniform init in `[-0.5/√fan_in, 0.5/√fan_in]`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 0.5 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalIndex {
    pub tod: usize,
    pub dow: usize,
    pub moy: usize,
}

/// Calendar position of a timestamp: slot of day, weekday (Monday = 0) and
/// month (January = 0).
pub fn temporal_index(ts: NaiveDateTime, steps_per_day: usize) -> Result<TemporalIndex> {
    const MINUTES_PER_DAY: usize = 24 * 60;
    if steps_per_day == 0 || !MINUTES_PER_DAY.is_multiple_of(steps_per_day) {
        return Err(Error::invalid(format!(
            "steps_per_day {steps_per_day} must divide {MINUTES_PER_DAY} minutes"
        )));
    }
    let minute = (ts.hour() * 60 + ts.minute()) as usize;
    Ok(TemporalIndex {
        tod: minute / (MINUTES_PER_DAY / steps_per_day),
        dow: ts.weekday().num_days_from_monday() as usize,
        moy: ts.month0() as usize,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpatialEmbedding {
    pub param: ParamId,
    pub nodes: usize,
    pub dim: usize,
}

impl SpatialEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, nodes: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let param = store.add(name, init_uniform(&[nodes, dim], dim, rng));
        SpatialEmbedding { param, nodes, dim }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalEmbeddingTables {
    pub tod: ParamId,
    pub dow: ParamId,
    pub moy: ParamId,
    pub steps_per_day: usize,
    pub d_tod: usize,
    pub d_dow: usize,
    pub d_moy: usize,
}

#[derive(Clone, Debug)]
pub struct TemporalQuery {
    pub indices: Vec<TemporalIndex>,
    /// `[B, d_tod + d_dow + d_moy]`.
    pub embedding: Tensor,
}

impl TemporalEmbeddingTables {
    pub fn new(store: &mut ParamStore, steps_per_day: usize, d_tod: usize, d_dow: usize, d_moy: usize, rng: &mut impl Rng) -> Self {
        TemporalEmbeddingTables {
            tod: store.add("temporal.tod", init_uniform(&[steps_per_day, d_tod], d_tod, rng)),
            dow: store.add("temporal.dow", init_uniform(&[DAYS_PER_WEEK, d_dow], d_dow, rng)),
            moy: store.add("temporal.moy", init_uniform(&[MONTHS_PER_YEAR, d_moy], d_moy, rng)),
            steps_per_day,
            d_tod,
            d_dow,
            d_moy,
        }
    }

    pub fn dim(&self) -> usize {
        self.d_tod + self.d_dow + self.d_moy
    }

    fn check(&self, idx: &TemporalIndex) -> Result<()> {
        if idx.tod >= self.steps_per_day || idx.dow >= DAYS_PER_WEEK || idx.moy >= MONTHS_PER_YEAR {
            return Err(Error::invalid(format!("temporal index {idx:?} out of range")));
        }
        Ok(())
    }

    /// Looks up one row from each table per sample and concatenates them.
    /// `last_steps` holds each sample's final input timestamp.
    pub fn query(&self, store: &ParamStore, last_steps: &[NaiveDateTime]) -> Result<TemporalQuery> {
        let indices = last_steps
            .iter()
            .map(|&ts| temporal_index(ts, self.steps_per_day))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let e = self.query_on_tape(&mut tape, store, &indices)?;
        Ok(TemporalQuery {
            embedding: tape.value(e).clone(),
            indices,
        })
    }

    pub fn query_on_tape(&self, tape: &mut Tape, store: &ParamStore, indices: &[TemporalIndex]) -> Result<Var> {
        for idx in indices {
            self.check(idx)?;
        }
        let tod = tape.param(store, self.tod);
        let dow = tape.param(store, self.dow);
        let moy = tape.param(store, self.moy);
        let a = tape.gather_rows(tod, &indices.iter().map(|i| i.tod).collect::<Vec<_>>())?;
        let b = tape.gather_rows(dow, &indices.iter().map(|i| i.dow).collect::<Vec<_>>())?;
        let c = tape.gather_rows(moy, &indices.iter().map(|i| i.moy).collect::<Vec<_>>())?;
        tape.concat_last(&[a, b, c])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// `θ = E · P`.
pub fn generate_params(embedding: &Tensor, pool: &Tensor) -> Result<Tensor> {
    if embedding.rank() != 2 || pool.rank() != 2 {
        return Err(Error::shape("generate_params", embedding.shape(), pool.shape()));
    }
    embedding.matmul(pool)
}

/// Index of the centroid most similar to `query`; ties go to the lowest
/// index. Under cosine similarity a zero query is an error and a zero
/// centroid scores 0.
pub fn select_block(query: &[f64], centroids: &[Vec<f64>], sim: Similarity) -> Result<usize> {
    if centroids.is_empty() {
        return Err(Error::invalid("pool has no blocks"));
    }
    let qn = norm(query);
    if sim == Similarity::Cosine && qn == 0.0 {
        return Err(Error::invalid("zero-norm query under cosine similarity"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, mu) in centroids.iter().enumerate() {
        if mu.len() != query.len() {
            return Err(Error::shape("select_block", &[query.len()], &[mu.len()]));
        }
        let dot: f64 = query.iter().zip(mu).map(|(a, b)| a * b).sum();
        let score = match sim {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let mn = norm(mu);
                if mn == 0.0 {
                    0.0
                } else {
                    dot / (qn * mn)
                }
            }
        };
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rows produced by coarse block retrieval: each row's chosen block and
/// the `m_i` values of `row · P_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockwiseParams {
    pub blocks: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

/// A `d × M` pool partitioned along `M` into contiguous blocks, each
/// summarized by a centroid of dimension `d` (the mean of its columns).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterPool {
    pub param: ParamId,
    pub dim: usize,
    pub widths: Vec<usize>,
    #[serde(skip)]
    centroids: Vec<Vec<f64>>,
}

impl ParameterPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, widths: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid block widths {widths:?}")));
        }
        let m: usize = widths.iter().sum();
        let param = store.add(name, init_uniform(&[dim, m], dim, rng));
        let mut pool = ParameterPool {
            param,
            dim,
            widths,
            centroids: Vec::new(),
        };
        pool.refresh_centroids(store);
        Ok(pool)
    }

    pub fn width(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn block_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.widths[..i].iter().sum();
        start..start + self.widths[i]
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Recomputes every centroid from the current pool values. Call after
    /// each optimizer step.
    pub fn refresh_centroids(&mut self, store: &ParamStore) {
        let p = store.get(self.param);
        let m = self.width();
        self.centroids = (0..self.blocks())
            .map(|b| {
                let r = self.block_range(b);
                let len = r.len() as f64;
                (0..self.dim)
                    .map(|row| p.data()[row * m + r.start..row * m + r.end].iter().sum::<f64>() / len)
                    .collect()
            })
            .collect();
    }

    pub fn generate(&self, store: &ParamStore, embedding: &Tensor) -> Result<Tensor> {
        generate_params(embedding, store.get(self.param))
    }

    pub fn select_block(&self, query: &[f64], sim: Similarity) -> Result<usize> {
        select_block(query, &self.centroids, sim)
    }

    /// Per row: pick the closest block, multiply by that block only.
    pub fn generate_blockwise(&self, store: &ParamStore, embedding: &Tensor, sim: Similarity) -> Result<BlockwiseParams> {
        if embedding.rank() != 2 || embedding.shape()[1] != self.dim {
            return Err(Error::shape(
                "generate_params_blockwise",
                embedding.shape(),
                &[self.dim, self.width()],
            ));
        }
        let p = store.get(self.param);
        let m = self.width();
        let mut out = BlockwiseParams {
            blocks: Vec::new(),
            rows: Vec::new(),
        };
        for r in 0..embedding.shape()[0] {
            let q = embedding.row(r);
            let b = self.select_block(q, sim)?;
            let range = self.block_range(b);
            let row = range.map(|j| (0..self.dim).map(|d| q[d] * p.data()[d * m + j]).sum()).collect();
            out.blocks.push(b);
            out.rows.push(row);
        }
        Ok(out)
    }

    /// Scatters blockwise rows back into full width with zeros outside the
    /// selected block.
    pub fn scatter(&self, params: &BlockwiseParams) -> Tensor {
        let m = self.width();
        let mut t = Tensor::zeros(&[params.rows.len(), m]);
        for (r, (&b, row)) in params.blocks.iter().zip(&params.rows).enumerate() {
            let range = self.block_range(b);
            t.data_mut()[r * m + range.start..r * m + range.end].copy_from_slice(row);
        }
        t
    }

    /// Records generation on the tape. With `routing` set, each row keeps
    /// only its selected block; gradients flow through that block alone.
    pub fn generate_on_tape(&self, tape: &mut Tape, store: &ParamStore, embedding: Var, routing: Option<Similarity>) -> Result<Var> {
        let pool = tape.param(store, self.param);
        let full = tape.matmul(embedding, pool)?;
        let Some(sim) = routing else { return Ok(full) };
        let e = tape.value(embedding);
        let rows = e.shape()[0];
        let m = self.width();
        let mut mask = Tensor::zeros(&[rows, m]);
        for r in 0..rows {
            let b = self.select_block(e.row(r), sim)?;
            for j in self.block_range(b) {
                mask.data_mut()[r * m + j] = 1.0;
            }
        }
        let mask = tape.constant(mask);
        tape.mul(full, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    /// Number of diffusion terms (`K + 1` for order `K`).
    pub terms: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl KernelLayout {
    pub fn len(&self) -> usize {
        self.terms * self.channels * self.hidden
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A `d × (terms·C·h)` pool whose rows map a query vector to a full graph
/// convolution kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaParameterPool {
    pub param: ParamId,
    pub dim: usize,
    pub layout: KernelLayout,
}

impl MetaParameterPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, layout: KernelLayout, rng: &mut impl Rng) -> Self {
        let param = store.add(name, init_uniform(&[dim, layout.len()], dim, rng));
        MetaParameterPool { param, dim, layout }
    }

    /// `[rows, d] → [rows, terms·C, h]` on the tape.
    pub fn generate_on_tape(&self, tape: &mut Tape, store: &ParamStore, query: Var) -> Result<Var> {
        let pool = tape.param(store, self.param);
        let w = tape.matmul(query, pool)?;
        let rows = tape.value(query).shape()[0];
        tape.reshape(w, &[rows, self.layout.terms * self.layout.channels, self.layout.hidden])
    }
}

/// `W_t = E_t · P_t`, `W_s = E_s · P_s`, each reshaped to
/// `[rows, terms, C, h]`.
pub fn generate_meta_params(
    temporal: &Tensor,
    spatial: &Tensor,
    temporal_pool: &Tensor,
    spatial_pool: &Tensor,
    layout: KernelLayout,
) -> Result<(Tensor, Tensor)> {
    let shape4 = |rows: usize| [rows, layout.terms, layout.channels, layout.hidden];
    for pool in [temporal_pool, spatial_pool] {
        if pool.rank() != 2 || pool.shape()[1] != layout.len() {
            return Err(Error::shape("generate_meta_params", pool.shape(), &[layout.len()]));
        }
    }
    let wt = generate_params(temporal, temporal_pool)?;
    let ws = generate_params(spatial, spatial_pool)?;
    Ok((wt.reshape(&shape4(temporal.shape()[0]))?, ws.reshape(&shape4(spatial.shape()[0]))?))
}
