//! Memory-augmented spatiotemporal graph network.
//!
//! Each recurrent gate is a diffusion graph convolution whose kernel is not
//! stored but generated per sample and per node. For gate `g` the kernel
//! applied at node `n` of sample `b` is `W_s[g][n] + W_t[g][b]`, where
//! `W_s` comes from the node's spatial representation and `W_t` from the
//! sample's calendar representation, both produced by the memory pools.
//! Because both terms are linear in the kernel, the convolution is computed
//! as the sum of a shared matmul (temporal part) and a per-node contraction
//! (spatial part) without materializing the fused kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graphs::DiffusionOperator;
use crate::memory::{
    init_uniform, KernelLayout, MetaParameterPool, ParameterPool, Similarity, SpatialEmbedding, TemporalEmbeddingTables, TemporalIndex,
};
use crate::tensor::Tensor;

/// Signal and macro (region) channels per node and time step.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub nodes: usize,
    pub steps_per_day: usize,
    pub d_s: usize,
    pub d_tod: usize,
    pub d_dow: usize,
    pub d_moy: usize,
    pub hidden: usize,
    /// Width `M` of the spatial and temporal parameter pools.
    pub pool_width: usize,
    /// Number of blocks `I` the pools are partitioned into.
    pub pool_blocks: usize,
    pub diffusion_order: usize,
    pub horizon: usize,
    pub similarity: Similarity,
    /// Route each query through its closest pool block only.
    pub blockwise: bool,
    /// Zero the macro input channel.
    pub disable_macro: bool,
    /// Train one static kernel per gate instead of generating kernels.
    pub disable_pools: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            nodes: 20,
            steps_per_day: 48,
            d_s: 8,
            d_tod: 4,
            d_dow: 3,
            d_moy: 2,
            hidden: 8,
            pool_width: 8,
            pool_blocks: 2,
            diffusion_order: 2,
            horizon: 12,
            similarity: Similarity::Cosine,
            blockwise: false,
            disable_macro: false,
            disable_pools: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("steps_per_day", self.steps_per_day),
            ("d_s", self.d_s),
            ("d_tod", self.d_tod),
            ("d_dow", self.d_dow),
            ("d_moy", self.d_moy),
            ("hidden", self.hidden),
            ("pool_width", self.pool_width),
            ("pool_blocks", self.pool_blocks),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.pool_blocks > self.pool_width {
            return Err(Error::Config("model.pool_blocks exceeds model.pool_width".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        INPUT_CHANNELS + self.hidden
    }

    pub fn layout(&self) -> KernelLayout {
        KernelLayout {
            terms: self.diffusion_order + 1,
            channels: self.channels(),
            hidden: self.hidden,
        }
    }

    /// Near-equal block widths summing to `pool_width`.
    pub fn block_widths(&self) -> Vec<usize> {
        let (q, r) = (self.pool_width / self.pool_blocks, self.pool_width % self.pool_blocks);
        (0..self.pool_blocks).map(|i| q + usize::from(i < r)).collect()
    }
}

#[derive(Clone, Debug)]
struct GatePools {
    temporal: MetaParameterPool,
    spatial: MetaParameterPool,
}

// one per model, so the size gap is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum KernelSource {
    Generated {
        spatial: SpatialEmbedding,
        temporal: TemporalEmbeddingTables,
        spatial_pool: ParameterPool,
        temporal_pool: ParameterPool,
        gates: Vec<GatePools>,
    },
    Static {
        kernels: Vec<ParamId>,
    },
}

/// Tape handles for one gate's kernel and bias. Either kernel part may be
/// absent; the convolution sums whichever are present.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    /// `[terms·C, h]`, shared by every node.
    pub shared: Option<Var>,
    /// `[N, terms·C, h]`, one kernel per node.
    pub per_node: Option<Var>,
    /// `[h]`.
    pub bias: Var,
}

/// Reset, update and candidate gates, in that order.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub gates: [GateVars; 3],
}

/// Per-sample quantile outputs on the tape, each `[N, T_out]`.
#[derive(Clone, Copy, Debug)]
pub struct QuantileVars {
    pub low: Var,
    pub median: Var,
    pub high: Var,
}

/// Lower, median and upper forecasts, each `[B, T_out, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantilePrediction {
    pub low: Tensor,
    pub median: Tensor,
    pub high: Tensor,
}

/// One input window for one sample.
#[derive(Clone, Debug)]
pub struct SampleInput {
    /// `[T_in, N]` row-major signal.
    pub signal: Vec<f64>,
    /// `[T_in, N]` row-major macro feature.
    pub macro_feature: Vec<f64>,
    pub steps: usize,
    /// Calendar position of the last input step.
    pub last: TemporalIndex,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    kernels: KernelSource,
    biases: Vec<ParamId>,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = config.layout();
        let fan_in = layout.terms * layout.channels;
        let names = ["reset", "update", "candidate"];

        let kernels = if config.disable_pools {
            let kernels = names
                .iter()
                .map(|g| params.add(format!("gate.{g}.kernel"), init_uniform(&[fan_in, config.hidden], fan_in, &mut rng)))
                .collect();
            KernelSource::Static { kernels }
        } else {
            let spatial = SpatialEmbedding::new(&mut params, "spatial.embedding", config.nodes, config.d_s, &mut rng);
            let temporal = TemporalEmbeddingTables::new(
                &mut params,
                config.steps_per_day,
                config.d_tod,
                config.d_dow,
                config.d_moy,
                &mut rng,
            );
            let widths = config.block_widths();
            let spatial_pool = ParameterPool::new(&mut params, "spatial.pool", config.d_s, widths.clone(), &mut rng)?;
            let temporal_pool = ParameterPool::new(&mut params, "temporal.pool", temporal.dim(), widths, &mut rng)?;
            let gates = names
                .iter()
                .map(|g| GatePools {
                    temporal: MetaParameterPool::new(&mut params, &format!("gate.{g}.meta_temporal"), config.pool_width, layout, &mut rng),
                    spatial: MetaParameterPool::new(&mut params, &format!("gate.{g}.meta_spatial"), config.pool_width, layout, &mut rng),
                })
                .collect();
            KernelSource::Generated {
                spatial,
                temporal,
                spatial_pool,
                temporal_pool,
                gates,
            }
        };
        let biases = names
            .iter()
            .map(|g| params.add(format!("gate.{g}.bias"), Tensor::zeros(&[config.hidden])))
            .collect();
        let out = 3 * config.horizon;
        let head_weight = params.add("head.weight", init_uniform(&[config.hidden, out], config.hidden, &mut rng));
        let head_bias = params.add("head.bias", Tensor::zeros(&[out]));
        Ok(Model {
            config,
            params,
            kernels,
            biases,
            head_weight,
            head_bias,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Recomputes pool centroids; call after every parameter update.
    pub fn refresh_centroids(&mut self) {
        if let KernelSource::Generated {
            spatial_pool,
            temporal_pool,
            ..
        } = &mut self.kernels
        {
            spatial_pool.refresh_centroids(&self.params);
            temporal_pool.refresh_centroids(&self.params);
        }
    }

    /// Replaces every parameter value, checking names and shapes.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter count does not match the model layout"));
        }
        for id in self.params.ids() {
            if params.name(id) != self.params.name(id) || params.get(id).shape() != self.params.get(id).shape() {
                return Err(Error::invalid(format!(
                    "parameter {} does not match the model layout",
                    params.name(id)
                )));
            }
        }
        self.params = params;
        self.refresh_centroids();
        Ok(())
    }

    pub fn spatial_embedding(&self) -> Option<ParamId> {
        match &self.kernels {
            KernelSource::Generated { spatial, .. } => Some(spatial.param),
            KernelSource::Static { .. } => None,
        }
    }

    fn routing(&self) -> Option<Similarity> {
        self.config.blockwise.then_some(self.config.similarity)
    }

    /// Generates this sample's gate kernels on the tape.
    pub fn cell_vars(&self, tape: &mut Tape, last: TemporalIndex) -> Result<CellVars> {
        let h = self.config.hidden;
        let rows = self.config.layout().terms * self.config.channels();
        let bias = |tape: &mut Tape, g: usize| tape.param(&self.params, self.biases[g]);
        let gates = match &self.kernels {
            KernelSource::Static { kernels } => {
                let mut out = Vec::with_capacity(3);
                for (g, &k) in kernels.iter().enumerate() {
                    out.push(GateVars {
                        shared: Some(tape.param(&self.params, k)),
                        per_node: None,
                        bias: bias(tape, g),
                    });
                }
                out
            }
            KernelSource::Generated {
                spatial,
                temporal,
                spatial_pool,
                temporal_pool,
                gates,
            } => {
                let e_s = tape.param(&self.params, spatial.param);
                let theta_s = spatial_pool.generate_on_tape(tape, &self.params, e_s, self.routing())?;
                let e_t = temporal.query_on_tape(tape, &self.params, &[last])?;
                let theta_t = temporal_pool.generate_on_tape(tape, &self.params, e_t, self.routing())?;
                let mut out = Vec::with_capacity(3);
                for (g, pools) in gates.iter().enumerate() {
                    let wt = pools.temporal.generate_on_tape(tape, &self.params, theta_t)?;
                    let wt = tape.reshape(wt, &[rows, h])?;
                    let ws = pools.spatial.generate_on_tape(tape, &self.params, theta_s)?;
                    out.push(GateVars {
                        shared: Some(wt),
                        per_node: Some(ws),
                        bias: bias(tape, g),
                    });
                }
                out
            }
        };
        Ok(CellVars {
            gates: [gates[0], gates[1], gates[2]],
        })
    }

    /// Full forward pass for one sample: encode the window, apply the head.
    pub fn forward_sample(&self, tape: &mut Tape, powers: &[Var], input: &SampleInput) -> Result<QuantileVars> {
        let h_final = self.encode_sample(tape, powers, input)?;
        self.head_on_tape(tape, h_final)
    }

    pub fn encode_sample(&self, tape: &mut Tape, powers: &[Var], input: &SampleInput) -> Result<Var> {
        let n = self.config.nodes;
        if input.steps == 0 {
            return Err(Error::invalid("input window must hold at least one step"));
        }
        if input.signal.len() != input.steps * n || input.macro_feature.len() != input.steps * n {
            return Err(Error::shape("encode", &[input.steps, n], &[input.signal.len()]));
        }
        let cell = self.cell_vars(tape, input.last)?;
        let mut state = tape.constant(Tensor::zeros(&[n, self.config.hidden]));
        for t in 0..input.steps {
            let mut x = Vec::with_capacity(n * INPUT_CHANNELS);
            for i in 0..n {
                x.push(input.signal[t * n + i]);
                x.push(if self.config.disable_macro {
                    0.0
                } else {
                    input.macro_feature[t * n + i]
                });
            }
            let x = tape.constant(Tensor::new(vec![n, INPUT_CHANNELS], x)?);
            state = cell_step_on_tape(tape, x, state, &cell, powers)?;
        }
        Ok(state)
    }

    pub fn head_on_tape(&self, tape: &mut Tape, h_final: Var) -> Result<QuantileVars> {
        let w = tape.param(&self.params, self.head_weight);
        let b = tape.param(&self.params, self.head_bias);
        let z = tape.matmul(h_final, w)?;
        let z = tape.add(z, b)?;
        let t = self.config.horizon;
        Ok(QuantileVars {
            low: tape.slice_last(z, 0, t)?,
            median: tape.slice_last(z, t, 2 * t)?,
            high: tape.slice_last(z, 2 * t, 3 * t)?,
        })
    }

    /// Diffusion powers as tape constants, reusable across one tape.
    pub fn powers_on_tape(&self, tape: &mut Tape, diffusion: &DiffusionOperator) -> Result<Vec<Var>> {
        if diffusion.order() != self.config.diffusion_order || diffusion.n() != self.config.nodes {
            return Err(Error::invalid(format!(
                "diffusion operator (order {}, {} nodes) does not match the model (order {}, {} nodes)",
                diffusion.order(),
                diffusion.n(),
                self.config.diffusion_order,
                self.config.nodes
            )));
        }
        Ok(diffusion.powers.iter().map(|p| tape.constant(p.clone())).collect())
    }

    /// Final hidden states for a batch, `[B, N, h]`.
    pub fn encode(&self, inputs: &[SampleInput], diffusion: &DiffusionOperator) -> Result<Tensor> {
        let (n, h) = (self.config.nodes, self.config.hidden);
        let mut data = Vec::with_capacity(inputs.len() * n * h);
        for input in inputs {
            let mut tape = Tape::new();
            let powers = self.powers_on_tape(&mut tape, diffusion)?;
            let v = self.encode_sample(&mut tape, &powers, input)?;
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(vec![inputs.len(), n, h], data)
    }

    /// Applies the head to `[B, N, h]` hidden states.
    pub fn predict(&self, hidden: &Tensor) -> Result<QuantilePrediction> {
        let (n, h) = (self.config.nodes, self.config.hidden);
        if hidden.rank() != 3 || hidden.shape()[1..] != [n, h] {
            return Err(Error::shape("predict", hidden.shape(), &[n, h]));
        }
        let b = hidden.shape()[0];
        let mut outs = Vec::with_capacity(b);
        for s in 0..b {
            let mut tape = Tape::new();
            let hv = tape.constant(Tensor::new(vec![n, h], hidden.data()[s * n * h..(s + 1) * n * h].to_vec())?);
            let q = self.head_on_tape(&mut tape, hv)?;
            outs.push([q.low, q.median, q.high].map(|v| tape.value(v).clone()));
        }
        Ok(stack_predictions(&outs, self.config.horizon, n))
    }

    /// Encode and predict in one pass per sample.
    pub fn forecast(
        &self,
        inputs: &[SampleInput],
        diffusion: &DiffusionOperator,
        exec: crate::exec::Execution,
    ) -> Result<QuantilePrediction> {
        let per_sample = exec.map(inputs, |input| -> Result<[Tensor; 3]> {
            let mut tape = Tape::new();
            let powers = self.powers_on_tape(&mut tape, diffusion)?;
            let q = self.forward_sample(&mut tape, &powers, input)?;
            Ok([q.low, q.median, q.high].map(|v| tape.value(v).clone()))
        });
        let outs = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(stack_predictions(&outs, self.config.horizon, self.config.nodes))
    }
}

/// `[N, T]` per sample → `[B, T, N]`.
fn stack_predictions(per_sample: &[[Tensor; 3]], horizon: usize, nodes: usize) -> QuantilePrediction {
    let b = per_sample.len();
    let mut parts: [Vec<f64>; 3] = Default::default();
    for q in per_sample {
        for (part, t) in parts.iter_mut().zip(q) {
            for step in 0..horizon {
                for node in 0..nodes {
                    part.push(t.data()[node * horizon + step]);
                }
            }
        }
    }
    let [low, median, high] = parts.map(|p| Tensor::new(vec![b, horizon, nodes], p).expect("prediction shape"));
    QuantilePrediction { low, median, high }
}

/// `[Ã⁰U, Ã¹U, …, Ã^K U]` concatenated along channels: `[N, terms·C]`.
pub fn diffuse_on_tape(tape: &mut Tape, u: Var, powers: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(powers.len());
    parts.push(u);
    for &p in &powers[1..] {
        parts.push(tape.matmul(p, u)?);
    }
    tape.concat_last(&parts)
}

/// `Σ_k (Ã^k U) W_k` given already diffused features, without bias.
pub fn apply_kernel_on_tape(tape: &mut Tape, diffused: Var, gate: &GateVars) -> Result<Var> {
    let shared = gate.shared.map(|w| tape.matmul(diffused, w)).transpose()?;
    let per_node = gate.per_node.map(|w| tape.node_contract(diffused, w)).transpose()?;
    match (shared, per_node) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::invalid("gate has no kernel")),
    }
}

/// One gated recurrent step on the graph, `[N, c_in]` × `[N, h]` → `[N, h]`.
pub fn cell_step_on_tape(tape: &mut Tape, x: Var, h_prev: Var, cell: &CellVars, powers: &[Var]) -> Result<Var> {
    let [reset, update, candidate] = &cell.gates;
    let xh = tape.concat_last(&[x, h_prev])?;
    let v = diffuse_on_tape(tape, xh, powers)?;

    let r = apply_kernel_on_tape(tape, v, reset)?;
    let r = tape.add(r, reset.bias)?;
    let r = tape.sigmoid(r);
    let u = apply_kernel_on_tape(tape, v, update)?;
    let u = tape.add(u, update.bias)?;
    let u = tape.sigmoid(u);

    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat_last(&[x, rh])?;
    let v2 = diffuse_on_tape(tape, xrh, powers)?;
    let c = apply_kernel_on_tape(tape, v2, candidate)?;
    let c = tape.add(c, candidate.bias)?;
    let c = tape.tanh(c);

    // u ⊙ H + (1 − u) ⊙ c  ==  c + u ⊙ (H − c)
    let diff = tape.sub(h_prev, c)?;
    let gated = tape.mul(u, diff)?;
    tape.add(c, gated)
}

/// A graph convolution kernel for the value-level API.
#[derive(Clone, Debug)]
pub enum Kernel {
    /// `[terms, C, h]`, shared by every node.
    Shared(Tensor),
    /// `[N, terms, C, h]`, one per node.
    PerNode(Tensor),
}

/// `Z = Σ_k Ã^k U W_k` for `U: [B, N, C]`, returning `[B, N, h]`.
pub fn graph_conv(u: &Tensor, diffusion: &DiffusionOperator, kernel: &Kernel) -> Result<Tensor> {
    if u.rank() != 3 {
        return Err(Error::shape("graph_conv", u.shape(), &[]));
    }
    let (b, n, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let terms = diffusion.powers.len();
    let (w, shared) = match kernel {
        Kernel::Shared(w) => (w, true),
        Kernel::PerNode(w) => (w, false),
    };
    let ws = w.shape();
    let ok = if shared {
        ws.len() == 3 && ws[0] == terms && ws[1] == c
    } else {
        ws.len() == 4 && ws[0] == n && ws[1] == terms && ws[2] == c
    };
    if !ok || diffusion.n() != n {
        return Err(Error::shape("graph_conv", u.shape(), ws));
    }
    let h = *ws.last().unwrap();
    let mut out = Vec::with_capacity(b * n * h);
    for s in 0..b {
        let mut tape = Tape::new();
        let powers: Vec<Var> = diffusion.powers.iter().map(|p| tape.constant(p.clone())).collect();
        let us = tape.constant(Tensor::new(vec![n, c], u.data()[s * n * c..(s + 1) * n * c].to_vec())?);
        let v = diffuse_on_tape(&mut tape, us, &powers)?;
        let bias = tape.constant(Tensor::zeros(&[h]));
        let gate = if shared {
            GateVars {
                shared: Some(tape.constant(w.reshape(&[terms * c, h])?)),
                per_node: None,
                bias,
            }
        } else {
            GateVars {
                shared: None,
                per_node: Some(tape.constant(w.reshape(&[n, terms * c, h])?)),
                bias,
            }
        };
        let z = apply_kernel_on_tape(&mut tape, v, &gate)?;
        out.extend_from_slice(tape.value(z).data());
    }
    Tensor::new(vec![b, n, h], out)
}

/// Gate kernels and biases for the value-level [`cell_step`].
#[derive(Clone, Debug)]
pub struct CellParams {
    /// Reset, update, candidate; each `[terms, C, h]` shared kernel plus an
    /// optional `[N, terms, C, h]` per-node kernel added to it.
    pub kernels: [(Tensor, Option<Tensor>); 3],
    pub biases: [Tensor; 3],
}

/// `H_t` from `X_t: [B, N, c_in]` and `H_{t-1}: [B, N, h]`.
pub fn cell_step(x: &Tensor, h_prev: &Tensor, params: &CellParams, diffusion: &DiffusionOperator) -> Result<Tensor> {
    if x.rank() != 3 || h_prev.rank() != 3 || x.shape()[..2] != h_prev.shape()[..2] {
        return Err(Error::shape("cell_step", x.shape(), h_prev.shape()));
    }
    let (b, n, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = h_prev.shape()[2];
    let terms = diffusion.powers.len();
    let rows = terms * (cin + h);
    let mut out = Vec::with_capacity(b * n * h);
    for s in 0..b {
        let mut tape = Tape::new();
        let powers: Vec<Var> = diffusion.powers.iter().map(|p| tape.constant(p.clone())).collect();
        let mut gates = Vec::with_capacity(3);
        for ((shared, per_node), bias) in params.kernels.iter().zip(&params.biases) {
            gates.push(GateVars {
                shared: Some(tape.constant(shared.reshape(&[rows, h])?)),
                per_node: per_node
                    .as_ref()
                    .map(|w| w.reshape(&[n, rows, h]).map(|w| tape.constant(w)))
                    .transpose()?,
                bias: tape.constant(bias.clone()),
            });
        }
        let cell = CellVars {
            gates: [gates[0], gates[1], gates[2]],
        };
        let xs = tape.constant(Tensor::new(vec![n, cin], x.data()[s * n * cin..(s + 1) * n * cin].to_vec())?);
        let hs = tape.constant(Tensor::new(vec![n, h], h_prev.data()[s * n * h..(s + 1) * n * h].to_vec())?);
        let next = cell_step_on_tape(&mut tape, xs, hs, &cell, &powers)?;
        out.extend_from_slice(tape.value(next).data());
    }
    Tensor::new(vec![b, n, h], out)
}
