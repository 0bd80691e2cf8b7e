//! Micro (user) and macro (region) graphs built from planar coordinates.
//!
//! Edge weights use a thresholded Gaussian kernel on Euclidean distance,
//! `exp(-d²/σ²)` kept only when it reaches `r`. The diffusion base matrix is
//! the random-walk normalization with self loops, `D⁻¹(A + I)`.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Micro,
    Macro,
}

#[derive(Clone, Debug)]
pub struct NodeSet {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub level: Level,
    /// Region index per node; only meaningful at the micro level.
    pub region_of: Vec<usize>,
}

impl NodeSet {
    pub fn macro_level(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        let set = NodeSet {
            ids,
            coords,
            level: Level::Macro,
            region_of: Vec::new(),
        };
        set.validate(None)?;
        Ok(set)
    }

    pub fn micro_level(ids: Vec<String>, coords: Vec<[f64; 2]>, region_of: Vec<usize>, n_regions: usize) -> Result<Self> {
        let set = NodeSet {
            ids,
            coords,
            level: Level::Micro,
            region_of,
        };
        set.validate(Some(n_regions))?;
        Ok(set)
    }

    fn validate(&self, n_regions: Option<usize>) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::invalid("node set is empty"));
        }
        if self.ids.len() != self.coords.len() {
            return Err(Error::invalid("ids and coordinates differ in length"));
        }
        let mut seen = HashSet::new();
        for id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate node id {id}")));
            }
        }
        if self.coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("node coordinates".into()));
        }
        if let Some(r) = n_regions {
            if self.region_of.len() != self.ids.len() {
                return Err(Error::invalid("every micro node needs a region"));
            }
            if let Some(bad) = self.region_of.iter().find(|&&g| g >= r) {
                return Err(Error::invalid(format!("region index {bad} out of range {r}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    /// Row-major `n × n`.
    pub weights: Vec<f64>,
    pub sigma2: f64,
    pub r: f64,
}

impl AdjacencyMatrix {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.weights.clone()).expect("square")
    }
}

pub fn build_adjacency(nodes: &NodeSet, sigma2: f64, r: f64) -> Result<AdjacencyMatrix> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("threshold r must lie in [0, 1], got {r}")));
    }
    let n = nodes.len();
    if n == 0 {
        return Err(Error::invalid("adjacency needs at least one node"));
    }
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let [xi, yi] = nodes.coords[i];
            let [xj, yj] = nodes.coords[j];
            let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
            let w = (-d2 / sigma2).exp();
            if w >= r {
                weights[i * n + j] = w;
                weights[j * n + i] = w;
            }
        }
    }
    Ok(AdjacencyMatrix { n, weights, sigma2, r })
}

/// `D⁻¹(A + I)` with `D` the row sums of `A + I`.
pub fn normalize(adj: &AdjacencyMatrix) -> Tensor {
    let n = adj.n;
    let mut out = adj.weights.clone();
    for i in 0..n {
        out[i * n + i] += 1.0;
        let row = &mut out[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        for v in row {
            *v /= s;
        }
    }
    Tensor::new(vec![n, n], out).expect("square")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionOperator {
    /// `[I, Ã, Ã², …, Ã^K]`, each `n × n`.
    pub powers: Vec<Tensor>,
}

impl DiffusionOperator {
    pub fn order(&self) -> usize {
        self.powers.len() - 1
    }

    pub fn n(&self) -> usize {
        self.powers[0].shape()[0]
    }

    /// Applies a node permutation: `out[i] = in[perm[i]]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        let powers = self
            .powers
            .iter()
            .map(|p| {
                let mut t = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    for j in 0..n {
                        t.set(&[i, j], p.at(&[perm[i], perm[j]]));
                    }
                }
                t
            })
            .collect();
        DiffusionOperator { powers }
    }
}

pub fn diffusion_powers(base: &Tensor, k: usize) -> Result<DiffusionOperator> {
    if base.rank() != 2 || base.shape()[0] != base.shape()[1] {
        return Err(Error::shape("diffusion_powers", base.shape(), &[]));
    }
    let mut powers = vec![Tensor::eye(base.shape()[0])];
    for _ in 0..k {
        let next = powers.last().unwrap().matmul(base)?;
        powers.push(next);
    }
    Ok(DiffusionOperator { powers })
}

/// Mean of member-user signals per region for one time step.
/// `users[i]` is user `i`'s value; returns one value per region.
pub fn region_means(users: &[f64], region_of: &[usize], n_regions: usize) -> Vec<f64> {
    let mut sums = vec![0.0; n_regions];
    let mut counts = vec![0usize; n_regions];
    for (&v, &g) in users.iter().zip(region_of) {
        sums[g] += v;
        counts[g] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// The hierarchical pair of graphs used by the model.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub users: NodeSet,
    pub regions: NodeSet,
    pub micro: DiffusionOperator,
    /// One-step macro mixing matrix `Ã_r` (regions × regions).
    pub macro_mix: Tensor,
}

impl Hierarchy {
    pub fn build(users: NodeSet, regions: NodeSet, micro_sigma2: f64, macro_sigma2: f64, r: f64, k: usize) -> Result<Self> {
        let micro = diffusion_powers(&normalize(&build_adjacency(&users, micro_sigma2, r)?), k)?;
        let macro_mix = normalize(&build_adjacency(&regions, macro_sigma2, r)?);
        Ok(Hierarchy {
            users,
            regions,
            micro,
            macro_mix,
        })
    }

    /// Macro feature for every user at one time step: region means mixed
    /// one hop over the region graph, then broadcast to member users.
    pub fn macro_feature(&self, users: &[f64]) -> Vec<f64> {
        let nr = self.regions.len();
        let means = region_means(users, &self.users.region_of, nr);
        let mixed: Vec<f64> = (0..nr)
            .map(|g| self.macro_mix.row(g).iter().zip(&means).map(|(w, m)| w * m).sum())
            .collect();
        self.users.region_of.iter().map(|&g| mixed[g]).collect()
    }
}
