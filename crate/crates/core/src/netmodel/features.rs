use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::moltypes::MolGraph;

/// Radial featurisation of interatomic distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub n_rbf: usize,
    pub d_cutoff: f64,
    pub eps_norm: f64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            n_rbf: 16,
            d_cutoff: 10.0,
            eps_norm: 0.01,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rbf < 1 || !(self.d_cutoff > 0.0) || !(self.eps_norm > 0.0) {
            return Err(Error::Config(format!("invalid featurizer config {self:?}")));
        }
        Ok(())
    }

    /// Centres evenly spaced in `[exp(-d_cutoff), 1]`.
    pub fn rbf_centers(&self) -> Vec<f64> {
        let lo = (-self.d_cutoff).exp();
        if self.n_rbf == 1 {
            return vec![lo];
        }
        let step = (1.0 - lo) / (self.n_rbf - 1) as f64;
        (0..self.n_rbf).map(|k| lo + k as f64 * step).collect()
    }

    /// Shared width `(2 (1 - exp(-d_cutoff)) / n_rbf)^-2`.
    pub fn rbf_beta(&self) -> f64 {
        let w = 2.0 * (1.0 - (-self.d_cutoff).exp()) / self.n_rbf as f64;
        1.0 / (w * w)
    }

    /// Exponential radial basis `exp(-beta (exp(-d) - mu_k)^2)`.
    pub fn rbf(&self, d: f64) -> Vec<f64> {
        let beta = self.rbf_beta();
        let x = (-d).exp();
        self.rbf_centers()
            .into_iter()
            .map(|mu| (-beta * (x - mu).powi(2)).exp())
            .collect()
    }

    /// Cosine cutoff `(cos(pi d / d_cutoff) + 1) / 2`, zero past the cutoff.
    pub fn cutoff(&self, d: f64) -> f64 {
        if d <= self.d_cutoff {
            0.5 * ((std::f64::consts::PI * d / self.d_cutoff).cos() + 1.0)
        } else {
            0.0
        }
    }

    /// Differentiable RBF expansion of an `E x 1` distance column.
    pub(crate) fn rbf_var<'t>(&self, d: Var<'t>) -> Result<Var<'t>> {
        let [e, _] = d.shape();
        let centers = Tensor::new(1, self.n_rbf, self.rbf_centers())?;
        let mu = d.tape().constant(centers).broadcast_to(e, self.n_rbf)?;
        let x = d.scale(-1.0).exp().broadcast_to(e, self.n_rbf)?;
        Ok(x.sub(mu)?.square().scale(-self.rbf_beta()).exp())
    }

    /// Differentiable cosine cutoff of an `E x 1` distance column.
    pub(crate) fn cutoff_var<'t>(&self, d: Var<'t>) -> Result<Var<'t>> {
        let value = d.value();
        let mask: Vec<f64> = value
            .data()
            .iter()
            .map(|&x| if x <= self.d_cutoff { 1.0 } else { 0.0 })
            .collect();
        let mask = d.tape().constant(Tensor::new(value.rows(), 1, mask)?);
        let smooth = d
            .scale(std::f64::consts::PI / self.d_cutoff)
            .cos()
            .offset(1.0)
            .scale(0.5);
        smooth.mul(mask)
    }
}

/// Number of per-edge topology attributes.
pub const EDGE_ATTRS: usize = 3;

/// Coordinate-independent graph data consumed by the networks.
#[derive(Debug, Clone)]
pub struct GraphFeatures {
    pub n_atoms: usize,
    pub atom_types: Arc<[usize]>,
    /// Directed edge `k` runs from `src[k]` to `dst[k]`; all ordered pairs `i != j`.
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// `[bonded, 1-3 pair, 1 / topological distance]` per edge.
    pub edge_attr: Tensor,
}

impl GraphFeatures {
    pub fn new(graph: &MolGraph, n_atom_types: usize) -> Result<Self> {
        let n = graph.n_atoms();
        let types: Vec<usize> = graph.atom_types().iter().map(|&t| t as usize).collect();
        if let Some(bad) = types.iter().find(|&&t| t >= n_atom_types) {
            return Err(Error::Model(format!(
                "atom type {bad} outside the embedding table of {n_atom_types}"
            )));
        }
        let topo = graph.topological_distances();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut attr = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                src.push(i);
                dst.push(j);
                let hops = topo[i][j];
                attr.push(if hops == Some(1) { 1.0 } else { 0.0 });
                attr.push(if hops == Some(2) { 1.0 } else { 0.0 });
                attr.push(hops.map_or(0.0, |h| 1.0 / h as f64));
            }
        }
        let n_edges = src.len();
        Ok(Self {
            n_atoms: n,
            atom_types: Arc::from(types),
            src: Arc::from(src),
            dst: Arc::from(dst),
            edge_attr: Tensor::new(n_edges, EDGE_ATTRS, attr)?,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}
