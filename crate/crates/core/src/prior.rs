//! Harmonic prior: a Gaussian over coordinates whose precision is the bond-graph
//! Laplacian, applied independently to each Cartesian axis.
//!
//! The Laplacian's null space (rigid translation) is dropped, so samples are
//! proper Gaussians with their centre of mass at the origin.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::symmetric_eigen;
use crate::moltypes::{laplacian, Conformation, MolGraph};
use crate::rng::seeded;

/// Relative cutoff below which a Laplacian eigenvalue counts as zero.
pub const NULL_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct HarmonicPrior {
    graph: MolGraph,
    eigvals: Vec<f64>,
    eigvecs: Vec<Vec<f64>>,
    null_tol: f64,
}

impl HarmonicPrior {
    pub fn build(graph: &MolGraph) -> Result<Self> {
        let l = laplacian(graph)?;
        let eig = symmetric_eigen(&l);
        let largest = eig.values.last().copied().unwrap_or(0.0).max(0.0);
        Ok(Self {
            graph: graph.clone(),
            eigvals: eig.values.into_iter().map(|v| v.max(0.0)).collect(),
            eigvecs: eig.vectors,
            null_tol: NULL_TOL * largest,
        })
    }

    pub fn graph(&self) -> &MolGraph {
        &self.graph
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    /// `eigvecs()[i][k]` is component `i` of the `k`-th eigenvector.
    pub fn eigvecs(&self) -> &[Vec<f64>] {
        &self.eigvecs
    }

    pub fn null_tol(&self) -> f64 {
        self.null_tol
    }

    fn is_null(&self, k: usize) -> bool {
        self.eigvals[k] <= self.null_tol
    }

    pub fn sample(&self, seed: u64) -> Conformation {
        self.sample_with(&mut seeded(seed))
    }

    /// Per axis: sum over non-null modes of `z_k / sqrt(lambda_k) * u_k`.
    pub fn sample_with(&self, rng: &mut impl Rng) -> Conformation {
        let n = self.graph.n_atoms();
        let mut coords = vec![[0.0; 3]; n];
        for axis in 0..3 {
            for k in 0..n {
                if self.is_null(k) {
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                let amp = z / self.eigvals[k].sqrt();
                for (i, row) in coords.iter_mut().enumerate() {
                    row[axis] += amp * self.eigvecs[i][k];
                }
            }
        }
        Conformation::new(coords).expect("prior samples are finite")
    }

    /// Pseudo-inverse of the Laplacian: the per-axis covariance of samples.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let n = self.graph.n_atoms();
        let mut cov = vec![vec![0.0; n]; n];
        for k in (0..n).filter(|&k| !self.is_null(k)) {
            let inv = 1.0 / self.eigvals[k];
            for i in 0..n {
                for j in 0..n {
                    cov[i][j] += inv * self.eigvecs[i][k] * self.eigvecs[j][k];
                }
            }
        }
        cov
    }
}
