//! Molecular graphs, conformations and labelled conformer ensembles.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bonding graph of a molecule: atom type codes plus undirected bonds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MolGraph {
    atom_types: Vec<u32>,
    bonds: Vec<(usize, usize)>,
}

impl MolGraph {
    /// Builds a graph, normalising every bond to `i < j`.
    ///
    /// Rejects self-bonds, duplicates and out-of-range indices. Connectivity
    /// is not required here; consumers that need it check [`MolGraph::is_connected`].
    pub fn new(atom_types: Vec<u32>, bonds: Vec<(usize, usize)>) -> Result<Self> {
        let n = atom_types.len();
        if n == 0 {
            return Err(Error::InvalidGraph("molecule has no atoms".into()));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::with_capacity(bonds.len());
        for (a, b) in bonds {
            if a == b {
                return Err(Error::InvalidGraph(format!("self-bond on atom {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "bond ({a},{b}) out of range for {n} atoms"
                )));
            }
            let pair = (a.min(b), a.max(b));
            if !seen.insert(pair) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate bond ({},{})",
                    pair.0, pair.1
                )));
            }
            normalized.push(pair);
        }
        Ok(Self {
            atom_types,
            bonds: normalized,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atom_types.len()
    }

    pub fn atom_types(&self) -> &[u32] {
        &self.atom_types
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_atoms()];
        for &(a, b) in &self.bonds {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        self.topological_distances()
            .iter()
            .all(|row| row.iter().all(Option::is_some))
    }

    /// Shortest-path bond counts between every pair of atoms (`None` when unreachable).
    pub fn topological_distances(&self) -> Vec<Vec<Option<usize>>> {
        let n = self.n_atoms();
        let adj = self.neighbors();
        let mut out = vec![vec![None; n]; n];
        for (src, row) in out.iter_mut().enumerate() {
            row[src] = Some(0);
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                let du = row[u].unwrap_or(0);
                for &w in &adj[u] {
                    if row[w].is_none() {
                        row[w] = Some(du + 1);
                        queue.push_back(w);
                    }
                }
            }
        }
        out
    }

    /// Bond-angle triples `(i, center, k)` with `i < k`.
    pub fn angle_triples(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (center, nbrs) in self.neighbors().iter().enumerate() {
            for (x, &i) in nbrs.iter().enumerate() {
                for &k in &nbrs[x + 1..] {
                    out.push((i, center, k));
                }
            }
        }
        out
    }

    /// Returns a copy with atoms relabelled so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_atoms() {
            return Err(Error::InvalidGraph("permutation length mismatch".into()));
        }
        let mut types = vec![0; self.n_atoms()];
        for (old, &new) in perm.iter().enumerate() {
            types[new] = self.atom_types[old];
        }
        let bonds = self.bonds.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        Self::new(types, bonds)
    }
}

/// Cartesian coordinates of one conformation, one `[x, y, z]` row per atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conformation {
    coords: Vec<[f64; 3]>,
}

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConformation("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            coords: vec![[0.0; 3]; n],
        }
    }

    /// Builds from a row-major `n*3` slice.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "flat coordinate length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn n_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.coords.len().max(1) as f64;
        let mut m = [0.0; 3];
        for row in &self.coords {
            for d in 0..3 {
                m[d] += row[d];
            }
        }
        m.map(|v| v / n)
    }

    /// Subtracts the column means so the centre of mass sits at the origin.
    pub fn center(&self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::InvalidConformation("non-finite coordinate".into()));
        }
        let m = self.centroid();
        Ok(Self {
            coords: self
                .coords
                .iter()
                .map(|r| [r[0] - m[0], r[1] - m[1], r[2] - m[2]])
                .collect(),
        })
    }

    /// `self + scale * delta`, row by row.
    pub fn add_scaled(&self, delta: &[[f64; 3]], scale: f64) -> Result<Self> {
        if delta.len() != self.coords.len() {
            return Err(Error::Shape(format!(
                "{} atoms vs {} displacement rows",
                self.coords.len(),
                delta.len()
            )));
        }
        Ok(Self {
            coords: self
                .coords
                .iter()
                .zip(delta)
                .map(|(r, d)| [r[0] + scale * d[0], r[1] + scale * d[1], r[2] + scale * d[2]])
                .collect(),
        })
    }

    /// Applies `x -> R x + shift` to every atom; `rot` is row-major.
    pub fn transformed(&self, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> Self {
        Self {
            coords: self
                .coords
                .iter()
                .map(|r| apply_rotation(rot, r, shift))
                .collect(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut coords = vec![[0.0; 3]; self.coords.len()];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = self.coords[old];
        }
        Self { coords }
    }

    /// Full pairwise Euclidean distance matrix.
    pub fn distance_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.coords.len();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = distance(&self.coords[i], &self.coords[j]);
                out[i][j] = d;
                out[j][i] = d;
            }
        }
        out
    }
}

pub(crate) fn apply_rotation(rot: &[[f64; 3]; 3], r: &[f64; 3], shift: [f64; 3]) -> [f64; 3] {
    let mut out = shift;
    for (a, row) in rot.iter().enumerate() {
        out[a] += row[0] * r[0] + row[1] * r[1] + row[2] * r[2];
    }
    out
}

pub(crate) fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// All reference conformers of one molecule together with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformerEnsemble {
    pub mol_id: String,
    pub graph: MolGraph,
    pub conformers: Vec<Conformation>,
    pub energies: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
}

impl ConformerEnsemble {
    pub fn new(
        mol_id: impl Into<String>,
        graph: MolGraph,
        conformers: Vec<Conformation>,
        energies: Option<Vec<f64>>,
        weights: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = graph.n_atoms();
        if let Some(bad) = conformers.iter().find(|c| c.n_atoms() != n) {
            return Err(Error::Shape(format!(
                "conformer has {} atoms, graph has {n}",
                bad.n_atoms()
            )));
        }
        if let Some(e) = &energies {
            if e.len() != conformers.len() {
                return Err(Error::Shape(format!(
                    "{} energies for {} conformers",
                    e.len(),
                    conformers.len()
                )));
            }
        }
        if let Some(w) = &weights {
            if w.len() != conformers.len() {
                return Err(Error::Shape(format!(
                    "{} weights for {} conformers",
                    w.len(),
                    conformers.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|x| !(0.0..=1.0).contains(x)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConformation(format!(
                    "weights must lie in [0,1] and sum to 1 (sum = {total})"
                )));
            }
        }
        Ok(Self {
            mol_id: mol_id.into(),
            graph,
            conformers,
            energies,
            weights,
        })
    }

    /// Fills `weights` from `energies` at thermal energy `kt`.
    pub fn with_boltzmann_weights(mut self, kt: f64) -> Result<Self> {
        let energies = self.energies.as_ref().ok_or(Error::MissingLabels)?;
        self.weights = Some(boltzmann_weights(energies, kt)?);
        Ok(self)
    }
}

/// Per-molecule affine map from raw energies to regression targets.
///
/// Min-shift and range-scale: the lowest energy maps to 0, the highest to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyLabelNormalizer {
    shift: f64,
    scale: f64,
}

impl EnergyLabelNormalizer {
    pub fn new(shift: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !shift.is_finite() || !scale.is_finite() {
            return Err(Error::Config(format!(
                "normalizer needs finite shift and scale > 0, got ({shift}, {scale})"
            )));
        }
        Ok(Self { shift, scale })
    }

    pub fn fit(energies: &[f64]) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let lo = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        Self::new(lo, if range > 0.0 { range } else { 1.0 })
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn normalize(&self, energy: f64) -> f64 {
        (energy - self.shift) / self.scale
    }
}

/// Boltzmann weights `exp(-(E_i - min E)/kT)`, normalised to sum to one.
pub fn boltzmann_weights(energies: &[f64], kt: f64) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if !(kt > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {kt}")));
    }
    let lo = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = energies.iter().map(|e| (-(e - lo) / kt).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / z).collect())
}

/// Index of the ground-state conformer: highest weight, else lowest energy.
/// Ties resolve to the lowest index.
pub fn ground_state_label(ensemble: &ConformerEnsemble) -> Result<usize> {
    if let Some(w) = &ensemble.weights {
        return argmax(w).ok_or(Error::EmptyEnsemble);
    }
    if let Some(e) = &ensemble.energies {
        return argmin(e).ok_or(Error::EmptyEnsemble);
    }
    Err(Error::MissingLabels)
}

pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub(crate) fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Graph Laplacian `D - A` as a dense row-major matrix.
pub fn laplacian(graph: &MolGraph) -> Result<Vec<Vec<f64>>> {
    if !graph.is_connected() {
        return Err(Error::DisconnectedGraph);
    }
    let n = graph.n_atoms();
    let mut l = vec![vec![0.0; n]; n];
    for &(a, b) in graph.bonds() {
        l[a][b] -= 1.0;
        l[b][a] -= 1.0;
        l[a][a] += 1.0;
        l[b][b] += 1.0;
    }
    Ok(l)
}
