//! Synthetic molecules: a spring-and-angle toy potential sampled by Metropolis
//! Monte Carlo, with every conformer labelled by its true energy.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moltypes::{Conformation, ConformerEnsemble, MolGraph};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Chain,
    Ring,
    RandomTree,
    /// Each molecule picks one of the above uniformly (rings need three atoms).
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub topology: Topology,
    pub n_atom_types: u32,
    /// Bond spring constant `k` in `k (d - r0)^2`.
    pub k_bond: f64,
    pub r0: f64,
    /// Weight of `1 - cos(angle - angle0)` per bonded triple.
    pub w_angle: f64,
    /// Preferred bond angle in degrees.
    pub angle0_deg: f64,
    pub temperature: f64,
    pub conformers_per_mol: usize,
    /// Half-width of the uniform single-atom Metropolis move.
    pub step_size: f64,
    pub burn_in_sweeps: usize,
    pub thin_sweeps: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_molecules: 50,
            min_atoms: 4,
            max_atoms: 7,
            topology: Topology::Mixed,
            n_atom_types: 4,
            k_bond: 25.0,
            r0: 3.0,
            w_angle: 8.0,
            angle0_deg: 109.5,
            temperature: 0.3,
            conformers_per_mol: 10,
            step_size: 0.14,
            burn_in_sweeps: 200,
            thin_sweeps: 20,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_molecules == 0 || self.conformers_per_mol == 0 || self.n_atom_types == 0 {
            return bad("counts must be positive");
        }
        if self.min_atoms == 0 || self.min_atoms > self.max_atoms {
            return bad("atom range must satisfy 1 <= min_atoms <= max_atoms");
        }
        if self.topology == Topology::Ring && self.min_atoms < 3 {
            return bad("rings need at least three atoms");
        }
        if !(self.k_bond > 0.0) || !(self.r0 > 0.0) {
            return bad("k_bond and r0 must be positive");
        }
        if !(self.w_angle >= 0.0) || !(self.temperature > 0.0) || !(self.step_size > 0.0) {
            return bad("w_angle >= 0, temperature > 0 and step_size > 0 required");
        }
        if !(0.0..=180.0).contains(&self.angle0_deg) {
            return bad("angle0_deg must lie in [0, 180]");
        }
        Ok(())
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `sum_bonds k_bond (d - r0)^2 + w_angle sum_angles (1 - cos(theta - angle0))`.
pub fn toy_energy(graph: &MolGraph, c: &Conformation, spec: &SyntheticSpec) -> f64 {
    let x = c.coords();
    let bonds: f64 = graph
        .bonds()
        .iter()
        .map(|&(i, j)| {
            let d = dot(&sub(&x[i], &x[j]), &sub(&x[i], &x[j])).sqrt();
            spec.k_bond * (d - spec.r0) * (d - spec.r0)
        })
        .sum();
    if spec.w_angle == 0.0 {
        return bonds;
    }
    let (sin0, cos0) = spec.angle0_deg.to_radians().sin_cos();
    let angles: f64 = graph
        .angle_triples()
        .iter()
        .map(|&(i, j, k)| {
            let (a, b) = (sub(&x[i], &x[j]), sub(&x[k], &x[j]));
            let norm = (dot(&a, &a) * dot(&b, &b)).sqrt().max(1e-12);
            let cos = (dot(&a, &b) / norm).clamp(-1.0, 1.0);
            let sin = (1.0 - cos * cos).sqrt();
            1.0 - (cos * cos0 + sin * sin0)
        })
        .sum();
    bonds + spec.w_angle * angles
}

fn build_graph(rng: &mut impl Rng, n: usize, topology: Topology, n_types: u32) -> Result<MolGraph> {
    let topology = match topology {
        Topology::Mixed => {
            let options: &[Topology] = if n >= 3 {
                &[Topology::Chain, Topology::Ring, Topology::RandomTree]
            } else {
                &[Topology::Chain, Topology::RandomTree]
            };
            *options.choose(rng).expect("non-empty")
        }
        t => t,
    };
    let mut bonds: Vec<(usize, usize)> = match topology {
        Topology::Chain | Topology::Mixed => (1..n).map(|i| (i - 1, i)).collect(),
        Topology::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        Topology::RandomTree => {
            let mut degree = vec![0usize; n];
            let mut bonds = Vec::new();
            for i in 1..n {
                let open: Vec<usize> = (0..i).filter(|&p| degree[p] < 3).collect();
                let parent = *open.choose(rng).expect("a tree of max degree 3 always has room");
                degree[parent] += 1;
                degree[i] += 1;
                bonds.push((parent, i));
            }
            bonds
        }
    };
    if n == 2 && topology == Topology::Ring {
        bonds.truncate(1);
    }
    let types = (0..n).map(|_| rng.random_range(0..n_types)).collect();
    MolGraph::new(types, bonds)
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0.0; 3].map(|_: f64| rng.sample(StandardNormal));
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Spanning-tree walk with bonds at rest length.
fn initial_coords(rng: &mut impl Rng, graph: &MolGraph, r0: f64) -> Vec<[f64; 3]> {
    let n = graph.n_atoms();
    let nbrs = graph.neighbors();
    let mut pos = vec![[0.0; 3]; n];
    let mut placed = vec![false; n];
    placed[0] = true;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        for &j in &nbrs[i] {
            if !placed[j] {
                let u = random_unit(rng);
                pos[j] = [0, 1, 2].map(|k| pos[i][k] + r0 * u[k]);
                placed[j] = true;
                queue.push_back(j);
            }
        }
    }
    pos
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = [0.0; 4].map(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Move counts from a Metropolis run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetropolisStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MetropolisStats {
    pub fn acceptance(&self) -> f64 {
        self.accepted as f64 / self.proposed.max(1) as f64
    }
}

/// Single-atom Metropolis chain; returns the recorded conformers and energies.
pub fn metropolis(
    rng: &mut impl Rng,
    graph: &MolGraph,
    spec: &SyntheticSpec,
    start: Vec<[f64; 3]>,
    n_samples: usize,
) -> Result<(Vec<Conformation>, Vec<f64>, MetropolisStats)> {
    let n = graph.n_atoms();
    let energy_of = |x: &Vec<[f64; 3]>| -> Result<f64> {
        Ok(toy_energy(graph, &Conformation::new(x.clone())?, spec))
    };
    let mut x = start;
    let mut e = energy_of(&x)?;
    let mut stats = MetropolisStats::default();
    let mut sweep = |x: &mut Vec<[f64; 3]>, e: &mut f64, stats: &mut MetropolisStats| -> Result<()> {
        for _ in 0..n {
            let i = rng.random_range(0..n);
            let old = x[i];
            for v in x[i].iter_mut() {
                *v += rng.random_range(-spec.step_size..spec.step_size);
            }
            let e_new = energy_of(x)?;
            stats.proposed += 1;
            let accept = e_new <= *e || rng.random::<f64>() < (-(e_new - *e) / spec.temperature).exp();
            if accept {
                *e = e_new;
                stats.accepted += 1;
            } else {
                x[i] = old;
            }
        }
        Ok(())
    };
    for _ in 0..spec.burn_in_sweeps {
        sweep(&mut x, &mut e, &mut stats)?;
    }
    let mut confs = Vec::with_capacity(n_samples);
    let mut energies = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        for _ in 0..spec.thin_sweeps.max(1) {
            sweep(&mut x, &mut e, &mut stats)?;
        }
        confs.push(Conformation::new(x.clone())?);
        energies.push(e);
    }
    Ok((confs, energies, stats))
}

/// One synthetic molecule from its own seed.
pub fn gen_molecule(spec: &SyntheticSpec, index: usize, seed: u64) -> Result<(ConformerEnsemble, MetropolisStats)> {
    let mut rng = seeded(derive_seed(seed, index as u64));
    let n = rng.random_range(spec.min_atoms..=spec.max_atoms);
    let graph = build_graph(&mut rng, n, spec.topology, spec.n_atom_types)?;
    let start = initial_coords(&mut rng, &graph, spec.r0);
    let (confs, energies, stats) =
        metropolis(&mut rng, &graph, spec, start, spec.conformers_per_mol)?;
    let conformers = confs
        .into_iter()
        .map(|c| c.center().map(|c| c.transformed(&random_rotation(&mut rng), [0.0; 3])))
        .collect::<Result<Vec<_>>>()?;
    let ens = ConformerEnsemble::new(format!("toy-{index:04}"), graph, conformers, Some(energies), None)?;
    Ok((ens, stats))
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<ConformerEnsemble>> {
    spec.validate()?;
    (0..spec.n_molecules)
        .map(|i| gen_molecule(spec, i, seed).map(|(e, _)| e))
        .collect()
}
