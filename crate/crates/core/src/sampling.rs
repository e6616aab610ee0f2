//! Energy-guided Euler sampling and ground-state certification.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moltypes::{argmin, Conformation, MolGraph};
use crate::netmodel::{energy_and_grad_with, vector_field_with, GraphFeatures, ModelParams, NetKind};
use crate::prior::HarmonicPrior;
use crate::rng::derive_seed;

/// `lambda_t = a (1 - t)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSchedule {
    pub amplitude: f64,
}

impl GuidanceSchedule {
    pub fn new(amplitude: f64) -> Result<Self> {
        if !(amplitude >= 0.0) || !amplitude.is_finite() {
            return Err(Error::Config(format!("guidance amplitude {amplitude} must be >= 0")));
        }
        Ok(Self { amplitude })
    }

    pub fn lambda(&self, t: f64) -> f64 {
        self.amplitude * (1.0 - t) * (1.0 - t)
    }
}

/// Which tuned amplitude table to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Drugs,
    Qm9,
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drugs" | "geom-drugs" => Ok(Self::Drugs),
            "qm9" | "geom-qm9" => Ok(Self::Qm9),
            other => Err(Error::Config(format!("unknown dataset tag {other:?}"))),
        }
    }
}

const TABLE_STEPS: [usize; 4] = [1, 2, 5, 50];
const DRUGS_AMPLITUDES: [f64; 4] = [0.5, 0.3, 0.2, 0.1];
const QM9_AMPLITUDES: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Tabulated amplitude for 1, 2, 5 and 50 steps; linear in `ln N` between
/// entries and held constant past 50.
pub fn default_schedule(tag: DatasetTag, n_steps: usize) -> GuidanceSchedule {
    let table = match tag {
        DatasetTag::Drugs => DRUGS_AMPLITUDES,
        DatasetTag::Qm9 => QM9_AMPLITUDES,
    };
    let n = n_steps.max(1);
    if let Some(k) = TABLE_STEPS.iter().position(|&s| s == n) {
        return GuidanceSchedule { amplitude: table[k] };
    }
    if n > TABLE_STEPS[3] {
        return GuidanceSchedule { amplitude: table[3] };
    }
    let k = TABLE_STEPS.iter().position(|&s| s > n).expect("n lies inside the table");
    let (lo, hi) = ((TABLE_STEPS[k - 1] as f64).ln(), (TABLE_STEPS[k] as f64).ln());
    let w = ((n as f64).ln() - lo) / (hi - lo);
    GuidanceSchedule {
        amplitude: table[k - 1] + w * (table[k] - table[k - 1]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub schedule: GuidanceSchedule,
    pub guided: bool,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        GuidanceSchedule::new(self.schedule.amplitude).map(|_| ())
    }
}

/// One-shot endpoint estimate `c_t + (1 - t) v`.
pub fn x1_hat(c_t: &Conformation, t: f64, v: &[[f64; 3]]) -> Result<Conformation> {
    c_t.add_scaled(v, 1.0 - t)
}

/// Guided field `v - lambda_t grad J(x1_hat)` from a precomputed unguided `v`.
pub fn guide(
    params_phi: &ModelParams,
    feats: &GraphFeatures,
    c_t: &Conformation,
    t: f64,
    v: Vec<[f64; 3]>,
    schedule: &GuidanceSchedule,
) -> Result<Vec<[f64; 3]>> {
    let lambda = schedule.lambda(t);
    if lambda == 0.0 {
        return Ok(v);
    }
    let target = x1_hat(c_t, t, &v)?;
    let (_, grad) = energy_and_grad_with(params_phi, feats, &target, true)?;
    Ok(v
        .iter()
        .zip(&grad)
        .map(|(a, g)| [0, 1, 2].map(|k| a[k] - lambda * g[k]))
        .collect())
}

fn check_kinds(theta: &ModelParams, phi: Option<&ModelParams>) -> Result<()> {
    if theta.kind() != NetKind::VectorField {
        return Err(Error::Model("sampler needs a vector-field network".into()));
    }
    if phi.is_some_and(|p| p.kind() != NetKind::Energy) {
        return Err(Error::Model("guidance needs an energy network".into()));
    }
    Ok(())
}

pub fn guided_field(
    params_theta: &ModelParams,
    params_phi: &ModelParams,
    g: &MolGraph,
    c_t: &Conformation,
    t: f64,
    schedule: &GuidanceSchedule,
) -> Result<Vec<[f64; 3]>> {
    check_kinds(params_theta, Some(params_phi))?;
    if c_t.n_atoms() != g.n_atoms() {
        return Err(Error::Model("conformation does not match graph".into()));
    }
    let feats = GraphFeatures::new(g, params_theta.config().n_atom_types)?;
    let v = vector_field_with(params_theta, &feats, c_t, t)?;
    guide(params_phi, &feats, c_t, t, v, schedule)
}

/// `N` explicit Euler steps at `t = i / N`, then re-centring.
pub fn integrate_euler(
    c0: &Conformation,
    n_steps: usize,
    mut field: impl FnMut(&Conformation, f64) -> Result<Vec<[f64; 3]>>,
) -> Result<Conformation> {
    if n_steps < 1 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut c = c0.clone();
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let v = field(&c, t)?;
        c = c.add_scaled(&v, dt)?;
    }
    c.center()
}

/// Integrates from a given starting point; guidance applies only when
/// `cfg.guided` and an energy network is supplied.
pub fn sample_from(
    params_theta: &ModelParams,
    params_phi: Option<&ModelParams>,
    feats: &GraphFeatures,
    c0: &Conformation,
    cfg: &SamplerConfig,
) -> Result<Conformation> {
    cfg.validate()?;
    check_kinds(params_theta, params_phi)?;
    let phi = params_phi.filter(|_| cfg.guided);
    integrate_euler(c0, cfg.n_steps, |c, t| {
        let v = vector_field_with(params_theta, feats, c, t)?;
        match phi {
            Some(phi) => guide(phi, feats, c, t, v, &cfg.schedule),
            None => Ok(v),
        }
    })
}

/// Draws `c0` from the prior with `cfg.seed` and integrates to `t = 1`.
pub fn sample_ode(
    params_theta: &ModelParams,
    params_phi: Option<&ModelParams>,
    g: &MolGraph,
    prior: &HarmonicPrior,
    cfg: &SamplerConfig,
) -> Result<Conformation> {
    cfg.validate()?;
    if prior.graph() != g {
        return Err(Error::Model("prior was built for a different graph".into()));
    }
    let feats = GraphFeatures::new(g, params_theta.config().n_atom_types)?;
    sample_from(params_theta, params_phi, &feats, &prior.sample(cfg.seed), cfg)
}

/// Seed of candidate `m`; candidate 0 reuses the base seed.
pub fn candidate_seed(seed: u64, m: usize) -> u64 {
    if m == 0 {
        seed
    } else {
        derive_seed(seed, m as u64)
    }
}

/// `n` samples with seeds [`candidate_seed`]`(cfg.seed, 0..n)`.
pub fn sample_many(
    params_theta: &ModelParams,
    params_phi: Option<&ModelParams>,
    g: &MolGraph,
    prior: &HarmonicPrior,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Vec<Conformation>> {
    (0..n)
        .map(|m| {
            let cfg = SamplerConfig {
                seed: candidate_seed(cfg.seed, m),
                ..*cfg
            };
            sample_ode(params_theta, params_phi, g, prior, &cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertMode {
    JustFm,
    EnsembleCert,
}

impl FromStr for CertMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "justfm" => Ok(Self::JustFm),
            "ensemblecert" => Ok(Self::EnsembleCert),
            other => Err(Error::Config(format!("unknown certification mode {other:?}"))),
        }
    }
}

impl CertMode {
    /// Guidance amplitude each mode uses unless overridden.
    pub fn default_amplitude(self) -> f64 {
        match self {
            Self::JustFm => 0.5,
            Self::EnsembleCert => 0.2,
        }
    }
}

/// Chosen conformation with the candidates' energies.
#[derive(Debug, Clone, PartialEq)]
pub struct Certified {
    pub conformation: Conformation,
    pub index: usize,
    pub energies: Vec<f64>,
}

/// Index of the lowest energy; ties go to the lowest index.
pub fn select_lowest(energies: &[f64]) -> Result<usize> {
    argmin(energies).ok_or(Error::EmptyEnsemble)
}

/// JustFM returns one guided sample; EnsembleCert draws `m` samples and keeps
/// the one with the lowest learned energy.
pub fn certify_ground_state(
    params_theta: &ModelParams,
    params_phi: &ModelParams,
    g: &MolGraph,
    prior: &HarmonicPrior,
    mode: CertMode,
    m: usize,
    cfg: &SamplerConfig,
) -> Result<Certified> {
    let count = match mode {
        CertMode::JustFm => 1,
        CertMode::EnsembleCert => {
            if m < 1 {
                return Err(Error::Config("EnsembleCert needs M >= 1".into()));
            }
            m
        }
    };
    let candidates = sample_many(params_theta, Some(params_phi), g, prior, cfg, count)?;
    let feats = GraphFeatures::new(g, params_phi.config().n_atom_types)?;
    let energies = candidates
        .iter()
        .map(|c| Ok(energy_and_grad_with(params_phi, &feats, c, false)?.0))
        .collect::<Result<Vec<_>>>()?;
    let index = select_lowest(&energies)?;
    Ok(Certified {
        conformation: candidates[index].clone(),
        index,
        energies,
    })
}
