//! Bridge-path construction, training losses, joint two-phase training and
//! reflow fine-tuning of the vector field.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::kabsch_align;
use crate::moltypes::{Conformation, ConformerEnsemble, EnergyLabelNormalizer, MolGraph};
use crate::netmodel::{
    forward_on_tape, BoundParams, Checkpoint, GraphFeatures, ModelParams, NetConfig, NetKind,
};
use crate::prior::HarmonicPrior;
use crate::rng::{derive_seed, seeded};
use crate::sampling::{sample_from, GuidanceSchedule, SamplerConfig};

/// One point on the noisy bridge between a prior draw and a data conformer.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub graph: MolGraph,
    pub t: f64,
    pub c0: Conformation,
    pub c1: Conformation,
    /// `(1 - t) c0 + t c1`.
    pub c_t_prime: Conformation,
    /// `c_t_prime + sigma sqrt(t (1 - t)) eps`.
    pub c_t: Conformation,
    /// `c1 - c0`.
    pub s_t: Vec<[f64; 3]>,
    /// `(1 - 2t) / (2t (1 - t)) (c_t - c_t_prime) + s_t`.
    pub v_target: Vec<[f64; 3]>,
}

/// Bridge sample with explicit noise `eps`.
pub fn make_path_sample_with_noise(
    g: &MolGraph,
    c0: &Conformation,
    c1: &Conformation,
    t: f64,
    sigma: f64,
    eps: &[[f64; 3]],
) -> Result<PathSample> {
    let n = g.n_atoms();
    if c0.n_atoms() != n || c1.n_atoms() != n || eps.len() != n {
        return Err(Error::Shape(format!(
            "path endpoints have {} and {} atoms and noise {} rows for a graph of {n}",
            c0.n_atoms(),
            c1.n_atoms(),
            eps.len()
        )));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("path time {t} must lie strictly inside (0, 1)")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma {sigma} must be >= 0")));
    }
    let s_t: Vec<[f64; 3]> = c0
        .coords()
        .iter()
        .zip(c1.coords())
        .map(|(a, b)| [0, 1, 2].map(|k| b[k] - a[k]))
        .collect();
    let c_t_prime = c0.add_scaled(&s_t, t)?;
    let c_t = c_t_prime.add_scaled(eps, sigma * (t * (1.0 - t)).sqrt())?;
    let coef = (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t));
    let v_target = c_t
        .coords()
        .iter()
        .zip(c_t_prime.coords())
        .zip(&s_t)
        .map(|((a, b), s)| [0, 1, 2].map(|k| coef * (a[k] - b[k]) + s[k]))
        .collect();
    Ok(PathSample {
        graph: g.clone(),
        t,
        c0: c0.clone(),
        c1: c1.clone(),
        c_t_prime,
        c_t,
        s_t,
        v_target,
    })
}

/// Bridge sample with standard-normal noise drawn from `rng`.
pub fn make_path_sample(
    g: &MolGraph,
    c0: &Conformation,
    c1: &Conformation,
    t: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PathSample> {
    let eps: Vec<[f64; 3]> = (0..c0.n_atoms())
        .map(|_| [0.0; 3].map(|_: f64| rng.sample(StandardNormal)))
        .collect();
    make_path_sample_with_noise(g, c0, c1, t, sigma, &eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sigma: f64,
    pub eta_energy: f64,
    pub t_min: f64,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub batch_size: usize,
    pub matching_steps: usize,
    pub finetune_steps: usize,
    /// Conformers per batch molecule in the energy-regression term.
    pub energy_conformers: usize,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    /// Superimpose each data conformer onto its prior draw before building the path.
    pub align_prior: bool,
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            eta_energy: 1.0,
            t_min: 1e-3,
            lr_theta: 1e-3,
            lr_phi: 1e-3,
            batch_size: 16,
            matching_steps: 200,
            finetune_steps: 200,
            energy_conformers: 4,
            clip_norm: 10.0,
            optimizer: OptimizerKind::Sgd,
            align_prior: false,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(self.t_min > 0.0 && self.t_min < 0.5) {
            return bad("t_min must lie in (0, 0.5)");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be >= 0");
        }
        if !(self.eta_energy >= 0.0) {
            return bad("eta_energy must be >= 0");
        }
        if !(self.lr_theta >= 0.0) || !(self.lr_phi >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if self.batch_size == 0 || self.energy_conformers == 0 || self.workers == 0 {
            return bad("batch_size, energy_conformers and workers must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Mean loss and mean parameter gradient over `items`, reduced in input order.
fn batch_value_and_grad<T: Sync>(
    params: &ModelParams,
    items: &[T],
    exec: &Exec,
    with_grad: bool,
    per_item: impl for<'t> Fn(&'t Tape, &BoundParams<'t>, &T) -> Result<Var<'t>> + Sync,
) -> Result<(f64, Vec<Tensor>)> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let results = exec.map(items, |item| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let bound = params.bind(&tape, with_grad);
        let loss = per_item(&tape, &bound, item)?;
        let value = loss.value().item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.grad(loss, bound.vars())?;
        Ok((value, grads.iter().map(|g| (*g.value()).clone()).collect()))
    });
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = if with_grad {
        params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    } else {
        Vec::new()
    };
    for r in results {
        let (value, g) = r?;
        total += value;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grads))
}

fn expect_kind(params: &ModelParams, kind: NetKind) -> Result<()> {
    if params.kind() != kind {
        return Err(Error::Model(format!("expected a {kind:?} network, got {:?}", params.kind())));
    }
    Ok(())
}

fn feats_for(params: &ModelParams, g: &MolGraph) -> Result<GraphFeatures> {
    GraphFeatures::new(g, params.config().n_atom_types)
}

fn sbcfm_item<'t>(
    params: &ModelParams,
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    s: &PathSample,
) -> Result<Var<'t>> {
    let feats = feats_for(params, &s.graph)?;
    let coords = tape.constant(Tensor::from_rows3(s.c_t.coords()));
    let v = forward_on_tape(params, bound, &feats, coords, s.t)?
        .vectors
        .ok_or_else(|| Error::Model("network has no vector head".into()))?;
    let target = tape.constant(Tensor::from_rows3(&s.v_target));
    Ok(v.sub(target)?.square().sum())
}

fn em_item<'t>(
    params: &ModelParams,
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    s: &PathSample,
) -> Result<Var<'t>> {
    let feats = feats_for(params, &s.graph)?;
    let coords = tape.var(Tensor::from_rows3(s.c_t_prime.coords()));
    let j = forward_on_tape(params, bound, &feats, coords, 0.0)?
        .energy
        .ok_or_else(|| Error::Model("network has no energy head".into()))?;
    let grad = tape.grad(j, &[coords])?[0];
    let target = tape.constant(Tensor::from_rows3(&s.s_t));
    Ok(grad.scale(-1.0).sub(target)?.square().sum())
}

/// `|J(c) - label|` for one labelled conformer.
struct EnergyItem<'a> {
    graph: &'a MolGraph,
    conf: &'a Conformation,
    label: f64,
}

fn energy_item<'t>(
    params: &ModelParams,
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    item: &EnergyItem<'_>,
) -> Result<Var<'t>> {
    let feats = feats_for(params, item.graph)?;
    let coords = tape.constant(Tensor::from_rows3(item.conf.coords()));
    let j = forward_on_tape(params, bound, &feats, coords, 0.0)?
        .energy
        .ok_or_else(|| Error::Model("network has no energy head".into()))?;
    let diff = j.offset(-item.label);
    let sign = if diff.value().item() >= 0.0 { 1.0 } else { -1.0 };
    Ok(diff.scale(sign))
}

/// Mean of `|v_theta(c_t, t) - v_target|^2` (squared norm over all atoms).
pub fn loss_sbcfm(params_theta: &ModelParams, batch: &[PathSample]) -> Result<f64> {
    expect_kind(params_theta, NetKind::VectorField)?;
    let exec = Exec::new(1)?;
    Ok(batch_value_and_grad(params_theta, batch, &exec, false, |t, b, s| {
        sbcfm_item(params_theta, t, b, s)
    })?
    .0)
}

/// As [`loss_sbcfm`], with the mean gradient per parameter tensor.
pub fn loss_sbcfm_grad(params_theta: &ModelParams, batch: &[PathSample]) -> Result<(f64, Vec<Tensor>)> {
    expect_kind(params_theta, NetKind::VectorField)?;
    let exec = Exec::new(1)?;
    batch_value_and_grad(params_theta, batch, &exec, true, |t, b, s| {
        sbcfm_item(params_theta, t, b, s)
    })
}

/// Mean of `|-grad J_phi(c_t_prime) - (c1 - c0)|^2`.
pub fn loss_em(params_phi: &ModelParams, batch: &[PathSample]) -> Result<f64> {
    expect_kind(params_phi, NetKind::Energy)?;
    let exec = Exec::new(1)?;
    Ok(batch_value_and_grad(params_phi, batch, &exec, false, |t, b, s| {
        em_item(params_phi, t, b, s)
    })?
    .0)
}

pub fn loss_em_grad(params_phi: &ModelParams, batch: &[PathSample]) -> Result<(f64, Vec<Tensor>)> {
    expect_kind(params_phi, NetKind::Energy)?;
    let exec = Exec::new(1)?;
    batch_value_and_grad(params_phi, batch, &exec, true, |t, b, s| em_item(params_phi, t, b, s))
}

fn energy_items<'a>(
    ensembles: &[(&'a ConformerEnsemble, EnergyLabelNormalizer)],
) -> Result<Vec<EnergyItem<'a>>> {
    let mut items = Vec::new();
    for (e, norm) in ensembles {
        let energies = e.energies.as_ref().ok_or(Error::MissingLabels)?;
        for (c, &en) in e.conformers.iter().zip(energies) {
            items.push(EnergyItem {
                graph: &e.graph,
                conf: c,
                label: norm.normalize(en),
            });
        }
    }
    Ok(items)
}

/// Mean absolute error of `J_phi` against normalised labels of one molecule.
pub fn loss_energy(
    params_phi: &ModelParams,
    ensemble: &ConformerEnsemble,
    normalizer: &EnergyLabelNormalizer,
) -> Result<f64> {
    loss_energy_batch(params_phi, &[(ensemble, *normalizer)])
}

/// Mean absolute error pooled over every conformer of several molecules.
pub fn loss_energy_batch(
    params_phi: &ModelParams,
    ensembles: &[(&ConformerEnsemble, EnergyLabelNormalizer)],
) -> Result<f64> {
    expect_kind(params_phi, NetKind::Energy)?;
    let items = energy_items(ensembles)?;
    let exec = Exec::new(1)?;
    Ok(batch_value_and_grad(params_phi, &items, &exec, false, |t, b, i| {
        energy_item(params_phi, t, b, i)
    })?
    .0)
}

pub fn loss_energy_grad(
    params_phi: &ModelParams,
    ensembles: &[(&ConformerEnsemble, EnergyLabelNormalizer)],
) -> Result<(f64, Vec<Tensor>)> {
    expect_kind(params_phi, NetKind::Energy)?;
    let items = energy_items(ensembles)?;
    let exec = Exec::new(1)?;
    batch_value_and_grad(params_phi, &items, &exec, true, |t, b, i| {
        energy_item(params_phi, t, b, i)
    })
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0) {
        return Err(Error::Config(format!("eta_energy {eta} must be >= 0")));
    }
    Ok(())
}

/// `loss_em + eta * loss_energy`.
pub fn loss_finetune(
    params_phi: &ModelParams,
    batch: &[PathSample],
    ensembles: &[(&ConformerEnsemble, EnergyLabelNormalizer)],
    eta: f64,
) -> Result<f64> {
    check_eta(eta)?;
    Ok(loss_em(params_phi, batch)? + eta * loss_energy_batch(params_phi, ensembles)?)
}

pub fn loss_finetune_grad(
    params_phi: &ModelParams,
    batch: &[PathSample],
    ensembles: &[(&ConformerEnsemble, EnergyLabelNormalizer)],
    eta: f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_eta(eta)?;
    let (em, mut g) = loss_em_grad(params_phi, batch)?;
    let (en, ge) = loss_energy_grad(params_phi, ensembles)?;
    for (a, b) in g.iter_mut().zip(&ge) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += eta * y;
        }
    }
    Ok((em + eta * en, g))
}

/// Plain or Adam-style gradient descent with global-norm clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip_norm: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: f64) -> Self {
        Self {
            kind,
            lr,
            clip_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.tensors().len() {
            return Err(Error::Shape("gradient count does not match parameters".into()));
        }
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Model("non-finite gradient".into()));
        }
        if self.lr == 0.0 {
            return Ok(norm);
        }
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * clip * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    for (((x, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let d = d * clip;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                        *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Matching,
    Finetune,
    Reflow,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Matching => "matching",
            Self::Finetune => "finetune",
            Self::Reflow => "reflow",
        }
    }
}

/// Batch losses recorded at one optimisation step (before the update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub phase: Phase,
    pub loss_sbcfm: Option<f64>,
    pub loss_em: Option<f64>,
    pub loss_energy: Option<f64>,
}

pub fn write_history_csv(rows: &[HistoryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "phase", "loss_sbcfm", "loss_em", "loss_energy"])?;
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.phase.name().to_string(),
            fmt(r.loss_sbcfm),
            fmt(r.loss_em),
            fmt(r.loss_energy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A molecule with its prior and label normaliser, ready for batching.
pub struct PreparedMol<'a> {
    pub ensemble: &'a ConformerEnsemble,
    pub prior: HarmonicPrior,
    pub normalizer: Option<EnergyLabelNormalizer>,
}

pub fn prepare<'a>(dataset: &'a [ConformerEnsemble]) -> Result<Vec<PreparedMol<'a>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset
        .iter()
        .map(|e| {
            if e.conformers.is_empty() {
                return Err(Error::EmptyEnsemble);
            }
            Ok(PreparedMol {
                ensemble: e,
                prior: HarmonicPrior::build(&e.graph)?,
                normalizer: e
                    .energies
                    .as_ref()
                    .map(|en| EnergyLabelNormalizer::fit(en))
                    .transpose()?,
            })
        })
        .collect()
}

/// `batch_size` independent (prior, data) bridge samples.
pub fn draw_path_batch(
    mols: &[PreparedMol<'_>],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PathSample>> {
    (0..cfg.batch_size)
        .map(|_| {
            let mol = &mols[rng.random_range(0..mols.len())];
            let confs = &mol.ensemble.conformers;
            let c1 = &confs[rng.random_range(0..confs.len())];
            let c0 = mol.prior.sample_with(rng);
            let c1 = if cfg.align_prior { kabsch_align(c1, &c0)? } else { c1.clone() };
            let t = rng.random_range(cfg.t_min..=1.0 - cfg.t_min);
            make_path_sample(&mol.ensemble.graph, &c0, &c1, t, cfg.sigma, rng)
        })
        .collect()
}

fn draw_energy_batch<'a>(
    mols: &[PreparedMol<'a>],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EnergyItem<'a>>> {
    let mut items = Vec::new();
    for _ in 0..cfg.batch_size {
        let mol = &mols[rng.random_range(0..mols.len())];
        let norm = mol.normalizer.ok_or(Error::MissingLabels)?;
        let energies = mol.ensemble.energies.as_ref().ok_or(Error::MissingLabels)?;
        for _ in 0..cfg.energy_conformers {
            let k = rng.random_range(0..mol.ensemble.conformers.len());
            items.push(EnergyItem {
                graph: &mol.ensemble.graph,
                conf: &mol.ensemble.conformers[k],
                label: norm.normalize(energies[k]),
            });
        }
    }
    Ok(items)
}

/// Trained networks with the per-step loss record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

/// Matching phase: `theta` on the bridge loss and `phi` on energy matching.
fn run_matching(
    ck: &mut Checkpoint,
    mols: &[PreparedMol<'_>],
    cfg: &TrainConfig,
    exec: &Exec,
    history: &mut Vec<HistoryRow>,
) -> Result<()> {
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut opt_theta = Optimizer::new(cfg.optimizer, cfg.lr_theta, cfg.clip_norm);
    let mut opt_phi = Optimizer::new(cfg.optimizer, cfg.lr_phi, cfg.clip_norm);
    for step in 0..cfg.matching_steps {
        let batch = draw_path_batch(mols, cfg, &mut rng)?;
        let theta = &ck.vector_field;
        let (l_cfm, g_theta) =
            batch_value_and_grad(theta, &batch, exec, true, |t, b, s| sbcfm_item(theta, t, b, s))?;
        let phi = &ck.energy;
        let (l_em, g_phi) =
            batch_value_and_grad(phi, &batch, exec, true, |t, b, s| em_item(phi, t, b, s))?;
        opt_theta.step(&mut ck.vector_field, &g_theta)?;
        opt_phi.step(&mut ck.energy, &g_phi)?;
        log::debug!("matching step {step}: sbcfm {l_cfm:.5} em {l_em:.5}");
        history.push(HistoryRow {
            step,
            phase: Phase::Matching,
            loss_sbcfm: Some(l_cfm),
            loss_em: Some(l_em),
            loss_energy: None,
        });
    }
    Ok(())
}

/// Fine-tuning phase: `phi` on energy matching plus label regression; `theta` frozen.
fn run_finetune(
    ck: &mut Checkpoint,
    mols: &[PreparedMol<'_>],
    cfg: &TrainConfig,
    exec: &Exec,
    history: &mut Vec<HistoryRow>,
) -> Result<()> {
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut opt_phi = Optimizer::new(cfg.optimizer, cfg.lr_phi, cfg.clip_norm);
    for step in 0..cfg.finetune_steps {
        let batch = draw_path_batch(mols, cfg, &mut rng)?;
        let items = draw_energy_batch(mols, cfg, &mut rng)?;
        let phi = &ck.energy;
        let (l_em, mut g) =
            batch_value_and_grad(phi, &batch, exec, true, |t, b, s| em_item(phi, t, b, s))?;
        let (l_en, g_en) =
            batch_value_and_grad(phi, &items, exec, true, |t, b, i| energy_item(phi, t, b, i))?;
        for (a, b) in g.iter_mut().zip(&g_en) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += cfg.eta_energy * y;
            }
        }
        opt_phi.step(&mut ck.energy, &g)?;
        log::debug!("finetune step {step}: em {l_em:.5} energy {l_en:.5}");
        history.push(HistoryRow {
            step,
            phase: Phase::Finetune,
            loss_sbcfm: None,
            loss_em: Some(l_em),
            loss_energy: Some(l_en),
        });
    }
    Ok(())
}

/// Both phases starting from `init`.
pub fn train_joint_from(
    init: Checkpoint,
    dataset: &[ConformerEnsemble],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mols = prepare(dataset)?;
    if cfg.finetune_steps > 0 && mols.iter().any(|m| m.normalizer.is_none()) {
        return Err(Error::MissingLabels);
    }
    let exec = Exec::new(cfg.workers)?;
    let mut ck = init;
    let mut history = Vec::new();
    run_matching(&mut ck, &mols, cfg, &exec, &mut history)?;
    run_finetune(&mut ck, &mols, cfg, &exec, &mut history)?;
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
    })
}

/// Fresh networks seeded from `cfg.seed`, then both phases.
pub fn train_joint(
    dataset: &[ConformerEnsemble],
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let init = Checkpoint::init(*net, derive_seed(cfg.seed, 0))?;
    train_joint_from(init, dataset, cfg)
}

/// Prior draw paired with the unguided sampler's output from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflowPair {
    pub graph: MolGraph,
    pub c0p: Conformation,
    pub c1p: Conformation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflowConfig {
    pub n_ode_steps: usize,
    pub pairs_per_mol: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub sigma: f64,
    pub t_min: f64,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        Self {
            n_ode_steps: 50,
            pairs_per_mol: 4,
            steps: 200,
            batch_size: 16,
            lr: 1e-3,
            sigma: 0.1,
            t_min: 1e-3,
            clip_norm: 10.0,
            optimizer: OptimizerKind::Sgd,
            workers: 1,
            seed: 0,
        }
    }
}

/// Pairs from `n_ode_steps` unguided Euler steps, `pairs_per_mol` per molecule.
pub fn make_reflow_pairs(
    params_theta: &ModelParams,
    dataset: &[ConformerEnsemble],
    cfg: &ReflowConfig,
) -> Result<Vec<ReflowPair>> {
    if cfg.n_ode_steps < 1 {
        return Err(Error::Config("reflow needs at least one ODE step".into()));
    }
    let mols = prepare(dataset)?;
    let exec = Exec::new(cfg.workers)?;
    let jobs: Vec<(usize, usize)> = (0..mols.len())
        .flat_map(|i| (0..cfg.pairs_per_mol).map(move |k| (i, k)))
        .collect();
    let sampler = SamplerConfig {
        n_steps: cfg.n_ode_steps,
        schedule: GuidanceSchedule { amplitude: 0.0 },
        guided: false,
        seed: 0,
    };
    exec.map(&jobs, |&(i, k)| {
        let mol = &mols[i];
        let seed = derive_seed(derive_seed(cfg.seed, i as u64), k as u64);
        let c0p = mol.prior.sample(seed);
        let feats = feats_for(params_theta, &mol.ensemble.graph)?;
        let c1p = sample_from(params_theta, None, &feats, &c0p, &sampler)?;
        Ok(ReflowPair {
            graph: mol.ensemble.graph.clone(),
            c0p,
            c1p,
        })
    })
    .into_iter()
    .collect()
}

/// Straightens `theta` on its own (prior, output) pairs; the energy network is
/// not involved.
pub fn reflow_finetune(
    params_theta: &ModelParams,
    dataset: &[ConformerEnsemble],
    cfg: &ReflowConfig,
) -> Result<(ModelParams, Vec<HistoryRow>)> {
    expect_kind(params_theta, NetKind::VectorField)?;
    if cfg.n_ode_steps < 1 {
        return Err(Error::Config("reflow needs at least one ODE step".into()));
    }
    if !(cfg.t_min > 0.0 && cfg.t_min < 0.5) || cfg.batch_size == 0 || cfg.pairs_per_mol == 0 {
        return Err(Error::Config("invalid reflow config".into()));
    }
    let mut theta = params_theta.clone();
    if cfg.steps == 0 {
        return Ok((theta, Vec::new()));
    }
    let pairs = make_reflow_pairs(params_theta, dataset, cfg)?;
    reflow_on_pairs(&mut theta, &pairs, cfg).map(|h| (theta, h))
}

/// Bridge-loss training of `theta` on fixed coupled pairs.
pub fn reflow_on_pairs(
    theta: &mut ModelParams,
    pairs: &[ReflowPair],
    cfg: &ReflowConfig,
) -> Result<Vec<HistoryRow>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let exec = Exec::new(cfg.workers)?;
    let mut rng = seeded(derive_seed(cfg.seed, 3));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip_norm);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let p = &pairs[rng.random_range(0..pairs.len())];
                let t = rng.random_range(cfg.t_min..=1.0 - cfg.t_min);
                make_path_sample(&p.graph, &p.c0p, &p.c1p, t, cfg.sigma, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let current = &*theta;
        let (loss, g) = batch_value_and_grad(current, &batch, &exec, true, |t, b, s| {
            sbcfm_item(current, t, b, s)
        })?;
        opt.step(theta, &g)?;
        log::debug!("reflow step {step}: sbcfm {loss:.5}");
        history.push(HistoryRow {
            step,
            phase: Phase::Reflow,
            loss_sbcfm: Some(loss),
            loss_em: None,
            loss_energy: None,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
