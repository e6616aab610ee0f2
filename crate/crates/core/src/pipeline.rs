//! File-level orchestration behind the CLI subcommands.
//!
//! Every command reads its inputs from paths derived from a [`RunConfig`] and
//! writes its outputs under `out_dir`. Outputs depend only on the config and
//! the input files, so re-runs are byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{read_jsonl, select_split, write_jsonl, GenMeta, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{
    evaluate_generation_with_ratio, write_ground_state_csv, GroundStateReport, MetricReport,
};
use crate::moltypes::{ground_state_label, ConformerEnsemble};
use crate::netmodel::{Checkpoint, ModelParams};
use crate::prior::HarmonicPrior;
use crate::rng::{derive_seed, stable_hash};
use crate::sampling::{certify_ground_state, sample_many, GuidanceSchedule, SamplerConfig};
use crate::synth::gen_synthetic;
use crate::training::{reflow_finetune, train_joint, write_history_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const GENERATED_FILE: &str = "generated.jsonl";
pub const CERTIFIED_FILE: &str = "certified.jsonl";
pub const GROUND_STATE_FILE: &str = "ground_state.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Sampling seed of one molecule, independent of its position in the file.
pub fn molecule_seed(seed: u64, mol_id: &str) -> u64 {
    derive_seed(seed, stable_hash(mol_id.as_bytes()))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn load_split(path: &Path, split: Split) -> Result<Vec<ConformerEnsemble>> {
    let mols = select_split(&read_jsonl(path)?, split);
    if mols.is_empty() {
        return Err(Error::Config(format!(
            "{} has no molecules in the {split:?} split",
            path.display()
        )));
    }
    Ok(mols)
}

/// Writes the synthetic dataset to the configured dataset path.
pub fn run_gen(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let path = cfg.dataset_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let data = gen_synthetic(&cfg.data.synthetic, cfg.seed)?;
    write_jsonl(&path, &data, None)?;
    log::info!("wrote {} molecules to {}", data.len(), path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

/// Trains both networks on the training split, then reflows `theta` when
/// `reflow.steps > 0`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let train = load_split(&cfg.dataset_path(), Split::Train)?;
    prepare_out(cfg)?;
    log::info!("training on {} molecules", train.len());
    let mut outcome = train_joint(&train, &cfg.model, &cfg.train_config())?;
    if cfg.reflow.steps > 0 {
        let (theta, rows) =
            reflow_finetune(&outcome.checkpoint.vector_field, &train, &cfg.reflow_config())?;
        outcome.checkpoint.vector_field = theta;
        outcome.history.extend(rows);
    }
    let art = TrainArtifacts {
        checkpoint: cfg.out_dir.join(CHECKPOINT_FILE),
        history: cfg.out_dir.join(HISTORY_FILE),
    };
    outcome.checkpoint.save(&art.checkpoint)?;
    write_history_csv(&outcome.history, fs::File::create(&art.history)?)?;
    log::info!("wrote {}", art.checkpoint.display());
    Ok(art)
}

/// `samples_per_ref * K` samples for each molecule, in input order.
#[allow(clippy::too_many_arguments)]
fn generate(
    theta: &ModelParams,
    phi: &ModelParams,
    mols: &[ConformerEnsemble],
    n_steps: usize,
    schedule: GuidanceSchedule,
    guided: bool,
    samples_per_ref: usize,
    seed: u64,
    exec: &Exec,
) -> Result<Vec<ConformerEnsemble>> {
    exec.map(mols, |mol| {
        let prior = HarmonicPrior::build(&mol.graph)?;
        let cfg = SamplerConfig {
            n_steps,
            schedule,
            guided,
            seed: molecule_seed(seed, &mol.mol_id),
        };
        let n = samples_per_ref * mol.conformers.len();
        let confs = sample_many(theta, Some(phi), &mol.graph, &prior, &cfg, n)?;
        ConformerEnsemble::new(mol.mol_id.clone(), mol.graph.clone(), confs, None, None)
    })
    .into_iter()
    .collect()
}

/// Samples an ensemble for every molecule of the configured split.
pub fn run_sample(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let mols = load_split(&cfg.dataset_path(), cfg.sample.split)?;
    prepare_out(cfg)?;
    let schedule = cfg.sample_schedule();
    let generated = generate(
        &ck.vector_field,
        &ck.energy,
        &mols,
        cfg.sample.n_steps,
        schedule,
        cfg.sample.guided,
        cfg.sample.samples_per_ref,
        cfg.seed,
        &Exec::new(cfg.workers)?,
    )?;
    let meta = GenMeta {
        n_steps: cfg.sample.n_steps,
        amplitude: schedule.amplitude,
        guided: cfg.sample.guided,
        seed: cfg.seed,
    };
    let path = cfg.out_dir.join(GENERATED_FILE);
    write_jsonl(&path, &generated, Some(meta))?;
    log::info!("wrote {} ensembles to {}", generated.len(), path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyArtifacts {
    pub predictions: PathBuf,
    pub report: PathBuf,
}

/// Predicts one ground-state conformation per molecule and scores it against
/// the lowest-energy reference.
pub fn run_certify(cfg: &RunConfig, checkpoint: &Path) -> Result<CertifyArtifacts> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let mols = load_split(&cfg.dataset_path(), cfg.certify.split)?;
    prepare_out(cfg)?;
    let sampler = |mol_id: &str| SamplerConfig {
        n_steps: cfg.certify.n_steps,
        schedule: cfg.certify_schedule(),
        guided: true,
        seed: molecule_seed(cfg.seed, mol_id),
    };
    let results = Exec::new(cfg.workers)?.map(&mols, |mol| {
        let prior = HarmonicPrior::build(&mol.graph)?;
        let cert = certify_ground_state(
            &ck.vector_field,
            &ck.energy,
            &mol.graph,
            &prior,
            cfg.certify.mode,
            cfg.certify.ensemble_size,
            &sampler(&mol.mol_id),
        )?;
        let truth = &mol.conformers[ground_state_label(mol)?];
        let report = GroundStateReport::compute(&mol.mol_id, truth, &cert.conformation)?;
        let pred = ConformerEnsemble::new(
            mol.mol_id.clone(),
            mol.graph.clone(),
            vec![cert.conformation],
            None,
            None,
        )?;
        Ok((pred, report))
    });
    let (preds, reports): (Vec<_>, Vec<_>) =
        results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let art = CertifyArtifacts {
        predictions: cfg.out_dir.join(CERTIFIED_FILE),
        report: cfg.out_dir.join(GROUND_STATE_FILE),
    };
    let meta = GenMeta {
        n_steps: cfg.certify.n_steps,
        amplitude: cfg.certify_schedule().amplitude,
        guided: true,
        seed: cfg.seed,
    };
    write_jsonl(&art.predictions, &preds, Some(meta))?;
    write_ground_state_csv(&reports, fs::File::create(&art.report)?)?;
    log::info!("wrote {}", art.report.display());
    Ok(art)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalArtifacts {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Scores a generated file against the references of the configured split.
pub fn run_eval(cfg: &RunConfig, dataset: &Path, generated: &Path) -> Result<EvalArtifacts> {
    cfg.validate()?;
    let refs = load_split(dataset, cfg.eval.split)?;
    let gens = read_jsonl(generated)?;
    prepare_out(cfg)?;
    let report = evaluate_generation_with_ratio(
        &refs,
        &gens,
        cfg.eval.delta,
        cfg.eval.min_samples_per_ref,
    )?;
    let art = EvalArtifacts {
        csv: cfg.out_dir.join(METRICS_CSV),
        json: cfg.out_dir.join(METRICS_JSON),
    };
    report.save(&art.csv, &art.json)?;
    log::info!(
        "COV-R {:.2} AMR-R {:.4} COV-P {:.2} AMR-P {:.4}",
        report.mean.cov_r,
        report.mean.amr_r,
        report.mean.cov_p,
        report.mean.amr_p
    );
    Ok(art)
}

/// Long-format rows `(n_steps, amplitude, delta, metric, value)` of split-mean
/// metrics for every step count and constant amplitude, at every threshold.
pub fn run_ablation(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let ck = Checkpoint::load(checkpoint)?;
    let mols = load_split(&cfg.dataset_path(), cfg.sample.split)?;
    prepare_out(cfg)?;
    let exec = Exec::new(cfg.workers)?;
    let path = cfg.out_dir.join(ABLATION_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n_steps", "amplitude", "delta", "metric", "value"])?;
    for &n in &cfg.ablate.n_steps {
        for &amplitude in &cfg.ablate.amplitudes {
            log::info!("ablation: {n} steps, amplitude {amplitude}");
            let generated = generate(
                &ck.vector_field,
                &ck.energy,
                &mols,
                n,
                GuidanceSchedule::new(amplitude)?,
                true,
                cfg.sample.samples_per_ref,
                cfg.seed,
                &exec,
            )?;
            for &delta in &cfg.ablate.deltas {
                let report = evaluate_generation_with_ratio(
                    &mols,
                    &generated,
                    delta,
                    cfg.eval.min_samples_per_ref,
                )?;
                let m = &report.mean;
                for (name, value) in [
                    ("cov_r", m.cov_r),
                    ("amr_r", m.amr_r),
                    ("cov_p", m.cov_p),
                    ("amr_p", m.amr_p),
                ] {
                    w.write_record([
                        n.to_string(),
                        amplitude.to_string(),
                        delta.to_string(),
                        name.to_string(),
                        value.to_string(),
                    ])?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    fs::File::create(&path)?.write_all(&bytes)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

/// Reads a metric report written by [`run_eval`].
pub fn read_metric_report(json: &Path) -> Result<MetricReport> {
    if !json.exists() {
        return Err(Error::MissingInput(json.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(json)?)?)
}
