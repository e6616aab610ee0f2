//! Declarative run configuration read from TOML.
//!
//! Precedence is flags over file over defaults: the CLI loads a [`RunConfig`]
//! and applies [`Overrides`] on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::netmodel::NetConfig;
use crate::sampling::{default_schedule, CertMode, DatasetTag, GuidanceSchedule};
use crate::synth::SyntheticSpec;
use crate::training::{ReflowConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub data: DataSection,
    pub model: NetConfig,
    pub train: TrainConfig,
    /// Reflow runs after training when `steps > 0`.
    pub reflow: ReflowConfig,
    pub sample: SampleSection,
    pub certify: CertifySection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

#[derive(Default, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file; `gen` writes here and other commands read from here.
    /// Defaults to `dataset.jsonl` inside `out_dir`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n_steps: usize,
    /// Fixed guidance amplitude; the tabulated default for `n_steps` when absent.
    pub amplitude: Option<f64>,
    pub schedule_table: DatasetTag,
    pub guided: bool,
    /// Generated conformers per reference conformer.
    pub samples_per_ref: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub mode: CertMode,
    pub ensemble_size: usize,
    pub n_steps: usize,
    /// Defaults to the mode's amplitude when absent.
    pub amplitude: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub delta: f64,
    /// Generated conformers required per reference conformer.
    pub min_samples_per_ref: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub n_steps: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            data: DataSection::default(),
            model: NetConfig::default(),
            train: TrainConfig::default(),
            reflow: ReflowConfig {
                steps: 0,
                ..ReflowConfig::default()
            },
            sample: SampleSection::default(),
            certify: CertifySection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n_steps: 5,
            amplitude: None,
            schedule_table: DatasetTag::Drugs,
            guided: true,
            samples_per_ref: 2,
            split: Split::Test,
        }
    }
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            mode: CertMode::EnsembleCert,
            ensemble_size: 20,
            n_steps: 5,
            amplitude: None,
            split: Split::Test,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            delta: 1.25,
            min_samples_per_ref: 2,
            split: Split::Test,
        }
    }
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            n_steps: vec![1, 2, 5],
            amplitudes: vec![0.0, 0.2],
            deltas: vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
        }
    }
}

/// Command-line values that replace their config-file counterparts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub steps: Option<usize>,
    pub amplitude: Option<f64>,
    pub mode: Option<CertMode>,
    pub ensemble_size: Option<usize>,
    pub delta: Option<f64>,
    pub guided: Option<bool>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// `--steps` sets the step count of both sampling and certification;
    /// `--amplitude` likewise fixes both amplitudes.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = &o.dataset {
            self.data.path = Some(v.clone());
        }
        if let Some(v) = o.steps {
            self.sample.n_steps = v;
            self.certify.n_steps = v;
        }
        if let Some(v) = o.amplitude {
            self.sample.amplitude = Some(v);
            self.certify.amplitude = Some(v);
        }
        if let Some(v) = o.mode {
            self.certify.mode = v;
        }
        if let Some(v) = o.ensemble_size {
            self.certify.ensemble_size = v;
        }
        if let Some(v) = o.delta {
            self.eval.delta = v;
        }
        if let Some(v) = o.guided {
            self.sample.guided = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        self.data.synthetic.validate()?;
        self.model.featurizer.validate()?;
        self.train_config().validate()?;
        if self.sample.n_steps == 0 || self.certify.n_steps == 0 {
            return bad("step counts must be positive");
        }
        if self.sample.samples_per_ref == 0 {
            return bad("samples_per_ref must be positive");
        }
        if self.certify.ensemble_size == 0 {
            return bad("ensemble_size must be positive");
        }
        for a in [self.sample.amplitude, self.certify.amplitude].into_iter().flatten() {
            GuidanceSchedule::new(a)?;
        }
        for &a in &self.ablate.amplitudes {
            GuidanceSchedule::new(a)?;
        }
        if !(self.eval.delta > 0.0) || self.ablate.deltas.iter().any(|d| !(*d > 0.0)) {
            return bad("RMSD thresholds must be positive");
        }
        if self.ablate.n_steps.contains(&0) {
            return bad("ablation step counts must be positive");
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data
            .path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    /// Training settings with the global seed and worker count filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            workers: self.workers,
            ..self.train
        }
    }

    pub fn reflow_config(&self) -> ReflowConfig {
        ReflowConfig {
            seed: self.seed,
            workers: self.workers,
            ..self.reflow
        }
    }

    pub fn sample_schedule(&self) -> GuidanceSchedule {
        match self.sample.amplitude {
            Some(amplitude) => GuidanceSchedule { amplitude },
            None => default_schedule(self.sample.schedule_table, self.sample.n_steps),
        }
    }

    pub fn certify_schedule(&self) -> GuidanceSchedule {
        GuidanceSchedule {
            amplitude: self
                .certify
                .amplitude
                .unwrap_or_else(|| self.certify.mode.default_amplitude()),
        }
    }
}
