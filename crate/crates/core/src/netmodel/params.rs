use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::features::{FeaturizerConfig, EDGE_ATTRS};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Which head a parameter set drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    /// Time-conditioned equivariant vector field.
    VectorField,
    /// Time-independent invariant energy.
    Energy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub layers: usize,
    pub n_atom_types: usize,
    /// Sinusoidal frequencies for the time embedding (vector field only).
    pub time_freqs: usize,
    pub featurizer: FeaturizerConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            n_atom_types: 8,
            time_freqs: 8,
            featurizer: FeaturizerConfig::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        if self.hidden == 0 || self.layers == 0 || self.n_atom_types == 0 {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        Ok(())
    }
}

/// Parameter names and shapes in canonical order.
pub fn layout(cfg: &NetConfig, kind: NetKind) -> Vec<(String, [usize; 2])> {
    let h = cfg.hidden;
    let time = match kind {
        NetKind::VectorField => 2 * cfg.time_freqs,
        NetKind::Energy => 0,
    };
    let mut out = vec![
        ("embed".to_string(), [cfg.n_atom_types, h]),
        ("in_w".to_string(), [h + time, h]),
        ("in_b".to_string(), [1, h]),
    ];
    let msg_in = 2 * h + cfg.featurizer.n_rbf + EDGE_ATTRS;
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.push((p("msg_w1"), [msg_in, h]));
        out.push((p("msg_b1"), [1, h]));
        out.push((p("msg_w2"), [h, h]));
        out.push((p("msg_b2"), [1, h]));
        out.push((p("upd_w"), [h, h]));
        out.push((p("upd_b"), [1, h]));
        if kind == NetKind::VectorField {
            out.push((p("gate_w"), [h, 1]));
            out.push((p("gate_b"), [1, 1]));
        }
    }
    if kind == NetKind::Energy {
        out.push(("readout".to_string(), [h, 1]));
    }
    out
}

/// Learnable tensors of one network, in [`layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    kind: NetKind,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` weights; output heads start at zero.
    pub fn init(config: NetConfig, kind: NetKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, [r, c]) in layout(&config, kind) {
            let zero_init = name.ends_with("gate_w") || name.ends_with("gate_b") || name == "readout";
            let is_bias = name.ends_with("_b") || name.ends_with("_b1") || name.ends_with("_b2");
            let bound = if name == "embed" {
                1.0
            } else if is_bias {
                // Biases use the fan-in of the weight they accompany.
                1.0 / (tensors.last().map_or(1, |t: &Tensor| t.rows()) as f64).sqrt()
            } else {
                1.0 / (r as f64).sqrt()
            };
            let data = (0..r * c)
                .map(|_| {
                    if zero_init {
                        0.0
                    } else {
                        rng.random_range(-bound..bound)
                    }
                })
                .collect();
            names.push(name);
            tensors.push(Tensor::new(r, c, data)?);
        }
        Ok(Self {
            config,
            kind,
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|x| x.is_finite()))
    }

    /// Places every tensor on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
        }
    }

    fn from_record(rec: ParamsRecord) -> Result<Self> {
        rec.config.validate()?;
        let expected = layout(&rec.config, rec.kind);
        let mut by_name: BTreeMap<String, TensorRecord> =
            rec.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in expected {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Model(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Model(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            let tensor = Tensor::new(shape[0], shape[1], t.data)?;
            names.push(name);
            tensors.push(tensor);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Model(format!("unexpected tensor {extra}")));
        }
        let out = Self {
            config: rec.config,
            kind: rec.kind,
            names,
            tensors,
        };
        if !out.is_finite() {
            return Err(Error::Model("non-finite parameter in checkpoint".into()));
        }
        Ok(out)
    }

    fn to_record(&self) -> ParamsRecord {
        ParamsRecord {
            config: self.config,
            kind: self.kind,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| TensorRecord {
                    name: n.clone(),
                    shape: t.shape(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }
}

/// Parameters living on a tape for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    config: NetConfig,
    kind: NetKind,
    tensors: Vec<TensorRecord>,
}

pub const CHECKPOINT_HEADER: &str = "enflow-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    header: String,
    vector_field: ParamsRecord,
    energy: ParamsRecord,
}

/// Both trained networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vector_field: ModelParams,
    pub energy: ModelParams,
}

impl Checkpoint {
    pub fn new(vector_field: ModelParams, energy: ModelParams) -> Result<Self> {
        if vector_field.kind() != NetKind::VectorField || energy.kind() != NetKind::Energy {
            return Err(Error::Model("checkpoint networks have the wrong kinds".into()));
        }
        Ok(Self {
            vector_field,
            energy,
        })
    }

    /// Fresh networks sharing one configuration, seeded independently.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        use crate::rng::derive_seed;
        Self::new(
            ModelParams::init(config, NetKind::VectorField, derive_seed(seed, 0))?,
            ModelParams::init(config, NetKind::Energy, derive_seed(seed, 1))?,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = CheckpointRecord {
            header: CHECKPOINT_HEADER.to_string(),
            vector_field: self.vector_field.to_record(),
            energy: self.energy.to_record(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CheckpointRecord = serde_json::from_str(text)?;
        if rec.header != CHECKPOINT_HEADER {
            return Err(Error::Parse(format!("unknown checkpoint header {:?}", rec.header)));
        }
        Self::new(
            ModelParams::from_record(rec.vector_field)?,
            ModelParams::from_record(rec.energy)?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
