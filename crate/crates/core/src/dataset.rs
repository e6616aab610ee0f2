//! JSON-lines conformer files and the deterministic train/val/test split.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moltypes::{Conformation, ConformerEnsemble, MolGraph};
use crate::rng::stable_hash;

/// Provenance attached to generated ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub n_steps: usize,
    pub amplitude: f64,
    pub guided: bool,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConformerRecord {
    coords: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MoleculeRecord {
    mol_id: String,
    atom_types: Vec<u32>,
    bonds: Vec<[usize; 2]>,
    conformers: Vec<ConformerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gen_meta: Option<GenMeta>,
}

/// One parsed line: the ensemble plus any generation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeEntry {
    pub ensemble: ConformerEnsemble,
    pub gen_meta: Option<GenMeta>,
}

fn parse_record(line: &str) -> Result<MoleculeEntry> {
    let rec: MoleculeRecord = serde_json::from_str(line)?;
    let graph = MolGraph::new(
        rec.atom_types,
        rec.bonds.into_iter().map(|[a, b]| (a, b)).collect(),
    )?;
    let all_energies = rec.conformers.iter().all(|c| c.energy.is_some());
    let any_energy = rec.conformers.iter().any(|c| c.energy.is_some());
    if any_energy && !all_energies {
        return Err(Error::Parse(format!(
            "molecule {} has energies on only some conformers",
            rec.mol_id
        )));
    }
    let energies = all_energies
        .then(|| rec.conformers.iter().map(|c| c.energy.unwrap_or_default()).collect::<Vec<_>>())
        .filter(|e| !e.is_empty());
    let conformers = rec
        .conformers
        .into_iter()
        .map(|c| Conformation::new(c.coords)?.center())
        .collect::<Result<Vec<_>>>()?;
    Ok(MoleculeEntry {
        ensemble: ConformerEnsemble::new(rec.mol_id, graph, conformers, energies, None)?,
        gen_meta: rec.gen_meta,
    })
}

/// Reads every molecule, centring each conformer.
pub fn read_entries(path: &Path) -> Result<Vec<MoleculeEntry>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ConformerEnsemble>> {
    Ok(read_entries(path)?.into_iter().map(|e| e.ensemble).collect())
}

fn to_record(e: &ConformerEnsemble, gen_meta: Option<GenMeta>) -> MoleculeRecord {
    MoleculeRecord {
        mol_id: e.mol_id.clone(),
        atom_types: e.graph.atom_types().to_vec(),
        bonds: e.graph.bonds().iter().map(|&(a, b)| [a, b]).collect(),
        conformers: e
            .conformers
            .iter()
            .enumerate()
            .map(|(i, c)| ConformerRecord {
                coords: c.coords().to_vec(),
                energy: e.energies.as_ref().map(|en| en[i]),
            })
            .collect(),
        gen_meta,
    }
}

pub fn write_jsonl_to(
    out: impl Write,
    molecules: &[ConformerEnsemble],
    gen_meta: Option<GenMeta>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    for e in molecules {
        serde_json::to_writer(&mut out, &to_record(e, gen_meta))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl(
    path: &Path,
    molecules: &[ConformerEnsemble],
    gen_meta: Option<GenMeta>,
) -> Result<()> {
    write_jsonl_to(std::fs::File::create(path)?, molecules, gen_meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 80/10/10 assignment by a stable hash of the molecule id.
pub fn split_of(mol_id: &str) -> Split {
    match stable_hash(mol_id.as_bytes()) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// Molecules of `dataset` that fall in `split`, in file order.
pub fn select_split(dataset: &[ConformerEnsemble], split: Split) -> Vec<ConformerEnsemble> {
    dataset
        .iter()
        .filter(|e| split_of(&e.mol_id) == split)
        .cloned()
        .collect()
}
