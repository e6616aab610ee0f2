//! Ensemble and ground-state evaluation: aligned RMSD, coverage and AMR under
//! recall and precision, and pairwise-distance errors.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::moltypes::{Conformation, ConformerEnsemble};

fn check_same_size(a: &Conformation, b: &Conformation) -> Result<()> {
    if a.n_atoms() != b.n_atoms() {
        return Err(shape_err(format!(
            "conformations have {} and {} atoms",
            a.n_atoms(),
            b.n_atoms()
        )));
    }
    if a.n_atoms() == 0 {
        return Err(shape_err("empty conformation".to_string()));
    }
    Ok(())
}

/// Proper rotation `R` minimising `sum |a_i - R b_i|^2` for centred inputs.
fn kabsch_rotation(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += y * x.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    v_t.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose()
}

fn centred(c: &Conformation) -> (Vec<Vector3<f64>>, Vector3<f64>) {
    let m = Vector3::from(c.centroid());
    let pts = c.coords().iter().map(|p| Vector3::from(*p) - m).collect();
    (pts, m)
}

/// `mobile` moved by the optimal proper rigid motion onto `target`.
pub fn kabsch_align(mobile: &Conformation, target: &Conformation) -> Result<Conformation> {
    check_same_size(mobile, target)?;
    let (a, ma) = centred(target);
    let (b, _) = centred(mobile);
    let r = kabsch_rotation(&a, &b);
    let coords = b
        .iter()
        .map(|p| {
            let q = r * p + ma;
            [q.x, q.y, q.z]
        })
        .collect();
    Conformation::new(coords)
}

/// RMSD after optimal superposition by a proper rotation and translation.
pub fn kabsch_rmsd(a: &Conformation, b: &Conformation) -> Result<f64> {
    check_same_size(a, b)?;
    let (pa, _) = centred(a);
    let (pb, _) = centred(b);
    let r = kabsch_rotation(&pa, &pb);
    let sq: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| (x - r * y).norm_squared())
        .sum();
    Ok((sq / pa.len() as f64).sqrt())
}

/// `out[i][j] = kabsch_rmsd(rows[i], cols[j])`.
pub fn rmsd_matrix(rows: &[Conformation], cols: &[Conformation]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|r| cols.iter().map(|c| kabsch_rmsd(r, c)).collect())
        .collect()
}

fn min_per_row(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect()
}

fn check_sets(r: &[Conformation], g: &[Conformation]) -> Result<()> {
    if r.is_empty() || g.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    Ok(())
}

/// Percentage of `r_set` with a match in `g_set` strictly closer than `delta`.
pub fn coverage(r_set: &[Conformation], g_set: &[Conformation], delta: f64) -> Result<f64> {
    check_sets(r_set, g_set)?;
    let mins = min_per_row(&rmsd_matrix(r_set, g_set)?);
    Ok(coverage_from_mins(&mins, delta))
}

/// Mean over `r_set` of the smallest RMSD to `g_set`.
pub fn amr(r_set: &[Conformation], g_set: &[Conformation]) -> Result<f64> {
    check_sets(r_set, g_set)?;
    let mins = min_per_row(&rmsd_matrix(r_set, g_set)?);
    Ok(mean(&mins))
}

fn coverage_from_mins(mins: &[f64], delta: f64) -> f64 {
    100.0 * mins.iter().filter(|&&m| m < delta).count() as f64 / mins.len() as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Lower median.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

fn distance_errors(cs: &Conformation, ch: &Conformation) -> Result<(f64, f64)> {
    if cs.n_atoms() != ch.n_atoms() {
        return Err(shape_err(format!(
            "conformations have {} and {} atoms",
            cs.n_atoms(),
            ch.n_atoms()
        )));
    }
    let (ds, dh) = (cs.distance_matrix(), ch.distance_matrix());
    let n2 = (cs.n_atoms() * cs.n_atoms()).max(1) as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (rs, rh) in ds.iter().zip(&dh) {
        for (a, b) in rs.iter().zip(rh) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
        }
    }
    Ok((abs / n2, (sq / n2).sqrt()))
}

/// Mean absolute error between full pairwise-distance matrices.
pub fn d_mae(cs: &Conformation, ch: &Conformation) -> Result<f64> {
    Ok(distance_errors(cs, ch)?.0)
}

/// Root-mean-square error between full pairwise-distance matrices.
pub fn d_rmse(cs: &Conformation, ch: &Conformation) -> Result<f64> {
    Ok(distance_errors(cs, ch)?.1)
}

/// Recall and precision coverage/AMR of one molecule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolMetrics {
    pub mol_id: String,
    pub n_ref: usize,
    pub n_gen: usize,
    pub cov_r: f64,
    pub amr_r: f64,
    pub cov_p: f64,
    pub amr_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cov_r: f64,
    pub amr_r: f64,
    pub cov_p: f64,
    pub amr_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta: f64,
    pub mean: MetricSummary,
    pub median: MetricSummary,
    pub per_molecule: Vec<MolMetrics>,
}

/// Metrics for one molecule given references and generated conformers.
pub fn molecule_metrics(
    mol_id: &str,
    refs: &[Conformation],
    gens: &[Conformation],
    delta: f64,
) -> Result<MolMetrics> {
    check_sets(refs, gens)?;
    let m = rmsd_matrix(refs, gens)?;
    let recall = min_per_row(&m);
    let precision: Vec<f64> = (0..gens.len())
        .map(|j| m.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .collect();
    Ok(MolMetrics {
        mol_id: mol_id.to_string(),
        n_ref: refs.len(),
        n_gen: gens.len(),
        cov_r: coverage_from_mins(&recall, delta),
        amr_r: mean(&recall),
        cov_p: coverage_from_mins(&precision, delta),
        amr_p: mean(&precision),
    })
}

fn summarise(per: &[MolMetrics], f: fn(&[f64]) -> f64) -> MetricSummary {
    let col = |g: fn(&MolMetrics) -> f64| f(&per.iter().map(g).collect::<Vec<_>>());
    MetricSummary {
        cov_r: col(|m| m.cov_r),
        amr_r: col(|m| m.amr_r),
        cov_p: col(|m| m.cov_p),
        amr_p: col(|m| m.amr_p),
    }
}

impl MetricReport {
    pub fn from_molecules(delta: f64, per_molecule: Vec<MolMetrics>) -> Result<Self> {
        if per_molecule.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            delta,
            mean: summarise(&per_molecule, mean),
            median: summarise(&per_molecule, median),
            per_molecule,
        })
    }

    /// One row per molecule followed by `mean` and `median` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["mol_id", "n_ref", "n_gen", "delta", "cov_r", "amr_r", "cov_p", "amr_p"])?;
        for m in &self.per_molecule {
            w.write_record([
                m.mol_id.clone(),
                m.n_ref.to_string(),
                m.n_gen.to_string(),
                self.delta.to_string(),
                m.cov_r.to_string(),
                m.amr_r.to_string(),
                m.cov_p.to_string(),
                m.amr_p.to_string(),
            ])?;
        }
        for (name, s) in [("mean", &self.mean), ("median", &self.median)] {
            w.write_record([
                name.to_string(),
                String::new(),
                String::new(),
                self.delta.to_string(),
                s.cov_r.to_string(),
                s.amr_r.to_string(),
                s.cov_p.to_string(),
                s.amr_p.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-molecule recall/precision metrics; generated sets are matched by `mol_id`
/// and must hold at least twice as many conformers as the references.
pub fn evaluate_generation(
    dataset: &[ConformerEnsemble],
    generated: &[ConformerEnsemble],
    delta: f64,
) -> Result<MetricReport> {
    evaluate_generation_with_ratio(dataset, generated, delta, 2)
}

/// [`evaluate_generation`] with `min_per_ref` generated conformers required per
/// reference instead of two.
pub fn evaluate_generation_with_ratio(
    dataset: &[ConformerEnsemble],
    generated: &[ConformerEnsemble],
    delta: f64,
    min_per_ref: usize,
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &ConformerEnsemble> =
        generated.iter().map(|e| (e.mol_id.as_str(), e)).collect();
    let mut per = Vec::with_capacity(dataset.len());
    for refs in dataset {
        let needed = min_per_ref.max(1) * refs.conformers.len();
        let got = by_id.get(refs.mol_id.as_str()).map_or(0, |g| g.conformers.len());
        if got < needed {
            return Err(Error::InsufficientSamples {
                mol_id: refs.mol_id.clone(),
                needed,
                got,
            });
        }
        let gens = &by_id[refs.mol_id.as_str()].conformers;
        per.push(molecule_metrics(&refs.mol_id, &refs.conformers, gens, delta)?);
    }
    MetricReport::from_molecules(delta, per)
}

/// Ground-state prediction errors for one molecule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundStateReport {
    pub mol_id: String,
    pub d_mae: f64,
    pub d_rmse: f64,
    pub c_rmsd: f64,
}

impl GroundStateReport {
    pub fn compute(mol_id: &str, truth: &Conformation, pred: &Conformation) -> Result<Self> {
        let (d_mae, d_rmse) = distance_errors(truth, pred)?;
        Ok(Self {
            mol_id: mol_id.to_string(),
            d_mae,
            d_rmse,
            c_rmsd: kabsch_rmsd(truth, pred)?,
        })
    }
}

/// Per-molecule rows followed by `mean` and `median` rows.
pub fn write_ground_state_csv(rows: &[GroundStateReport], out: impl Write) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mol_id", "d_mae", "d_rmse", "c_rmsd"])?;
    for r in rows {
        w.write_record([
            r.mol_id.clone(),
            r.d_mae.to_string(),
            r.d_rmse.to_string(),
            r.c_rmsd.to_string(),
        ])?;
    }
    for (name, f) in [("mean", mean as fn(&[f64]) -> f64), ("median", median)] {
        let col = |g: fn(&GroundStateReport) -> f64| f(&rows.iter().map(g).collect::<Vec<_>>());
        w.write_record([
            name.to_string(),
            col(|r| r.d_mae).to_string(),
            col(|r| r.d_rmse).to_string(),
            col(|r| r.c_rmsd).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
