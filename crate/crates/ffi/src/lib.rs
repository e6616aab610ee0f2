//! C ABI over the `enflow` library.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns an [`EnflowStatus`];
//! on failure the message is available from [`enflow_last_error`] until the next
//! failing call on the same thread. Coordinates are flat row-major `n_atoms * 3`
//! arrays of doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use enflow::metrics::kabsch_rmsd;
use enflow::moltypes::{Conformation, MolGraph};
use enflow::netmodel::{energy_and_grad_with, Checkpoint, GraphFeatures};
use enflow::prior::HarmonicPrior;
use enflow::sampling::{
    certify_ground_state, sample_ode, CertMode, GuidanceSchedule, SamplerConfig,
};
use enflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MissingInput = 3,
    Io = 4,
    Parse = 5,
    Model = 6,
    Config = 7,
    Panic = 8,
}

/// Trained vector-field and energy networks.
pub struct EnflowModel {
    checkpoint: Checkpoint,
}

/// Bond graph with its harmonic prior.
pub struct EnflowMolecule {
    graph: MolGraph,
    prior: HarmonicPrior,
}

/// Sampler settings; `guided` is treated as a boolean.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EnflowSamplerOptions {
    pub n_steps: u32,
    pub amplitude: f64,
    pub guided: i32,
    pub seed: u64,
}

/// Ground-state selection strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnflowCertMode {
    JustFm = 0,
    EnsembleCert = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EnflowStatus {
    match e {
        Error::MissingInput(_) => EnflowStatus::MissingInput,
        Error::Io(_) => EnflowStatus::Io,
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => EnflowStatus::Parse,
        Error::Model(_) => EnflowStatus::Model,
        Error::Config(_) => EnflowStatus::Config,
        _ => EnflowStatus::InvalidArgument,
    }
}

struct Fail(EnflowStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EnflowStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EnflowStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EnflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EnflowStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            EnflowStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn conformation(ptr: *const f64, len: usize, n_atoms: usize) -> Result<Conformation, Fail> {
    if len != 3 * n_atoms {
        return Err(invalid(format!("expected {} coordinates, got {len}", 3 * n_atoms)));
    }
    Ok(Conformation::from_flat(slice(ptr, len, "coords")?)?)
}

fn write_coords(c: &Conformation, out: &mut [f64]) -> Result<(), Fail> {
    let flat = c.to_flat();
    if out.len() != flat.len() {
        return Err(invalid(format!(
            "output buffer holds {} doubles, need {}",
            out.len(),
            flat.len()
        )));
    }
    out.copy_from_slice(&flat);
    Ok(())
}

unsafe fn model_ref<'a>(ptr: *const EnflowModel) -> Result<&'a EnflowModel, Fail> {
    ptr.as_ref().ok_or_else(|| null("model"))
}

unsafe fn molecule_ref<'a>(ptr: *const EnflowMolecule) -> Result<&'a EnflowMolecule, Fail> {
    ptr.as_ref().ok_or_else(|| null("molecule"))
}

fn sampler(opts: &EnflowSamplerOptions) -> Result<SamplerConfig, Fail> {
    Ok(SamplerConfig {
        n_steps: opts.n_steps as usize,
        schedule: GuidanceSchedule::new(opts.amplitude)?,
        guided: opts.guided != 0,
        seed: opts.seed,
    })
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn enflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn enflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `enflow train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn enflow_model_load(
    path: *const c_char,
    out: *mut *mut EnflowModel,
) -> EnflowStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(EnflowModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`enflow_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn enflow_model_free(model: *mut EnflowModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Builds a molecule from atom types and `n_bonds` index pairs stored as
/// `bonds[2k], bonds[2k + 1]`.
///
/// # Safety
/// `atom_types` must hold `n_atoms` values, `bonds` `2 * n_bonds` values, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn enflow_molecule_new(
    atom_types: *const u32,
    n_atoms: usize,
    bonds: *const u32,
    n_bonds: usize,
    out: *mut *mut EnflowMolecule,
) -> EnflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let types = slice(atom_types, n_atoms, "atom_types")?.to_vec();
        let pairs = slice(bonds, 2 * n_bonds, "bonds")?
            .chunks_exact(2)
            .map(|p| (p[0] as usize, p[1] as usize))
            .collect();
        let graph = MolGraph::new(types, pairs)?;
        let prior = HarmonicPrior::build(&graph)?;
        *out = Box::into_raw(Box::new(EnflowMolecule { graph, prior }));
        Ok(())
    })
}

/// # Safety
/// `mol` must come from [`enflow_molecule_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn enflow_molecule_free(mol: *mut EnflowMolecule) {
    if !mol.is_null() {
        drop(Box::from_raw(mol));
    }
}

/// Number of atoms, or 0 for a null handle.
///
/// # Safety
/// `mol` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn enflow_molecule_n_atoms(mol: *const EnflowMolecule) -> usize {
    mol.as_ref().map_or(0, |m| m.graph.n_atoms())
}

/// Draws one centred harmonic-prior sample into `out` (`3 * n_atoms` doubles).
///
/// # Safety
/// `mol` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn enflow_prior_sample(
    mol: *const EnflowMolecule,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> EnflowStatus {
    guard(|| {
        let mol = molecule_ref(mol)?;
        write_coords(&mol.prior.sample(seed), slice_mut(out, out_len, "out")?)
    })
}

/// Integrates the (optionally guided) flow from a prior draw with `opts.seed`.
///
/// # Safety
/// Handles must be live, `opts` readable and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn enflow_sample(
    model: *const EnflowModel,
    mol: *const EnflowMolecule,
    opts: *const EnflowSamplerOptions,
    out: *mut f64,
    out_len: usize,
) -> EnflowStatus {
    guard(|| {
        let model = model_ref(model)?;
        let mol = molecule_ref(mol)?;
        let opts = opts.as_ref().ok_or_else(|| null("opts"))?;
        let ck = &model.checkpoint;
        let c = sample_ode(
            &ck.vector_field,
            Some(&ck.energy),
            &mol.graph,
            &mol.prior,
            &sampler(opts)?,
        )?;
        write_coords(&c, slice_mut(out, out_len, "out")?)
    })
}

/// Learned energy of `coords`; the coordinate gradient is written to `grad`
/// unless it is null.
///
/// # Safety
/// Handles must be live; `coords` and a non-null `grad` must hold `len`
/// doubles; `energy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn enflow_energy(
    model: *const EnflowModel,
    mol: *const EnflowMolecule,
    coords: *const f64,
    len: usize,
    energy: *mut f64,
    grad: *mut f64,
) -> EnflowStatus {
    guard(|| {
        let model = model_ref(model)?;
        let mol = molecule_ref(mol)?;
        if energy.is_null() {
            return Err(null("energy"));
        }
        let c = conformation(coords, len, mol.graph.n_atoms())?;
        let phi = &model.checkpoint.energy;
        let feats = GraphFeatures::new(&mol.graph, phi.config().n_atom_types)?;
        let (e, g) = energy_and_grad_with(phi, &feats, &c, !grad.is_null())?;
        if !grad.is_null() {
            let out = slice_mut(grad, len, "grad")?;
            for (dst, src) in out.chunks_exact_mut(3).zip(&g) {
                dst.copy_from_slice(src);
            }
        }
        *energy = e;
        Ok(())
    })
}

/// Predicts a ground-state conformation. `ensemble_size` is ignored for JustFM.
/// The chosen candidate's index goes to `index` when it is not null.
///
/// # Safety
/// Handles must be live, `opts` readable and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn enflow_certify(
    model: *const EnflowModel,
    mol: *const EnflowMolecule,
    mode: EnflowCertMode,
    ensemble_size: u32,
    opts: *const EnflowSamplerOptions,
    out: *mut f64,
    out_len: usize,
    index: *mut u32,
) -> EnflowStatus {
    guard(|| {
        let model = model_ref(model)?;
        let mol = molecule_ref(mol)?;
        let opts = opts.as_ref().ok_or_else(|| null("opts"))?;
        let mode = match mode {
            EnflowCertMode::JustFm => CertMode::JustFm,
            EnflowCertMode::EnsembleCert => CertMode::EnsembleCert,
        };
        let ck = &model.checkpoint;
        let cert = certify_ground_state(
            &ck.vector_field,
            &ck.energy,
            &mol.graph,
            &mol.prior,
            mode,
            ensemble_size as usize,
            &sampler(opts)?,
        )?;
        write_coords(&cert.conformation, slice_mut(out, out_len, "out")?)?;
        if !index.is_null() {
            *index = cert.index as u32;
        }
        Ok(())
    })
}

/// RMSD of two conformations after optimal superposition.
///
/// # Safety
/// `a` and `b` must hold `3 * n_atoms` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn enflow_kabsch_rmsd(
    a: *const f64,
    b: *const f64,
    n_atoms: usize,
    out: *mut f64,
) -> EnflowStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = conformation(a, 3 * n_atoms, n_atoms)?;
        let b = conformation(b, 3 * n_atoms, n_atoms)?;
        *out = kabsch_rmsd(&a, &b)?;
        Ok(())
    })
}
