use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use enflow::moltypes::{Conformation, MolGraph};
use enflow::netmodel::{energy_and_grad_with, Checkpoint, GraphFeatures, NetConfig};
use enflow_ffi::*;

fn last_error() -> String {
    let p = enflow_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_net() -> NetConfig {
    NetConfig {
        hidden: 8,
        layers: 1,
        ..NetConfig::default()
    }
}

/// Checkpoint with a non-zero energy readout so energies and gradients are informative.
fn write_checkpoint(dir: &Path) -> (std::path::PathBuf, Checkpoint) {
    let mut ck = Checkpoint::init(small_net(), 5).unwrap();
    let k = ck.energy.names().iter().position(|n| n == "readout").unwrap();
    for (i, x) in ck.energy.tensors_mut()[k].data_mut().iter_mut().enumerate() {
        *x = 0.3 - 0.05 * i as f64;
    }
    let path = dir.join("ck.json");
    ck.save(&path).unwrap();
    (path, ck)
}

fn load(path: &Path) -> *mut EnflowModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { enflow_model_load(c.as_ptr(), &mut model) }, EnflowStatus::Ok);
    assert!(!model.is_null());
    model
}

fn chain(n: u32) -> *mut EnflowMolecule {
    let types: Vec<u32> = (0..n).map(|i| i % 3).collect();
    let bonds: Vec<u32> = (0..n - 1).flat_map(|i| [i, i + 1]).collect();
    let mut mol = ptr::null_mut();
    let status =
        unsafe { enflow_molecule_new(types.as_ptr(), n as usize, bonds.as_ptr(), n as usize - 1, &mut mol) };
    assert_eq!(status, EnflowStatus::Ok);
    mol
}

fn opts(guided: bool, seed: u64) -> EnflowSamplerOptions {
    EnflowSamplerOptions {
        n_steps: 3,
        amplitude: 0.3,
        guided: guided as i32,
        seed,
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(enflow_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_checkpoint_reports_path() {
    let c = CString::new("/no/such/ck.json").unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { enflow_model_load(c.as_ptr(), &mut model) };
    assert_eq!(status, EnflowStatus::MissingInput);
    assert!(model.is_null());
    assert!(last_error().contains("/no/such/ck.json"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = [0.0; 9];
    let status = unsafe { enflow_prior_sample(ptr::null(), 0, out.as_mut_ptr(), 9) };
    assert_eq!(status, EnflowStatus::NullPointer);
    assert!(last_error().contains("molecule"));
    let mut mol = ptr::null_mut();
    let status = unsafe { enflow_molecule_new(ptr::null(), 3, ptr::null(), 0, &mut mol) };
    assert_eq!(status, EnflowStatus::NullPointer);
    unsafe {
        enflow_model_free(ptr::null_mut());
        enflow_molecule_free(ptr::null_mut());
    }
    assert_eq!(unsafe { enflow_molecule_n_atoms(ptr::null()) }, 0);
}

#[test]
fn invalid_graph_is_an_argument_error() {
    let types = [0u32, 1, 2];
    let bonds = [0u32, 1];
    let mut mol = ptr::null_mut();
    let status = unsafe { enflow_molecule_new(types.as_ptr(), 3, bonds.as_ptr(), 1, &mut mol) };
    assert_eq!(status, EnflowStatus::InvalidArgument);
    assert!(mol.is_null());
}

#[test]
fn prior_sample_is_seeded_and_centred() {
    let mol = chain(5);
    assert_eq!(unsafe { enflow_molecule_n_atoms(mol) }, 5);
    let (mut a, mut b, mut c) = ([0.0; 15], [0.0; 15], [0.0; 15]);
    unsafe {
        assert_eq!(enflow_prior_sample(mol, 3, a.as_mut_ptr(), 15), EnflowStatus::Ok);
        assert_eq!(enflow_prior_sample(mol, 3, b.as_mut_ptr(), 15), EnflowStatus::Ok);
        assert_eq!(enflow_prior_sample(mol, 4, c.as_mut_ptr(), 15), EnflowStatus::Ok);
    }
    assert_eq!(a, b);
    assert_ne!(a, c);
    for axis in 0..3 {
        let s: f64 = a.iter().skip(axis).step_by(3).sum();
        assert!(s.abs() < 1e-12);
    }
    let status = unsafe { enflow_prior_sample(mol, 3, a.as_mut_ptr(), 12) };
    assert_eq!(status, EnflowStatus::InvalidArgument);
    unsafe { enflow_molecule_free(mol) };
}

#[test]
fn fresh_model_sample_returns_prior_draw() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fresh.json");
    Checkpoint::init(small_net(), 1).unwrap().save(&path).unwrap();
    let model = load(&path);
    let mol = chain(4);
    let (mut prior, mut out) = ([0.0; 12], [0.0; 12]);
    unsafe {
        assert_eq!(enflow_prior_sample(mol, 11, prior.as_mut_ptr(), 12), EnflowStatus::Ok);
        assert_eq!(
            enflow_sample(model, mol, &opts(true, 11), out.as_mut_ptr(), 12),
            EnflowStatus::Ok
        );
    }
    for (x, y) in prior.iter().zip(&out) {
        assert!((x - y).abs() < 1e-12);
    }
    unsafe {
        enflow_molecule_free(mol);
        enflow_model_free(model);
    }
}

#[test]
fn energy_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = write_checkpoint(dir.path());
    let model = load(&path);
    let mol = chain(4);
    let mut coords = [0.0; 12];
    unsafe { enflow_prior_sample(mol, 2, coords.as_mut_ptr(), 12) };
    let (mut e, mut grad) = (0.0, [0.0; 12]);
    let status = unsafe {
        enflow_energy(model, mol, coords.as_ptr(), 12, &mut e, grad.as_mut_ptr())
    };
    assert_eq!(status, EnflowStatus::Ok);
    let g = MolGraph::new(vec![0, 1, 2, 0], vec![(0, 1), (1, 2), (2, 3)]).unwrap();
    let feats = GraphFeatures::new(&g, ck.energy.config().n_atom_types).unwrap();
    let c = Conformation::from_flat(&coords).unwrap();
    let (e_ref, g_ref) = energy_and_grad_with(&ck.energy, &feats, &c, true).unwrap();
    assert_eq!(e, e_ref);
    assert_eq!(grad.to_vec(), g_ref.concat());
    assert!(e != 0.0);

    let mut e2 = 0.0;
    let status = unsafe { enflow_energy(model, mol, coords.as_ptr(), 12, &mut e2, ptr::null_mut()) };
    assert_eq!(status, EnflowStatus::Ok);
    assert_eq!(e2, e);
    let status = unsafe { enflow_energy(model, mol, coords.as_ptr(), 9, &mut e2, ptr::null_mut()) };
    assert_eq!(status, EnflowStatus::InvalidArgument);
    unsafe {
        enflow_molecule_free(mol);
        enflow_model_free(model);
    }
}

#[test]
fn sampling_is_deterministic_and_guidance_switchable() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let model = load(&path);
    let mol = chain(5);
    let mut runs = [[0.0; 15]; 3];
    unsafe {
        enflow_sample(model, mol, &opts(true, 9), runs[0].as_mut_ptr(), 15);
        enflow_sample(model, mol, &opts(true, 9), runs[1].as_mut_ptr(), 15);
        enflow_sample(model, mol, &opts(false, 9), runs[2].as_mut_ptr(), 15);
    }
    assert_eq!(runs[0], runs[1]);
    assert_ne!(runs[0], runs[2]);
    let bad = EnflowSamplerOptions {
        amplitude: -1.0,
        ..opts(true, 9)
    };
    let status = unsafe { enflow_sample(model, mol, &bad, runs[0].as_mut_ptr(), 15) };
    assert_eq!(status, EnflowStatus::Config);
    unsafe {
        enflow_molecule_free(mol);
        enflow_model_free(model);
    }
}

#[test]
fn certify_picks_lowest_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let model = load(&path);
    let mol = chain(4);
    let mut out = [0.0; 12];
    let mut index = u32::MAX;
    let status = unsafe {
        enflow_certify(
            model,
            mol,
            EnflowCertMode::EnsembleCert,
            6,
            &opts(true, 1),
            out.as_mut_ptr(),
            12,
            &mut index,
        )
    };
    assert_eq!(status, EnflowStatus::Ok);
    assert!(index < 6);
    let mut e = 0.0;
    unsafe { enflow_energy(model, mol, out.as_ptr(), 12, &mut e, ptr::null_mut()) };
    let mut one = [0.0; 12];
    let mut e_first = 0.0;
    unsafe {
        enflow_certify(model, mol, EnflowCertMode::JustFm, 0, &opts(true, 1), one.as_mut_ptr(), 12, ptr::null_mut());
        enflow_energy(model, mol, one.as_ptr(), 12, &mut e_first, ptr::null_mut());
    }
    assert!(e <= e_first);
    let status = unsafe {
        enflow_certify(model, mol, EnflowCertMode::EnsembleCert, 0, &opts(true, 1), out.as_mut_ptr(), 12, ptr::null_mut())
    };
    assert_eq!(status, EnflowStatus::Config);
    unsafe {
        enflow_molecule_free(mol);
        enflow_model_free(model);
    }
}

#[test]
fn kabsch_rmsd_of_rigid_copy_is_zero() {
    let a = [0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 1.5, 1.2, 0.3, 2.0, 2.5, -1.0];
    let b: Vec<f64> = a
        .chunks_exact(3)
        .flat_map(|p| [-p[1] + 4.0, p[0] - 1.0, p[2] + 0.5])
        .collect();
    let mut r = f64::NAN;
    assert_eq!(unsafe { enflow_kabsch_rmsd(a.as_ptr(), b.as_ptr(), 4, &mut r) }, EnflowStatus::Ok);
    assert!(r < 1e-10);
    let c = [0.0; 12];
    assert_eq!(unsafe { enflow_kabsch_rmsd(a.as_ptr(), c.as_ptr(), 4, &mut r) }, EnflowStatus::Ok);
    assert!(r > 0.5);
    let status = unsafe { enflow_kabsch_rmsd(a.as_ptr(), b.as_ptr(), 4, ptr::null_mut()) };
    assert_eq!(status, EnflowStatus::NullPointer);
}

#[test]
fn generated_header_declares_every_export() {
    let header = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("include/enflow.h"),
    )
    .unwrap();
    for name in [
        "enflow_last_error",
        "enflow_version",
        "enflow_model_load",
        "enflow_model_free",
        "enflow_molecule_new",
        "enflow_molecule_free",
        "enflow_molecule_n_atoms",
        "enflow_prior_sample",
        "enflow_sample",
        "enflow_energy",
        "enflow_certify",
        "enflow_kabsch_rmsd",
        "ENFLOW_STATUS_MISSING_INPUT",
        "typedef struct EnflowModel EnflowModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .arg("-I")
        .arg(&include)
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child
                .stdin
                .take()
                .unwrap()
                .write_all(b"#include \"enflow.h\"\nint main(void) { return ENFLOW_STATUS_OK; }\n")?;
            child.wait()
        })
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
