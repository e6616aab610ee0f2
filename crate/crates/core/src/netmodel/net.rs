use std::sync::Arc;

use super::features::GraphFeatures;
use super::params::{BoundParams, ModelParams, NetKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moltypes::{Conformation, MolGraph};

/// Result of a forward pass outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    /// `n x h` rotation-invariant atom features.
    pub scalars: Tensor,
    /// Per-atom equivariant vectors; present for vector-field networks only.
    pub vectors: Option<Vec<[f64; 3]>>,
}

/// Forward pass recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeOutput<'t> {
    pub scalars: Var<'t>,
    pub vectors: Option<Var<'t>>,
    pub energy: Option<Var<'t>>,
}

fn ssp(x: Var<'_>) -> Var<'_> {
    x.softplus().offset(-std::f64::consts::LN_2)
}

fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    let [r, c] = y.shape();
    y.add(b.broadcast_to(r, c)?)
}

/// `[sin(w_k t), cos(w_k t)]` with `w_k = 2^k pi / 2`.
pub fn time_embedding(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for k in 0..n_freqs {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k.min(62)) as f64;
        out.push((w * t).sin());
    }
    for k in 0..n_freqs {
        let w = std::f64::consts::FRAC_PI_2 * (1u64 << k.min(62)) as f64;
        out.push((w * t).cos());
    }
    out
}

/// Message passing over all atom pairs; `coords` is an `n x 3` node on the tape.
pub fn forward_on_tape<'t>(
    params: &ModelParams,
    bound: &BoundParams<'t>,
    feats: &GraphFeatures,
    coords: Var<'t>,
    t: f64,
) -> Result<TapeOutput<'t>> {
    let tape = coords.tape();
    let cfg = params.config();
    let n = feats.n_atoms;
    let h = cfg.hidden;
    if coords.shape() != [n, 3] {
        return Err(Error::Model(format!(
            "coordinates {:?} do not match a graph of {n} atoms",
            coords.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Model(format!("time {t} outside [0, 1]")));
    }
    let e = feats.n_edges();

    let mut x = bound.get("embed")?.gather_rows(Arc::clone(&feats.atom_types))?;
    if params.kind() == NetKind::VectorField && cfg.time_freqs > 0 {
        let emb = Tensor::new(1, 2 * cfg.time_freqs, time_embedding(t, cfg.time_freqs))?;
        let emb = tape.constant(emb).broadcast_to(n, 2 * cfg.time_freqs)?;
        x = Var::concat_cols(&[x, emb])?;
    }
    let mut hs = ssp(affine(x, bound.get("in_w")?, bound.get("in_b")?)?);

    let diff = coords.pairwise_diff(Arc::clone(&feats.src), Arc::clone(&feats.dst))?;
    let dist = diff.norm_rows(cfg.featurizer.eps_norm);
    let unit = diff.div(dist.broadcast_to(e, 3)?)?;
    let rbf = cfg.featurizer.rbf_var(dist)?;
    let cut = cfg.featurizer.cutoff_var(dist)?;
    let cut_h = cut.broadcast_to(e, h)?;
    let attr = tape.constant(feats.edge_attr.clone());

    let mut vectors: Option<Var<'t>> = None;
    for l in 0..cfg.layers {
        let p = |s: &str| bound.get(&format!("layer{l}.{s}"));
        let h_src = hs.gather_rows(Arc::clone(&feats.src))?;
        let h_dst = hs.gather_rows(Arc::clone(&feats.dst))?;
        let edge_in = Var::concat_cols(&[h_src, h_dst, rbf, attr])?;
        let m = ssp(affine(edge_in, p("msg_w1")?, p("msg_b1")?)?);
        let m = ssp(affine(m, p("msg_w2")?, p("msg_b2")?)?).mul(cut_h)?;
        let agg = m.scatter_add_rows(Arc::clone(&feats.src), n)?;
        hs = hs.add(ssp(affine(agg, p("upd_w")?, p("upd_b")?)?))?;
        if params.kind() == NetKind::VectorField {
            let gate = affine(m, p("gate_w")?, p("gate_b")?)?.mul(cut)?;
            let contrib = gate
                .broadcast_to(e, 3)?
                .mul(unit)?
                .scatter_add_rows(Arc::clone(&feats.src), n)?;
            vectors = Some(match vectors {
                Some(v) => v.add(contrib)?,
                None => contrib,
            });
        }
    }

    let energy = match params.kind() {
        NetKind::Energy => Some(hs.mean_rows()?.matmul(bound.get("readout")?)?),
        NetKind::VectorField => None,
    };
    Ok(TapeOutput {
        scalars: hs,
        vectors,
        energy,
    })
}

fn features(params: &ModelParams, g: &MolGraph, c: &Conformation) -> Result<GraphFeatures> {
    if c.n_atoms() != g.n_atoms() {
        return Err(Error::Model(format!(
            "conformation has {} atoms, graph has {}",
            c.n_atoms(),
            g.n_atoms()
        )));
    }
    GraphFeatures::new(g, params.config().n_atom_types)
}

fn expect_kind(params: &ModelParams, kind: NetKind) -> Result<()> {
    if params.kind() != kind {
        return Err(Error::Model(format!(
            "expected a {kind:?} network, got {:?}",
            params.kind()
        )));
    }
    Ok(())
}

pub fn forward(params: &ModelParams, g: &MolGraph, c: &Conformation, t: f64) -> Result<NetOutput> {
    let feats = features(params, g, c)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let coords = tape.constant(Tensor::from_rows3(c.coords()));
    let out = forward_on_tape(params, &bound, &feats, coords, t)?;
    Ok(NetOutput {
        scalars: (*out.scalars.value()).clone(),
        vectors: out.vectors.map(|v| v.value().to_rows3()).transpose()?,
    })
}

/// Per-atom velocities `v(c, t)`.
pub fn vector_field(
    params: &ModelParams,
    g: &MolGraph,
    c: &Conformation,
    t: f64,
) -> Result<Vec<[f64; 3]>> {
    expect_kind(params, NetKind::VectorField)?;
    let feats = features(params, g, c)?;
    vector_field_with(params, &feats, c, t)
}

/// As [`vector_field`] with precomputed graph features.
pub fn vector_field_with(
    params: &ModelParams,
    feats: &GraphFeatures,
    c: &Conformation,
    t: f64,
) -> Result<Vec<[f64; 3]>> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let coords = tape.constant(Tensor::from_rows3(c.coords()));
    let out = forward_on_tape(params, &bound, feats, coords, t)?;
    match out.vectors {
        Some(v) => v.value().to_rows3(),
        None => Err(Error::Model("network has no vector head".into())),
    }
}

pub fn energy(params: &ModelParams, g: &MolGraph, c: &Conformation) -> Result<f64> {
    expect_kind(params, NetKind::Energy)?;
    let feats = features(params, g, c)?;
    Ok(energy_and_grad_with(params, &feats, c, false)?.0)
}

/// Gradient of the energy with respect to the coordinates.
pub fn energy_grad(params: &ModelParams, g: &MolGraph, c: &Conformation) -> Result<Vec<[f64; 3]>> {
    expect_kind(params, NetKind::Energy)?;
    let feats = features(params, g, c)?;
    Ok(energy_and_grad_with(params, &feats, c, true)?.1)
}

/// Energy and, when `with_grad`, its coordinate gradient (zeros otherwise).
pub fn energy_and_grad_with(
    params: &ModelParams,
    feats: &GraphFeatures,
    c: &Conformation,
    with_grad: bool,
) -> Result<(f64, Vec<[f64; 3]>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let coords = tape.var(Tensor::from_rows3(c.coords()));
    let out = forward_on_tape(params, &bound, feats, coords, 0.0)?;
    let j = out
        .energy
        .ok_or_else(|| Error::Model("network has no energy head".into()))?;
    let value = j.value().item();
    if !with_grad {
        return Ok((value, vec![[0.0; 3]; c.n_atoms()]));
    }
    let g = tape.grad(j, &[coords])?;
    Ok((value, g[0].value().to_rows3()?))
}

#[cfg(test)]
mod tests {
    use super::super::features::FeaturizerConfig;
    use super::super::params::NetConfig;
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> NetConfig {
        NetConfig {
            hidden: 12,
            layers: 2,
            n_atom_types: 4,
            time_freqs: 3,
            featurizer: FeaturizerConfig {
                n_rbf: 6,
                d_cutoff: 5.0,
                eps_norm: 0.01,
            },
        }
    }

    /// Parameters with every head perturbed away from its zero init.
    fn live(kind: NetKind, seed: u64) -> ModelParams {
        let mut p = ModelParams::init(cfg(), kind, seed).unwrap();
        let mut rng = seeded(seed + 100);
        let names = p.names().to_vec();
        for (name, t) in names.iter().zip(p.tensors_mut()) {
            if name.contains("gate") || name == "readout" {
                for x in t.data_mut() {
                    *x = rng.random_range(-0.5..0.5);
                }
            }
        }
        p
    }

    fn graph() -> MolGraph {
        MolGraph::new(vec![0, 1, 2, 1, 3], vec![(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap()
    }

    fn conf(seed: u64, n: usize) -> Conformation {
        let mut rng = seeded(seed);
        let coords = (0..n)
            .map(|_| [0.0; 3].map(|_: f64| rng.random_range(-1.5..1.5)))
            .collect();
        Conformation::new(coords).unwrap().center().unwrap()
    }

    /// Rotation matrix from a unit quaternion built out of three angles.
    fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
        let (q0, q1, q2, q3) = {
            let (w, x, y, z) = (a.cos(), a.sin() * b.cos(), a.sin() * b.sin() * c.cos(), a.sin() * b.sin() * c.sin());
            (w, x, y, z)
        };
        [
            [1.0 - 2.0 * (q2 * q2 + q3 * q3), 2.0 * (q1 * q2 - q0 * q3), 2.0 * (q1 * q3 + q0 * q2)],
            [2.0 * (q1 * q2 + q0 * q3), 1.0 - 2.0 * (q1 * q1 + q3 * q3), 2.0 * (q2 * q3 - q0 * q1)],
            [2.0 * (q1 * q3 - q0 * q2), 2.0 * (q2 * q3 + q0 * q1), 1.0 - 2.0 * (q1 * q1 + q2 * q2)],
        ]
    }

    fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * v[k]).sum())
    }

    fn rigid(c: &Conformation, r: &[[f64; 3]; 3], s: [f64; 3]) -> Conformation {
        Conformation::new(
            c.coords()
                .iter()
                .map(|&x| {
                    let y = rotate(r, x);
                    [y[0] + s[0], y[1] + s[1], y[2] + s[2]]
                })
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn vectors_rotate_and_ignore_translation(
            seed in 0u64..1000, a in 0.0..3.1f64, b in 0.0..3.1f64, c in 0.0..6.2f64,
            s in prop::array::uniform3(-3.0..3.0f64), t in 0.0..1.0f64,
        ) {
            let p = live(NetKind::VectorField, 5);
            let g = graph();
            let x = conf(seed, 5);
            let r = rotation(a, b, c);
            let base = forward(&p, &g, &x, t).unwrap();
            let moved = forward(&p, &g, &rigid(&x, &r, s), t).unwrap();
            for (u, v) in base.vectors.unwrap().iter().zip(moved.vectors.unwrap()) {
                let ru = rotate(&r, *u);
                for k in 0..3 {
                    prop_assert!((ru[k] - v[k]).abs() < 1e-8);
                }
            }
            for (u, v) in base.scalars.data().iter().zip(moved.scalars.data()) {
                prop_assert!((u - v).abs() < 1e-8);
            }
        }

        #[test]
        fn energy_is_invariant_and_gradient_sums_to_zero(
            seed in 0u64..1000, a in 0.0..3.1f64, b in 0.0..3.1f64, c in 0.0..6.2f64,
            s in prop::array::uniform3(-3.0..3.0f64),
        ) {
            let p = live(NetKind::Energy, 6);
            let g = graph();
            let x = conf(seed, 5);
            let e0 = energy(&p, &g, &x).unwrap();
            let e1 = energy(&p, &g, &rigid(&x, &rotation(a, b, c), s)).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-10);
            let grad = energy_grad(&p, &g, &x).unwrap();
            for k in 0..3 {
                let total: f64 = grad.iter().map(|r| r[k]).sum();
                prop_assert!(total.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn time_embedding_changes_output() {
        let p = live(NetKind::VectorField, 7);
        let g = graph();
        let x = conf(1, 5);
        let v0 = vector_field(&p, &g, &x, 0.0).unwrap();
        let v1 = vector_field(&p, &g, &x, 1.0).unwrap();
        let gap: f64 = v0
            .iter()
            .zip(&v1)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .sum();
        assert!(gap > 1e-6);
    }

    #[test]
    fn zero_heads_give_zero_field_and_energy() {
        let g = graph();
        let x = conf(2, 5);
        let v = ModelParams::init(cfg(), NetKind::VectorField, 1).unwrap();
        assert!(vector_field(&v, &g, &x, 0.3).unwrap().iter().flatten().all(|&z| z == 0.0));
        let e = ModelParams::init(cfg(), NetKind::Energy, 1).unwrap();
        assert_eq!(energy(&e, &g, &x).unwrap(), 0.0);
    }

    fn fd_rel_err(analytic: &[[f64; 3]], f: impl Fn(&Conformation) -> f64, x: &Conformation) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..x.n_atoms() {
            for k in 0..3 {
                let mut plus = x.coords().to_vec();
                let mut minus = x.coords().to_vec();
                plus[i][k] += h;
                minus[i][k] -= h;
                let fd = (f(&Conformation::new(plus).unwrap()) - f(&Conformation::new(minus).unwrap()))
                    / (2.0 * h);
                worst = worst.max((fd - analytic[i][k]).abs());
                scale = scale.max(fd.abs());
            }
        }
        worst / scale.max(1e-12)
    }

    #[test]
    fn energy_grad_matches_finite_differences() {
        let p = live(NetKind::Energy, 8);
        let g = MolGraph::new(vec![0, 1, 2], vec![(0, 1), (1, 2)]).unwrap();
        let x = conf(3, 3);
        let grad = energy_grad(&p, &g, &x).unwrap();
        let err = fd_rel_err(&grad, |c| energy(&p, &g, c).unwrap(), &x);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn vector_field_jacobian_matches_finite_differences() {
        let p = live(NetKind::VectorField, 9);
        let g = MolGraph::new(vec![0, 1], vec![(0, 1)]).unwrap();
        let x = conf(4, 2);
        // Each output component's coordinate gradient via the tape.
        for atom in 0..2 {
            for comp in 0..3 {
                let feats = GraphFeatures::new(&g, 4).unwrap();
                let tape = Tape::new();
                let bound = p.bind(&tape, false);
                let coords = tape.var(Tensor::from_rows3(x.coords()));
                let v = forward_on_tape(&p, &bound, &feats, coords, 0.4).unwrap().vectors.unwrap();
                let mut sel = Tensor::zeros(2, 3);
                sel.data_mut()[atom * 3 + comp] = 1.0;
                let picked = v.mul(tape.constant(sel)).unwrap().sum();
                let grad = tape.grad(picked, &[coords]).unwrap()[0].value().to_rows3().unwrap();
                let err = fd_rel_err(
                    &grad,
                    |c| vector_field(&p, &g, c, 0.4).unwrap()[atom][comp],
                    &x,
                );
                assert!(err < 1e-4, "atom {atom} comp {comp}: {err}");
            }
        }
    }

    #[test]
    fn atom_relabelling_permutes_outputs() {
        let p = live(NetKind::VectorField, 10);
        let g = graph();
        let x = conf(5, 5);
        let perm = [3, 0, 4, 1, 2];
        let v = vector_field(&p, &g, &x, 0.5).unwrap();
        let gp = g.permuted(&perm).unwrap();
        let xp = x.permuted(&perm);
        let vp = vector_field(&p, &gp, &xp, 0.5).unwrap();
        let e = live(NetKind::Energy, 10);
        let e0 = energy(&e, &g, &x).unwrap();
        let e1 = energy(&e, &gp, &xp).unwrap();
        assert!((e0 - e1).abs() < 1e-10);
        for (old, &new) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((vp[new][k] - v[old][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let p = live(NetKind::VectorField, 11);
        let g = graph();
        assert!(matches!(vector_field(&p, &g, &conf(1, 4), 0.5), Err(Error::Model(_))));
        assert!(matches!(vector_field(&p, &g, &conf(1, 5), 1.5), Err(Error::Model(_))));
        assert!(matches!(energy(&p, &g, &conf(1, 5)), Err(Error::Model(_))));
    }

    #[test]
    fn single_atom_has_zero_field() {
        let p = live(NetKind::VectorField, 12);
        let g = MolGraph::new(vec![2], vec![]).unwrap();
        let v = vector_field(&p, &g, &Conformation::zeros(1), 0.5).unwrap();
        assert_eq!(v, vec![[0.0; 3]]);
    }
}
