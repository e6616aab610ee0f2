use super::*;
use crate::netmodel::{energy, energy_grad, FeaturizerConfig};
use crate::synth::{gen_synthetic, SyntheticSpec};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::Rng;

fn small_net() -> NetConfig {
    NetConfig {
        hidden: 8,
        layers: 2,
        n_atom_types: 4,
        time_freqs: 2,
        featurizer: FeaturizerConfig {
            n_rbf: 4,
            d_cutoff: 6.0,
            eps_norm: 0.01,
        },
    }
}

/// Networks whose zero-initialised heads are replaced by random values.
fn live(kind: NetKind, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(small_net(), kind, seed).unwrap();
    let mut rng = seeded(seed ^ 0xABCD);
    let names = p.names().to_vec();
    for (n, t) in names.iter().zip(p.tensors_mut()) {
        if n.contains("gate") || n == "readout" {
            t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        }
    }
    p
}

fn chain(n: usize) -> MolGraph {
    MolGraph::new((0..n as u32).map(|i| i % 4).collect(), (1..n).map(|i| (i - 1, i)).collect())
        .unwrap()
}

fn random_conf(rng: &mut impl Rng, n: usize) -> Conformation {
    Conformation::new((0..n).map(|_| [0.0; 3].map(|_: f64| rng.random_range(-1.5..1.5))).collect())
        .unwrap()
        .center()
        .unwrap()
}

fn random_batch(seed: u64, n: usize, size: usize, sigma: f64) -> Vec<PathSample> {
    let mut rng = seeded(seed);
    let g = chain(n);
    (0..size)
        .map(|_| {
            let c0 = random_conf(&mut rng, n);
            let c1 = random_conf(&mut rng, n);
            let t = rng.random_range(0.05..0.95);
            make_path_sample(&g, &c0, &c1, t, sigma, &mut rng).unwrap()
        })
        .collect()
}

fn sq_norm(rows: &[[f64; 3]]) -> f64 {
    rows.iter().flatten().map(|x| x * x).sum()
}

#[test]
fn path_midpoint_without_noise() {
    let g = chain(2);
    let c0 = Conformation::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let c1 = Conformation::new(vec![[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]]).unwrap();
    let s = make_path_sample_with_noise(&g, &c0, &c1, 0.5, 0.3, &[[0.0; 3]; 2]).unwrap();
    assert_eq!(s.c_t.coords(), &[[-0.5, 0.5, 0.0], [0.5, -0.5, 0.0]]);
    assert_eq!(s.v_target, vec![[1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]]);
}

#[test]
fn zero_sigma_gives_straight_target() {
    let mut rng = seeded(4);
    let g = chain(3);
    for _ in 0..50 {
        let (c0, c1) = (random_conf(&mut rng, 3), random_conf(&mut rng, 3));
        let t = rng.random_range(0.001..0.999);
        let s = make_path_sample(&g, &c0, &c1, t, 0.0, &mut rng).unwrap();
        assert_eq!(s.c_t, s.c_t_prime);
        assert_eq!(s.v_target, s.s_t);
    }
}

#[test]
fn path_hand_example() {
    let g = MolGraph::new(vec![0], vec![]).unwrap();
    let c0 = Conformation::zeros(1);
    let c1 = Conformation::new(vec![[1.0, 0.0, 0.0]]).unwrap();
    let delta = 0.8;
    let s = make_path_sample_with_noise(&g, &c0, &c1, 0.25, 1.0, &[[delta, 0.0, 0.0]]).unwrap();
    let want_ct = 0.25 + delta * 3f64.sqrt() / 4.0;
    assert!((s.c_t.coords()[0][0] - want_ct).abs() < 1e-15);
    let want_v = (0.5 / 0.375) * (0.1875f64.sqrt() * delta) + 1.0;
    assert!((s.v_target[0][0] - want_v).abs() < 1e-14);
    assert_eq!(s.v_target[0][1], 0.0);
}

#[test]
fn path_rejects_bad_inputs() {
    let g = chain(3);
    let c = Conformation::zeros(3);
    let short = Conformation::zeros(2);
    let mut rng = seeded(0);
    assert!(matches!(make_path_sample(&g, &c, &short, 0.5, 0.1, &mut rng), Err(Error::Shape(_))));
    assert!(matches!(make_path_sample(&g, &c, &c, 0.0, 0.1, &mut rng), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn target_noise_identity(seed in 0u64..100_000, t in 0.001..0.999f64, sigma in 0.0..2.0f64) {
        let mut rng = seeded(seed);
        let g = chain(4);
        let (c0, c1) = (random_conf(&mut rng, 4), random_conf(&mut rng, 4));
        let eps: Vec<[f64; 3]> = (0..4).map(|_| [0.0; 3].map(|_: f64| rng.sample(StandardNormal))).collect();
        let s = make_path_sample_with_noise(&g, &c0, &c1, t, sigma, &eps).unwrap();
        let k = (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)) * sigma * (t * (1.0 - t)).sqrt();
        for i in 0..4 {
            for d in 0..3 {
                let lhs = s.v_target[i][d] - (c1.coords()[i][d] - c0.coords()[i][d]);
                let scale = 1.0 + k.abs() * eps[i][d].abs();
                prop_assert!((lhs - k * eps[i][d]).abs() < 1e-12 * scale);
            }
        }
    }
}

#[test]
fn zero_model_bridge_loss_is_mean_target_norm() {
    let theta = ModelParams::init(small_net(), NetKind::VectorField, 1).unwrap();
    let batch = random_batch(2, 4, 5, 0.0);
    let want = batch.iter().map(|s| sq_norm(&s.s_t)).sum::<f64>() / 5.0;
    assert!((loss_sbcfm(&theta, &batch).unwrap() - want).abs() < 1e-12);
    assert!(matches!(loss_sbcfm(&theta, &[]), Err(Error::EmptyBatch)));
}

#[test]
fn constant_energy_matching_loss_is_mean_displacement_norm() {
    let phi = ModelParams::init(small_net(), NetKind::Energy, 1).unwrap();
    let batch = random_batch(3, 4, 5, 0.1);
    let want = batch.iter().map(|s| sq_norm(&s.s_t)).sum::<f64>() / 5.0;
    assert!((loss_em(&phi, &batch).unwrap() - want).abs() < 1e-12);
}

#[test]
fn energy_matching_matches_direct_evaluation() {
    let phi = live(NetKind::Energy, 5);
    let batch = random_batch(6, 3, 4, 0.1);
    let mut total = 0.0;
    for s in &batch {
        let g = energy_grad(&phi, &s.graph, &s.c_t_prime).unwrap();
        for i in 0..3 {
            for d in 0..3 {
                let r = -g[i][d] - s.s_t[i][d];
                total += r * r;
            }
        }
    }
    let want = total / batch.len() as f64;
    assert!((loss_em(&phi, &batch).unwrap() - want).abs() < 1e-10);
}

/// Central difference of `f` in one parameter entry.
fn fd_param(params: &ModelParams, tensor: usize, entry: usize, f: impl Fn(&ModelParams) -> f64) -> f64 {
    let h = 1e-5;
    let mut plus = params.clone();
    plus.tensors_mut()[tensor].data_mut()[entry] += h;
    let mut minus = params.clone();
    minus.tensors_mut()[tensor].data_mut()[entry] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn assert_grad_matches(params: &ModelParams, grads: &[Tensor], f: impl Fn(&ModelParams) -> f64) {
    for (tensor, g) in grads.iter().enumerate() {
        let entry = g.len() / 2;
        let fd = fd_param(params, tensor, entry, &f);
        let an = g.data()[entry];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        assert!(rel < 1e-3, "{}: analytic {an} fd {fd}", params.names()[tensor]);
    }
}

#[test]
fn bridge_loss_gradient_matches_finite_differences() {
    let theta = live(NetKind::VectorField, 7);
    let batch = random_batch(8, 4, 3, 0.1);
    let (_, g) = loss_sbcfm_grad(&theta, &batch).unwrap();
    assert_grad_matches(&theta, &g, |p| loss_sbcfm(p, &batch).unwrap());
}

#[test]
fn energy_matching_gradient_matches_finite_differences() {
    let phi = live(NetKind::Energy, 9);
    let batch = random_batch(10, 4, 3, 0.1);
    let (_, g) = loss_em_grad(&phi, &batch).unwrap();
    assert_grad_matches(&phi, &g, |p| loss_em(p, &batch).unwrap());
}

fn labelled(mol_id: &str, n: usize, energies: Vec<f64>, seed: u64) -> ConformerEnsemble {
    let mut rng = seeded(seed);
    let confs = energies.iter().map(|_| random_conf(&mut rng, n)).collect();
    ConformerEnsemble::new(mol_id, chain(n), confs, Some(energies), None).unwrap()
}

#[test]
fn energy_loss_examples() {
    let zero = ModelParams::init(small_net(), NetKind::Energy, 1).unwrap();
    let e = labelled("a", 3, vec![2.0, 5.0], 1);
    let norm = EnergyLabelNormalizer::fit(e.energies.as_ref().unwrap()).unwrap();
    assert!((loss_energy(&zero, &e, &norm).unwrap() - 0.5).abs() < 1e-15);
    let unlabeled = ConformerEnsemble::new("u", chain(3), e.conformers.clone(), None, None).unwrap();
    assert!(matches!(loss_energy(&zero, &unlabeled, &norm), Err(Error::MissingLabels)));
}

#[test]
fn energy_loss_pools_two_molecules() {
    let phi = live(NetKind::Energy, 11);
    let a = labelled("a", 3, vec![1.0, 3.0, 2.0], 2);
    let b = labelled("b", 4, vec![-4.0, -2.0], 3);
    // Hand normalisation: a -> [0, 1, 0.5], b -> [0, 1].
    let labels = [(&a, [0.0, 1.0, 0.5].as_slice()), (&b, [0.0, 1.0].as_slice())];
    let mut total = 0.0;
    let mut count = 0.0;
    for (e, ls) in labels {
        for (c, l) in e.conformers.iter().zip(ls) {
            total += (energy(&phi, &e.graph, c).unwrap() - l).abs();
            count += 1.0;
        }
    }
    let norms = [
        (&a, EnergyLabelNormalizer::fit(a.energies.as_ref().unwrap()).unwrap()),
        (&b, EnergyLabelNormalizer::fit(b.energies.as_ref().unwrap()).unwrap()),
    ];
    assert!((loss_energy_batch(&phi, &norms).unwrap() - total / count).abs() < 1e-12);
}

#[test]
fn finetune_loss_combines_terms() {
    let phi = live(NetKind::Energy, 12);
    let batch = random_batch(13, 3, 3, 0.1);
    let a = labelled("a", 3, vec![1.0, 3.0, 2.0], 4);
    let ens = [(&a, EnergyLabelNormalizer::fit(a.energies.as_ref().unwrap()).unwrap())];
    let em = loss_em(&phi, &batch).unwrap();
    let en = loss_energy_batch(&phi, &ens).unwrap();
    assert_eq!(loss_finetune(&phi, &batch, &ens, 0.0).unwrap(), em);
    assert!((loss_finetune(&phi, &batch, &ens, 1.0).unwrap() - (em + en)).abs() < 1e-12);
    assert!(matches!(loss_finetune(&phi, &batch, &ens, -1.0), Err(Error::Config(_))));

    let eta = 0.7;
    let (_, g) = loss_finetune_grad(&phi, &batch, &ens, eta).unwrap();
    let (_, g_em) = loss_em_grad(&phi, &batch).unwrap();
    let (_, g_en) = loss_energy_grad(&phi, &ens).unwrap();
    for ((a, b), c) in g.iter().zip(&g_em).zip(&g_en) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            assert!((x - (y + eta * z)).abs() < 1e-12);
        }
    }
}

fn rotate_rows(rows: &[[f64; 3]], r: &[[f64; 3]; 3]) -> Vec<[f64; 3]> {
    rows.iter()
        .map(|v| [0, 1, 2].map(|i| (0..3).map(|k| r[i][k] * v[k]).sum()))
        .collect()
}

#[test]
fn losses_are_rotation_invariant() {
    let theta = live(NetKind::VectorField, 14);
    let phi = live(NetKind::Energy, 15);
    let (a, b) = (0.7f64, 1.9f64);
    let r = [
        [a.cos(), -a.sin(), 0.0],
        [a.sin() * b.cos(), a.cos() * b.cos(), -b.sin()],
        [a.sin() * b.sin(), a.cos() * b.sin(), b.cos()],
    ];
    let mut rng = seeded(16);
    let g = chain(5);
    let mut plain = Vec::new();
    let mut rotated = Vec::new();
    for _ in 0..4 {
        let (c0, c1) = (random_conf(&mut rng, 5), random_conf(&mut rng, 5));
        let eps: Vec<[f64; 3]> = (0..5).map(|_| [0.0; 3].map(|_: f64| rng.sample(StandardNormal))).collect();
        let t = rng.random_range(0.1..0.9);
        plain.push(make_path_sample_with_noise(&g, &c0, &c1, t, 0.3, &eps).unwrap());
        let rc = |c: &Conformation| Conformation::new(rotate_rows(c.coords(), &r)).unwrap();
        rotated.push(
            make_path_sample_with_noise(&g, &rc(&c0), &rc(&c1), t, 0.3, &rotate_rows(&eps, &r)).unwrap(),
        );
    }
    let d1 = loss_sbcfm(&theta, &plain).unwrap() - loss_sbcfm(&theta, &rotated).unwrap();
    let d2 = loss_em(&phi, &plain).unwrap() - loss_em(&phi, &rotated).unwrap();
    assert!(d1.abs() < 1e-8 && d2.abs() < 1e-8);
}

#[test]
fn optimizer_zero_lr_is_noop_and_sgd_clips() {
    let mut p = live(NetKind::Energy, 17);
    let before = p.clone();
    let grads: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::filled(t.rows(), t.cols(), 3.0)).collect();
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        Optimizer::new(kind, 0.0, 10.0).step(&mut p, &grads).unwrap();
        assert_eq!(p, before);
    }
    let norm: f64 = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    assert!(norm > 10.0);
    let reported = Optimizer::new(OptimizerKind::Sgd, 0.1, 10.0).step(&mut p, &grads).unwrap();
    assert!((reported - norm).abs() < 1e-12);
    let want = before.tensors()[0].data()[0] - 0.1 * 3.0 * 10.0 / norm;
    assert!((p.tensors()[0].data()[0] - want).abs() < 1e-14);
}

fn toy_dataset(n: usize) -> Vec<ConformerEnsemble> {
    let spec = SyntheticSpec {
        n_molecules: n,
        min_atoms: 3,
        max_atoms: 5,
        conformers_per_mol: 4,
        burn_in_sweeps: 20,
        thin_sweeps: 2,
        ..SyntheticSpec::default()
    };
    gen_synthetic(&spec, 1).unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        matching_steps: 3,
        finetune_steps: 3,
        energy_conformers: 2,
        lr_theta: 1e-2,
        lr_phi: 1e-2,
        seed: 21,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_return_initialisation() {
    let data = toy_dataset(3);
    let cfg = TrainConfig {
        matching_steps: 0,
        finetune_steps: 0,
        ..quick_cfg()
    };
    let out = train_joint(&data, &small_net(), &cfg).unwrap();
    assert_eq!(out.checkpoint, Checkpoint::init(small_net(), derive_seed(cfg.seed, 0)).unwrap());
    assert!(out.history.is_empty());
    assert!(matches!(train_joint(&[], &small_net(), &cfg), Err(Error::EmptyDataset)));
}

#[test]
fn training_is_deterministic_and_freezes_theta_in_finetune() {
    let data = toy_dataset(3);
    let cfg = quick_cfg();
    let a = train_joint(&data, &small_net(), &cfg).unwrap();
    let b = train_joint(&data, &small_net(), &TrainConfig { workers: 2, ..cfg }).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.history.len(), 6);
    assert!(a.history[..3].iter().all(|r| r.phase == Phase::Matching && r.loss_energy.is_none()));
    assert!(a.history[3..].iter().all(|r| r.phase == Phase::Finetune && r.loss_sbcfm.is_none()));

    let phase1 = train_joint(&data, &small_net(), &TrainConfig { finetune_steps: 0, ..cfg }).unwrap();
    assert_eq!(phase1.checkpoint.vector_field, a.checkpoint.vector_field);
    assert_ne!(phase1.checkpoint.energy, a.checkpoint.energy);
    let resumed = train_joint_from(
        phase1.checkpoint.clone(),
        &data,
        &TrainConfig { matching_steps: 0, ..cfg },
    )
    .unwrap();
    assert_eq!(resumed.checkpoint, a.checkpoint);

    let mut buf = Vec::new();
    write_history_csv(&a.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,phase,loss_sbcfm,loss_em,loss_energy\n0,matching,"));
    assert!(text.lines().nth(4).unwrap().starts_with("0,finetune,,"));
}

#[test]
fn finetune_requires_labels() {
    let mut data = toy_dataset(2);
    data[1].energies = None;
    assert!(matches!(train_joint(&data, &small_net(), &quick_cfg()), Err(Error::MissingLabels)));
    let cfg = TrainConfig { finetune_steps: 0, ..quick_cfg() };
    assert!(train_joint(&data, &small_net(), &cfg).is_ok());
}

#[test]
fn reflow_only_touches_theta_and_respects_zero_steps() {
    let data = toy_dataset(2);
    let theta = live(NetKind::VectorField, 30);
    let cfg = ReflowConfig {
        n_ode_steps: 3,
        pairs_per_mol: 2,
        steps: 0,
        batch_size: 2,
        ..ReflowConfig::default()
    };
    let (same, h) = reflow_finetune(&theta, &data, &cfg).unwrap();
    assert_eq!(same, theta);
    assert!(h.is_empty());
    let (moved, h) = reflow_finetune(&theta, &data, &ReflowConfig { steps: 2, lr: 1e-2, ..cfg }).unwrap();
    assert_ne!(moved, theta);
    assert_eq!(h.len(), 2);
    let bad = ReflowConfig { n_ode_steps: 0, ..cfg };
    assert!(matches!(reflow_finetune(&theta, &data, &bad), Err(Error::Config(_))));
    let phi = live(NetKind::Energy, 31);
    assert!(reflow_finetune(&phi, &data, &cfg).is_err());

    let pairs = make_reflow_pairs(&theta, &data, &cfg).unwrap();
    assert_eq!(pairs.len(), 4);
    for p in &pairs {
        assert!(p.c0p.centroid().iter().chain(p.c1p.centroid().iter()).all(|m| m.abs() < 1e-9));
    }
}
