use fovplan::assignment::Variant;
use fovplan::dataset::Demonstration;
use fovplan::experiments::{gradient_check, random_samples};
use fovplan::expert::control_point_rms;
use fovplan::observation::Observation;
use fovplan::splines::ActionTuple;
use fovplan::student::{sample_loss, train, LossSpec, Mlp, TrainConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(variant: Variant, epsilon: f64) -> LossSpec {
    LossSpec { variant, epsilon, beta_p: 1.0, beta_t: 0.7 }
}

#[test]
fn linear_layer_gradient_matches_central_differences() {
    let net = Mlp::init(&[43, 78], 4).unwrap();
    let batch = random_samples(1, 6, 5);
    for (v, e) in [(Variant::Lsa, 0.0), (Variant::RwtaR, 0.2), (Variant::RwtaC, 0.2), (Variant::WtaR, 0.0)] {
        let err = gradient_check(&net, &batch, &spec(v, e), 200, 6).unwrap();
        assert!(err < 1e-4, "{v}: {err}");
    }
}

#[test]
fn full_network_gradient_matches_central_differences() {
    let net = Mlp::init(&[43, 64, 64, 78], 8).unwrap();
    let batch = random_samples(3, 6, 9);
    for (v, e) in [(Variant::Lsa, 0.0), (Variant::RwtaR, 0.1), (Variant::RwtaC, 0.1)] {
        let err = gradient_check(&net, &batch, &spec(v, e), 50, 10).unwrap();
        assert!(err < 1e-4, "{v}: {err}");
    }
}

fn random_output(rng: &mut ChaCha8Rng, n_s: usize) -> Vec<f64> {
    (0..13 * n_s).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn lsa_loss_ignores_expert_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let out = random_output(&mut rng, 6);
        let mut targets: Vec<[f64; 13]> =
            (0..rng.random_range(1..=6)).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let (l0, _) = sample_loss(&out, &targets, &spec(Variant::Lsa, 0.0)).unwrap();
        targets.reverse();
        let (l1, _) = sample_loss(&out, &targets, &spec(Variant::Lsa, 0.0)).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }
}

#[test]
fn lsa_loss_ignores_head_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let out = random_output(&mut rng, 6);
        let targets: Vec<[f64; 13]> =
            (0..rng.random_range(1..=6)).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<f64> = perm.iter().flat_map(|&h| out[13 * h..13 * h + 13].to_vec()).collect();
        let (l0, g0) = sample_loss(&out, &targets, &spec(Variant::Lsa, 0.0)).unwrap();
        let (l1, g1) = sample_loss(&permuted, &targets, &spec(Variant::Lsa, 0.0)).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
        for (k, &h) in perm.iter().enumerate() {
            for c in 0..13 {
                assert!((g1[13 * k + c] - g0[13 * h + c]).abs() < 1e-12);
            }
        }
    }
}

fn obs_with(seed: u64) -> Observation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..43).map(|_| rng.random_range(-2.0..2.0)).collect();
    v[40..43].copy_from_slice(&[0.8, 0.8, 0.8]);
    Observation::from_slice(&v).unwrap()
}

fn action(y: f64, t: f64) -> ActionTuple {
    ActionTuple {
        qhat: [
            Vector3::new(1.0, 0.3 * y, 0.0),
            Vector3::new(2.0, 0.8 * y, 0.1),
            Vector3::new(3.0, 0.6 * y, 0.0),
            Vector3::new(4.0, 0.0, 0.0),
        ],
        total_time: t,
    }
}

#[test]
fn single_demo_is_memorized() {
    let d = Demonstration { observation: obs_with(3), actions: vec![action(1.0, 3.0), action(-1.0, 3.5)], costs: vec![1.0, 1.1] };
    let cfg = TrainConfig { epochs: 2000, batch_size: 1, ..Default::default() };
    let r = train(&[d], &cfg, 0.5, 6.0).unwrap();
    assert!(*r.loss_curve.last().unwrap() < 1e-3, "{}", r.loss_curve.last().unwrap());
}

fn small_dataset() -> Vec<Demonstration> {
    (0..40)
        .map(|i| {
            let s = (i as f64 / 40.0) * 2.0 - 1.0;
            let mut obs = obs_with(100 + i);
            obs.g_f = Vector3::new(4.0, s, 0.0);
            Demonstration {
                observation: obs,
                actions: vec![action(1.0 + 0.3 * s, 3.0 + s), action(-1.0 + 0.3 * s, 3.2 + s)],
                costs: vec![1.0, 1.2],
            }
        })
        .collect()
}

#[test]
fn smoothed_loss_curve_decreases() {
    let cfg = TrainConfig { epochs: 300, batch_size: 8, ..Default::default() };
    let r = train(&small_dataset(), &cfg, 0.5, 6.0).unwrap();
    let windows: Vec<f64> = r.loss_curve.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{windows:?}");
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = TrainConfig { epochs: 20, batch_size: 8, seed: 5, ..Default::default() };
    let a = train(&small_dataset(), &cfg, 0.5, 6.0).unwrap();
    let b = train(&small_dataset(), &cfg, 0.5, 6.0).unwrap();
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn two_modes_claim_distinct_heads() {
    let demos = small_dataset();
    let cfg = TrainConfig { epochs: 600, batch_size: 8, ..Default::default() };
    let policy = train(&demos, &cfg, 0.5, 6.0).unwrap().policy;
    for d in demos.iter().step_by(7) {
        let heads = policy.forward_normalized(&d.observation).unwrap();
        let decoded = policy.predict(&d.observation).unwrap();
        let mut matched = Vec::new();
        for target in &d.actions {
            let t = policy.normalizer.normalize_action(target);
            let (best, mse) = heads
                .iter()
                .enumerate()
                .map(|(k, h)| (k, (0..13).map(|c| (h[c] - t[c]).powi(2)).sum::<f64>() / 13.0))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(mse < 0.1, "{mse}");
            matched.push(best);
        }
        assert_ne!(matched[0], matched[1]);
        assert!(control_point_rms(&decoded[matched[0]], &decoded[matched[1]]) > 0.35);
    }
}

#[test]
fn input_perturbation_bounded_by_weight_norms() {
    let net = Mlp::init(&[43, 64, 64, 78], 3).unwrap();
    let bound = net.lipschitz_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let x: Vec<f64> = (0..43).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = x.clone();
        let k = rng.random_range(0..43);
        y[k] += 1e-6;
        let (a, b) = (net.forward(&x).unwrap(), net.forward(&y).unwrap());
        let diff = a.output().iter().zip(b.output()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= bound * 1e-6 * (1.0 + 1e-9));
    }
}

#[test]
fn predicted_time_stays_in_range() {
    let cfg = TrainConfig { epochs: 5, batch_size: 8, ..Default::default() };
    let policy = train(&small_dataset(), &cfg, 0.5, 6.0).unwrap().policy;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let v: Vec<f64> = (0..43).map(|_| rng.random_range(-50.0..50.0)).collect();
        for a in policy.predict(&Observation::from_slice(&v).unwrap()).unwrap() {
            assert!(a.total_time > 0.0 && a.total_time <= 6.0);
        }
    }
}
