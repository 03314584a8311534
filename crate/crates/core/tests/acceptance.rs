//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use fovplan::assignment::{assign, brute_force_min, solve_lsa, Variant};
use fovplan::costs::{collision_free, BoxPair};
use fovplan::dataset::{split, Demonstration};
use fovplan::experiments::*;
use fovplan::expert::{expert_plan, ExpertConfig};
use fovplan::frames::UavState;
use fovplan::sim::*;
use fovplan::splines::{impose_boundary_conditions, ActionTuple};
use fovplan::student::{train, LossSpec, Mlp, Policy, TrainConfig};
use nalgebra::{DMatrix, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("[{}] C{id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "C{id} {name}: {detail}");
}

fn cfg() -> ExperimentConfig {
    ExperimentConfig::default()
}

const STATIC_SEED: u64 = 2024;

/// Desk-scale static-scene dataset and its train/eval split.
fn static_data() -> &'static (Vec<Demonstration>, Vec<Demonstration>) {
    static DATA: OnceLock<(Vec<Demonstration>, Vec<Demonstration>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let c = cfg();
        let demos = gen_static_demos(&c, c.n_demos, STATIC_SEED).expect("static demos");
        split(&demos, c.train_fraction, STATIC_SEED)
    })
}

fn train_static(variant: Variant, epsilon: f64, seed: u64) -> Policy {
    let c = cfg();
    let tc = TrainConfig { variant, epsilon, seed, ..c.train.clone() };
    train(&static_data().0, &tc, c.mission.expert.t_min, c.mission.expert.t_pred).expect("training").policy
}

fn lsa_static_policy() -> &'static Policy {
    static P: OnceLock<Policy> = OnceLock::new();
    P.get_or_init(|| train_static(Variant::Lsa, 0.0, 0))
}

/// Student trained with dataset aggregation on trefoil episodes only.
fn trefoil_policy() -> &'static Policy {
    static P: OnceLock<Policy> = OnceLock::new();
    P.get_or_init(|| {
        let c = cfg();
        let dc = DaggerConfig { iterations: 3, episodes_per_iteration: 5, episode_duration: 15.0, ..c.dagger.clone() };
        let res = dagger_collect(None, &c.mission, &trefoil_episode, &dc, 3).expect("dagger");
        println!("dagger aggregate sizes {:?}", res.sizes);
        res.policy
    })
}

#[test]
fn c01_boundary_conditions() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r3 = |lo: f64, hi: f64| Vector3::from_fn(|_, _| rng.random_range(lo..hi));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (d, v, a) = (r3(-10.0, 10.0), r3(-3.0, 3.0), r3(-6.0, 6.0));
        let qhat = [r3(-10.0, 10.0), r3(-10.0, 10.0), r3(-10.0, 10.0), r3(-10.0, 10.0)];
        let t = 0.2 + 5.8 * r3(0.0, 1.0).x;
        let t0 = r3(-5.0, 5.0).y;
        let s = impose_boundary_conditions(&ActionTuple { qhat, total_time: t }, d, v, a, t0).unwrap();
        let checks = [
            (s.eval3(t0, 0).unwrap(), d),
            (s.eval3(t0, 1).unwrap(), v),
            (s.eval3(t0, 2).unwrap(), a),
            (s.eval3(t0 + t, 0).unwrap(), qhat[3]),
            (s.eval3(t0 + t, 1).unwrap(), Vector3::zeros()),
            (s.eval3(t0 + t, 2).unwrap(), Vector3::zeros()),
        ];
        for (got, want) in checks {
            worst = worst.max((got - want).norm() / (1e-9 * (1.0 + want.norm())));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, "boundary conditions", worst <= 1.0 && secs < 5.0, format!("worst error / tolerance {worst:.3}, {secs:.2}s"));
}

#[test]
fn c02_closed_form_yaw_optimality() {
    let _g = serial();
    let start = Instant::now();
    let gap = yaw_circle_gap(500, 20_000, 2);
    let secs = start.elapsed().as_secs_f64();
    report(2, "closed-form yaw", gap <= 1e-4 && secs < 30.0, format!("brute max - closed form <= {gap:.3e}, {secs:.2}s"));
}

#[test]
fn c03_lsa_optimality() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..200 {
        let ns = rng.random_range(1..=6);
        let ne = rng.random_range(1..=ns);
        let c = DMatrix::from_fn(ne, ns, |_, _| rng.random_range(0.0..10.0));
        let cols = solve_lsa(&c).unwrap();
        let got: f64 = cols.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        if got != brute_force_min(&c) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(3, "LSA optimality", mismatches == 0 && secs < 10.0, format!("{mismatches} mismatches in 200, {secs:.2}s"));
}

#[test]
fn c04_assignment_structure() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = Vec::new();
    for case in 0..500 {
        let ns = rng.random_range(1..=6);
        let ne = rng.random_range(1..=ns);
        let eps = [0.0, 0.05, 0.15, 0.25, 0.35][case % 5];
        let d = DMatrix::from_fn(ne, ns, |_, _| rng.random_range(0.0..1.0));
        for variant in Variant::ALL {
            let a = assign(&d, variant, eps).unwrap().a;
            let e = match variant {
                Variant::RwtaR | Variant::RwtaC => eps,
                _ => 0.0,
            };
            let ok = match variant {
                Variant::Lsa => {
                    let col_sums: Vec<f64> = (0..ns).map(|j| a.column(j).sum()).collect();
                    a.iter().all(|x| *x == 0.0 || *x == 1.0)
                        && (0..ne).all(|i| a.row(i).sum() == 1.0)
                        && col_sums.iter().filter(|s| **s == 1.0).count() == ne
                        && col_sums.iter().filter(|s| **s == 0.0).count() == ns - ne
                }
                Variant::WtaR | Variant::RwtaR => (0..ne).all(|i| one_winner(a.row(i).iter().copied(), e, ns)),
                Variant::WtaC | Variant::RwtaC => (0..ns).all(|j| one_winner(a.column(j).iter().copied(), e, ne)),
            };
            if !ok {
                violations.push(format!("{variant} ne={ne} ns={ns} eps={eps}"));
            }
        }
    }
    report(4, "assignment structure", violations.is_empty(), format!("{} violations in 2500 matrices {:?}", violations.len(), violations.first()));
}

/// One entry `1 - ε`, the others `ε / (n - 1)` (0 when `n = 1`), and the
/// line sum `1` whenever there is an alternative.
fn one_winner(line: impl Iterator<Item = f64>, eps: f64, n: usize) -> bool {
    let v: Vec<f64> = line.collect();
    let off = if n > 1 { eps / (n - 1) as f64 } else { 0.0 };
    let winners = v.iter().filter(|x| **x == 1.0 - eps).count();
    let others = v.iter().filter(|x| **x == off).count();
    let sum_ok = n == 1 || (v.iter().sum::<f64>() - 1.0).abs() <= 4.0 * f64::EPSILON;
    let shape_ok = if eps == 0.0 { winners == 1 && others == n - 1 } else { winners == 1 && winners + others == n };
    shape_ok && sum_ok
}

#[test]
fn c05_gradient_check() {
    let _g = serial();
    let net = Mlp::init(&[43, 64, 64, 78], 5).unwrap();
    let batch = random_samples(4, 6, 5);
    let mut errs = Vec::new();
    for (v, eps) in [(Variant::Lsa, 0.0), (Variant::RwtaR, 0.15), (Variant::RwtaC, 0.15)] {
        let spec = LossSpec { variant: v, epsilon: eps, beta_p: 1.0, beta_t: 1.0 };
        errs.push((v, gradient_check(&net, &batch, &spec, 50, 55).unwrap()));
    }
    let pass = errs.iter().all(|(_, e)| *e < 1e-4);
    report(5, "gradient check", pass, format!("max rel err {:?}", errs.iter().map(|(v, e)| format!("{v}={e:.2e}")).collect::<Vec<_>>()));
}

#[test]
fn c06_expert_multimodality() {
    let _g = serial();
    let c = cfg();
    let goal = Vector3::new(7.0, 0.0, 1.0);
    let obs = c.scene.observation(goal, &c.mission).unwrap();
    let truth = BoxPair::new(c.scene.s_obst, c.mission.expert.s_uav);
    // Frame f coincides with the world up to the translation to the start.
    let obstacle = ObstacleSpec::fixed(c.scene.obstacle - c.scene.start, c.scene.s_obst);
    let mut good = 0;
    let mut counts = Vec::new();
    for seed in 0..20 {
        let ecfg = ExpertConfig { seed, ..c.mission.expert.clone() };
        let sols = expert_plan(&obs, &ecfg, &c.mission.weights, &c.mission.limits).unwrap();
        let lateral: Vec<f64> = sols
            .iter()
            .filter(|s| {
                let pos = impose_boundary_conditions(&s.action, Vector3::zeros(), obs.v_f, obs.a_f, 0.0).unwrap();
                collision_free(&pos, &obstacle, &truth, 100)
            })
            .map(|s| s.action.qhat.iter().map(|q| q.y).max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap())
            .collect();
        counts.push(lateral.len());
        let left = lateral.iter().any(|y| *y > 0.1);
        let right = lateral.iter().any(|y| *y < -0.1);
        if lateral.len() >= 2 && left && right {
            good += 1;
        }
    }
    report(6, "expert multimodality", good >= 18, format!("{good}/20 seeds with opposite lateral modes, clear modes per seed {counts:?}"));
}

#[test]
fn c07_student_speed_and_cost() {
    let _g = serial();
    let c = cfg();
    let policy = lsa_static_policy();
    let student = eval_static_grid(&Planner::Student(policy), &c).unwrap();
    let expert = eval_static_grid(&Planner::Expert(c.mission.expert.clone()), &c).unwrap();
    let latency_ratio = median(&student.iter().zip(&expert).map(|(s, e)| s.latency_s / e.latency_s).collect::<Vec<_>>());
    let expert_median = median(&expert.iter().map(|e| e.latency_s).collect::<Vec<_>>());
    let cost_ratios: Vec<f64> = student.iter().zip(&expert).filter_map(|(s, e)| Some(s.best_cost? / e.best_cost?)).collect();
    let cost_ratio = median(&cost_ratios);
    // A desk expert faster than 10 ms only has to be beaten tenfold.
    let needed = if expert_median < 0.01 { 0.1 } else { 0.01 };
    let pass = latency_ratio <= needed && cost_ratio <= 1.25 && !cost_ratios.is_empty();
    report(
        7,
        "student speedup and cost",
        pass,
        format!(
            "median latency ratio {latency_ratio:.2e} (need <= {needed}), expert median {expert_median:.3}s, median cost ratio {cost_ratio:.3} over {} goals",
            cost_ratios.len()
        ),
    );
}

#[test]
fn c08_collision_free_grid() {
    let _g = serial();
    let c = cfg();
    let lsa = eval_static_grid(&Planner::Student(lsa_static_policy()), &c).unwrap();
    let rwtac = eval_static_grid(&Planner::Student(&train_static(Variant::RwtaC, 0.0, 0)), &c).unwrap();
    let clear = |rows: &[GridRow]| rows.iter().filter(|r| r.n_collision_free > 0).count();
    let (l, r) = (clear(&lsa), clear(&rwtac));
    let pass = l as f64 >= 0.95 * 64.0 && r < l;
    report(8, "collision-free grid", pass, format!("LSA {l}/64 goals clear, RWTAc(eps=0) {r}/64"));
}

#[test]
fn c09_mse_ratios() {
    let _g = serial();
    let eval_set = &static_data().1;
    let reps = [0u64, 1, 2];
    // Mean over repetitions of the per-rank mean MSE.
    let mut table: Vec<((Variant, f64), Vec<f64>, f64)> = Vec::new();
    for (variant, eps) in policy_sweep() {
        let mut per_rank = Vec::new();
        let mut overall = Vec::new();
        for &seed in &reps {
            let policy = train_static(variant, eps, seed);
            let buckets = eval_mse(&policy, eval_set).unwrap();
            per_rank.push(buckets.iter().map(|b| mean(b)).collect::<Vec<_>>());
            overall.push(mean(&buckets.concat()));
        }
        let n = per_rank[0].len();
        let avg: Vec<f64> = (0..n).map(|k| mean(&per_rank.iter().map(|r| r[k]).collect::<Vec<_>>())).collect();
        table.push(((variant, eps), avg, mean(&overall)));
    }
    let (_, lsa_rank, lsa_all) = table[0].clone();
    let worst = lsa_rank.iter().rposition(|m| !m.is_nan()).unwrap();
    let mut failures = Vec::new();
    for ((v, e), rank, all) in &table[1..] {
        if lsa_rank[worst] > rank[worst] {
            failures.push(format!("{v}(eps={e}) worst-rank {:.4} < LSA {:.4}", rank[worst], lsa_rank[worst]));
        }
        if lsa_all > 1.1 * all {
            failures.push(format!("{v}(eps={e}) overall {all:.4} vs LSA {lsa_all:.4}"));
        }
    }
    for ((v, e), rank, all) in &table {
        println!("  {v} eps={e}: per-rank {:?} overall {all:.4}", rank.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>());
    }
    report(
        9,
        "MSE ratios",
        failures.is_empty(),
        format!("worst rank kappa={worst}, LSA {:.4} / overall {lsa_all:.4}; failures {failures:?}", lsa_rank[worst]),
    );
}

#[test]
fn c10_generalization() {
    let _g = serial();
    let c = cfg();
    let policy = trefoil_policy();
    let mission = generalization_mission(&c.mission);
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for kind in [ObstacleKind::Static, ObstacleKind::Square, ObstacleKind::Eight, ObstacleKind::Epitrochoid] {
        let (mut zero, mut total, mut goals) = (0, 0, 0);
        for seed in 0..3 {
            let log = run_mission(&Planner::Student(policy), &[generalization_world(kind, seed)], &mission, 45.0, None).unwrap();
            zero += log.records.iter().filter(|r| r.n_collision_free == 0).count();
            total += log.records.len();
            goals += log.goals_reached;
        }
        let frac = zero as f64 / total as f64;
        worst = worst.max(frac);
        lines.push(format!("{kind:?} {:.2}% ({zero}/{total}, goals {goals})", 100.0 * frac));
    }
    report(10, "generalization", worst <= 0.01, format!("zero collision-free replans: {}", lines.join(", ")));
}

#[test]
fn c11_safety_ratio() {
    let _g = serial();
    let c = cfg();
    let policy = trefoil_policy();
    let mission = corridor_mission(&c.mission);
    let mut means = Vec::new();
    for n in 1..=5 {
        let (mut sr, mut sep) = (Vec::new(), Vec::new());
        for seed in 0..10 {
            let log = run_mission(&Planner::Student(policy), &corridor_world(n, 100 * n as u64 + seed), &mission, 30.0, None).unwrap();
            sr.push(log.safety_ratio);
            sep.push(log.separation_ratio);
        }
        println!("  {n} obstacles: mean safety ratio {:.4}, mean separation ratio {:.4}", mean(&sr), mean(&sep));
        means.push(mean(&sr));
    }
    let pass = means[0] > 1.0 && means[1] > 1.0;
    report(11, "safety ratio", pass, format!("mean safety ratio for 1..5 obstacles {:?}", means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>()));
}

#[test]
fn c12_observation_equivariance() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut r3 = |s: f64| Vector3::from_fn(|_, _| rng.random_range(-s..s));
        let state = UavState { p: r3(10.0), v: r3(3.0), a: r3(6.0), psi: r3(3.0).x, psi_dot: r3(2.0).y };
        let g = r3(15.0);
        let spec = ObstacleSpec {
            kind: ObstacleKind::Trefoil,
            offset: r3(10.0),
            scale: r3(2.0).abs() + Vector3::repeat(0.5),
            phase: r3(3.0).z,
            period: 12.0,
            s_obst: r3(1.0).abs() + Vector3::repeat(0.2),
        };
        let (alpha, shift) = (r3(std::f64::consts::PI).x, r3(50.0));
        let obst = obstacle_spline(&spec, 0.0, 6.0).unwrap();
        let base = build_observation(&state, &obst, spec.s_obst, g, 4.0).unwrap();
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), alpha);
        let moved = UavState { p: rz * state.p + shift, v: rz * state.v, a: rz * state.a, psi: state.psi + alpha, psi_dot: state.psi_dot };
        let other = build_observation(&moved, &obst.map_points3(|q| rz * q + shift), spec.s_obst, rz * g + shift, 4.0).unwrap();
        for (x, y) in base.to_array().iter().zip(other.to_array()) {
            worst = worst.max((x - y).abs());
        }
    }
    report(12, "observation equivariance", worst <= 1e-9, format!("max abs difference {worst:.2e} over 1000 cases"));
}
