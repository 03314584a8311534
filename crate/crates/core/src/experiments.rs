//! Experiment drivers shared by the command-line harness and the tests.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::{brute_force_min, cost_matrices, solve_lsa, Variant};
use crate::dataset::Demonstration;
use crate::error::{Error, Result};
use crate::expert::expert_plan;
use crate::frames::UavState;
use crate::observation::Observation;
use crate::sim::{
    build_observation, obstacle_spline, replan_step, CommittedPlan, DaggerConfig, Episode, MissionConfig, MissionLog,
    ObstacleKind, ObstacleSpec, Planner, ReplanRecord,
};
use crate::student::{loss_and_gradient, LossSpec, Mlp, Policy, Sample, TrainConfig};

/// Static obstacle between the start and a wall of goals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticScene {
    pub start: Vector3<f64>,
    pub obstacle: Vector3<f64>,
    pub s_obst: Vector3<f64>,
    pub goal_x: f64,
    /// Goals are `(goal_x, start.y + a, start.z + b)` with `|a|, |b|` up to
    /// this value.
    pub half_range: f64,
    pub grid: usize,
}

impl Default for StaticScene {
    fn default() -> Self {
        Self {
            start: Vector3::new(0.0, 0.0, 1.0),
            obstacle: Vector3::new(2.5, 0.0, 1.0),
            s_obst: Vector3::repeat(0.8),
            goal_x: 7.0,
            half_range: 1.7,
            grid: 8,
        }
    }
}

impl StaticScene {
    pub fn goal(&self, a: f64, b: f64) -> Vector3<f64> {
        Vector3::new(self.goal_x, self.start.y + a, self.start.z + b)
    }

    pub fn world(&self) -> Vec<ObstacleSpec> {
        vec![ObstacleSpec::fixed(self.obstacle, self.s_obst)]
    }

    /// Observation of the UAV hovering at the start with yaw 0.
    pub fn observation(&self, g_term: Vector3<f64>, mission: &MissionConfig) -> Result<Observation> {
        let spec = ObstacleSpec::fixed(self.obstacle, self.s_obst);
        let spline = obstacle_spline(&spec, 0.0, mission.t_pred)?;
        build_observation(&UavState::at_rest(self.start, 0.0), &spline, self.s_obst, g_term, mission.radius)
    }

    /// Grid goals in row-major `(i_y, i_z)` order.
    pub fn grid_goals(&self) -> Vec<(usize, usize, Vector3<f64>)> {
        let n = self.grid.max(2);
        let coord = |i: usize| -self.half_range + 2.0 * self.half_range * i as f64 / (n - 1) as f64;
        (0..n).flat_map(|iy| (0..n).map(move |iz| (iy, iz, self.goal(coord(iy), coord(iz))))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mission: MissionConfig,
    pub scene: StaticScene,
    pub n_demos: usize,
    pub train_fraction: f64,
    pub train: TrainConfig,
    pub dagger: DaggerConfig,
    pub dagger_pairs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mission: MissionConfig::default(),
            scene: StaticScene::default(),
            n_demos: 500,
            train_fraction: 0.75,
            train: TrainConfig::default(),
            dagger: DaggerConfig::default(),
            dagger_pairs: 3000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Restores the dataset sizes used for the published experiments.
    pub fn paper_scale(mut self) -> Self {
        self.n_demos = 2000;
        self.dagger_pairs = 23000;
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Writes `rows` as CSV preceded by a `# config_hash:` comment line.
pub fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# config_hash: {config_hash}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Expert demonstrations for goals drawn uniformly over the goal wall.
/// Observations where the expert finds nothing are skipped.
pub fn gen_static_demos(cfg: &ExperimentConfig, count: usize, seed: u64) -> Result<Vec<Demonstration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.scene.half_range;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 4 * count + 10 {
            return Err(Error::Empty("expert solutions for the static scene"));
        }
        let g = cfg.scene.goal(rng.random_range(-h..=h), rng.random_range(-h..=h));
        let obs = cfg.scene.observation(g, &cfg.mission)?;
        let ecfg = crate::expert::ExpertConfig { seed: rng.random(), ..cfg.mission.expert.clone() };
        let sols = expert_plan(&obs, &ecfg, &cfg.mission.weights, &cfg.mission.limits)?;
        if !sols.is_empty() {
            out.push(Demonstration::from_solutions(obs, &sols));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub i_y: usize,
    pub i_z: usize,
    pub goal_x: f64,
    pub goal_y: f64,
    pub goal_z: f64,
    pub n_candidates: usize,
    pub n_collision_free: usize,
    pub best_cost: Option<f64>,
    pub latency_s: f64,
}

/// One replanning step from hover at the start towards every grid goal.
pub fn eval_static_grid(planner: &Planner, cfg: &ExperimentConfig) -> Result<Vec<GridRow>> {
    let scene = &cfg.scene;
    let world = scene.world();
    let committed = CommittedPlan::hover(scene.start, 0.0, 0.0)?;
    scene
        .grid_goals()
        .into_iter()
        .map(|(i_y, i_z, g)| {
            let mission = MissionConfig { start: scene.start, goals: vec![g], ..cfg.mission.clone() };
            let out = replan_step(planner, &committed, -mission.replan_period, &world, g, &mission)?;
            Ok(grid_row(i_y, i_z, g, &out.record))
        })
        .collect()
}

fn grid_row(i_y: usize, i_z: usize, g: Vector3<f64>, r: &ReplanRecord) -> GridRow {
    GridRow {
        i_y,
        i_z,
        goal_x: g.x,
        goal_y: g.y,
        goal_z: g.z,
        n_candidates: r.n_candidates,
        n_collision_free: r.n_collision_free,
        best_cost: r.chosen.and_then(|i| r.costs[i]),
        latency_s: r.predict_latency_s.or(r.expert_latency_s).unwrap_or(f64::NAN),
    }
}

/// Position MSE of each LSA-matched student head, grouped by rank `κ`
/// (bucket `k` holds the k-th smallest MSE of each demonstration that has
/// more than `k` expert trajectories).
pub fn eval_mse(policy: &Policy, demos: &[Demonstration]) -> Result<Vec<Vec<f64>>> {
    let mut buckets = vec![Vec::new(); policy.n_s];
    for d in demos {
        let heads = policy.forward_normalized(&d.observation)?;
        let targets: Vec<[f64; 13]> = d.actions.iter().map(|a| policy.normalizer.normalize_action(a)).collect();
        let m = cost_matrices(&targets, &heads)?;
        let cols = solve_lsa(&m.d_p)?;
        let mut mse: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| m.d_p[(i, j)]).collect();
        mse.sort_by(f64::total_cmp);
        for (k, v) in mse.into_iter().enumerate() {
            buckets[k].push(v);
        }
    }
    Ok(buckets)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| !x.is_nan()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// The eleven policies of the ε sweep: LSA plus both relaxed variants at
/// every ε (ε = 0 being plain winner-takes-all).
pub fn policy_sweep() -> Vec<(Variant, f64)> {
    let eps = [0.0, 0.05, 0.15, 0.25, 0.35];
    let mut v = vec![(Variant::Lsa, 0.0)];
    for variant in [Variant::RwtaR, Variant::RwtaC] {
        v.extend(eps.iter().map(|&e| (variant, e)));
    }
    v
}

/// Trefoil obstacle somewhere between start and goal with randomized
/// position, phase and scale, together with a randomized goal.
pub fn trefoil_episode(rng: &mut ChaCha8Rng) -> Episode {
    let start = Vector3::new(0.0, rng.random_range(-1.0..1.0), 1.0);
    let goal = Vector3::new(10.0, rng.random_range(-1.0..1.0), 1.0 + rng.random_range(-0.5..0.5));
    let obstacle = ObstacleSpec {
        kind: ObstacleKind::Trefoil,
        offset: Vector3::new(rng.random_range(3.0..7.0), rng.random_range(-1.0..1.0), rng.random_range(0.7..1.3)),
        scale: Vector3::new(rng.random_range(1.0..2.5), rng.random_range(1.0..2.5), rng.random_range(0.3..1.0)),
        phase: rng.random_range(0.0..2.0 * PI),
        period: rng.random_range(10.0..20.0),
        s_obst: Vector3::repeat(0.8),
    };
    Episode { start, goals: vec![goal, start], obstacles: vec![obstacle] }
}

/// Back-and-forth world between `(0,0,1)` and `(10,0,1)` with one obstacle
/// of `kind` moving around the midpoint.
pub fn generalization_world(kind: ObstacleKind, seed: u64) -> ObstacleSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = match kind {
        ObstacleKind::Static => Vector3::repeat(1.0),
        ObstacleKind::Trefoil => Vector3::new(2.0, 2.0, 0.6),
        ObstacleKind::Square => Vector3::new(1.5, 1.5, 1.0),
        ObstacleKind::Eight | ObstacleKind::Epitrochoid => Vector3::new(2.0, 2.0, 1.0),
    };
    ObstacleSpec {
        kind,
        offset: Vector3::new(5.0, 0.0, 1.0),
        scale,
        phase: rng.random_range(0.0..2.0 * PI),
        period: 12.0,
        s_obst: Vector3::repeat(0.8),
    }
}

pub fn generalization_mission(base: &MissionConfig) -> MissionConfig {
    MissionConfig {
        start: Vector3::new(0.0, 0.0, 1.0),
        goals: vec![Vector3::new(10.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0)],
        ..base.clone()
    }
}

/// `n` trefoil obstacles spread along the corridor from `x = 0` to
/// `x = 15`.
pub fn corridor_world(n: usize, seed: u64) -> Vec<ObstacleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x = 3.0 + 9.0 * (i as f64 + rng.random_range(0.2..0.8)) / n as f64;
            ObstacleSpec {
                kind: ObstacleKind::Trefoil,
                offset: Vector3::new(x, rng.random_range(-1.0..1.0), rng.random_range(0.7..1.3)),
                scale: Vector3::new(rng.random_range(1.0..2.0), rng.random_range(1.0..2.0), rng.random_range(0.3..0.8)),
                phase: rng.random_range(0.0..2.0 * PI),
                period: rng.random_range(10.0..20.0),
                s_obst: Vector3::repeat(0.8),
            }
        })
        .collect()
}

pub fn corridor_mission(base: &MissionConfig) -> MissionConfig {
    MissionConfig { start: Vector3::new(0.0, 0.0, 1.0), goals: vec![Vector3::new(15.0, 0.0, 1.0)], ..base.clone() }
}

/// Replans with zero, one to three and four or more collision-free
/// candidates, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissionSummary {
    pub world: String,
    pub replans: usize,
    pub pct_zero: f64,
    pub pct_one_to_three: f64,
    pub pct_four_plus: f64,
    pub goals_reached: usize,
    pub safety_ratio: f64,
    pub separation_ratio: f64,
}

pub fn summarize(world: &str, log: &MissionLog) -> MissionSummary {
    let h = log.collision_free_histogram();
    MissionSummary {
        world: world.to_string(),
        replans: log.records.len(),
        pct_zero: 100.0 * h[0],
        pct_one_to_three: 100.0 * h[1],
        pct_four_plus: 100.0 * h[2],
        goals_reached: log.goals_reached,
        safety_ratio: log.safety_ratio,
        separation_ratio: log.separation_ratio,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Greedy row-by-row matching; stands in for a broken solver in the
/// mutation check.
fn greedy_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let mut used = vec![false; cost.ncols()];
    (0..cost.nrows())
        .map(|i| {
            let j = (0..cost.ncols())
                .filter(|&j| !used[j])
                .min_by(|&a, &b| cost[(i, a)].total_cmp(&cost[(i, b)]))
                .expect("rows <= cols");
            used[j] = true;
            j
        })
        .collect()
}

fn random_cost(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let ns = rng.random_range(1..=6);
    let ne = rng.random_range(1..=ns);
    DMatrix::from_fn(ne, ns, |_, _| rng.random_range(0.0..1.0))
}

/// Passes when `solver` reaches the enumeration minimum on every case.
pub fn lsa_enumeration_oracle(solver: &dyn Fn(&DMatrix<f64>) -> Vec<usize>, cases: usize, seed: u64) -> (bool, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let c = random_cost(&mut rng);
        let cols = solver(&c);
        let got: f64 = cols.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        if (got - brute_force_min(&c)).abs() > 1e-12 {
            failures += 1;
        }
    }
    (failures == 0, failures)
}

/// Worst shortfall of the closed-form camera axis against a dense search
/// over the circle of unit vectors perpendicular to ξ.
pub fn yaw_circle_gap(cases: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cases {
        let r = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let xi = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector3::new(0.0, 0.0, 9.81);
        let b1 = crate::yaw::b1_closed_form(r, xi, Vector3::x());
        let closed = b1.dot(&r.normalize());
        let z = xi.normalize();
        let e1 = z.cross(&Vector3::x()).try_normalize(1e-9).unwrap_or_else(|| z.cross(&Vector3::y()).normalize());
        let e2 = z.cross(&e1);
        let brute = (0..samples)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / samples as f64;
                (th.cos() * e1 + th.sin() * e2).dot(&r.normalize())
            })
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(brute - closed);
    }
    worst
}

/// Largest relative error between the analytic loss gradient and central
/// differences over `coords` sampled parameters.
pub fn gradient_check(net: &Mlp, batch: &[Sample], spec: &LossSpec, coords: usize, seed: u64) -> Result<f64> {
    let (_, g) = loss_and_gradient(net, batch, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..coords {
        let k = rng.random_range(0..net.params.len());
        let mut plus = net.clone();
        plus.params[k] += h;
        let mut minus = net.clone();
        minus.params[k] -= h;
        let fd = (loss_and_gradient(&plus, batch, spec)?.0 - loss_and_gradient(&minus, batch, spec)?.0) / (2.0 * h);
        let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Random normalized samples with a random number of targets each.
pub fn random_samples(n: usize, n_s: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let n_e = rng.random_range(1..=n_s);
            Sample {
                x: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                targets: (0..n_e).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
            }
        })
        .collect()
}

/// Runs every derived oracle and the LSA mutation check.
pub fn selftest(seed: u64) -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();
    let lsa = |c: &DMatrix<f64>| solve_lsa(c).expect("valid shape");
    let (ok, fails) = lsa_enumeration_oracle(&lsa, 200, seed);
    reports.push(OracleReport { name: "lsa_enumeration".into(), passed: ok, detail: format!("{fails} mismatches in 200") });
    let (ok, fails) = lsa_enumeration_oracle(&greedy_assignment, 200, seed);
    reports.push(OracleReport {
        name: "lsa_mutation_detected".into(),
        passed: !ok,
        detail: format!("greedy solver missed the optimum {fails} times"),
    });
    let gap = yaw_circle_gap(200, 20_000, seed);
    reports.push(OracleReport { name: "yaw_circle_search".into(), passed: gap <= 1e-4, detail: format!("worst gap {gap:.3e}") });
    let net = Mlp::init(&[43, 16, 16, 78], seed)?;
    let batch = random_samples(4, 6, seed);
    for (variant, eps) in [(Variant::Lsa, 0.0), (Variant::RwtaR, 0.15), (Variant::RwtaC, 0.15)] {
        let spec = LossSpec { variant, epsilon: eps, beta_p: 1.0, beta_t: 1.0 };
        let err = gradient_check(&net, &batch, &spec, 50, seed)?;
        reports.push(OracleReport {
            name: format!("gradient_{}", variant.name()),
            passed: err < 1e-4,
            detail: format!("max rel err {err:.3e}"),
        });
    }
    Ok(reports)
}
