//! Moving-obstacle world and the replan-select-execute loop.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{augmented_cost, collision_free, safety_ratio, separation_ratio, BoxPair, CostWeights, DynamicLimits, PositionTrack};
use crate::dataset::Demonstration;
use crate::error::{Error, Result};
use crate::expert::{expert_plan, ExpertConfig, ExpertSolution};
use crate::frames::{FrameF, UavState};
use crate::observation::Observation;
use crate::splines::{fit3, impose_boundary_conditions, ActionTuple, Spline, SplineSpace};
use crate::student::{train, Policy, TrainConfig};
use crate::yaw::psi_profile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Static,
    Trefoil,
    Square,
    Eight,
    Epitrochoid,
}

impl std::str::FromStr for ObstacleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Self::Static),
            "trefoil" => Ok(Self::Trefoil),
            "square" => Ok(Self::Square),
            "eight" => Ok(Self::Eight),
            "epitrochoid" => Ok(Self::Epitrochoid),
            _ => Err(Error::Config(format!("unknown obstacle kind {s:?}"))),
        }
    }
}

/// A closed curve scaled per axis, shifted by `offset` and traversed once
/// per `period`, starting at `phase`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub kind: ObstacleKind,
    pub offset: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub phase: f64,
    pub period: f64,
    pub s_obst: Vector3<f64>,
}

impl ObstacleSpec {
    pub fn fixed(offset: Vector3<f64>, s_obst: Vector3<f64>) -> Self {
        Self { kind: ObstacleKind::Static, offset, scale: Vector3::repeat(1.0), phase: 0.0, period: 1.0, s_obst }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) || self.s_obst.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("obstacle period and box must be positive".into()));
        }
        Ok(())
    }

    fn unit_curve(&self, tau: f64) -> Vector3<f64> {
        match self.kind {
            ObstacleKind::Static => Vector3::zeros(),
            ObstacleKind::Trefoil => Vector3::new(
                tau.sin() + 2.0 * (2.0 * tau).sin(),
                tau.cos() - 2.0 * (2.0 * tau).cos(),
                -(3.0 * tau).sin(),
            ) / 3.0,
            ObstacleKind::Eight => Vector3::new(tau.cos(), tau.sin() * tau.cos(), 0.0),
            ObstacleKind::Epitrochoid => {
                let r = 1.0 / 4.5;
                Vector3::new(
                    3.0 * r * tau.cos() - 1.5 * r * (3.0 * tau).cos(),
                    3.0 * r * tau.sin() - 1.5 * r * (3.0 * tau).sin(),
                    0.0,
                )
            }
            ObstacleKind::Square => {
                let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
                let s = (tau / (2.0 * PI)).rem_euclid(1.0) * 4.0;
                let k = (s.floor() as usize).min(3);
                let f = s - k as f64;
                let (a, b) = (corners[k], corners[(k + 1) % 4]);
                Vector3::new(a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1), 0.0)
            }
        }
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let tau = 2.0 * PI * t / self.period + self.phase;
        self.offset + self.scale.component_mul(&self.unit_curve(tau))
    }
}

impl PositionTrack for ObstacleSpec {
    fn position_at(&self, t: f64) -> Vector3<f64> {
        self.position(t)
    }
}

pub const OBSTACLE_FIT_SAMPLES: usize = 60;

/// Least-squares prediction of the obstacle over `[t0, t0 + t_pred]`.
pub fn obstacle_spline(spec: &ObstacleSpec, t0: f64, t_pred: f64) -> Result<Spline> {
    if !(t_pred > 0.0) {
        return Err(Error::NonPositiveTime(t_pred));
    }
    let n = OBSTACLE_FIT_SAMPLES;
    let samples: Vec<(f64, Vector3<f64>)> = (0..n)
        .map(|i| {
            let t = t0 + t_pred * i as f64 / (n - 1) as f64;
            (t, spec.position(t))
        })
        .collect();
    fit3(SplineSpace::obstacle(), &samples)
}

/// `g_term` pulled onto the sphere of radius `r` around `d` when outside it.
pub fn project_goal(g_term: Vector3<f64>, d: Vector3<f64>, r: f64) -> Vector3<f64> {
    let off = g_term - d;
    let n = off.norm();
    if n <= r {
        g_term
    } else {
        d + off * (r / n)
    }
}

/// Observation at the state `state` (whose position is the planning start
/// point) for the predicted obstacle `obstacle`.
pub fn build_observation(
    state: &UavState,
    obstacle: &Spline,
    s_obst: Vector3<f64>,
    g_term: Vector3<f64>,
    radius: f64,
) -> Result<Observation> {
    if obstacle.num_control_points() != 10 || obstacle.space().dim() != 3 {
        return Err(Error::Shape("obstacle prediction needs 10 control points in 3D".into()));
    }
    let f = state.frame_f();
    let g = project_goal(g_term, state.p, radius);
    let q_obst_f = std::array::from_fn(|l| f.point_to_f(obstacle.control_point3(l)));
    Ok(Observation {
        v_f: f.vector_to_f(state.v),
        a_f: f.vector_to_f(state.a),
        g_f: f.point_to_f(g),
        psi_dot: state.psi_dot,
        q_obst_f,
        s_obst,
    })
}

/// Index of the most threatening obstacle: the smallest normalized
/// separation `min_t max_j |κ_j| / ρ_j` between the committed positions and
/// the predicted obstacle. Ties go to the lowest index.
pub fn select_obstacle(predictions: &[(Spline, BoxPair)], path: &[(f64, Vector3<f64>)]) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Empty("obstacle list"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, (spline, boxes)) in predictions.iter().enumerate() {
        let rho = boxes.rho();
        let score = path
            .iter()
            .map(|&(t, p)| {
                let k = p - spline.position_at(t);
                (0..3).map(|j| k[j].abs() / rho[j]).fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        if score < best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Position and yaw splines of one committed plan.
#[derive(Clone, Debug)]
pub struct Piece {
    pub pos: Spline,
    pub psi: Spline,
}

/// Committed trajectory: pieces in start-time order, each followed until
/// the next one starts; after the last piece ends the UAV rests.
#[derive(Clone, Debug)]
pub struct CommittedPlan {
    pieces: Vec<Piece>,
}

impl CommittedPlan {
    pub fn hover(p: Vector3<f64>, psi: f64, t0: f64) -> Result<Self> {
        Ok(Self {
            pieces: vec![Piece {
                pos: Spline::constant(SplineSpace::position(), t0, 1.0, p.as_slice())?,
                psi: Spline::constant(SplineSpace::yaw(), t0, 1.0, &[psi])?,
            }],
        })
    }

    pub fn commit(&mut self, piece: Piece) {
        let start = piece.pos.t_start();
        self.pieces.retain(|p| p.pos.t_start() < start);
        self.pieces.push(piece);
        // Only the piece active at `start` is still needed.
        if self.pieces.len() > 2 {
            self.pieces.drain(..self.pieces.len() - 2);
        }
    }

    pub fn last(&self) -> &Piece {
        self.pieces.last().expect("plan never empty")
    }

    pub fn state(&self, t: f64) -> UavState {
        let piece = self
            .pieces
            .iter()
            .rev()
            .find(|p| p.pos.t_start() <= t)
            .unwrap_or(&self.pieces[0]);
        let tc = t.clamp(piece.pos.t_start(), piece.pos.t_end());
        let rest = t > piece.pos.t_end();
        let p = piece.pos.eval3(tc, 0).expect("clamped");
        let psi = piece.psi.eval1(tc, 0).expect("clamped");
        if rest {
            return UavState::at_rest(p, psi);
        }
        UavState {
            p,
            v: piece.pos.eval3(tc, 1).expect("clamped"),
            a: piece.pos.eval3(tc, 2).expect("clamped"),
            psi,
            psi_dot: piece.psi.eval1(tc, 1).expect("clamped"),
        }
    }
}

/// Source of candidate actions.
pub enum Planner<'a> {
    Student(&'a Policy),
    Expert(ExpertConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissionConfig {
    pub start: Vector3<f64>,
    pub start_psi: f64,
    /// Terminal goals visited in turn, wrapping around.
    pub goals: Vec<Vector3<f64>>,
    pub radius: f64,
    pub replan_period: f64,
    pub tick: f64,
    pub goal_threshold: f64,
    pub t_pred: f64,
    pub weights: CostWeights,
    pub limits: DynamicLimits,
    pub expert: ExpertConfig,
    /// Extra clearance used when filtering candidates for collisions.
    pub filter_margin: f64,
    pub n_check: usize,
    pub psi_samples: usize,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            start: Vector3::new(0.0, 0.0, 1.0),
            start_psi: 0.0,
            goals: vec![Vector3::new(10.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 1.0)],
            radius: 4.0,
            replan_period: 0.4,
            tick: 0.05,
            goal_threshold: 0.5,
            t_pred: 6.0,
            weights: CostWeights::default(),
            limits: DynamicLimits::default(),
            expert: ExpertConfig::default(),
            filter_margin: 0.05,
            n_check: crate::costs::DEFAULT_N_CHECK,
            psi_samples: crate::yaw::DEFAULT_PSI_SAMPLES,
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !(self.replan_period > 0.0) || !(self.tick > 0.0) {
            return Err(Error::Config("radius, replan period and tick must be positive".into()));
        }
        if self.goals.is_empty() {
            return Err(Error::Config("mission needs at least one goal".into()));
        }
        self.weights.validate()?;
        self.expert.validate()
    }

    fn boxes(&self, s_obst: Vector3<f64>) -> BoxPair {
        BoxPair::new(s_obst, self.expert.s_uav).inflated(self.filter_margin)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub time: f64,
    pub observation: Vec<f64>,
    pub selected_obstacle: usize,
    pub n_candidates: usize,
    pub n_collision_free: usize,
    pub chosen: Option<usize>,
    pub fallback: bool,
    /// Augmented cost per candidate; `None` where it could not be evaluated.
    pub costs: Vec<Option<f64>>,
    pub collision_free: Vec<bool>,
    pub predict_latency_s: Option<f64>,
    pub expert_latency_s: Option<f64>,
}

/// Output of one replanning step.
pub struct ReplanOutcome {
    pub record: ReplanRecord,
    pub piece: Option<Piece>,
    pub observation: Observation,
    /// Expert solutions when the expert was the planner.
    pub expert_solutions: Option<Vec<ExpertSolution>>,
}

/// Plans from the committed state one replan period ahead of `now`.
pub fn replan_step(
    planner: &Planner,
    committed: &CommittedPlan,
    now: f64,
    obstacles: &[ObstacleSpec],
    g_term: Vector3<f64>,
    cfg: &MissionConfig,
) -> Result<ReplanOutcome> {
    if obstacles.is_empty() {
        return Err(Error::Empty("obstacle list"));
    }
    let t_d = now + cfg.replan_period;
    let state = committed.state(t_d);
    let predictions: Vec<(Spline, BoxPair)> = obstacles
        .iter()
        .map(|o| Ok((obstacle_spline(o, t_d, cfg.t_pred)?, cfg.boxes(o.s_obst))))
        .collect::<Result<_>>()?;
    let path: Vec<(f64, Vector3<f64>)> = (0..40)
        .map(|k| {
            let t = t_d + cfg.t_pred * k as f64 / 39.0;
            (t, committed.state(t).p)
        })
        .collect();
    let sel = select_obstacle(&predictions, &path)?;
    let obstacle = &predictions[sel].0;
    let obs = build_observation(&state, obstacle, obstacles[sel].s_obst, g_term, cfg.radius)?;

    let (actions, predict_latency, expert_latency, expert_solutions) = match planner {
        Planner::Student(policy) => {
            let start = Instant::now();
            let a = policy.predict(&obs)?;
            (a, Some(start.elapsed().as_secs_f64()), None, None)
        }
        Planner::Expert(ecfg) => {
            let start = Instant::now();
            let sols = expert_plan(&obs, ecfg, &cfg.weights, &cfg.limits)?;
            let elapsed = start.elapsed().as_secs_f64();
            (sols.iter().map(|s| s.action).collect(), None, Some(elapsed), Some(sols))
        }
    };

    let frame = FrameF::new(state.p, state.psi);
    let g_world = project_goal(g_term, state.p, cfg.radius);
    let mut costs = Vec::with_capacity(actions.len());
    let mut free = Vec::with_capacity(actions.len());
    let mut pieces = Vec::with_capacity(actions.len());
    for action in &actions {
        let candidate = candidate_piece(action, &obs, &frame, t_d, obstacle, cfg);
        let (cost, ok, piece) = match candidate {
            Ok(piece) => {
                let clear = obstacles.iter().all(|o| collision_free(&piece.pos, o, &cfg.boxes(o.s_obst), cfg.n_check));
                let psi = crate::yaw::PsiTrajectory { spline: piece.psi.clone(), samples: Vec::new(), residual_rms: 0.0 };
                let cost = augmented_cost(&piece.pos, &psi, obstacle, g_world, &cfg.weights, &cfg.limits)
                    .ok()
                    .map(|c| c.total)
                    .filter(|c| c.is_finite());
                (cost, clear && cost.is_some(), Some(piece))
            }
            Err(_) => (None, false, None),
        };
        costs.push(cost);
        free.push(ok);
        pieces.push(piece);
    }
    let mut chosen: Option<usize> = None;
    for (i, c) in costs.iter().enumerate() {
        if let (true, Some(c)) = (free[i], c) {
            if chosen.is_none_or(|j| *c < costs[j].expect("chosen has a cost")) {
                chosen = Some(i);
            }
        }
    }
    let record = ReplanRecord {
        time: now,
        observation: obs.to_array().to_vec(),
        selected_obstacle: sel,
        n_candidates: actions.len(),
        n_collision_free: free.iter().filter(|f| **f).count(),
        chosen,
        fallback: chosen.is_none(),
        costs,
        collision_free: free,
        predict_latency_s: predict_latency,
        expert_latency_s: expert_latency,
    };
    let piece = chosen.and_then(|i| pieces[i].take());
    Ok(ReplanOutcome { record, piece, observation: obs, expert_solutions })
}

fn candidate_piece(
    action: &ActionTuple,
    obs: &Observation,
    frame: &FrameF,
    t_d: f64,
    obstacle: &Spline,
    cfg: &MissionConfig,
) -> Result<Piece> {
    let local = impose_boundary_conditions(action, Vector3::zeros(), obs.v_f, obs.a_f, 0.0)?;
    let pos = local.map_points3(|q| frame.point_to_world(q)).with_start(t_d);
    let psi = psi_profile(&pos, obstacle, cfg.psi_samples)?;
    Ok(Piece { pos, psi: psi.spline })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathSample {
    pub t: f64,
    pub p: Vector3<f64>,
    pub psi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MissionLog {
    pub records: Vec<ReplanRecord>,
    pub path: Vec<PathSample>,
    pub goals_reached: usize,
    pub safety_ratio: f64,
    pub separation_ratio: f64,
}

impl MissionLog {
    /// Replans with zero collision-free candidates, with one to three, and
    /// with four or more, as fractions of all replans.
    pub fn collision_free_histogram(&self) -> [f64; 3] {
        let n = self.records.len().max(1) as f64;
        let mut h = [0usize; 3];
        for r in &self.records {
            h[match r.n_collision_free {
                0 => 0,
                1..=3 => 1,
                _ => 2,
            }] += 1;
        }
        h.map(|c| c as f64 / n)
    }
}

/// Hook called after every replanning step with the step's outcome.
pub type ReplanHook<'h> = dyn FnMut(&ReplanOutcome) + 'h;

/// Kinematic mission: replans every `replan_period`, follows the committed
/// plan exactly and switches to the next goal when within the threshold.
/// A mission with a single goal ends when that goal is reached.
pub fn run_mission(
    planner: &Planner,
    obstacles: &[ObstacleSpec],
    cfg: &MissionConfig,
    duration: f64,
    hook: Option<&mut ReplanHook>,
) -> Result<MissionLog> {
    cfg.validate()?;
    for o in obstacles {
        o.validate()?;
    }
    let mut hook = hook;
    let mut committed = CommittedPlan::hover(cfg.start, cfg.start_psi, 0.0)?;
    let mut records = Vec::new();
    let mut path = Vec::new();
    let mut goal_idx = 0;
    let mut goals_reached = 0;
    let n_ticks = (duration / cfg.tick).round() as usize;
    let ticks_per_replan = ((cfg.replan_period / cfg.tick).round() as usize).max(1);
    for k in 0..=n_ticks {
        let t = k as f64 * cfg.tick;
        if k % ticks_per_replan == 0 && k < n_ticks {
            let out = replan_step(planner, &committed, t, obstacles, cfg.goals[goal_idx], cfg)?;
            if let Some(h) = hook.as_deref_mut() {
                h(&out);
            }
            if let Some(piece) = out.piece.clone() {
                committed.commit(piece);
            }
            records.push(out.record);
        }
        let s = committed.state(t);
        path.push(PathSample { t, p: s.p, psi: s.psi });
        if (s.p - cfg.goals[goal_idx]).norm() < cfg.goal_threshold {
            goals_reached += 1;
            if cfg.goals.len() == 1 {
                break;
            }
            goal_idx = (goal_idx + 1) % cfg.goals.len();
        }
    }
    let executed: Vec<(f64, Vector3<f64>)> = path.iter().map(|s| (s.t, s.p)).collect();
    let boxes: Vec<(&dyn PositionTrack, BoxPair)> = obstacles
        .iter()
        .map(|o| (o as &dyn PositionTrack, BoxPair::new(o.s_obst, cfg.expert.s_uav)))
        .collect();
    Ok(MissionLog {
        records,
        safety_ratio: safety_ratio(&executed, &boxes)?,
        separation_ratio: separation_ratio(&executed, &boxes)?,
        path,
        goals_reached,
    })
}

/// Start, goals and obstacles of one randomized training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub start: Vector3<f64>,
    pub goals: Vec<Vector3<f64>>,
    pub obstacles: Vec<ObstacleSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaggerConfig {
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub episode_duration: f64,
    pub train: TrainConfig,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self { iterations: 3, episodes_per_iteration: 10, episode_duration: 15.0, train: TrainConfig::default() }
    }
}

pub struct DaggerResult {
    pub demos: Vec<Demonstration>,
    /// Aggregated dataset size after each iteration.
    pub sizes: Vec<usize>,
    pub policy: Policy,
}

/// Dataset aggregation. Iteration 0 rolls out the expert unless a policy is
/// supplied; later iterations roll out the latest student and label every
/// visited observation with the expert. The student is retrained on the
/// whole aggregate after each iteration.
pub fn dagger_collect(
    initial: Option<Policy>,
    mission: &MissionConfig,
    env: &dyn Fn(&mut ChaCha8Rng) -> Episode,
    cfg: &DaggerConfig,
    seed: u64,
) -> Result<DaggerResult> {
    if cfg.iterations == 0 {
        return Err(Error::Config("dagger needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demos: Vec<Demonstration> = Vec::new();
    let mut sizes = Vec::with_capacity(cfg.iterations);
    let mut policy = initial;
    let expert_cfg = &mission.expert;
    for _ in 0..cfg.iterations {
        for _ in 0..cfg.episodes_per_iteration {
            let ep = env(&mut rng);
            let mcfg = MissionConfig { start: ep.start, goals: ep.goals.clone(), ..mission.clone() };
            let mut visited: Vec<(Observation, Option<Vec<ExpertSolution>>)> = Vec::new();
            let mut hook = |out: &ReplanOutcome| visited.push((out.observation, out.expert_solutions.clone()));
            let planner = match &policy {
                Some(p) => Planner::Student(p),
                None => Planner::Expert(expert_cfg.clone()),
            };
            run_mission(&planner, &ep.obstacles, &mcfg, cfg.episode_duration, Some(&mut hook))?;
            for (obs, sols) in visited {
                let sols = match sols {
                    Some(s) => s,
                    None => expert_plan(&obs, expert_cfg, &mission.weights, &mission.limits)?,
                };
                if !sols.is_empty() {
                    demos.push(Demonstration::from_solutions(obs, &sols[..sols.len().min(cfg.train.n_s)]));
                }
            }
        }
        sizes.push(demos.len());
        if demos.is_empty() {
            return Err(Error::Empty("dagger dataset"));
        }
        policy = Some(train(&demos, &cfg.train, expert_cfg.t_min, expert_cfg.t_pred)?.policy);
    }
    Ok(DaggerResult { demos, sizes, policy: policy.expect("trained at least once") })
}
