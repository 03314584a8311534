//! Multi-start expert: each seed is refined by a penalty-method local
//! optimization over the free control points and the total time, and the
//! distinct collision-free local minima are returned best first.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costs::{collision_free, BoxPair, CostWeights, DynamicLimits, DEFAULT_N_CHECK};
use crate::error::{Error, Result};
use crate::observation::Observation;
use crate::scorer::{Evaluation, ObstacleTrack, Scene, Scorer};
use crate::splines::{boundary_control_points, impose_boundary_conditions, ActionTuple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub n_runs: usize,
    pub n_s: usize,
    pub t_pred: f64,
    pub t_min: f64,
    /// Control-point RMS distance below which two solutions are the same mode.
    pub dedupe_threshold: f64,
    pub mu_coll: f64,
    /// Extra clearance added around the UAV box during optimization and
    /// feasibility filtering.
    pub safety_margin: f64,
    pub s_uav: Vector3<f64>,
    pub max_iters: usize,
    pub fd_step: f64,
    /// Relative cost decrease below which a run is considered converged.
    pub tolerance: f64,
    pub v_nominal: f64,
    pub t_slack: f64,
    /// Relative jitter applied to detour magnitudes; 0 disables it.
    pub jitter: f64,
    pub seed: u64,
    pub n_check: usize,
    /// Largest dynamic-limit penalty a solution may keep and still count as
    /// feasible.
    pub dyn_tolerance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_runs: 10,
            n_s: 6,
            t_pred: 6.0,
            t_min: 0.5,
            dedupe_threshold: 0.35,
            mu_coll: 1e3,
            safety_margin: 0.1,
            s_uav: Vector3::repeat(0.3),
            max_iters: 300,
            fd_step: 1e-5,
            tolerance: 1e-9,
            v_nominal: 2.0,
            t_slack: 1.0,
            jitter: 0.1,
            seed: 0,
            n_check: DEFAULT_N_CHECK,
            dyn_tolerance: 1e-3,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 || self.n_s == 0 {
            return Err(Error::Config("n_runs and n_s must be at least 1".into()));
        }
        if !(self.t_pred > 0.0) || !(self.t_min > 0.0) || self.t_min >= self.t_pred {
            return Err(Error::Config("need 0 < t_min < t_pred".into()));
        }
        if !(self.v_nominal > 0.0) || self.s_uav.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("v_nominal and s_uav must be positive".into()));
        }
        Ok(())
    }

    /// Boxes used by the penetration penalty: the UAV box grown by the
    /// safety margin.
    pub fn inflated_boxes(&self, s_obst: Vector3<f64>) -> BoxPair {
        BoxPair::new(s_obst, self.s_uav).inflated(self.safety_margin)
    }

    /// Boxes used to accept a solution. Half the margin, so that the small
    /// residual penetration a finite penalty weight leaves behind does not
    /// reject an otherwise clear trajectory.
    pub fn acceptance_boxes(&self, s_obst: Vector3<f64>) -> BoxPair {
        BoxPair::new(s_obst, self.s_uav).inflated(0.5 * self.safety_margin)
    }
}

const MAX_STEP: f64 = 2.0;

/// Problem data shared by every run on one observation.
pub struct ExpertProblem {
    pub scene: Scene,
    pub obs: Observation,
    pub cfg: ExpertConfig,
}

impl ExpertProblem {
    pub fn new(obs: &Observation, cfg: &ExpertConfig, w: &CostWeights, lim: &DynamicLimits) -> Result<Self> {
        cfg.validate()?;
        let obstacle = ObstacleTrack::from_spline(&obs.obstacle_spline(cfg.t_pred)?)?;
        Ok(Self {
            scene: Scene {
                d: Vector3::zeros(),
                v_in: obs.v_f,
                a_in: obs.a_f,
                goal: obs.g_f,
                obstacle,
                weights: *w,
                limits: *lim,
                boxes: cfg.inflated_boxes(obs.s_obst),
                mu_coll: cfg.mu_coll,
            },
            obs: *obs,
            cfg: cfg.clone(),
        })
    }

    pub fn evaluate(&self, action: &ActionTuple) -> Result<Evaluation> {
        Scorer::standard().evaluate(action, &self.scene)
    }

    /// Collision check of the action against the predicted obstacle with the
    /// acceptance boxes.
    pub fn is_collision_free(&self, action: &ActionTuple) -> Result<bool> {
        let pos = impose_boundary_conditions(action, Vector3::zeros(), self.obs.v_f, self.obs.a_f, 0.0)?;
        let boxes = self.cfg.acceptance_boxes(self.obs.s_obst);
        Ok(collision_free(&pos, &self.scene.obstacle, &boxes, self.cfg.n_check))
    }

    fn decode(&self, x: &DVector<f64>) -> ActionTuple {
        let q = |k: usize| Vector3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
        ActionTuple { qhat: [q(0), q(1), q(2), q(3)], total_time: self.clamp_time(x[12]) }
    }

    fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(self.cfg.t_min, self.cfg.t_pred)
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        match self.evaluate(&self.decode(x)) {
            Ok(e) if e.total.is_finite() => e.total,
            _ => f64::INFINITY,
        }
    }
}

/// Straight-line seed toward the goal followed by lateral and vertical
/// detours of growing magnitude.
pub fn initial_guesses(obs: &Observation, n_runs: usize, cfg: &ExpertConfig) -> Result<Vec<ActionTuple>> {
    let t_seed = cfg.t_pred.min(obs.g_f.norm() / cfg.v_nominal + cfg.t_slack).max(cfg.t_min);
    let probe = ActionTuple { qhat: [Vector3::zeros(); 4], total_time: t_seed };
    let q2 = boundary_control_points(&probe, Vector3::zeros(), obs.v_f, obs.a_f)?[2];
    let goal = obs.g_f;
    let span = goal - q2;
    let dir = if span.norm() > 1e-9 { span.normalize() } else { Vector3::x() };
    let left = {
        let l = Vector3::z().cross(&dir);
        if l.norm() > 1e-9 {
            l.normalize()
        } else {
            Vector3::y()
        }
    };
    let up = dir.cross(&left);
    let rho = BoxPair::new(obs.s_obst, cfg.s_uav).rho();
    let rho_along = |v: Vector3<f64>| v.abs().dot(&rho);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let straight: [Vector3<f64>; 4] = std::array::from_fn(|k| q2 + span * ((k + 1) as f64 / 4.0));
    let mut seeds = Vec::with_capacity(n_runs);
    seeds.push(ActionTuple { qhat: straight, total_time: t_seed });
    for i in 1..n_runs {
        let j = i - 1;
        let side = [up, -up, left, -left][j % 4];
        let k = [1.5, 2.5][(j / 4) % 2] + 0.5 * (j / 8) as f64;
        let jitter = if cfg.jitter > 0.0 { 1.0 + rng.random_range(-cfg.jitter..=cfg.jitter) } else { 1.0 };
        let shift = side * (k * jitter * rho_along(side));
        let mut qhat = straight;
        for q in qhat.iter_mut().take(3) {
            *q += shift;
        }
        seeds.push(ActionTuple { qhat, total_time: t_seed });
    }
    Ok(seeds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalSolution {
    pub action: ActionTuple,
    pub eval: Evaluation,
    /// Accepted objective values, starting with the seed's.
    pub trace: Vec<f64>,
}

impl LocalSolution {
    /// Total objective including the penetration penalty.
    pub fn cost(&self) -> f64 {
        self.eval.total
    }
}

fn fd_gradient(problem: &ExpertProblem, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        let orig = x[i];
        xp[i] = orig + step;
        let fp = problem.objective(&xp);
        xp[i] = orig - step;
        let fm = problem.objective(&xp);
        xp[i] = orig;
        g[i] = if fp.is_finite() && fm.is_finite() { (fp - fm) / (2.0 * step) } else { 0.0 };
    }
    g
}

/// Quasi-Newton descent on the penalized objective using central
/// finite-difference gradients and Armijo backtracking. `T` is projected onto
/// `[t_min, t_pred]` after every step.
pub fn optimize_single(problem: &ExpertProblem, seed: &ActionTuple) -> Result<LocalSolution> {
    let cfg = &problem.cfg;
    if !(seed.total_time > 0.0) || seed.total_time > cfg.t_pred + 1e-12 {
        return Err(Error::NonPositiveTime(seed.total_time));
    }
    let mut x = DVector::from_column_slice(&seed.to_array());
    x[12] = problem.clamp_time(x[12]);
    let mut f = problem.objective(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite("expert cost at seed".into()));
    }
    let n = x.len();
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut g = fd_gradient(problem, &x, cfg.fd_step);
    let mut trace = vec![f];
    let mut stalls = 0;
    let mut restarted = false;
    let mut first_update = true;
    for _ in 0..cfg.max_iters {
        let mut dir = -(&h_inv * &g);
        if !(g.dot(&dir) < 0.0) {
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        // Keep any single step within a few meters / seconds.
        let len = dir.amax();
        if len > MAX_STEP {
            dir *= MAX_STEP / len;
        }
        let slope = g.dot(&dir);
        if slope.abs() < 1e-14 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn = &x + &dir * step;
            xn[12] = problem.clamp_time(xn[12]);
            let fn_ = problem.objective(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((xn, fn_));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_)) = accepted else {
            if restarted {
                break;
            }
            restarted = true;
            h_inv = DMatrix::identity(n, n);
            first_update = true;
            continue;
        };
        restarted = false;
        let gn = fd_gradient(problem, &xn, cfg.fd_step);
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                h_inv *= sy / y.norm_squared();
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let decrease = f - fn_;
        x = xn;
        g = gn;
        f = fn_;
        trace.push(f);
        if decrease <= cfg.tolerance * (1.0 + f.abs()) {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let action = problem.decode(&x);
    let eval = problem.evaluate(&action)?;
    Ok(LocalSolution { action, eval, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertSolution {
    pub action: ActionTuple,
    /// Augmented cost `c_obj + λ c_dyn_lim`.
    pub cost: f64,
    pub seed_index: usize,
}

/// Root-mean-square distance between the free control points of two
/// actions.
pub fn control_point_rms(a: &ActionTuple, b: &ActionTuple) -> f64 {
    let sq: f64 = a.qhat.iter().zip(&b.qhat).map(|(p, q)| (p - q).norm_squared()).sum();
    (sq / 4.0).sqrt()
}

/// Up to `n_s` distinct collision-free local minima sorted by augmented cost.
/// Empty when every run ends in collision.
pub fn expert_plan(obs: &Observation, cfg: &ExpertConfig, w: &CostWeights, lim: &DynamicLimits) -> Result<Vec<ExpertSolution>> {
    let problem = ExpertProblem::new(obs, cfg, w, lim)?;
    let seeds = initial_guesses(obs, cfg.n_runs, cfg)?;
    let mut found = Vec::new();
    for (i, seed) in seeds.iter().enumerate() {
        let Ok(sol) = optimize_single(&problem, seed) else {
            continue;
        };
        if sol.eval.dyn_penalty > cfg.dyn_tolerance || !problem.is_collision_free(&sol.action)? {
            continue;
        }
        found.push(ExpertSolution { action: sol.action, cost: sol.eval.augmented, seed_index: i });
    }
    found.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.seed_index.cmp(&b.seed_index)));
    let mut distinct: Vec<ExpertSolution> = Vec::new();
    for s in found {
        if distinct.iter().all(|d| control_point_rms(&d.action, &s.action) >= cfg.dedupe_threshold) {
            distinct.push(s);
        }
    }
    distinct.truncate(cfg.n_s);
    Ok(distinct)
}
