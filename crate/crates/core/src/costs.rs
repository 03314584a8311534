//! Objective, dynamic-limit penalty, collision checks and the safety ratio.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{rotation_from_xi_psi, xi_from_acceleration};
use crate::splines::Spline;
use crate::yaw::PsiTrajectory;

/// Simpson sub-intervals per knot span. Quadrature restarts at every knot
/// because the jerk of a cubic is discontinuous there.
pub const QUAD_INTERVALS_PER_SEGMENT: usize = 10;
pub const DEFAULT_N_CHECK: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha_jerk: f64,
    pub alpha_psi: f64,
    pub alpha_fov: f64,
    pub alpha_goal: f64,
    pub alpha_time: f64,
    /// Weight of the dynamic-limit penalty in the augmented cost.
    pub lambda: f64,
    /// Opening angle of the FOV cone (rad).
    pub fov_angle: f64,
    /// Sharpness of the logistic FOV indicator.
    pub fov_sharpness: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha_jerk: 0.02,
            alpha_psi: 0.01,
            alpha_fov: 0.5,
            alpha_goal: 10.0,
            alpha_time: 1.5,
            lambda: 10.0,
            fov_angle: 80f64.to_radians(),
            fov_sharpness: 100.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let alphas = [
            self.alpha_jerk,
            self.alpha_psi,
            self.alpha_fov,
            self.alpha_goal,
            self.alpha_time,
        ];
        if alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config("cost weights must be nonnegative".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(self.fov_angle > 0.0 && self.fov_angle < std::f64::consts::PI) {
            return Err(Error::Config("fov angle must lie in (0, pi)".into()));
        }
        Ok(())
    }
}

/// Per-axis limits on velocity, acceleration and jerk, and a yaw-rate limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicLimits {
    pub v_max: Vector3<f64>,
    pub a_max: Vector3<f64>,
    pub j_max: Vector3<f64>,
    pub psi_dot_max: f64,
}

impl Default for DynamicLimits {
    fn default() -> Self {
        Self {
            v_max: Vector3::repeat(3.0),
            a_max: Vector3::repeat(6.0),
            j_max: Vector3::repeat(30.0),
            psi_dot_max: 5.0,
        }
    }
}

/// Side lengths of the obstacle and UAV bounding boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPair {
    pub s_obst: Vector3<f64>,
    pub s_uav: Vector3<f64>,
}

impl BoxPair {
    pub fn new(s_obst: Vector3<f64>, s_uav: Vector3<f64>) -> Self {
        Self { s_obst, s_uav }
    }

    /// Combined half extents `ρ = (s_uav + s_obst) / 2`.
    pub fn rho(&self) -> Vector3<f64> {
        (self.s_uav + self.s_obst) / 2.0
    }

    /// Grows the UAV box by `margin` on every side.
    pub fn inflated(&self, margin: f64) -> Self {
        Self { s_obst: self.s_obst, s_uav: self.s_uav.add_scalar(2.0 * margin) }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth indicator that `p_obst` lies inside the FOV cone of axis `b1`.
pub fn in_fov(p: Vector3<f64>, b1: Vector3<f64>, p_obst: Vector3<f64>, fov_angle: f64, sharpness: f64) -> Result<f64> {
    let r = p_obst - p;
    let n = r.norm();
    if !(n > 1e-12) {
        return Err(Error::CoincidentPoints);
    }
    Ok(fov_value(b1.dot(&r) / n, fov_angle, sharpness))
}

pub(crate) fn fov_value(cos_to_obstacle: f64, fov_angle: f64, sharpness: f64) -> f64 {
    logistic(sharpness * (cos_to_obstacle - (0.5 * fov_angle).cos()))
}

/// Inside the integrand, coincident points contribute nothing.
pub(crate) fn fov_value_guarded(p: Vector3<f64>, b1: Vector3<f64>, p_obst: Vector3<f64>, w: &CostWeights) -> f64 {
    in_fov(p, b1, p_obst, w.fov_angle, w.fov_sharpness).unwrap_or(0.0)
}

/// The five objective terms, already multiplied by their weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub jerk: f64,
    pub yaw: f64,
    pub fov: f64,
    pub goal: f64,
    pub time: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub(crate) fn from_terms(jerk: f64, yaw: f64, fov: f64, goal: f64, time: f64) -> Self {
        Self { jerk, yaw, fov, goal, time, total: jerk + yaw + fov + goal + time }
    }

    /// JSON object mapping term name to value.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct serializes")
    }
}

/// Knot-aligned composite Simpson rule on `[0, 1]` for `segments` equal
/// spans: `(segment, u, weight)` with `∫₀¹ f ≈ Σ weight · f(u)`.
pub fn quadrature_nodes(segments: usize) -> Vec<(usize, f64, f64)> {
    let k = QUAD_INTERVALS_PER_SEGMENT;
    let h = 1.0 / (segments * k) as f64;
    let mut nodes = Vec::with_capacity(segments * (k + 1));
    for s in 0..segments {
        for i in 0..=k {
            let c = if i == 0 || i == k {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let u = (s * k + i) as f64 * h;
            nodes.push((s, u.min(1.0), c * h / 3.0));
        }
    }
    nodes
}

fn check_intervals(pos: &Spline, psi: &PsiTrajectory, obst: &Spline) -> Result<()> {
    let tol = 1e-9 * pos.total_time().max(1.0);
    if (psi.t_start() - pos.t_start()).abs() > tol || (psi.t_end() - pos.t_end()).abs() > tol {
        return Err(Error::IntervalMismatch("yaw and position splines differ".into()));
    }
    if psi.spline.space().num_segments() != pos.space().num_segments() {
        return Err(Error::IntervalMismatch("yaw and position knots differ".into()));
    }
    if !obst.contains(pos.t_start()) || !obst.contains(pos.t_end()) {
        return Err(Error::IntervalMismatch("obstacle does not cover the trajectory".into()));
    }
    Ok(())
}

/// `α_j∫‖j‖² + α_ψ∫ψ̈² − α_FOV∫inFOV³ + α_g‖p(t_f) − g‖² + α_T T`.
pub fn c_obj(pos: &Spline, psi: &PsiTrajectory, obst: &Spline, goal: Vector3<f64>, w: &CostWeights) -> Result<CostBreakdown> {
    check_intervals(pos, psi, obst)?;
    let t0 = pos.t_start();
    let total = pos.total_time();
    let (mut jerk, mut yaw, mut fov) = (0.0, 0.0, 0.0);
    for (seg, u, weight) in quadrature_nodes(pos.space().num_segments()) {
        let t = t0 + u * total;
        if w.alpha_jerk != 0.0 {
            jerk += weight * pos.eval3_in_segment(seg, t, 3)?.norm_squared();
        }
        if w.alpha_psi != 0.0 {
            yaw += weight * psi.spline.eval_in_segment(seg, t, 2)?[0].powi(2);
        }
        if w.alpha_fov != 0.0 {
            let p = pos.eval3_in_segment(seg, t, 0)?;
            let xi = xi_from_acceleration(pos.eval3_in_segment(seg, t, 2)?);
            let psi_t = psi.spline.eval_in_segment(seg, t, 0)?[0];
            let b1 = rotation_from_xi_psi(xi, psi_t)?.column(0).into_owned();
            fov += weight * fov_value_guarded(p, b1, obst.eval3(t, 0)?, w).powi(3);
        }
    }
    let end = pos.eval3(pos.t_end(), 0)?;
    Ok(CostBreakdown::from_terms(
        w.alpha_jerk * jerk * total,
        w.alpha_psi * yaw * total,
        -w.alpha_fov * fov * total,
        w.alpha_goal * (end - goal).norm_squared(),
        w.alpha_time * total,
    ))
}

fn excess_sq(value: f64, limit: f64) -> f64 {
    let e = value.abs() - limit;
    if e > 0.0 {
        e * e
    } else {
        0.0
    }
}

/// Squared per-axis excess of the velocity, acceleration, jerk and yaw-rate
/// control points over their limits.
pub fn c_dyn_lim(pos: &Spline, psi: &PsiTrajectory, lim: &DynamicLimits) -> Result<f64> {
    let vel = pos.derivative()?;
    let acc = vel.derivative()?;
    let jerk = acc.derivative()?;
    let mut total = 0.0;
    for (spline, limit) in [(&vel, lim.v_max), (&acc, lim.a_max), (&jerk, lim.j_max)] {
        for l in 0..spline.num_control_points() {
            let c = spline.control_point3(l);
            for k in 0..3 {
                total += excess_sq(c[k], limit[k]);
            }
        }
    }
    let psi_dot = psi.spline.derivative()?;
    for c in psi_dot.control_points() {
        total += excess_sq(*c, lim.psi_dot_max);
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedCost {
    pub objective: CostBreakdown,
    pub dyn_penalty: f64,
    pub total: f64,
}

/// `c_obj + λ c_dyn_lim`.
pub fn augmented_cost(
    pos: &Spline,
    psi: &PsiTrajectory,
    obst: &Spline,
    goal: Vector3<f64>,
    w: &CostWeights,
    lim: &DynamicLimits,
) -> Result<AugmentedCost> {
    let objective = c_obj(pos, psi, obst, goal, w)?;
    let dyn_penalty = c_dyn_lim(pos, psi, lim)?;
    Ok(AugmentedCost { objective, dyn_penalty, total: objective.total + w.lambda * dyn_penalty })
}

/// True when the offset lies outside the box of half extents `rho` on at
/// least one axis.
pub fn separated(delta: Vector3<f64>, rho: Vector3<f64>) -> bool {
    (0..3).any(|j| delta[j].abs() >= rho[j])
}

/// Depth of the point `delta` inside the box of half extents `rho` (zero when
/// outside): the shortest axis-aligned push that separates it.
pub fn penetration_depth(delta: Vector3<f64>, rho: Vector3<f64>) -> f64 {
    if separated(delta, rho) {
        return 0.0;
    }
    (0..3).map(|j| rho[j] - delta[j].abs()).fold(f64::INFINITY, f64::min)
}

/// Uniform sample times over `[t0, t1]`, both ends included.
pub fn check_times(t0: f64, t1: f64, n: usize) -> impl Iterator<Item = f64> {
    let n = n.max(2);
    (0..n).map(move |k| t0 + (t1 - t0) * k as f64 / (n - 1) as f64)
}

/// Box-vs-point test of the UAV trajectory against the obstacle box
/// inflated by the UAV box, at `n_check` uniform times.
pub fn collision_free(pos: &Spline, obst: &dyn PositionTrack, boxes: &BoxPair, n_check: usize) -> bool {
    let rho = boxes.rho();
    check_times(pos.t_start(), pos.t_end(), n_check).all(|t| {
        let p = pos.eval3(t, 0).expect("sample inside domain");
        separated(p - obst.position_at(t), rho)
    })
}

/// Anything that can report a position over time.
pub trait PositionTrack {
    fn position_at(&self, t: f64) -> Vector3<f64>;
}

impl PositionTrack for Spline {
    /// Clamped to the spline's domain.
    fn position_at(&self, t: f64) -> Vector3<f64> {
        let t = t.clamp(self.t_start(), self.t_end());
        self.eval3(t, 0).expect("clamped time inside domain")
    }
}

impl<F: Fn(f64) -> Vector3<f64>> PositionTrack for F {
    fn position_at(&self, t: f64) -> Vector3<f64> {
        self(t)
    }
}

/// `min_{t,i,j} |κ_ij(t)| / ρ_ij` over a logged path; above 1 the UAV box
/// never overlapped any obstacle box on any axis.
pub fn safety_ratio(executed: &[(f64, Vector3<f64>)], obstacles: &[(&dyn PositionTrack, BoxPair)]) -> Result<f64> {
    ratio_over_log(executed, obstacles, |k: Vector3<f64>, rho: Vector3<f64>| {
        (0..3).map(|j| k[j].abs() / rho[j]).fold(f64::INFINITY, f64::min)
    })
}

/// `min_{t,i} max_j |κ_ij(t)| / ρ_ij`: above 1 the boxes were separated on
/// some axis at every logged time.
pub fn separation_ratio(executed: &[(f64, Vector3<f64>)], obstacles: &[(&dyn PositionTrack, BoxPair)]) -> Result<f64> {
    ratio_over_log(executed, obstacles, |k: Vector3<f64>, rho: Vector3<f64>| {
        (0..3).map(|j| k[j].abs() / rho[j]).fold(0.0, f64::max)
    })
}

fn ratio_over_log(
    executed: &[(f64, Vector3<f64>)],
    obstacles: &[(&dyn PositionTrack, BoxPair)],
    per_sample: impl Fn(Vector3<f64>, Vector3<f64>) -> f64,
) -> Result<f64> {
    if executed.is_empty() {
        return Err(Error::Empty("executed path"));
    }
    if obstacles.is_empty() {
        return Err(Error::Empty("obstacle list"));
    }
    let mut best = f64::INFINITY;
    for &(t, p) in executed {
        for (track, boxes) in obstacles {
            best = best.min(per_sample(p - track.position_at(t), boxes.rho()));
        }
    }
    Ok(best)
}
