//! Fast evaluation of candidate trajectories in `S^3_{3,12}`.
//!
//! Basis values at normalized times do not depend on the total time, so they
//! are tabulated once together with the least-squares projector of the yaw
//! fit. The generic routines in [`crate::costs`] and [`crate::yaw`] compute
//! the same quantities from scratch and serve as the reference in tests.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, Vector3};

use crate::costs::{
    fov_value, penetration_depth, quadrature_nodes, BoxPair, CostBreakdown, CostWeights, DynamicLimits,
    PositionTrack, DEFAULT_N_CHECK,
};
use crate::error::{Error, Result};
use crate::frames::{psi_from_b1_unchecked, wrap_angle, xi_from_acceleration};
use crate::splines::{
    basis_derivatives, boundary_control_points, make_knots, ActionTuple, Spline, SplineSpace, FIT_REGULARIZER,
};
use crate::yaw::{b1_closed_form, is_degenerate, project_perp, DEFAULT_PSI_SAMPLES, MIN_PSI_SAMPLES};

const SEGMENTS: usize = 6;
const N_CP: usize = 9;

/// Piecewise power-basis copy of a cubic 3D spline for cheap evaluation at
/// arbitrary times. Times outside the domain are clamped.
#[derive(Clone, Debug)]
pub struct ObstacleTrack {
    t_start: f64,
    t_end: f64,
    seg_len: f64,
    coeffs: Vec<[Vector3<f64>; 4]>,
}

impl ObstacleTrack {
    pub fn from_spline(s: &Spline) -> Result<Self> {
        let space = s.space();
        if space.degree() != 3 || space.dim() != 3 {
            return Err(Error::Shape("obstacle track needs a cubic 3D spline".into()));
        }
        let segs = space.num_segments();
        let seg_len = s.total_time() / segs as f64;
        let mut coeffs = Vec::with_capacity(segs);
        for k in 0..segs {
            let t = s.t_start() + k as f64 * seg_len;
            let c0 = s.eval3_in_segment(k, t, 0)?;
            let c1 = s.eval3_in_segment(k, t, 1)?;
            let c2 = s.eval3_in_segment(k, t, 2)? / 2.0;
            let c3 = s.eval3_in_segment(k, t, 3)? / 6.0;
            coeffs.push([c0, c1, c2, c3]);
        }
        Ok(Self { t_start: s.t_start(), t_end: s.t_end(), seg_len, coeffs })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn position(&self, t: f64) -> Vector3<f64> {
        let t = t.clamp(self.t_start, self.t_end);
        let u = (t - self.t_start) / self.seg_len;
        let k = if u <= 0.0 { 0 } else { (u.floor() as usize).min(self.coeffs.len() - 1) };
        let tau = t - self.t_start - k as f64 * self.seg_len;
        let [c0, c1, c2, c3] = &self.coeffs[k];
        c0 + (c1 + (c2 + c3 * tau) * tau) * tau
    }
}

impl PositionTrack for ObstacleTrack {
    fn position_at(&self, t: f64) -> Vector3<f64> {
        self.position(t)
    }
}

/// Everything about a planning query except the candidate itself. The
/// trajectory starts at time 0 at `d`; obstacle times are relative to that.
#[derive(Clone, Debug)]
pub struct Scene {
    pub d: Vector3<f64>,
    pub v_in: Vector3<f64>,
    pub a_in: Vector3<f64>,
    pub goal: Vector3<f64>,
    pub obstacle: ObstacleTrack,
    pub weights: CostWeights,
    pub limits: DynamicLimits,
    /// Boxes used by the penetration penalty.
    pub boxes: BoxPair,
    pub mu_coll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub objective: CostBreakdown,
    pub dyn_penalty: f64,
    /// Sum of squared penetration depths at the collision samples.
    pub collision_penalty: f64,
    /// `c_obj + λ c_dyn_lim`.
    pub augmented: f64,
    /// `augmented + μ_coll · collision_penalty`.
    pub total: f64,
}

#[derive(Clone, Debug)]
struct BasisRow {
    u: f64,
    seg: usize,
    /// `w[k][j]`: k-th derivative with respect to normalized time.
    w: [[f64; 4]; 4],
}

impl BasisRow {
    fn new(knots: &[f64], seg: usize, u: f64) -> Self {
        let ders = basis_derivatives(knots, 3, seg + 3, u, 3);
        let mut w = [[0.0; 4]; 4];
        for (k, row) in ders.iter().enumerate() {
            w[k].copy_from_slice(row);
        }
        Self { u, seg, w }
    }

    fn at_uniform(knots: &[f64], u: f64) -> Self {
        let seg = ((u * SEGMENTS as f64).floor() as usize).min(SEGMENTS - 1);
        Self::new(knots, seg, u)
    }

    fn apply3(&self, order: usize, q: &[Vector3<f64>; N_CP]) -> Vector3<f64> {
        let w = &self.w[order];
        q[self.seg] * w[0] + q[self.seg + 1] * w[1] + q[self.seg + 2] * w[2] + q[self.seg + 3] * w[3]
    }

    fn apply1(&self, order: usize, c: &[f64; N_CP]) -> f64 {
        let w = &self.w[order];
        c[self.seg] * w[0] + c[self.seg + 1] * w[1] + c[self.seg + 2] * w[2] + c[self.seg + 3] * w[3]
    }
}

pub struct Scorer {
    psi_rows: Vec<BasisRow>,
    /// `(9, n_psi)` least-squares projector of the yaw fit.
    projector: DMatrix<f64>,
    fov_rows: Vec<(BasisRow, f64)>,
    check_rows: Vec<BasisRow>,
    /// Rows at the start and end of every segment, evaluated on that segment.
    segment_ends: Vec<(BasisRow, BasisRow)>,
    knots: Vec<f64>,
}

impl Scorer {
    pub fn new(n_psi: usize, n_check: usize) -> Result<Self> {
        if n_psi < MIN_PSI_SAMPLES {
            return Err(Error::Config(format!("need at least {MIN_PSI_SAMPLES} yaw samples")));
        }
        let knots = make_knots(SplineSpace::position(), 0.0, 1.0)?;
        let psi_rows: Vec<_> = (0..n_psi)
            .map(|i| BasisRow::at_uniform(&knots, i as f64 / (n_psi - 1) as f64))
            .collect();
        let mut b = DMatrix::<f64>::zeros(n_psi, N_CP);
        for (i, row) in psi_rows.iter().enumerate() {
            for j in 0..4 {
                b[(i, row.seg + j)] = row.w[0][j];
            }
        }
        let mut normal = b.transpose() * &b;
        for l in 0..N_CP {
            normal[(l, l)] += FIT_REGULARIZER;
        }
        let chol = Cholesky::new(normal).ok_or(Error::RankDeficient { needed: N_CP, got: n_psi })?;
        let projector = chol.solve(&b.transpose());

        // Simpson nodes shared by adjacent segments are merged: the FOV
        // integrand is continuous.
        let mut fov_rows: Vec<(BasisRow, f64)> = Vec::new();
        for (seg, u, w) in quadrature_nodes(SEGMENTS) {
            match fov_rows.last_mut() {
                Some((row, acc)) if (row.u - u).abs() < 1e-14 => *acc += w,
                _ => fov_rows.push((BasisRow::new(&knots, seg, u), w)),
            }
        }
        let check_rows = (0..n_check.max(2))
            .map(|k| BasisRow::at_uniform(&knots, k as f64 / (n_check.max(2) - 1) as f64))
            .collect();
        let segment_ends = (0..SEGMENTS)
            .map(|seg| {
                let lo = BasisRow::new(&knots, seg, seg as f64 / SEGMENTS as f64);
                let hi = BasisRow::new(&knots, seg, (seg + 1) as f64 / SEGMENTS as f64);
                (lo, hi)
            })
            .collect();
        Ok(Self { psi_rows, projector, fov_rows, check_rows, segment_ends, knots })
    }

    /// Shared instance with the default sample counts.
    pub fn standard() -> &'static Scorer {
        static SCORER: OnceLock<Scorer> = OnceLock::new();
        SCORER.get_or_init(|| Scorer::new(DEFAULT_PSI_SAMPLES, DEFAULT_N_CHECK).expect("default tables"))
    }

    /// Control points of the closed-form yaw fit along the trajectory.
    pub fn psi_control_points(&self, q: &[Vector3<f64>; N_CP], total_time: f64, obstacle: &ObstacleTrack) -> Result<[f64; N_CP]> {
        let inv_t2 = 1.0 / (total_time * total_time);
        let n = self.psi_rows.len();
        let mut samples = Vec::with_capacity(n);
        for (i, row) in self.psi_rows.iter().enumerate() {
            let u = i as f64 / (n - 1) as f64;
            let p = row.apply3(0, q);
            let xi = xi_from_acceleration(row.apply3(2, q) * inv_t2);
            let norm = xi.norm();
            if !(norm > 1e-12) {
                return Err(Error::ZeroXi);
            }
            let xb = xi / norm;
            if xb.z <= -1.0 + 1e-9 {
                return Err(Error::SingularThrust);
            }
            let r = obstacle.position(u * total_time) - p;
            let value = if i > 0 && is_degenerate(&project_perp(r, xi), &r) {
                samples[i - 1]
            } else {
                let raw = psi_from_b1_unchecked(xb, b1_closed_form(r, xi, Vector3::x()));
                match samples.last() {
                    Some(&prev) => prev + wrap_angle(raw - prev),
                    None => raw,
                }
            };
            samples.push(value);
        }
        let mut c = [0.0; N_CP];
        for (l, cl) in c.iter_mut().enumerate() {
            *cl = (0..n).map(|i| self.projector[(l, i)] * samples[i]).sum();
        }
        Ok(c)
    }

    pub fn evaluate(&self, action: &ActionTuple, scene: &Scene) -> Result<Evaluation> {
        let total_time = action.total_time;
        let q = boundary_control_points(action, scene.d, scene.v_in, scene.a_in)?;
        if q.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("candidate control points".into()));
        }
        let tol = 1e-9 * total_time.max(1.0);
        if scene.obstacle.t_start() > tol || scene.obstacle.t_end() < total_time - tol {
            return Err(Error::IntervalMismatch("obstacle does not cover the trajectory".into()));
        }
        let w = &scene.weights;
        let psi = self.psi_control_points(&q, total_time, &scene.obstacle)?;
        let seg_len = total_time / SEGMENTS as f64;
        let inv_t = 1.0 / total_time;
        let inv_t2 = inv_t * inv_t;

        // Jerk is constant and the yaw acceleration linear on every segment,
        // so both integrals are closed-form.
        let mut jerk = 0.0;
        let mut yaw = 0.0;
        for (lo, hi) in &self.segment_ends {
            jerk += (lo.apply3(3, &q) * inv_t2 * inv_t).norm_squared() * seg_len;
            let (a, b) = (lo.apply1(2, &psi) * inv_t2, hi.apply1(2, &psi) * inv_t2);
            yaw += seg_len * (a * a + a * b + b * b) / 3.0;
        }

        let mut fov = 0.0;
        if w.alpha_fov != 0.0 {
            for (row, weight) in &self.fov_rows {
                let p = row.apply3(0, &q);
                let xi = xi_from_acceleration(row.apply3(2, &q) * inv_t2);
                let xb = xi.normalize();
                let (x, y, z) = (xb.x, xb.y, xb.z);
                let s = 1.0 + z;
                let c0 = Vector3::new(1.0 - x * x / s, -x * y / s, -x);
                let c1 = Vector3::new(-x * y / s, 1.0 - y * y / s, -y);
                let (sn, cs) = row.apply1(0, &psi).sin_cos();
                let b1 = c0 * cs + c1 * sn;
                let r = scene.obstacle.position(row.u * total_time) - p;
                let n = r.norm();
                if n > 1e-12 {
                    let v = fov_value(b1.dot(&r) / n, w.fov_angle, w.fov_sharpness);
                    fov += weight * v * v * v;
                }
            }
            fov *= total_time;
        }
        let end = q[N_CP - 1];
        let objective = CostBreakdown::from_terms(
            w.alpha_jerk * jerk,
            w.alpha_psi * yaw,
            -w.alpha_fov * fov,
            w.alpha_goal * (end - scene.goal).norm_squared(),
            w.alpha_time * total_time,
        );
        let dyn_penalty = self.dyn_penalty(&q, &psi, total_time, &scene.limits);

        let rho = scene.boxes.rho();
        let mut collision_penalty = 0.0;
        let last = (self.check_rows.len() - 1) as f64;
        for (k, row) in self.check_rows.iter().enumerate() {
            let t = k as f64 / last * total_time;
            let depth = penetration_depth(row.apply3(0, &q) - scene.obstacle.position(t), rho);
            collision_penalty += depth * depth;
        }
        let augmented = objective.total + w.lambda * dyn_penalty;
        Ok(Evaluation {
            objective,
            dyn_penalty,
            collision_penalty,
            augmented,
            total: augmented + scene.mu_coll * collision_penalty,
        })
    }

    fn dyn_penalty(&self, q: &[Vector3<f64>; N_CP], psi: &[f64; N_CP], total_time: f64, lim: &DynamicLimits) -> f64 {
        let knots = &self.knots;
        let excess = |v: f64, limit: f64| {
            let e = v.abs() - limit;
            if e > 0.0 {
                e * e
            } else {
                0.0
            }
        };
        let mut total = 0.0;
        for l in 0..N_CP - 1 {
            let psi_dot = 3.0 * (psi[l + 1] - psi[l]) / ((knots[l + 4] - knots[l + 1]) * total_time);
            total += excess(psi_dot, lim.psi_dot_max);
        }
        // Control points of successive derivatives, computed in place.
        let mut level = *q;
        let mut len = N_CP;
        for (order, limit) in [lim.v_max, lim.a_max, lim.j_max].into_iter().enumerate() {
            let p = (3 - order) as f64;
            for l in 0..len - 1 {
                let denom = (knots[l + 4] - knots[order + l + 1]) * total_time;
                level[l] = (level[l + 1] - level[l]) * (p / denom);
                for k in 0..3 {
                    total += excess(level[l][k], limit[k]);
                }
            }
            len -= 1;
        }
        total
    }
}
