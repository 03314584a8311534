//! Clamped uniform B-splines.
//!
//! A spline space `S^d_{p,m}` has degree `p`, `m + 1` knots and `n + 1 = m - p`
//! control points in `R^d`. Knots are clamped (first and last `p + 1` knots
//! repeated) and the `m - 2p` interior segments share the same duration.
//!
//! The planner uses three spaces: [`SplineSpace::position`] for UAV
//! trajectories, [`SplineSpace::obstacle`] for predicted obstacle motion and
//! [`SplineSpace::yaw`] for the heading profile.

use nalgebra::{Cholesky, DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regularizer added to the diagonal of the normal equations in [`fit`].
pub const FIT_REGULARIZER: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpace {
    degree: usize,
    m: usize,
    dim: usize,
}

impl SplineSpace {
    /// Degree 0 is accepted so that the jerk of a cubic can be represented.
    pub fn new(degree: usize, m: usize, dim: usize) -> Result<Self> {
        if m < 2 * degree + 1 {
            return Err(Error::InvalidSpace(format!(
                "need m >= 2p + 1, got p = {degree}, m = {m}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidSpace("dimension must be positive".into()));
        }
        Ok(Self { degree, m, dim })
    }

    /// `S^3_{3,12}`: 9 control points, 6 segments.
    pub const fn position() -> Self {
        Self { degree: 3, m: 12, dim: 3 }
    }

    /// `S^3_{3,13}`: 10 control points, 7 segments.
    pub const fn obstacle() -> Self {
        Self { degree: 3, m: 13, dim: 3 }
    }

    /// `S^1_{3,12}`: same knot structure as [`SplineSpace::position`].
    pub const fn yaw() -> Self {
        Self { degree: 3, m: 12, dim: 1 }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Index of the last knot (`m + 1` knots in total).
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knot_count(&self) -> usize {
        self.m + 1
    }

    pub fn num_control_points(&self) -> usize {
        self.m - self.degree
    }

    pub fn num_segments(&self) -> usize {
        self.m - 2 * self.degree
    }

    /// Space of the first derivative: one degree and two knots fewer.
    pub fn derivative(&self) -> Option<Self> {
        (self.degree > 0).then(|| Self {
            degree: self.degree - 1,
            m: self.m - 2,
            dim: self.dim,
        })
    }

    fn with_dim(self, dim: usize) -> Self {
        Self { dim, ..self }
    }
}

/// Clamped uniform knot vector over `[t_start, t_start + total_time]`.
pub fn make_knots(space: SplineSpace, t_start: f64, total_time: f64) -> Result<Vec<f64>> {
    if !(total_time > 0.0) || !total_time.is_finite() {
        return Err(Error::NonPositiveTime(total_time));
    }
    let p = space.degree;
    let m = space.m;
    let delta = total_time / space.num_segments() as f64;
    let end = t_start + total_time;
    Ok((0..=m)
        .map(|i| {
            if i <= p {
                t_start
            } else if i >= m - p {
                end
            } else {
                t_start + (i - p) as f64 * delta
            }
        })
        .collect())
}

/// Nonzero basis functions and their derivatives at `t` for knot span `span`.
///
/// Returns `ders[k][j]`, the k-th derivative of `N_{span - p + j, p}(t)`.
pub(crate) fn basis_derivatives(
    knots: &[f64],
    degree: usize,
    span: usize,
    t: f64,
    n_ders: usize,
) -> Vec<Vec<f64>> {
    let p = degree;
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = vec![vec![0.0; p + 1]; n_ders + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let pi = p as isize;
    let mut a = [vec![0.0; p + 1], vec![0.0; p + 1]];
    for r in 0..=pi {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=(n_ders as isize) {
            let mut d = 0.0;
            let rk = r - k;
            let pk = pi - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { -rk };
            let j2 = if r - 1 <= pk { k - 1 } else { pi - r };
            for j in j1..=j2 {
                let (ju, rkj) = (j as usize, (rk + j) as usize);
                a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][rkj];
                d += a[s2][ju] * ndu[rkj][pk as usize];
            }
            if r <= pk {
                let ku = k as usize;
                a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                d += a[s2][ku] * ndu[r as usize][pk as usize];
            }
            ders[k as usize][r as usize] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for k in 1..=n_ders {
        for v in ders[k].iter_mut() {
            *v *= factor;
        }
        factor *= p.saturating_sub(k) as f64;
    }
    ders
}

/// A clamped uniform B-spline with control points stored row-major
/// (`num_control_points x dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spline {
    space: SplineSpace,
    t_start: f64,
    total_time: f64,
    knots: Vec<f64>,
    control_points: Vec<f64>,
}

impl Spline {
    pub fn new(
        space: SplineSpace,
        t_start: f64,
        total_time: f64,
        control_points: Vec<f64>,
    ) -> Result<Self> {
        let expected = space.num_control_points() * space.dim;
        if control_points.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} control point scalars, got {}",
                control_points.len()
            )));
        }
        let knots = make_knots(space, t_start, total_time)?;
        Ok(Self { space, t_start, total_time, knots, control_points })
    }

    pub fn from_points3(
        space: SplineSpace,
        t_start: f64,
        total_time: f64,
        points: &[Vector3<f64>],
    ) -> Result<Self> {
        if space.dim != 3 {
            return Err(Error::Shape("from_points3 needs a 3-dimensional space".into()));
        }
        let flat = points.iter().flat_map(|q| [q.x, q.y, q.z]).collect();
        Self::new(space, t_start, total_time, flat)
    }

    /// Every control point equal to `value`.
    pub fn constant(space: SplineSpace, t_start: f64, total_time: f64, value: &[f64]) -> Result<Self> {
        if value.len() != space.dim {
            return Err(Error::Shape("constant value has wrong dimension".into()));
        }
        let cps = value.repeat(space.num_control_points());
        Self::new(space, t_start, total_time, cps)
    }

    pub fn space(&self) -> SplineSpace {
        self.space
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.total_time
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn control_points(&self) -> &[f64] {
        &self.control_points
    }

    pub fn num_control_points(&self) -> usize {
        self.space.num_control_points()
    }

    pub fn control_point(&self, l: usize) -> &[f64] {
        let d = self.space.dim;
        &self.control_points[l * d..(l + 1) * d]
    }

    pub fn control_point3(&self, l: usize) -> Vector3<f64> {
        let c = self.control_point(l);
        Vector3::new(c[0], c[1], c[2])
    }

    pub fn control_points3(&self) -> Vec<Vector3<f64>> {
        (0..self.num_control_points()).map(|l| self.control_point3(l)).collect()
    }

    /// Returns the same curve restarted at `t_start` (knots shifted).
    pub fn with_start(&self, t_start: f64) -> Self {
        Self::new(self.space, t_start, self.total_time, self.control_points.clone())
            .expect("shifting the start time keeps the spline valid")
    }

    /// Applies `f` to every control point. Affine maps commute with B-spline
    /// evaluation, so this transforms the whole curve.
    pub fn map_points3(&self, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Self {
        let pts: Vec<_> = self.control_points3().into_iter().map(f).collect();
        Self::from_points3(self.space, self.t_start, self.total_time, &pts)
            .expect("mapping control points keeps the spline valid")
    }

    fn domain_tolerance(&self) -> f64 {
        1e-9 * self.total_time.max(1.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = self.domain_tolerance();
        t >= self.t_start - tol && t <= self.t_end() + tol
    }

    /// Knot span holding `t` (uniform knots, so O(1)).
    fn span(&self, t: f64) -> usize {
        let segs = self.space.num_segments();
        let u = (t - self.t_start) / self.total_time * segs as f64;
        let seg = if u <= 0.0 { 0 } else { (u.floor() as usize).min(segs - 1) };
        seg + self.space.degree
    }

    fn check(&self, t: f64, order: usize) -> Result<f64> {
        if order > self.space.degree {
            return Err(Error::OrderTooHigh { order, degree: self.space.degree });
        }
        if !t.is_finite() || !self.contains(t) {
            return Err(Error::OutOfDomain { t, start: self.t_start, end: self.t_end() });
        }
        Ok(t.clamp(self.t_start, self.t_end()))
    }

    /// Value of the `order`-th time derivative at `t`.
    pub fn eval(&self, t: f64, order: usize) -> Result<Vec<f64>> {
        let t = self.check(t, order)?;
        self.eval_in_span(self.span(t), t, order)
    }

    /// Evaluates with the polynomial piece of `segment`, i.e. one-sided at
    /// the segment's end knots. Used for quadrature of discontinuous
    /// derivatives.
    pub fn eval_in_segment(&self, segment: usize, t: f64, order: usize) -> Result<Vec<f64>> {
        let t = self.check(t, order)?;
        if segment >= self.space.num_segments() {
            return Err(Error::Shape(format!("segment {segment} out of range")));
        }
        self.eval_in_span(segment + self.space.degree, t, order)
    }

    pub fn eval3_in_segment(&self, segment: usize, t: f64, order: usize) -> Result<Vector3<f64>> {
        let v = self.eval_in_segment(segment, t, order)?;
        Ok(Vector3::new(v[0], v[1], v[2]))
    }

    fn eval_in_span(&self, span: usize, t: f64, order: usize) -> Result<Vec<f64>> {
        let p = self.space.degree;
        let d = self.space.dim;
        let ders = basis_derivatives(&self.knots, p, span, t, order);
        let mut out = vec![0.0; d];
        for (j, w) in ders[order].iter().enumerate() {
            let cp = self.control_point(span - p + j);
            for (o, c) in out.iter_mut().zip(cp) {
                *o += w * c;
            }
        }
        Ok(out)
    }

    pub fn eval3(&self, t: f64, order: usize) -> Result<Vector3<f64>> {
        if self.space.dim != 3 {
            return Err(Error::Shape("eval3 on a non-3D spline".into()));
        }
        let v = self.eval(t, order)?;
        Ok(Vector3::new(v[0], v[1], v[2]))
    }

    pub fn eval1(&self, t: f64, order: usize) -> Result<f64> {
        if self.space.dim != 1 {
            return Err(Error::Shape("eval1 on a non-scalar spline".into()));
        }
        Ok(self.eval(t, order)?[0])
    }

    /// Position, velocity and acceleration of a 3D spline at `t`.
    pub fn state3(&self, t: f64) -> Result<[Vector3<f64>; 3]> {
        Ok([self.eval3(t, 0)?, self.eval3(t, 1)?, self.eval3(t, 2)?])
    }

    /// Spline of degree `p - 1` equal to the time derivative.
    pub fn derivative(&self) -> Result<Spline> {
        let space = self.space.derivative().ok_or(Error::OrderTooHigh {
            order: 1,
            degree: 0,
        })?;
        let p = self.space.degree as f64;
        let d = self.space.dim;
        let n = self.num_control_points();
        let mut cps = Vec::with_capacity((n - 1) * d);
        for l in 0..n - 1 {
            let denom = self.knots[l + self.space.degree + 1] - self.knots[l + 1];
            let (a, b) = (self.control_point(l), self.control_point(l + 1));
            cps.extend(a.iter().zip(b).map(|(qa, qb)| p * (qb - qa) / denom));
        }
        Ok(Spline {
            space,
            t_start: self.t_start,
            total_time: self.total_time,
            knots: self.knots[1..self.knots.len() - 1].to_vec(),
            control_points: cps,
        })
    }
}

/// Least-squares fit of a spline in `space` to `(t, value)` samples; the
/// interval is taken from the earliest and latest sample time.
///
/// `values` is row-major with `space.dim()` entries per sample.
pub fn fit(space: SplineSpace, times: &[f64], values: &[f64]) -> Result<Spline> {
    let d = space.dim();
    let n_cp = space.num_control_points();
    if values.len() != times.len() * d {
        return Err(Error::Shape("fit values do not match sample count".into()));
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit samples".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (t0, t1) = match (sorted.first(), sorted.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::RankDeficient { needed: n_cp, got: 0 }),
    };
    let tol = 1e-12 * (t1 - t0).abs().max(1.0);
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] - w[0] > tol).count();
    if distinct < n_cp {
        return Err(Error::RankDeficient { needed: n_cp, got: distinct });
    }

    let template = Spline::new(space, t0, t1 - t0, vec![0.0; n_cp * d])?;
    let p = space.degree();
    let mut normal = DMatrix::<f64>::zeros(n_cp, n_cp);
    let mut rhs = DMatrix::<f64>::zeros(n_cp, d);
    for (i, &t) in times.iter().enumerate() {
        let span = template.span(t);
        let basis = &basis_derivatives(&template.knots, p, span, t, 0)[0];
        let first = span - p;
        for (a, wa) in basis.iter().enumerate() {
            for (b, wb) in basis.iter().enumerate() {
                normal[(first + a, first + b)] += wa * wb;
            }
            for k in 0..d {
                rhs[(first + a, k)] += wa * values[i * d + k];
            }
        }
    }
    for l in 0..n_cp {
        normal[(l, l)] += FIT_REGULARIZER;
    }
    let chol = Cholesky::new(normal).ok_or(Error::RankDeficient { needed: n_cp, got: distinct })?;
    let sol = chol.solve(&rhs);
    let mut cps = Vec::with_capacity(n_cp * d);
    for l in 0..n_cp {
        for k in 0..d {
            cps.push(sol[(l, k)]);
        }
    }
    Spline::new(space, t0, t1 - t0, cps)
}

/// Convenience wrapper for 3D samples.
pub fn fit3(space: SplineSpace, samples: &[(f64, Vector3<f64>)]) -> Result<Spline> {
    if space.dim() != 3 {
        return Err(Error::Shape("fit3 needs a 3-dimensional space".into()));
    }
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let values: Vec<f64> = samples.iter().flat_map(|s| [s.1.x, s.1.y, s.1.z]).collect();
    fit(space, &times, &values)
}

/// Convenience wrapper for scalar samples.
pub fn fit1(space: SplineSpace, samples: &[(f64, f64)]) -> Result<Spline> {
    let space = space.with_dim(1);
    let times: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let values: Vec<f64> = samples.iter().map(|s| s.1).collect();
    fit(space, &times, &values)
}

/// One planner mode: the four free position control points `q3..q6`
/// (in frame f) and the total time of the trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTuple {
    pub qhat: [Vector3<f64>; 4],
    pub total_time: f64,
}

impl ActionTuple {
    pub const LEN: usize = 13;

    pub fn to_array(&self) -> [f64; 13] {
        let mut out = [0.0; 13];
        for (k, q) in self.qhat.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(q.as_slice());
        }
        out[12] = self.total_time;
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Shape(format!("action tuple needs 13 scalars, got {}", v.len())));
        }
        let q = |k: usize| Vector3::new(v[3 * k], v[3 * k + 1], v[3 * k + 2]);
        Ok(Self { qhat: [q(0), q(1), q(2), q(3)], total_time: v[12] })
    }
}

/// All nine control points of the position spline determined by `action`,
/// the start point `d` and the initial velocity and acceleration. The end is
/// a full stop: `q7 = q8 = q6`.
pub fn boundary_control_points(
    action: &ActionTuple,
    d: Vector3<f64>,
    v_in: Vector3<f64>,
    a_in: Vector3<f64>,
) -> Result<[Vector3<f64>; 9]> {
    let t = action.total_time;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::NonPositiveTime(t));
    }
    let delta = t / SplineSpace::position().num_segments() as f64;
    let q0 = d;
    let q1 = q0 + (delta / 3.0) * v_in;
    let q2 = q1 + (2.0 * delta / 3.0) * (v_in + 0.5 * delta * a_in);
    let [q3, q4, q5, q6] = action.qhat;
    Ok([q0, q1, q2, q3, q4, q5, q6, q6, q6])
}

/// Position spline in `S^3_{3,12}` starting at `t_start` that satisfies
/// `p = d`, `v = v_in`, `a = a_in` at the start and rests at the end.
pub fn impose_boundary_conditions(
    action: &ActionTuple,
    d: Vector3<f64>,
    v_in: Vector3<f64>,
    a_in: Vector3<f64>,
    t_start: f64,
) -> Result<Spline> {
    let cps = boundary_control_points(action, d, v_in, a_in)?;
    Spline::from_points3(SplineSpace::position(), t_start, action.total_time, &cps)
}
