//! Closed-form perception-aware yaw.
//!
//! Given the thrust direction `ξ` and the relative obstacle position `r`, the
//! body x-axis that maximizes `b1ᵀ r̂` over unit vectors perpendicular to `ξ`
//! is the normalized projection of `r` onto the plane orthogonal to `ξ`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{psi_from_b1_unchecked, xi_from_acceleration};
use crate::splines::{fit1, Spline, SplineSpace};

pub const DEFAULT_PSI_SAMPLES: usize = 64;
pub const MIN_PSI_SAMPLES: usize = 13;

pub(crate) fn project_perp(v: Vector3<f64>, xi: Vector3<f64>) -> Vector3<f64> {
    v - (v.dot(&xi) / xi.norm_squared()) * xi
}

pub(crate) fn is_degenerate(perp: &Vector3<f64>, reference: &Vector3<f64>) -> bool {
    perp.norm() <= 1e-9 * reference.norm() || perp.norm() < 1e-300
}

/// Unit `b1 ⊥ ξ` closest to `r`. When `r ∥ ξ` every admissible `b1` is
/// optimal and `fallback` (projected onto the plane) is returned instead.
pub fn b1_closed_form(r: Vector3<f64>, xi: Vector3<f64>, fallback: Vector3<f64>) -> Vector3<f64> {
    let perp = project_perp(r, xi);
    if !is_degenerate(&perp, &r) {
        return perp.normalize();
    }
    for candidate in [fallback, Vector3::x(), Vector3::y()] {
        let p = project_perp(candidate, xi);
        if !is_degenerate(&p, &candidate) {
            return p.normalize();
        }
    }
    unreachable!("e_x and e_y cannot both be parallel to xi")
}

/// Least-squares yaw spline and the unwrapped samples it was fitted to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PsiTrajectory {
    pub spline: Spline,
    pub samples: Vec<(f64, f64)>,
    pub residual_rms: f64,
}

impl PsiTrajectory {
    pub fn t_start(&self) -> f64 {
        self.spline.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.spline.t_end()
    }
}

/// Unwraps consecutive angles so no step exceeds π.
pub fn unwrap_angles(angles: &mut [f64]) {
    for i in 1..angles.len() {
        let prev = angles[i - 1];
        let step = crate::frames::wrap_angle(angles[i] - prev);
        angles[i] = prev + step;
    }
}

/// Samples the closed-form yaw along `pos` while looking at `obst` and fits
/// a spline in `S^1_{3,12}` over the same interval.
pub fn psi_profile(pos: &Spline, obst: &Spline, n_samples: usize) -> Result<PsiTrajectory> {
    if n_samples < MIN_PSI_SAMPLES {
        return Err(Error::Config(format!(
            "psi_profile needs at least {MIN_PSI_SAMPLES} samples, got {n_samples}"
        )));
    }
    let (t0, t1) = (pos.t_start(), pos.t_end());
    if !obst.contains(t0) || !obst.contains(t1) {
        return Err(Error::IntervalMismatch(format!(
            "obstacle spans [{}, {}], trajectory spans [{t0}, {t1}]",
            obst.t_start(),
            obst.t_end()
        )));
    }
    let mut times = Vec::with_capacity(n_samples);
    let mut psi = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t = t0 + (t1 - t0) * i as f64 / (n_samples - 1) as f64;
        let p = pos.eval3(t, 0)?;
        let xi = xi_from_acceleration(pos.eval3(t, 2)?);
        let n = xi.norm();
        if !(n > 1e-12) {
            return Err(Error::ZeroXi);
        }
        let xb = xi / n;
        if xb.z <= -1.0 + 1e-9 {
            return Err(Error::SingularThrust);
        }
        let r = obst.eval3(t, 0)? - p;
        let value = if is_degenerate(&project_perp(r, xi), &r) && i > 0 {
            psi[i - 1]
        } else {
            psi_from_b1_unchecked(xb, b1_closed_form(r, xi, Vector3::x()))
        };
        times.push(t);
        psi.push(value);
    }
    unwrap_angles(&mut psi);
    let samples: Vec<(f64, f64)> = times.iter().copied().zip(psi.iter().copied()).collect();
    let spline = fit1(SplineSpace::yaw(), &samples)?;
    let mut sq = 0.0;
    for &(t, v) in &samples {
        sq += (spline.eval1(t, 0)? - v).powi(2);
    }
    Ok(PsiTrajectory {
        spline,
        residual_rms: (sq / samples.len() as f64).sqrt(),
        samples,
    })
}
