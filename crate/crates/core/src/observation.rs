use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splines::{Spline, SplineSpace};

/// Planner input expressed in frame f: `(v, a, g, ψ̇, obstacle control
/// points, obstacle box size)`, flattened in that order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub v_f: Vector3<f64>,
    pub a_f: Vector3<f64>,
    pub g_f: Vector3<f64>,
    pub psi_dot: f64,
    pub q_obst_f: [Vector3<f64>; 10],
    pub s_obst: Vector3<f64>,
}

impl Observation {
    pub const LEN: usize = 43;

    pub fn to_array(&self) -> [f64; 43] {
        let mut out = [0.0; 43];
        out[0..3].copy_from_slice(self.v_f.as_slice());
        out[3..6].copy_from_slice(self.a_f.as_slice());
        out[6..9].copy_from_slice(self.g_f.as_slice());
        out[9] = self.psi_dot;
        for (k, q) in self.q_obst_f.iter().enumerate() {
            out[10 + 3 * k..13 + 3 * k].copy_from_slice(q.as_slice());
        }
        out[40..43].copy_from_slice(self.s_obst.as_slice());
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::LEN {
            return Err(Error::Shape(format!("observation needs 43 scalars, got {}", v.len())));
        }
        let at = |i: usize| Vector3::new(v[i], v[i + 1], v[i + 2]);
        let mut q = [Vector3::zeros(); 10];
        for (k, qk) in q.iter_mut().enumerate() {
            *qk = at(10 + 3 * k);
        }
        Ok(Self { v_f: at(0), a_f: at(3), g_f: at(6), psi_dot: v[9], q_obst_f: q, s_obst: at(40) })
    }

    /// Predicted obstacle trajectory over `[0, t_pred]` in frame f.
    pub fn obstacle_spline(&self, t_pred: f64) -> Result<Spline> {
        Spline::from_points3(SplineSpace::obstacle(), 0.0, t_pred, &self.q_obst_f)
    }
}
