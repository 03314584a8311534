//! Matching expert trajectories to student heads.
//!
//! Rows index expert trajectories (`n_e`), columns index student heads
//! (`n_s ≥ n_e`).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LSA")]
    Lsa,
    #[serde(rename = "WTAr")]
    WtaR,
    #[serde(rename = "RWTAr")]
    RwtaR,
    #[serde(rename = "WTAc")]
    WtaC,
    #[serde(rename = "RWTAc")]
    RwtaC,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Lsa, Variant::WtaR, Variant::RwtaR, Variant::WtaC, Variant::RwtaC];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Lsa => "LSA",
            Variant::WtaR => "WTAr",
            Variant::RwtaR => "RWTAr",
            Variant::WtaC => "WTAc",
            Variant::RwtaC => "RWTAc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown assignment variant {s:?}")))
    }
}

/// Position and time cost matrices, both `n_e x n_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrices {
    pub d_p: DMatrix<f64>,
    pub d_t: DMatrix<f64>,
}

/// `D_p[i][j]`: mean squared difference of the twelve normalized position
/// scalars; `D_T[i][j]`: squared difference of the normalized time.
pub fn cost_matrices(expert: &[[f64; 13]], student: &[[f64; 13]]) -> Result<CostMatrices> {
    if expert.is_empty() {
        return Err(Error::Empty("expert trajectories"));
    }
    if expert.len() > student.len() {
        return Err(Error::Shape(format!(
            "{} expert trajectories for {} student heads",
            expert.len(),
            student.len()
        )));
    }
    let (ne, ns) = (expert.len(), student.len());
    let d_p = DMatrix::from_fn(ne, ns, |i, j| {
        (0..12).map(|k| (expert[i][k] - student[j][k]).powi(2)).sum::<f64>() / 12.0
    });
    let d_t = DMatrix::from_fn(ne, ns, |i, j| (expert[i][12] - student[j][12]).powi(2));
    Ok(CostMatrices { d_p, d_t })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub a: DMatrix<f64>,
    pub variant: Variant,
    pub epsilon: f64,
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows ≤ cols`), by shortest augmenting paths with dual potentials.
/// Returns the column of each row. Among equally short paths the lowest
/// column index is taken, preferring unassigned columns.
pub fn solve_lsa(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (nr, nc) = cost.shape();
    if nr > nc {
        return Err(Error::Shape(format!("{nr} rows cannot be matched to {nc} columns")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let mut u = vec![0.0; nr];
    let mut v = vec![0.0; nc];
    let mut col4row: Vec<Option<usize>> = vec![None; nr];
    let mut row4col: Vec<Option<usize>> = vec![None; nc];

    for cur_row in 0..nr {
        let mut shortest = vec![f64::INFINITY; nc];
        let mut path = vec![usize::MAX; nc];
        let mut in_sr = vec![false; nr];
        let mut in_sc = vec![false; nc];
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink = loop {
            in_sr[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for j in 0..nc {
                if in_sc[j] {
                    continue;
                }
                let r = min_val + cost[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                let better = shortest[j] < lowest
                    || (shortest[j] == lowest && index != usize::MAX && row4col[index].is_some() && row4col[j].is_none());
                if better {
                    lowest = shortest[j];
                    index = j;
                }
            }
            min_val = lowest;
            let j = index;
            in_sc[j] = true;
            match row4col[j] {
                None => break j,
                Some(r) => i = r,
            }
        };
        u[cur_row] += min_val;
        for r in 0..nr {
            if in_sr[r] && r != cur_row {
                let c = col4row[r].expect("scanned rows are assigned");
                u[r] += min_val - shortest[c];
            }
        }
        for j in 0..nc {
            if in_sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = Some(r);
            let prev = col4row[r].replace(j);
            if r == cur_row {
                break;
            }
            j = prev.expect("augmenting path alternates");
        }
    }
    Ok(col4row.into_iter().map(|c| c.expect("every row assigned")).collect())
}

/// Sum of `cost[i][cols[i]]`.
pub fn assignment_cost(cost: &DMatrix<f64>, cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Binary LSA matrix: rows sum to 1, `n_e` columns sum to 1, the rest to 0.
pub fn lsa_assign(d_p: &DMatrix<f64>) -> Result<AssignmentMatrix> {
    let cols = solve_lsa(d_p)?;
    let mut a = DMatrix::zeros(d_p.nrows(), d_p.ncols());
    for (i, j) in cols.into_iter().enumerate() {
        a[(i, j)] = 1.0;
    }
    Ok(AssignmentMatrix { a, variant: Variant::Lsa, epsilon: 0.0 })
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, v) in values.enumerate() {
        if v < best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Winner-takes-all assignments. Row variants give `1 - ε` to the minimum
/// of every row and `ε / (n_s - 1)` elsewhere; column variants do the same
/// per column with `ε / (n_e - 1)`. With a single alternative the
/// off-minimum weight is 0. `WTAr` and `WTAc` force `ε = 0`.
pub fn wta_assign(d_p: &DMatrix<f64>, variant: Variant, epsilon: f64) -> Result<AssignmentMatrix> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    if d_p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let (ne, ns) = d_p.shape();
    let (by_row, eps) = match variant {
        Variant::WtaR => (true, 0.0),
        Variant::RwtaR => (true, epsilon),
        Variant::WtaC => (false, 0.0),
        Variant::RwtaC => (false, epsilon),
        Variant::Lsa => return Err(Error::Config("LSA is not a winner-takes-all variant".into())),
    };
    let spread = |others: usize| if others == 0 { 0.0 } else { eps / others as f64 };
    let a = if by_row {
        let off = spread(ns - 1);
        let mut a = DMatrix::from_element(ne, ns, off);
        for i in 0..ne {
            a[(i, argmin(d_p.row(i).iter().copied()))] = 1.0 - eps;
        }
        a
    } else {
        let off = spread(ne - 1);
        let mut a = DMatrix::from_element(ne, ns, off);
        for j in 0..ns {
            a[(argmin(d_p.column(j).iter().copied()), j)] = 1.0 - eps;
        }
        a
    };
    Ok(AssignmentMatrix { a, variant, epsilon: eps })
}

/// Dispatches to [`lsa_assign`] or [`wta_assign`]. Only `D_p` is used.
pub fn assign(d_p: &DMatrix<f64>, variant: Variant, epsilon: f64) -> Result<AssignmentMatrix> {
    match variant {
        Variant::Lsa => lsa_assign(d_p),
        _ => wta_assign(d_p, variant, epsilon),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub grad_d_p: DMatrix<f64>,
    pub grad_d_t: DMatrix<f64>,
}

/// `1ᵀ(β_p A⊙D_p + β_T A⊙D_T)1` and its gradients with respect to both
/// cost matrices.
pub fn loss(a: &DMatrix<f64>, d: &CostMatrices, beta_p: f64, beta_t: f64) -> Result<LossTerms> {
    if a.shape() != d.d_p.shape() || a.shape() != d.d_t.shape() {
        return Err(Error::Shape("assignment and cost matrices differ in shape".into()));
    }
    let loss = beta_p * a.component_mul(&d.d_p).sum() + beta_t * a.component_mul(&d.d_t).sum();
    Ok(LossTerms { loss, grad_d_p: a * beta_p, grad_d_t: a * beta_t })
}

/// Smallest total cost over all injective row-to-column maps, by
/// enumeration.
pub fn brute_force_min(cost: &DMatrix<f64>) -> f64 {
    fn rec(cost: &DMatrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn lsa_small_example() {
        let d = m(&[&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]]);
        let cols = solve_lsa(&d).unwrap();
        assert_eq!(cols, vec![0, 1]);
        assert_eq!(assignment_cost(&d, &cols), 2.0);
        assert_eq!(brute_force_min(&d), 2.0);
    }

    #[test]
    fn lsa_single_row_picks_lowest_minimum() {
        let d = m(&[&[3.0, 1.0, 1.0, 2.0]]);
        let a = lsa_assign(&d).unwrap().a;
        assert_eq!(a, m(&[&[0.0, 1.0, 0.0, 0.0]]));
        assert_eq!(a, wta_assign(&d, Variant::WtaR, 0.0).unwrap().a);
    }

    #[test]
    fn lsa_identity_dominant() {
        let d = DMatrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(lsa_assign(&d).unwrap().a, DMatrix::identity(4, 4));
    }

    #[test]
    fn lsa_resolves_conflicts() {
        // Both rows prefer column 0; the second loses less by moving.
        let d = m(&[&[0.0, 10.0, 10.0], &[0.1, 0.5, 9.0]]);
        assert_eq!(solve_lsa(&d).unwrap(), vec![0, 1]);
    }

    #[test]
    fn rwta_row_weights() {
        let d = m(&[&[1.0, 2.0], &[3.0, 0.0]]);
        assert_eq!(wta_assign(&d, Variant::RwtaR, 0.0).unwrap().a, m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let d = m(&[&[0.5, 0.1, 0.9]]);
        let a = wta_assign(&d, Variant::RwtaR, 0.05).unwrap().a;
        for (x, y) in a.iter().zip([0.025, 0.95, 0.025]) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn wtac_column_collapse() {
        let d = m(&[&[0.1, 5.0, 5.0], &[0.2, 5.0, 5.0]]);
        let a = wta_assign(&d, Variant::WtaC, 0.0).unwrap().a;
        // Column 0's minimum is row 0; columns 1 and 2 tie and go to row 0.
        assert_eq!(a, m(&[&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]]));
        let lsa = lsa_assign(&d).unwrap().a;
        assert_eq!(lsa, m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]));
    }

    #[test]
    fn wta_forces_zero_epsilon_and_validates() {
        let d = m(&[&[1.0, 2.0, 0.5]]);
        let a = wta_assign(&d, Variant::WtaR, 0.3).unwrap();
        assert_eq!(a.epsilon, 0.0);
        assert!(matches!(wta_assign(&d, Variant::RwtaR, 1.0), Err(Error::InvalidEpsilon(_))));
        assert!(matches!(wta_assign(&d, Variant::RwtaR, -0.1), Err(Error::InvalidEpsilon(_))));
    }

    #[test]
    fn rwtac_single_row_has_no_off_weight() {
        let d = m(&[&[1.0, 2.0, 3.0]]);
        let a = wta_assign(&d, Variant::RwtaC, 0.2).unwrap().a;
        for x in a.iter() {
            assert!((x - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_examples() {
        let d = CostMatrices {
            d_p: m(&[&[1.0, 2.0, 3.0], &[2.0, 1.0, 4.0]]),
            d_t: DMatrix::zeros(2, 3),
        };
        let a = lsa_assign(&d.d_p).unwrap().a;
        assert_eq!(loss(&a, &d, 1.0, 1.0).unwrap().loss, 2.0);
        assert_eq!(loss(&DMatrix::zeros(2, 3), &d, 1.0, 1.0).unwrap().loss, 0.0);
        let d2 = CostMatrices { d_p: d.d_p.clone(), d_t: DMatrix::from_element(2, 3, 0.5) };
        let l1 = loss(&a, &d2, 1.0, 1.0).unwrap().loss;
        let l2 = loss(&a, &d2, 2.0, 1.0).unwrap().loss;
        assert_eq!(l2 - l1, 2.0);
        assert!(loss(&DMatrix::zeros(3, 3), &d, 1.0, 1.0).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let zero = [0.0; 13];
        let mut one = [1.0; 13];
        one[12] = 0.0;
        let c = cost_matrices(&[zero], &[zero, one]).unwrap();
        assert_eq!(c.d_p[(0, 0)], 0.0);
        assert_eq!(c.d_p[(0, 1)], 1.0);
        assert_eq!(c.d_t[(0, 1)], 0.0);
        let swapped = cost_matrices(&[one], &[zero]).unwrap();
        assert_eq!(swapped.d_p[(0, 0)], c.d_p[(0, 1)]);
        assert!(cost_matrices(&[], &[zero]).is_err());
        assert!(cost_matrices(&[zero, zero], &[zero]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Variant>().is_err());
    }
}
