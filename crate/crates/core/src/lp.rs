//! Dense two-phase primal simplex for small standard-form programs
//! `min cᵀx  s.t.  A x = b, x ≥ 0`, with Bland's rule against cycling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::linalg::Matrix;

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

struct Tableau {
    /// `rows × (cols + 1)`, last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Runs the simplex on cost vector `c` over the first `allowed` columns.
    fn optimize(&mut self, c: &[f64], allowed: usize) -> Result<()> {
        let rhs = self.cols;
        for _ in 0..50_000 {
            // reduced costs c_j − c_Bᵀ B⁻¹ A_j
            let mut entering = None;
            for j in 0..allowed {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut rc = c[j];
                for (i, &bi) in self.basis.iter().enumerate() {
                    rc -= c[bi] * self.t[i][j];
                }
                if rc < -PIVOT_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][col];
                if a > PIVOT_TOL {
                    let ratio = self.t[i][rhs] / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14 || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li]) {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::Lp("unbounded"));
            };
            self.pivot(row, col);
        }
        Err(Error::Lp("iteration limit"))
    }
}

pub fn simplex(a: &Matrix, b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let (m, n) = (a.rows(), a.cols());
    check_len("LP right-hand side", m, b.len())?;
    check_len("LP cost", n, c.len())?;

    // Columns: original n, then m artificials, then rhs.
    let cols = n + m;
    let mut t = Vec::with_capacity(m);
    for i in 0..m {
        let sgn = if b[i] < 0.0 { -1.0 } else { 1.0 };
        let mut row = vec![0.0; cols + 1];
        for j in 0..n {
            row[j] = sgn * a[(i, j)];
        }
        row[n + i] = 1.0;
        row[cols] = sgn * b[i];
        t.push(row);
    }
    let mut tab = Tableau {
        t,
        basis: (n..n + m).collect(),
        cols,
    };

    let mut phase1 = vec![0.0; cols];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    tab.optimize(&phase1, cols)?;
    let infeas: f64 = (0..m).filter(|&i| tab.basis[i] >= n).map(|i| tab.t[i][cols]).sum();
    if infeas > FEAS_TOL {
        return Err(Error::Lp("infeasible"));
    }

    // Drive remaining (zero-level) artificials out of the basis; rows where
    // that is impossible are redundant and dropped.
    let mut i = 0;
    while i < tab.t.len() {
        if tab.basis[i] >= n {
            match (0..n).find(|&j| tab.t[i][j].abs() > PIVOT_TOL) {
                Some(j) => {
                    tab.pivot(i, j);
                    i += 1;
                }
                None => {
                    tab.t.remove(i);
                    tab.basis.remove(i);
                }
            }
        } else {
            i += 1;
        }
    }

    let mut cost = c.to_vec();
    cost.resize(cols, 0.0);
    tab.optimize(&cost, n)?;

    let mut x = vec![0.0; n];
    for (i, &bi) in tab.basis.iter().enumerate() {
        if bi < n {
            x[bi] = tab.t[i][cols].max(0.0);
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution { x, objective })
}

/// Minimizes `‖target − G·basis‖∞` over `G` (`target` is r×c, `basis` is
/// k×c, `G` is r×k). The induced ∞-norm decouples by rows, so each row
/// solves the ℓ₁ fit `min_g ‖t_i − gᵀ basis‖₁` as the epigraph LP
/// `min Σ(e⁺ + e⁻)  s.t.  basisᵀ(g⁺ − g⁻) + e⁺ − e⁻ = t_iᵀ`.
pub fn min_inf_norm_factor(target: &Matrix, basis: &Matrix) -> Result<Matrix> {
    check_len("basis columns", target.cols(), basis.cols())?;
    let (r, c, k) = (target.rows(), target.cols(), basis.rows());
    let nv = 2 * k + 2 * c;
    let mut a = Matrix::zeros(c, nv);
    for col in 0..c {
        for j in 0..k {
            a[(col, j)] = basis[(j, col)];
            a[(col, k + j)] = -basis[(j, col)];
        }
        a[(col, 2 * k + col)] = 1.0;
        a[(col, 2 * k + c + col)] = -1.0;
    }
    let mut cost = vec![0.0; nv];
    cost[2 * k..].iter_mut().for_each(|v| *v = 1.0);
    let mut g = Matrix::zeros(r, k);
    for i in 0..r {
        let sol = simplex(&a, target.row(i), &cost)?;
        for j in 0..k {
            g[(i, j)] = sol.x[j] - sol.x[k + j];
        }
    }
    Ok(g)
}
