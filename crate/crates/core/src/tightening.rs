//! Constraint tightening along the prediction horizon, the worst-case
//! observer-error bound `ê_o`, and the terminal-set radius `α`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::gru::StabilityCertificate;
use crate::linalg::Matrix;
use crate::lp::simplex;
use crate::observer::ObserverMetrics;

/// Output polytope `{y : L y ≤ h}` in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConstraints {
    l: Matrix,
    h: Vec<f64>,
}

impl OutputConstraints {
    /// Validates shape and finiteness, then checks that the polytope is
    /// nonempty and bounded in every output channel (two LPs per channel).
    pub fn new(l: Matrix, h: Vec<f64>) -> Result<Self> {
        check_len("constraint right-hand side", l.rows(), h.len())?;
        check_finite("constraint matrix", l.as_slice())?;
        check_finite("constraint right-hand side", &h)?;
        if l.rows() == 0 || l.cols() == 0 {
            return Err(Error::InvalidArgument("empty output constraint set".into()));
        }
        let (q, p) = (l.rows(), l.cols());
        // y = y⁺ − y⁻, L y + s = h
        let mut a = Matrix::zeros(q, 2 * p + q);
        for i in 0..q {
            for k in 0..p {
                a[(i, k)] = l[(i, k)];
                a[(i, p + k)] = -l[(i, k)];
            }
            a[(i, 2 * p + i)] = 1.0;
        }
        for k in 0..p {
            for sign in [1.0, -1.0] {
                let mut c = vec![0.0; 2 * p + q];
                c[k] = sign;
                c[p + k] = -sign;
                match simplex(&a, &h, &c) {
                    Ok(_) => {}
                    Err(Error::Lp("infeasible")) => {
                        return Err(Error::InvalidArgument("output constraint set is empty".into()))
                    }
                    Err(Error::Lp("unbounded")) => {
                        return Err(Error::InvalidArgument(format!("output channel {k} is unbounded")))
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(Self { l, h })
    }

    /// `lower ≤ y ≤ upper` as `[I; −I] y ≤ [upper; −lower]`.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        check_len("box bounds", lower.len(), upper.len())?;
        let p = lower.len();
        let mut l = Matrix::zeros(2 * p, p);
        let mut h = vec![0.0; 2 * p];
        for k in 0..p {
            l[(k, k)] = 1.0;
            l[(p + k, k)] = -1.0;
            h[k] = upper[k];
            h[p + k] = -lower[k];
        }
        Self::new(l, h)
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn q(&self) -> usize {
        self.h.len()
    }

    pub fn p(&self) -> usize {
        self.l.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TighteningSchedule {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub w_bar: f64,
    pub w_l: Vec<f64>,
    pub c_s: Vec<f64>,
    pub rho_o: f64,
    pub rho_s: f64,
    pub l_max: f64,
    pub e_inf: f64,
    pub horizon: usize,
}

pub fn compute_w_bar(kappa: f64, w_bar_y: f64) -> Result<f64> {
    if !(kappa >= 0.0 && w_bar_y >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "κ = {kappa} and w̄_y = {w_bar_y} must be nonnegative"
        )));
    }
    Ok(kappa * w_bar_y)
}

pub fn compute_w_l(constraints: &OutputConstraints, w_bar_y: f64) -> Result<Vec<f64>> {
    if !(w_bar_y >= 0.0) {
        return Err(Error::InvalidArgument(format!("w̄_y = {w_bar_y} must be nonnegative")));
    }
    Ok(constraints.l.row_abs_sums().into_iter().map(|s| s * w_bar_y).collect())
}

/// Builds `a_0..a_N` and `b_0..b_N`. `cert.c_s` and `metrics.c_o` must be
/// computed for the same constraint matrix.
pub fn build_schedule(
    cert: &StabilityCertificate,
    metrics: &ObserverMetrics,
    w_bar: f64,
    w_l: Vec<f64>,
    horizon: usize,
) -> Result<TighteningSchedule> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon N must be at least 1".into()));
    }
    if !cert.delta_iss {
        return Err(Error::Precondition(format!("model is not certified (ν = {})", cert.nu)));
    }
    if !metrics.convergent {
        return Err(Error::Precondition(format!(
            "observer is not convergent (ν_o = {})",
            metrics.nu_o
        )));
    }
    if !(w_bar >= 0.0) {
        return Err(Error::InvalidArgument(format!("w̄ = {w_bar} must be nonnegative")));
    }
    let q = metrics.c_o.len();
    check_len("c_s", q, cert.c_s.len())?;
    check_len("w_L", q, w_l.len())?;
    let (rho_o, rho_s, l_max) = (metrics.rho_o, cert.rho_s, metrics.l_max);
    let c_s = &cert.c_s;

    let mut a = Vec::with_capacity(horizon + 1);
    let mut b = Vec::with_capacity(horizon + 1);
    a.push(metrics.c_o.clone());
    b.push(vec![0.0; q]);
    let mut rho_i = 1.0;
    for i in 0..horizon {
        let (ai, bi) = (&a[i], &b[i]);
        let next_a: Vec<f64> = (0..q).map(|j| rho_o * ai[j] + rho_i * l_max * c_s[j]).collect();
        let next_b: Vec<f64> = (0..q).map(|j| bi[j] + ai[j] * w_bar + c_s[j] * rho_i * w_bar).collect();
        a.push(next_a);
        b.push(next_b);
        rho_i *= rho_s;
    }
    Ok(TighteningSchedule {
        a,
        b,
        w_bar,
        w_l,
        c_s: c_s.clone(),
        rho_o,
        rho_s,
        l_max,
        e_inf: w_bar / (1.0 - rho_o),
        horizon,
    })
}

impl TighteningSchedule {
    /// `h − a_i ê_o − b_i − w_L`, the bound on `L y_i` in the FHOCP.
    pub fn tightened_bound(&self, constraints: &OutputConstraints, i: usize, e_o: f64) -> Vec<f64> {
        (0..constraints.q())
            .map(|j| constraints.h[j] - self.a[i][j] * e_o - self.b[i][j] - self.w_l[j])
            .collect()
    }

    /// `max{ê_o, ē_∞}`.
    pub fn e_tilde(&self, e_o: f64) -> f64 {
        e_o.max(self.e_inf)
    }
}

/// Worst-case observer-error bound, stored as its offset from `ē_∞` so the
/// geometric decay is exact in floating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyState {
    e_inf: f64,
    offset: f64,
    pub k: usize,
}

impl UncertaintyState {
    pub fn new(e_o_0: f64, schedule: &TighteningSchedule) -> Result<Self> {
        if !(e_o_0 >= 0.0) || !e_o_0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ê_o,0 = {e_o_0} must be finite and nonnegative"
            )));
        }
        Ok(Self {
            e_inf: schedule.e_inf,
            offset: e_o_0 - schedule.e_inf,
            k: 0,
        })
    }

    pub fn e_o(&self) -> f64 {
        self.e_inf + self.offset
    }

    /// `|ê_o − ē_∞|`.
    pub fn distance_to_limit(&self) -> f64 {
        self.offset.abs()
    }
}

/// `ê_o⁺ = ρ_o ê_o + w̄`.
pub fn eo_step(state: UncertaintyState, schedule: &TighteningSchedule) -> UncertaintyState {
    UncertaintyState {
        e_inf: state.e_inf,
        offset: schedule.rho_o * state.offset,
        k: state.k + 1,
    }
}

/// `ē_∞ + ρ_o^k (ê_o,0 − ē_∞)`.
pub fn eo_closed_form(e_o_0: f64, k: usize, schedule: &TighteningSchedule) -> f64 {
    schedule.e_inf + libm::pow(schedule.rho_o, k as f64) * (e_o_0 - schedule.e_inf)
}

fn alpha_numerators(
    y_bar: &[f64],
    constraints: &OutputConstraints,
    schedule: &TighteningSchedule,
    e_tilde: f64,
) -> Vec<f64> {
    let ly = constraints.l.mul_vec(y_bar);
    let bound = schedule.tightened_bound(constraints, schedule.horizon, e_tilde);
    bound.iter().zip(&ly).map(|(b, l)| b - l).collect()
}

/// Terminal radius for set-point `ȳ` with `ẽ_o = max{ê_o,0, ē_∞}`.
pub fn compute_alpha(
    y_bar: &[f64],
    constraints: &OutputConstraints,
    schedule: &TighteningSchedule,
    e_o_0: f64,
) -> Result<f64> {
    check_len("set-point", constraints.p(), y_bar.len())?;
    check_finite("set-point", y_bar)?;
    let num = alpha_numerators(y_bar, constraints, schedule, schedule.e_tilde(e_o_0));
    let mut alpha = f64::INFINITY;
    for (nj, cj) in num.iter().zip(&schedule.c_s) {
        if *cj == 0.0 {
            if *nj < 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            continue;
        }
        alpha = alpha.min(nj / cj);
    }
    Ok(alpha)
}

/// Rows of `L ȳ < h − ẽ_o a_N − b_N − w_L` that fail.
pub fn setpoint_violations(
    y_bar: &[f64],
    constraints: &OutputConstraints,
    schedule: &TighteningSchedule,
    e_o_0: f64,
) -> Result<Vec<usize>> {
    check_len("set-point", constraints.p(), y_bar.len())?;
    let num = alpha_numerators(y_bar, constraints, schedule, schedule.e_tilde(e_o_0));
    Ok(num
        .iter()
        .enumerate()
        .filter(|(_, v)| !(**v > 0.0))
        .map(|(j, _)| j)
        .collect())
}

pub fn check_setpoint(
    y_bar: &[f64],
    constraints: &OutputConstraints,
    schedule: &TighteningSchedule,
    e_o_0: f64,
) -> Result<bool> {
    Ok(setpoint_violations(y_bar, constraints, schedule, e_o_0)?.is_empty())
}

/// `(ρ_s^N (L_max ê_o + w̄), α (1 − ρ_s))`.
pub fn feasibility_sides(e_o: f64, alpha: f64, schedule: &TighteningSchedule) -> (f64, f64) {
    let lhs = libm::pow(schedule.rho_s, schedule.horizon as f64) * (schedule.l_max * e_o + schedule.w_bar);
    let rhs = if alpha == f64::INFINITY {
        f64::INFINITY
    } else {
        alpha * (1.0 - schedule.rho_s)
    };
    (lhs, rhs)
}

pub fn check_recursive_feasibility(e_o: f64, alpha: f64, schedule: &TighteningSchedule) -> bool {
    let (lhs, rhs) = feasibility_sides(e_o, alpha, schedule);
    lhs <= rhs
}

/// The condition for every `k ≥ 0`: `ê_o` moves monotonically between
/// `ê_o,0` and `ē_∞`, and the left side is affine in `ê_o`.
pub fn check_recursive_feasibility_all(e_o_0: f64, alpha: f64, schedule: &TighteningSchedule) -> bool {
    check_recursive_feasibility(e_o_0, alpha, schedule) && check_recursive_feasibility(schedule.e_inf, alpha, schedule)
}
