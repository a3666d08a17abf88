//! Finite-horizon optimal control problem and the receding-horizon law.
//!
//! ```text
//! min  Σ_{i<N} ‖x_i − x̄‖²_Q + ‖u_i − ū‖²_R + s ‖x_N − x̄‖²_∞
//! s.t. x_{i+1} = f(x_i, u_i),  x_0 = x̂_k
//!      L(U_o x_i + b_o) ≤ h − a_i ê_o − b_i − w_L,   i < N
//!      ‖u_i‖_∞ ≤ 1
//!      ‖x_N − x̄‖_∞ ≤ α
//! ```
//!
//! Solved by single shooting. The terminal term uses an epigraph scalar
//! `t ∈ [0, α]` with `±(x_N − x̄) ≤ t` and cost `s t²`. Inequalities go
//! through an augmented-Lagrangian outer loop; the inner problem has only box
//! constraints and is solved by spectral projected gradient with backtracking.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::gru::{Equilibrium, GruParams, Rollout, StabilityCertificate, VjpScratch};
use crate::linalg::{inf_norm, quad_form, Matrix};
use crate::tightening::{OutputConstraints, TighteningSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub feasibility_tol: f64,
    pub gradient_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_outer: 30,
            max_inner: 200,
            feasibility_tol: 1e-6,
            gradient_tol: 1e-8,
        }
    }
}

/// `n λ_max(Q) / (1 − ρ_s²)`.
pub fn terminal_weight(q: &Matrix, cert: &StabilityCertificate) -> Result<f64> {
    if !(cert.rho_s < 1.0) {
        return Err(Error::Precondition(format!("ρ_s = {} is not below 1", cert.rho_s)));
    }
    let eig = check_pd("Q", q)?;
    let lmax = eig[eig.len() - 1];
    Ok(q.rows() as f64 * lmax / (1.0 - cert.rho_s * cert.rho_s))
}

fn check_pd(name: &str, m: &Matrix) -> Result<Vec<f64>> {
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::InvalidArgument(format!("{name} must be square")));
    }
    if !m.is_finite() || !m.is_symmetric(1e-12) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and symmetric")));
    }
    let eig = m.symmetric_eigenvalues()?;
    if !(eig[0] > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} is not positive definite (λ_min = {})",
            eig[0]
        )));
    }
    Ok(eig)
}

/// Stage and terminal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    q: Matrix,
    r: Matrix,
    s: f64,
}

impl CostWeights {
    /// `s = None` selects the smallest admissible terminal weight.
    pub fn new(q: Matrix, r: Matrix, s: Option<f64>, cert: &StabilityCertificate) -> Result<Self> {
        check_pd("R", &r)?;
        let s_min = terminal_weight(&q, cert)?;
        let s = match s {
            None => s_min,
            Some(s) if s >= s_min => s,
            Some(s) => {
                return Err(Error::InvalidArgument(format!(
                    "terminal weight {s} is below the admissible minimum {s_min}"
                )))
            }
        };
        Ok(Self { q, r, s })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn s(&self) -> f64 {
        self.s
    }
}

#[derive(Debug, Clone)]
pub struct FhocpProblem<'a> {
    params: &'a GruParams,
    weights: &'a CostWeights,
    constraints: &'a OutputConstraints,
    schedule: &'a TighteningSchedule,
    equilibrium: &'a Equilibrium,
    alpha: f64,
    x0: Vec<f64>,
    e_o: f64,
    lu: Matrix,
    /// `h − a_i ê_o − b_i − w_L − L b_o` per stage.
    bounds: Vec<Vec<f64>>,
}

impl<'a> FhocpProblem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &'a GruParams,
        weights: &'a CostWeights,
        constraints: &'a OutputConstraints,
        schedule: &'a TighteningSchedule,
        equilibrium: &'a Equilibrium,
        alpha: f64,
        x0: &[f64],
        e_o: f64,
    ) -> Result<Self> {
        let (n, m) = (params.n(), params.m());
        check_len("Q", n, weights.q.rows())?;
        check_len("R", m, weights.r.rows())?;
        check_len("constraint columns", params.p(), constraints.p())?;
        check_len("schedule rows", constraints.q(), schedule.w_l.len())?;
        check_len("x̄", n, equilibrium.x_bar.len())?;
        check_len("ū", m, equilibrium.u_bar.len())?;
        check_len("initial state", n, x0.len())?;
        check_finite("initial state", x0)?;
        if !(alpha > 0.0) {
            return Err(Error::Precondition(format!(
                "terminal radius α = {alpha} must be positive"
            )));
        }
        if !(e_o >= 0.0) || !e_o.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ê_o = {e_o} must be finite and nonnegative"
            )));
        }
        let lu = constraints.l().matmul(&params.u_o)?;
        let lb = constraints.l().mul_vec(&params.b_o);
        let bounds = (0..schedule.horizon)
            .map(|i| {
                let mut b = schedule.tightened_bound(constraints, i, e_o);
                b.iter_mut().zip(&lb).for_each(|(v, l)| *v -= l);
                b
            })
            .collect();
        Ok(Self {
            params,
            weights,
            constraints,
            schedule,
            equilibrium,
            alpha,
            x0: x0.to_vec(),
            e_o,
            lu,
            bounds,
        })
    }

    pub fn horizon(&self) -> usize {
        self.schedule.horizon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn e_o(&self) -> f64 {
        self.e_o
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn equilibrium(&self) -> &Equilibrium {
        self.equilibrium
    }

    pub fn constraints(&self) -> &OutputConstraints {
        self.constraints
    }

    fn check_sequence(&self, u_seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_len("input sequence length", self.horizon(), u_seq.len())?;
        let mut flat = Vec::with_capacity(self.horizon() * self.params.m());
        for u in u_seq {
            check_len("input", self.params.m(), u.len())?;
            check_finite("input sequence", u)?;
            flat.extend_from_slice(u);
        }
        Ok(flat)
    }

    fn stage_cost(&self, ro: &Rollout, u: &[f64]) -> f64 {
        let (n, m) = (self.params.n(), self.params.m());
        let eq = self.equilibrium;
        let mut dx = vec![0.0; n];
        let mut du = vec![0.0; m];
        let mut cost = 0.0;
        for i in 0..self.horizon() {
            for (d, (a, b)) in dx.iter_mut().zip(ro.state(i).iter().zip(&eq.x_bar)) {
                *d = a - b;
            }
            for (d, (a, b)) in du.iter_mut().zip(u[i * m..(i + 1) * m].iter().zip(&eq.u_bar)) {
                *d = a - b;
            }
            cost += quad_form(&self.weights.q, &dx) + quad_form(&self.weights.r, &du);
        }
        cost
    }

    fn terminal_distance(&self, ro: &Rollout) -> f64 {
        ro.state(self.horizon())
            .iter()
            .zip(&self.equilibrium.x_bar)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    fn true_cost(&self, ro: &Rollout, u: &[f64]) -> f64 {
        let d = self.terminal_distance(ro);
        self.stage_cost(ro, u) + self.weights.s * d * d
    }

    fn report(&self, ro: &Rollout, u: &[f64]) -> ConstraintReport {
        let (m, q) = (self.params.m(), self.constraints.q());
        let mut output = Vec::with_capacity(self.horizon());
        let mut input = Vec::with_capacity(self.horizon());
        let mut ly = vec![0.0; q];
        for i in 0..self.horizon() {
            ly.iter_mut().for_each(|v| *v = 0.0);
            self.lu.mul_vec_acc(ro.state(i), &mut ly);
            output.push(self.bounds[i].iter().zip(&ly).map(|(b, l)| b - l).collect::<Vec<f64>>());
            input.push(1.0 - inf_norm(&u[i * m..(i + 1) * m]));
        }
        let terminal = self.alpha - self.terminal_distance(ro);
        let worst = output
            .iter()
            .flatten()
            .chain(&input)
            .chain(core::iter::once(&terminal))
            .fold(0.0f64, |acc, &v| acc.min(v));
        ConstraintReport {
            output,
            input,
            terminal,
            max_violation: -worst,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// Tightened output slacks, `N × q`.
    pub output: Vec<Vec<f64>>,
    /// `1 − ‖u_i‖∞` per stage.
    pub input: Vec<f64>,
    /// `α − ‖x_N − x̄‖∞`.
    pub terminal: f64,
    /// Magnitude of the most negative slack, 0 if none is negative.
    pub max_violation: f64,
}

pub fn evaluate_cost(problem: &FhocpProblem, u_seq: &[Vec<f64>]) -> Result<f64> {
    let flat = problem.check_sequence(u_seq)?;
    let mut ro = Rollout::default();
    problem.params.rollout_into(&problem.x0, &flat, &mut ro);
    Ok(problem.true_cost(&ro, &flat))
}

pub fn evaluate_constraints(problem: &FhocpProblem, u_seq: &[Vec<f64>]) -> Result<ConstraintReport> {
    let flat = problem.check_sequence(u_seq)?;
    let mut ro = Rollout::default();
    problem.params.rollout_into(&problem.x0, &flat, &mut ro);
    Ok(problem.report(&ro, &flat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhocpSolution {
    pub u_opt: Vec<Vec<f64>>,
    pub x_pred: Vec<Vec<f64>>,
    pub cost: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Shift-and-append candidate `[u*_1, …, u*_{N−1}, ū]`.
pub fn build_candidate(prev: &FhocpSolution, u_bar: &[f64]) -> Result<Vec<Vec<f64>>> {
    if prev.u_opt.is_empty() {
        return Err(Error::InvalidArgument("previous solution is empty".into()));
    }
    let mut c: Vec<Vec<f64>> = prev.u_opt[1..].to_vec();
    c.push(u_bar.to_vec());
    Ok(c)
}

/// Augmented-Lagrangian state and work buffers for one solve.
struct Workspace {
    ro: Rollout,
    scratch: VjpScratch,
    lambda: Vec<f64>,
    mu: f64,
    gx: Vec<f64>,
    gnext: Vec<f64>,
    tmp: Vec<f64>,
    ly: Vec<f64>,
}

impl Workspace {
    fn new(problem: &FhocpProblem, lambda: Vec<f64>, mu: f64) -> Self {
        let n = problem.params.n();
        Self {
            ro: Rollout::default(),
            scratch: VjpScratch::default(),
            lambda,
            mu,
            gx: vec![0.0; n],
            gnext: vec![0.0; n],
            tmp: vec![0.0; n],
            ly: vec![0.0; problem.constraints.q()],
        }
    }
}

/// Augmented-Lagrangian merit of `z = [u_0, …, u_{N−1}, t]` for multipliers
/// `lambda` and penalty `mu`; fills `grad` with its reverse-mode gradient.
pub fn merit_with_gradient(
    problem: &FhocpProblem,
    z: &[f64],
    lambda: &[f64],
    mu: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let dim = problem.horizon() * problem.params.m() + 1;
    check_len("decision vector", dim, z.len())?;
    check_len("multipliers", problem.num_constraints(), lambda.len())?;
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty μ = {mu} must be positive")));
    }
    let mut ws = Workspace::new(problem, lambda.to_vec(), mu);
    let mut g = Vec::new();
    match grad {
        Some(gr) => {
            check_len("gradient", dim, gr.len())?;
            Ok(problem.merit(&mut ws, z, Some(gr), &mut g))
        }
        None => Ok(problem.merit(&mut ws, z, None, &mut g)),
    }
}

/// Number of inequality rows in the augmented Lagrangian.
pub fn num_merit_constraints(problem: &FhocpProblem) -> usize {
    problem.num_constraints()
}

impl<'a> FhocpProblem<'a> {
    fn num_constraints(&self) -> usize {
        self.horizon() * self.constraints.q() + 2 * self.params.n()
    }

    /// Inequality residuals `g(z) ≤ 0` after a rollout of `z`.
    fn residuals(&self, ws: &mut Workspace, z: &[f64], out: &mut Vec<f64>) {
        let (n, q, nh) = (self.params.n(), self.constraints.q(), self.horizon());
        let t = z[z.len() - 1];
        out.clear();
        for i in 0..nh {
            ws.ly.iter_mut().for_each(|v| *v = 0.0);
            self.lu.mul_vec_acc(ws.ro.state(i), &mut ws.ly);
            out.extend((0..q).map(|j| ws.ly[j] - self.bounds[i][j]));
        }
        let xn = ws.ro.state(nh);
        for j in 0..n {
            let d = xn[j] - self.equilibrium.x_bar[j];
            out.push(d - t);
            out.push(-d - t);
        }
    }

    /// Augmented Lagrangian value; fills `grad` when given.
    fn merit(&self, ws: &mut Workspace, z: &[f64], grad: Option<&mut [f64]>, g: &mut Vec<f64>) -> f64 {
        let (n, m, q, nh) = (self.params.n(), self.params.m(), self.constraints.q(), self.horizon());
        let u = &z[..nh * m];
        let t = z[nh * m];
        self.params.rollout_into(&self.x0, u, &mut ws.ro);
        self.residuals(ws, z, g);
        let mu = ws.mu;
        let mut val = self.stage_cost(&ws.ro, u) + self.weights.s * t * t;
        // p_k = max(0, λ_k + μ g_k) overwrites g
        for (gk, lk) in g.iter_mut().zip(&ws.lambda) {
            let p = (lk + mu * *gk).max(0.0);
            val += (p * p - lk * lk) / (2.0 * mu);
            *gk = p;
        }
        let Some(grad) = grad else {
            return val;
        };
        grad.iter_mut().for_each(|v| *v = 0.0);
        let eq = self.equilibrium;
        let p = &*g;
        let term = &p[nh * q..];
        ws.gnext.iter_mut().for_each(|v| *v = 0.0);
        let mut gt = 2.0 * self.weights.s * t;
        for j in 0..n {
            ws.gnext[j] = term[2 * j] - term[2 * j + 1];
            gt -= term[2 * j] + term[2 * j + 1];
        }
        grad[nh * m] = gt;
        for i in (0..nh).rev() {
            let x = ws.ro.state(i);
            // local terms at x_i
            ws.gx.iter_mut().for_each(|v| *v = 0.0);
            for (d, (a, b)) in ws.tmp.iter_mut().zip(x.iter().zip(&eq.x_bar)) {
                *d = a - b;
            }
            crate::linalg::quad_form_grad(&self.weights.q, &ws.tmp[..n], &mut ws.gx);
            self.lu.tr_mul_vec_acc(&p[i * q..(i + 1) * q], &mut ws.gx);
            let ui = &u[i * m..(i + 1) * m];
            let gu = &mut grad[i * m..(i + 1) * m];
            let du: Vec<f64> = ui.iter().zip(&eq.u_bar).map(|(a, b)| a - b).collect();
            crate::linalg::quad_form_grad(&self.weights.r, &du, gu);
            self.params.step_vjp(
                x,
                ui,
                ws.ro.gates(i),
                &ws.gnext,
                &mut ws.gx,
                Some(gu),
                None,
                &mut ws.scratch,
            );
            core::mem::swap(&mut ws.gx, &mut ws.gnext);
        }
        val
    }

    fn project(&self, z: &mut [f64]) {
        let last = z.len() - 1;
        for v in z[..last].iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        z[last] = z[last].max(0.0).min(self.alpha);
    }
}

/// Solves the FHOCP from `warm_start` (constant `ū` when absent). Returns the
/// lowest-cost iterate whose violation is within tolerance, or the
/// least-violating iterate with status `Infeasible`.
pub fn solve(problem: &FhocpProblem, warm_start: Option<&[Vec<f64>]>, opts: &SolverOptions) -> Result<FhocpSolution> {
    let (m, nh) = (problem.params.m(), problem.horizon());
    let start: Vec<Vec<f64>> = match warm_start {
        Some(w) => w.to_vec(),
        None => vec![problem.equilibrium.u_bar.clone(); nh],
    };
    let flat = problem.check_sequence(&start)?;
    let dim = nh * m + 1;
    let mut ws = Workspace::new(problem, vec![0.0; problem.num_constraints()], 10.0);

    let mut z = flat.clone();
    z.push(0.0);
    problem.project(&mut z);
    problem.params.rollout_into(&problem.x0, &z[..nh * m], &mut ws.ro);
    z[nh * m] = problem.terminal_distance(&ws.ro).min(problem.alpha);

    // Best iterate bookkeeping: (violation-adjusted key, cost, u)
    let mut best_feasible: Option<(f64, Vec<f64>)> = None;
    let mut least_violating: (f64, f64, Vec<f64>) = (f64::INFINITY, f64::INFINITY, Vec::new());
    let mut consider = |ws: &Workspace, u: &[f64]| {
        let rep = problem.report(&ws.ro, u);
        let cost = problem.true_cost(&ws.ro, u);
        if rep.max_violation <= opts.feasibility_tol {
            if best_feasible.as_ref().map_or(true, |(c, _)| cost < *c) {
                best_feasible = Some((cost, u.to_vec()));
            }
        } else if rep.max_violation < least_violating.0 {
            least_violating = (rep.max_violation, cost, u.to_vec());
        }
    };
    // the warm start itself, unprojected
    problem.params.rollout_into(&problem.x0, &flat, &mut ws.ro);
    consider(&ws, &flat);

    let mut g = Vec::with_capacity(problem.num_constraints());
    let mut grad = vec![0.0; dim];
    let mut grad_new = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut iterations = 0;
    let mut converged = false;
    let mut prev_violation = f64::INFINITY;
    let mut step = 1.0;

    for _ in 0..opts.max_outer {
        let mut val = problem.merit(&mut ws, &z, Some(&mut grad), &mut g);
        let mut inner_converged = false;
        for _ in 0..opts.max_inner {
            iterations += 1;
            // projected-gradient stationarity
            let mut pg = 0.0f64;
            for k in 0..dim {
                trial[k] = z[k] - grad[k];
            }
            problem.project(&mut trial);
            for k in 0..dim {
                pg = pg.max((trial[k] - z[k]).abs());
            }
            if pg <= opts.gradient_tol {
                inner_converged = true;
                break;
            }
            // spectral step along the projected direction, Armijo backtracking
            for k in 0..dim {
                trial[k] = z[k] - step * grad[k];
            }
            problem.project(&mut trial);
            let d: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
            let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            let mut accepted = false;
            let mut new_val = val;
            for _ in 0..60 {
                for k in 0..dim {
                    trial[k] = z[k] + t * d[k];
                }
                new_val = problem.merit(&mut ws, &trial, Some(&mut grad_new), &mut g);
                if new_val <= val + 1e-4 * t * slope {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                inner_converged = true;
                break;
            }
            let mut ss = 0.0;
            let mut sy = 0.0;
            for k in 0..dim {
                let s = trial[k] - z[k];
                ss += s * s;
                sy += s * (grad_new[k] - grad[k]);
            }
            step = if sy > 0.0 {
                (ss / sy).clamp(1e-10, 1e10)
            } else {
                (step * 2.0).min(1e10)
            };
            let improvement = val - new_val;
            z.copy_from_slice(&trial);
            core::mem::swap(&mut grad, &mut grad_new);
            val = new_val;
            consider(&ws, &z[..nh * m]);
            if improvement <= 1e-15 * val.abs().max(1e-300) {
                inner_converged = true;
                break;
            }
        }

        // multiplier update from the true residuals at z
        problem.params.rollout_into(&problem.x0, &z[..nh * m], &mut ws.ro);
        problem.residuals(&mut ws, &z, &mut g);
        let violation = g.iter().fold(0.0f64, |a, &v| a.max(v));
        let mut lambda_change = 0.0f64;
        for (l, gk) in ws.lambda.iter_mut().zip(&g) {
            let new = (*l + ws.mu * gk).max(0.0);
            lambda_change = lambda_change.max((new - *l).abs());
            *l = new;
        }
        if violation <= opts.feasibility_tol && inner_converged && lambda_change <= opts.feasibility_tol.max(1e-9) {
            converged = true;
            break;
        }
        if violation > 0.25 * prev_violation && violation > opts.feasibility_tol {
            ws.mu = (ws.mu * 10.0).min(1e10);
        }
        prev_violation = violation;
    }

    let (u_flat, status) = match best_feasible {
        Some((_, u)) => (
            u,
            if converged {
                SolveStatus::Optimal
            } else {
                SolveStatus::FeasibleSuboptimal
            },
        ),
        None => (least_violating.2, SolveStatus::Infeasible),
    };
    let u_opt: Vec<Vec<f64>> = u_flat.chunks(m).map(|c| c.to_vec()).collect();
    problem.params.rollout_into(&problem.x0, &u_flat, &mut ws.ro);
    let x_pred = (0..=nh).map(|i| ws.ro.state(i).to_vec()).collect();
    let rep = problem.report(&ws.ro, &u_flat);
    Ok(FhocpSolution {
        cost: problem.true_cost(&ws.ro, &u_flat),
        max_violation: rep.max_violation,
        u_opt,
        x_pred,
        iterations,
        status,
    })
}

/// Active set-point of a controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub equilibrium: Equilibrium,
    pub alpha: f64,
}

/// Outcome of one receding-horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub u: Vec<f64>,
    pub solution: FhocpSolution,
    /// Violation of the shifted previous solution in the current problem;
    /// `None` at the first step and right after a reference change.
    pub candidate_violation: Option<f64>,
    /// `min_i ρ_s^{i−1}(L_max ê_{o,k−1} + w̄) − ‖x̃_{i−1|k} − x*_{i|k−1}‖∞`.
    pub epsilon_slack: Option<f64>,
    pub candidate_cost: Option<f64>,
}

impl MpcStep {
    pub fn is_infeasible(&self) -> bool {
        self.solution.status == SolveStatus::Infeasible
    }
}

/// Receding-horizon controller; keeps the previous solution for warm starts
/// and the candidate audit.
#[derive(Debug, Clone)]
pub struct MpcController {
    params: GruParams,
    weights: CostWeights,
    constraints: OutputConstraints,
    schedule: TighteningSchedule,
    options: SolverOptions,
    reference: Reference,
    reference_changed: bool,
    prev: Option<(FhocpSolution, f64)>,
}

impl MpcController {
    pub fn new(
        params: GruParams,
        weights: CostWeights,
        constraints: OutputConstraints,
        schedule: TighteningSchedule,
        options: SolverOptions,
        reference: Reference,
    ) -> Result<Self> {
        let ctl = Self {
            params,
            weights,
            constraints,
            schedule,
            options,
            reference,
            reference_changed: false,
            prev: None,
        };
        // validates dimensions once
        ctl.problem(&vec![0.0; ctl.params.n()], 0.0)?;
        Ok(ctl)
    }

    pub fn problem(&self, x_hat: &[f64], e_o: f64) -> Result<FhocpProblem<'_>> {
        FhocpProblem::new(
            &self.params,
            &self.weights,
            &self.constraints,
            &self.schedule,
            &self.reference.equilibrium,
            self.reference.alpha,
            x_hat,
            e_o,
        )
    }

    pub fn set_reference(&mut self, reference: Reference) -> Result<()> {
        check_len("x̄", self.params.n(), reference.equilibrium.x_bar.len())?;
        if !(reference.alpha > 0.0) {
            return Err(Error::Precondition(format!(
                "terminal radius α = {} must be positive",
                reference.alpha
            )));
        }
        self.reference = reference;
        self.reference_changed = true;
        Ok(())
    }

    pub fn reference(&self) -> &Reference {
        &self.reference
    }

    pub fn schedule(&self) -> &TighteningSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &GruParams {
        &self.params
    }

    pub fn last_solution(&self) -> Option<&FhocpSolution> {
        self.prev.as_ref().map(|(s, _)| s)
    }

    pub fn mpc_step(&mut self, x_hat: &[f64], e_o: f64) -> Result<MpcStep> {
        let problem = self.problem(x_hat, e_o)?;
        let mut candidate = None;
        let mut candidate_violation = None;
        let mut candidate_cost = None;
        let mut epsilon_slack = None;
        if let Some((prev, prev_e_o)) = &self.prev {
            let cand = build_candidate(prev, &self.reference.equilibrium.u_bar)?;
            let flat: Vec<f64> = cand.iter().flatten().copied().collect();
            let mut ro = Rollout::default();
            self.params.rollout_into(x_hat, &flat, &mut ro);
            let s = &self.schedule;
            let base = s.l_max * prev_e_o + s.w_bar;
            let mut slack = f64::INFINITY;
            let mut rho = 1.0;
            for i in 1..=problem.horizon() {
                let d = ro
                    .state(i - 1)
                    .iter()
                    .zip(&prev.x_pred[i])
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                slack = slack.min(rho * base - d);
                rho *= s.rho_s;
            }
            epsilon_slack = Some(slack);
            if !self.reference_changed {
                candidate_violation = Some(problem.report(&ro, &flat).max_violation);
                candidate_cost = Some(problem.true_cost(&ro, &flat));
            }
            candidate = Some(cand);
        }
        let solution = solve(&problem, candidate.as_deref(), &self.options)?;
        let u = solution.u_opt[0].clone();
        self.prev = Some((solution.clone(), e_o));
        self.reference_changed = false;
        Ok(MpcStep {
            u,
            solution,
            candidate_violation,
            epsilon_slack,
            candidate_cost,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::tests::weights_from;
    use crate::gru::{find_equilibrium, stability_metrics, EquilibriumOptions, GruWeights};
    use crate::observer::{observer_metrics, ObserverGains};
    use crate::tightening::{build_schedule, compute_alpha};
    use alloc::vec;

    struct Setup {
        params: GruParams,
        weights: CostWeights,
        constraints: OutputConstraints,
        schedule: TighteningSchedule,
        eq: Equilibrium,
        alpha: f64,
    }

    fn setup(params: GruParams, horizon: usize, y_bar: &[f64], e_o: f64, w_bar: f64) -> Setup {
        let p = params.p();
        let constraints = OutputConstraints::from_box(&vec![-1.0; p], &vec![1.0; p]).unwrap();
        let cert = stability_metrics(&params)
            .with_constraint_gain(&params, constraints.l())
            .unwrap();
        let metrics = observer_metrics(&params, &ObserverGains::zeros(&params), constraints.l()).unwrap();
        let schedule = build_schedule(&cert, &metrics, w_bar, vec![0.0; 2 * p], horizon).unwrap();
        let eq = find_equilibrium(&params, y_bar, &EquilibriumOptions::default()).unwrap();
        let alpha = compute_alpha(&eq.y_bar, &constraints, &schedule, e_o).unwrap();
        let weights = CostWeights::new(
            Matrix::identity(params.n()),
            Matrix::identity(params.m()).scaled(0.01),
            None,
            &cert,
        )
        .unwrap();
        Setup {
            params,
            weights,
            constraints,
            schedule,
            eq,
            alpha,
        }
    }

    fn model() -> GruParams {
        let vals: Vec<f64> = (0..60).map(|i| 0.15 * libm::sin(1.7 * i as f64 + 0.3)).collect();
        let mut w = weights_from(2, 2, 2, &vals).into_weights();
        w.w_h = Matrix::from_rows(&[vec![0.9, 0.2], vec![-0.3, 0.8]]).unwrap();
        w.u_o = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.7]]).unwrap();
        w.b_o = vec![0.0, 0.0];
        w.build().unwrap()
    }

    fn cert_with(rho_s: f64) -> StabilityCertificate {
        StabilityCertificate {
            sigma_bar_z: 0.5,
            sigma_bar_r: 0.5,
            phi_bar_h: 0.0,
            nu: 0.0,
            rho_s,
            c_s: vec![],
            delta_iss: true,
            uz_norm: 0.0,
            ur_norm: 0.0,
            uh_norm: 0.0,
        }
    }

    #[test]
    fn terminal_weight_values() {
        assert!((terminal_weight(&Matrix::identity(2), &cert_with(0.5)).unwrap() - 2.0 / 0.75).abs() < 1e-15);
        assert_eq!(
            terminal_weight(&Matrix::from_rows(&[vec![4.0]]).unwrap(), &cert_with(0.0)).unwrap(),
            4.0
        );
        assert!(terminal_weight(&Matrix::zeros(1, 1), &cert_with(0.5)).is_err());
        assert!(terminal_weight(&Matrix::identity(1), &cert_with(1.0)).is_err());
        let nonsym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(terminal_weight(&nonsym, &cert_with(0.5)).is_err());
        assert!(CostWeights::new(Matrix::identity(1), Matrix::identity(1), Some(1.0), &cert_with(0.5)).is_err());
    }

    fn zero_model_setup(horizon: usize) -> Setup {
        let p = GruWeights::zeros(1, 1, 1).build().unwrap();
        let mut s = setup(p, horizon, &[0.0], 0.0, 0.0);
        s.weights = CostWeights::new(
            Matrix::identity(1),
            Matrix::identity(1),
            None,
            &stability_metrics(&s.params),
        )
        .unwrap();
        s
    }

    #[test]
    fn cost_examples() {
        let s = zero_model_setup(1);
        assert!((s.weights.s - 4.0 / 3.0).abs() < 1e-15);
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &[0.4],
            0.0,
        )
        .unwrap();
        let c = evaluate_cost(&prob, &[vec![0.0]]).unwrap();
        assert!((c - (0.16 + 4.0 / 3.0 * 0.04)).abs() < 1e-15);
        let at_eq = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &[0.0],
            0.0,
        )
        .unwrap();
        assert_eq!(evaluate_cost(&at_eq, &[vec![0.0]]).unwrap(), 0.0);
        assert!(evaluate_cost(&prob, &[vec![0.0], vec![0.0]]).is_err());

        let s2 = setup(model(), 4, &[0.2, -0.1], 0.0, 0.0);
        let mut doubled = s2.weights.clone();
        doubled.q = s2.weights.q.scaled(2.0);
        let x0 = [0.5, -0.4];
        let u = vec![vec![0.3, -0.2]; 4];
        let pa = FhocpProblem::new(
            &s2.params,
            &s2.weights,
            &s2.constraints,
            &s2.schedule,
            &s2.eq,
            s2.alpha,
            &x0,
            0.0,
        )
        .unwrap();
        let pb = FhocpProblem::new(
            &s2.params,
            &doubled,
            &s2.constraints,
            &s2.schedule,
            &s2.eq,
            s2.alpha,
            &x0,
            0.0,
        )
        .unwrap();
        let flat: Vec<f64> = u.iter().flatten().copied().collect();
        let mut ro = Rollout::default();
        s2.params.rollout_into(&x0, &flat, &mut ro);
        let stage_x: f64 = (0..4)
            .map(|i| quad_form(&s2.weights.q, &crate::linalg::sub(ro.state(i), &s2.eq.x_bar)))
            .sum();
        let diff = evaluate_cost(&pb, &u).unwrap() - evaluate_cost(&pa, &u).unwrap();
        assert!((diff - stage_x).abs() < 1e-14);
    }

    #[test]
    fn constraint_report() {
        let s = zero_model_setup(2);
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &[0.2],
            0.0,
        )
        .unwrap();
        let ok = evaluate_constraints(&prob, &[vec![0.1], vec![-0.2]]).unwrap();
        assert_eq!(ok.max_violation, 0.0);
        let bad = evaluate_constraints(&prob, &[vec![1.5], vec![0.0]]).unwrap();
        assert_eq!(bad.input[0], -0.5);
        assert_eq!(bad.max_violation, 0.5);
        // x_2 = 0.05 from x_0 = 0.2: radius 0.05 puts it on the surface
        let tight = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            0.05,
            &[0.2],
            0.0,
        )
        .unwrap();
        let rep = evaluate_constraints(&tight, &[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(rep.terminal, 0.0);
        assert!(FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            0.0,
            &[0.2],
            0.0
        )
        .is_err());
    }

    #[test]
    fn candidate_construction() {
        let sol = FhocpSolution {
            u_opt: vec![vec![1.0], vec![2.0], vec![3.0]],
            x_pred: vec![],
            cost: 0.0,
            max_violation: 0.0,
            iterations: 0,
            status: SolveStatus::Optimal,
        };
        assert_eq!(
            build_candidate(&sol, &[9.0]).unwrap(),
            vec![vec![2.0], vec![3.0], vec![9.0]]
        );
        let one = FhocpSolution {
            u_opt: vec![vec![1.0]],
            ..sol.clone()
        };
        assert_eq!(build_candidate(&one, &[9.0]).unwrap(), vec![vec![9.0]]);
        let flat = FhocpSolution {
            u_opt: vec![vec![9.0]; 3],
            ..sol.clone()
        };
        assert_eq!(build_candidate(&flat, &[9.0]).unwrap(), vec![vec![9.0]; 3]);
        let empty = FhocpSolution { u_opt: vec![], ..sol };
        assert!(build_candidate(&empty, &[9.0]).is_err());
    }

    #[test]
    fn equilibrium_start_is_optimal() {
        let s = setup(model(), 6, &[0.2, -0.1], 0.001, 0.0);
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &s.eq.x_bar,
            0.001,
        )
        .unwrap();
        let sol = solve(&prob, None, &SolverOptions::default()).unwrap();
        assert!(sol.cost <= 1e-9);
        for u in &sol.u_opt {
            assert!(inf_norm(&crate::linalg::sub(u, &s.eq.u_bar)) <= 1e-6);
        }
        assert_ne!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn matches_grid_oracle_on_scalar_model() {
        // x⁺ = 0.5 x + 0.5 tanh(u) on the zero-bias toy with W_h = 1
        let mut w = GruWeights::zeros(1, 1, 1);
        w.w_h[(0, 0)] = 1.0;
        w.u_o[(0, 0)] = 1.0;
        let p = w.build().unwrap();
        let s = setup(p, 2, &[0.3], 0.0, 0.0);
        let x0 = [-0.6];
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &x0,
            0.0,
        )
        .unwrap();
        let sol = solve(&prob, None, &SolverOptions::default()).unwrap();
        assert_ne!(sol.status, SolveStatus::Infeasible);

        let mut best = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let u = [vec![-1.0 + 0.01 * i as f64], vec![-1.0 + 0.01 * j as f64]];
                if evaluate_constraints(&prob, &u).unwrap().max_violation <= 1e-6 {
                    best = best.min(evaluate_cost(&prob, &u).unwrap());
                }
            }
        }
        assert!((sol.cost - best).abs() <= 1e-3, "{} vs {best}", sol.cost);
        assert!(sol.cost <= best + 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = setup(model(), 5, &[0.2, -0.1], 0.01, 0.0);
        let x0 = [0.6, -0.5];
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            0.05,
            &x0,
            0.01,
        )
        .unwrap();
        let dim = 5 * 2 + 1;
        let mut ws = Workspace::new(
            &prob,
            (0..prob.num_constraints()).map(|k| 0.1 * (k % 3) as f64).collect(),
            7.0,
        );
        let z: Vec<f64> = (0..dim)
            .map(|k| 0.4 * libm::sin(0.7 * k as f64 + 0.1))
            .map(|v| v.abs().min(0.9) * if v < 0.0 { -1.0 } else { 1.0 })
            .collect();
        let mut g = Vec::new();
        let mut grad = vec![0.0; dim];
        prob.merit(&mut ws, &z, Some(&mut grad), &mut g);
        for k in 0..dim {
            let h = 1e-6;
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (prob.merit(&mut ws, &zp, None, &mut g) - prob.merit(&mut ws, &zm, None, &mut g)) / (2.0 * h);
            let rel = (fd - grad[k]).abs() / grad[k].abs().max(1e-3);
            assert!(rel <= 1e-4, "k = {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn deterministic_and_warm_start_dominance() {
        let s = setup(model(), 8, &[0.2, -0.1], 0.01, 0.0);
        let x0 = [0.5, 0.4];
        let prob = FhocpProblem::new(
            &s.params,
            &s.weights,
            &s.constraints,
            &s.schedule,
            &s.eq,
            s.alpha,
            &x0,
            0.01,
        )
        .unwrap();
        let opts = SolverOptions::default();
        let a = solve(&prob, None, &opts).unwrap();
        let b = solve(&prob, None, &opts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.status, SolveStatus::Infeasible);
        let traj = s.params.simulate(&x0, &a.u_opt).unwrap();
        for (i, (x, _)) in traj.iter().enumerate() {
            assert!(inf_norm(&crate::linalg::sub(x, &a.x_pred[i])) <= 1e-12);
        }
        let ws: Vec<Vec<f64>> = (0..8).map(|i| vec![0.1 * i as f64 - 0.4, 0.2]).collect();
        let sol = solve(&prob, Some(&ws), &opts).unwrap();
        if evaluate_constraints(&prob, &ws).unwrap().max_violation <= 1e-6 {
            assert!(sol.cost <= evaluate_cost(&prob, &ws).unwrap() + 1e-9);
        }
        assert!(sol.cost <= evaluate_cost(&prob, &a.u_opt).unwrap() + 1e-3);
    }

    #[test]
    fn terminal_set_implies_output_safety() {
        let s = setup(model(), 6, &[0.2, -0.1], 0.02, 0.003);
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let bound = s.schedule.tightened_bound(&s.constraints, 6, s.schedule.e_tilde(0.02));
        for _ in 0..2000 {
            let mut x: Vec<f64> = s.eq.x_bar.iter().map(|v| v + s.alpha * (2.0 * next() - 1.0)).collect();
            let j = (next() * 2.0) as usize;
            x[j] = s.eq.x_bar[j] + if next() < 0.5 { s.alpha } else { -s.alpha };
            let y = s.params.output(&x).unwrap();
            let ly = s.constraints.l().mul_vec(&y);
            for r in 0..ly.len() {
                assert!(ly[r] <= bound[r] + 1e-9);
            }
        }
    }

    #[test]
    fn nominal_loop_cost_decreases_and_candidates_are_feasible() {
        let s = setup(model(), 8, &[0.2, -0.1], 0.0, 0.0);
        let mut ctl = MpcController::new(
            s.params.clone(),
            s.weights.clone(),
            s.constraints.clone(),
            s.schedule.clone(),
            SolverOptions::default(),
            Reference {
                equilibrium: s.eq.clone(),
                alpha: s.alpha,
            },
        )
        .unwrap();
        let mut x = vec![-0.4, 0.5];
        let mut last = f64::INFINITY;
        for k in 0..40 {
            let st = ctl.mpc_step(&x, 0.0).unwrap();
            assert!(!st.is_infeasible());
            assert!(
                st.solution.cost <= last + 1e-9,
                "step {k}: {} > {last}",
                st.solution.cost
            );
            if k > 0 {
                assert!(st.candidate_violation.unwrap() <= 1e-6);
                assert!(st.epsilon_slack.unwrap() >= -1e-9);
            }
            last = st.solution.cost;
            x = s.params.step(&x, &st.u).unwrap();
        }
        assert!(inf_norm(&crate::linalg::sub(&x, &s.eq.x_bar)) < 1e-3);
        let at_eq = ctl.mpc_step(&s.eq.x_bar, 0.0).unwrap();
        assert!(inf_norm(&crate::linalg::sub(&at_eq.u, &s.eq.u_bar)) < 1e-6);
    }
}
