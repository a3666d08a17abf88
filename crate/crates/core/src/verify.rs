//! Sampling-based verification suite. Every check draws from its own seeded
//! generator, so results do not depend on which other checks ran.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::closed_loop::{
    prepare_reference, run_closed_loop, ControlDesign, GruPlant, ReferenceChange, RunPlan, CANDIDATE_TOL,
};
use crate::error::Result;
use crate::fhocp::{merit_with_gradient, num_merit_constraints, FhocpProblem, Reference, SolverOptions};
use crate::gru::{contraction_gap_at_rate, inf_norm_square_gap, GruModel, GruParams, GruWeights};
use crate::linalg::inf_norm;
use crate::observer::{
    observer_correction_gap, observer_decrease_gap_with, observer_metrics, observer_step, ObserverGains,
};
use crate::tightening::{eo_closed_form, eo_step, UncertaintyState};
use crate::training::{nu_penalty, nu_penalty_grad, sequence_loss_grad, simulation_mse};

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Multiplies `ρ_s` in the contraction check; values below one inject a
    /// fault that the check must catch.
    pub rho_s_scale: f64,
    pub loop_steps: usize,
    pub iss_steps: usize,
    pub solver: SolverOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 7,
            rho_s_scale: 1.0,
            loop_steps: 30,
            iss_steps: 500,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub samples: usize,
    /// Smallest slack seen (negative means violated), or the largest error
    /// for the gradient checks.
    pub worst: f64,
    pub detail: String,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        })
        .collect()
}

struct Slack {
    worst: f64,
    count: usize,
}

impl Slack {
    fn new() -> Self {
        Self {
            worst: f64::INFINITY,
            count: 0,
        }
    }

    fn add(&mut self, v: f64) {
        self.count += 1;
        // NaN must register as a failure
        self.worst = if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            self.worst.min(v)
        };
    }

    fn result(self, name: &'static str, tol: f64, detail: String) -> CheckResult {
        CheckResult {
            name,
            passed: self.worst >= -tol,
            samples: self.count,
            worst: self.worst,
            detail,
        }
    }
}

fn failed(name: &'static str, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed: false,
        samples: 0,
        worst: f64::NAN,
        detail,
    }
}

/// Runs every check against `model`, the observer `gains` and a design built
/// from them. `references` are normalized set-point candidates; the first
/// admissible one drives the solver and loop checks.
pub fn run_verify(
    model: &GruModel,
    gains: &ObserverGains,
    design: &ControlDesign,
    references: &[Vec<f64>],
    opts: &VerifyOptions,
) -> Vec<CheckResult> {
    let params = &model.params;
    let rng = |k: u64| ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(k));
    let mut out = Vec::new();

    out.push(certificate_check(design));
    out.push(contraction_check(
        params,
        design.certificate.rho_s * opts.rho_s_scale,
        opts.samples,
        &mut rng(1),
    ));
    out.push(box_and_gate_check(design, params, opts.samples, &mut rng(2)));
    out.push(zero_gain_bitmatch(params, opts.samples, &mut rng(3)));
    let zero = ObserverGains::zeros(params);
    for (tag, g) in [(0u64, &zero), (1, gains)] {
        out.extend(observer_checks(
            design,
            params,
            g,
            tag == 0,
            opts.samples,
            &mut rng(4 + tag),
        ));
    }
    out.push(iss_decay_check(design, params, gains, opts.iss_steps, &mut rng(6)));
    out.push(inf_norm_square_check(opts.samples * 10, &mut rng(7)));
    out.push(uncertainty_check(design));
    out.push(training_gradient_check(params, &mut rng(8)));
    out.push(penalty_gradient_check(params));

    let reference = references
        .iter()
        .find_map(|r| prepare_reference(params, design, r, design.e_o_0).ok());
    match reference {
        Some(r) => {
            out.push(terminal_set_check(design, params, &r, opts.samples, &mut rng(9)));
            out.push(solver_gradient_check(design, params, &r, &mut rng(10)));
            out.push(loop_check(model, design, &r, opts));
        }
        None => {
            for name in ["terminal_set", "fhocp_gradient", "closed_loop"] {
                out.push(failed(name, "no admissible set-point among the candidates".into()));
            }
        }
    }
    out
}

fn certificate_check(design: &ControlDesign) -> CheckResult {
    let c = &design.certificate;
    let rho = c.sigma_bar_z + (1.0 - c.sigma_bar_z) * c.nu;
    let ok = c.delta_iss && c.nu < c.rho_s && c.rho_s < 1.0 && (rho - c.rho_s).abs() <= 1e-15;
    CheckResult {
        name: "certificate",
        passed: ok,
        samples: 1,
        worst: 1.0 - c.rho_s,
        detail: format!("ν = {}, ρ_s = {}", c.nu, c.rho_s),
    }
}

fn contraction_check(params: &GruParams, rho: f64, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let (n, m) = (params.n(), params.m());
    let mut s = Slack::new();
    for _ in 0..samples {
        let xa = uniform(rng, n, 1.0);
        let xb = uniform(rng, n, 1.0);
        let u = uniform(rng, m, 1.0);
        s.add(contraction_gap_at_rate(params, rho, &xa, &xb, &u).unwrap_or(f64::NAN));
    }
    s.result("contraction", 1e-12, format!("rate {rho}"))
}

fn box_and_gate_check(design: &ControlDesign, params: &GruParams, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let c = &design.certificate;
    let (n, m) = (params.n(), params.m());
    let mut s = Slack::new();
    for _ in 0..samples {
        let x = uniform(rng, n, 1.0);
        let u = uniform(rng, m, 1.0);
        let Ok((xp, g)) = params.step_with_gates(&x, &u) else {
            s.add(f64::NAN);
            continue;
        };
        s.add(1.0 - inf_norm(&xp));
        for j in 0..n {
            s.add(c.sigma_bar_z - g.z[j]);
            s.add(g.z[j] - (1.0 - c.sigma_bar_z));
            s.add(c.sigma_bar_r - g.r[j].abs());
            s.add(c.phi_bar_h - g.h[j].abs());
        }
    }
    s.result("state_box_and_gates", 1e-12, String::new())
}

fn zero_gain_bitmatch(params: &GruParams, samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let zero = ObserverGains::zeros(params);
    let (n, m, p) = (params.n(), params.m(), params.p());
    let mut s = Slack::new();
    for _ in 0..samples {
        let x = uniform(rng, n, 1.0);
        let u = uniform(rng, m, 1.0);
        let y = uniform(rng, p, 2.0);
        let same = matches!((observer_step(params, &zero, &x, &u, &y), params.step(&x, &u)), (Ok(a), Ok(b)) if a == b);
        s.add(if same { 0.0 } else { -1.0 });
    }
    s.result("zero_gain_bitmatch", 0.0, String::new())
}

fn observer_checks(
    design: &ControlDesign,
    params: &GruParams,
    gains: &ObserverGains,
    zero: bool,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<CheckResult> {
    let l = design.constraints.l();
    let metrics = match observer_metrics(params, gains, l) {
        Ok(mt) => mt,
        Err(e) => return vec![failed("observer_metrics", format!("{e}"))],
    };
    let (n, m, p) = (params.n(), params.m(), params.p());
    let wb = design.w_bar_y.max(0.1);
    let lu = l
        .matmul(&params.weights().u_o)
        .expect("constraint matrix matches outputs");
    let (mut a, mut b, mut c) = (Slack::new(), Slack::new(), Slack::new());
    for _ in 0..samples {
        let x = uniform(rng, n, 1.0);
        let xh = uniform(rng, n, 1.0);
        let u = uniform(rng, m, 1.0);
        let w = uniform(rng, p, wb);
        a.add(
            observer_decrease_gap_with(params, gains, (metrics.rho_o, metrics.kappa), &x, &xh, &u, &w)
                .unwrap_or(f64::NAN),
        );
        c.add(
            observer_correction_gap(params, gains, (metrics.l_max, metrics.kappa), &x, &xh, &u, &w).unwrap_or(f64::NAN),
        );
        let e: Vec<f64> = x.iter().zip(&xh).map(|(p, q)| p - q).collect();
        let en = inf_norm(&e);
        for (j, v) in lu.mul_vec(&e).iter().enumerate() {
            b.add(metrics.c_o[j] * en - v);
        }
    }
    let tag = if zero { "zero gains" } else { "configured gains" };
    let (na, nb, nc) = if zero {
        (
            "observer_decrease_zero",
            "observer_output_zero",
            "observer_correction_zero",
        )
    } else {
        ("observer_decrease", "observer_output", "observer_correction")
    };
    vec![
        a.result(
            na,
            1e-12,
            format!("{tag}: ρ_o = {}, κ = {}", metrics.rho_o, metrics.kappa),
        ),
        b.result(nb, 1e-12, format!("{tag}")),
        c.result(nc, 1e-12, format!("{tag}: L_max = {}", metrics.l_max)),
    ]
}

/// Observer error along one disturbed trajectory of the model itself,
/// against `ρ_o^k e_0 + κ w̄_y / (1 − ρ_o)`.
pub fn iss_decay_check(
    design: &ControlDesign,
    params: &GruParams,
    gains: &ObserverGains,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> CheckResult {
    let metrics = match observer_metrics(params, gains, design.constraints.l()) {
        Ok(mt) => mt,
        Err(e) => return failed("iss_decay", format!("{e}")),
    };
    let (n, m, p) = (params.n(), params.m(), params.p());
    let wb = if design.w_bar_y > 0.0 { design.w_bar_y } else { 0.1 };
    let mut x = uniform(rng, n, 1.0);
    let mut xh = uniform(rng, n, 1.0);
    let e0 = inf_norm(&x.iter().zip(&xh).map(|(a, b)| a - b).collect::<Vec<_>>());
    let floor = metrics.kappa * wb / (1.0 - metrics.rho_o);
    let mut s = Slack::new();
    let mut decay = 1.0;
    for _ in 0..steps {
        let err = inf_norm(&x.iter().zip(&xh).map(|(a, b)| a - b).collect::<Vec<_>>());
        s.add(decay * e0 + floor - err);
        let u = uniform(rng, m, 1.0);
        let w = uniform(rng, p, wb);
        let mut y = params.output(&x).expect("sized");
        y.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
        let (Ok(nx), Ok(nxh)) = (params.step(&x, &u), observer_step(params, gains, &xh, &u, &y)) else {
            s.add(f64::NAN);
            break;
        };
        x = nx;
        xh = nxh;
        decay *= metrics.rho_o;
    }
    s.result("iss_decay", 1e-9, format!("e0 = {e0}, w̄_y = {wb}"))
}

fn inf_norm_square_check(samples: usize, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut s = Slack::new();
    for _ in 0..samples {
        let len = rng.gen_range(1..=20);
        let scale = libm::pow(10.0, rng.gen_range(-3.0..3.0));
        let x = uniform(rng, len, scale);
        let y = uniform(rng, len, scale);
        s.add(inf_norm_square_gap(&x, &y) / (scale * scale).max(1.0));
    }
    s.result("inf_norm_square", 1e-12, String::new())
}

fn uncertainty_check(design: &ControlDesign) -> CheckResult {
    let sched = &design.schedule;
    let Ok(mut state) = UncertaintyState::new(design.e_o_0, sched) else {
        return failed("uncertainty_propagation", "invalid ê_o,0".into());
    };
    let mut s = Slack::new();
    let e_inf = sched.e_inf;
    let mut prev_gap = (design.e_o_0 - e_inf).abs();
    for k in 0..=1000 {
        let closed = eo_closed_form(design.e_o_0, k, sched);
        let expected = libm::pow(sched.rho_o, k as f64) * (design.e_o_0 - e_inf).abs();
        let gap = state.distance_to_limit();
        if expected > 1e-290 {
            s.add(1e-12 - (gap - expected).abs() / expected);
        }
        s.add(1e-12 * closed.abs().max(1e-300) - (state.e_o() - closed).abs());
        s.add(prev_gap - gap);
        prev_gap = gap;
        state = eo_step(state, sched);
    }
    s.result("uncertainty_propagation", 0.0, format!("ē_∞ = {e_inf}"))
}

fn relative_errors(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn training_gradient_check(params: &GruParams, rng: &mut ChaCha8Rng) -> CheckResult {
    let (m, p) = (params.m(), params.p());
    let len = 40;
    let u: Vec<Vec<f64>> = (0..len).map(|_| uniform(rng, m, 1.0)).collect();
    let y: Vec<Vec<f64>> = (0..len).map(|_| uniform(rng, p, 1.0)).collect();
    let mut grads = GruWeights::zeros(params.n(), m, p);
    sequence_loss_grad(params, &u, &y, 5, &mut grads);
    let base = params.to_flat();
    let h = 1e-6;
    let fd: Vec<f64> = (0..base.len())
        .map(|k| {
            let eval = |d: f64| {
                let mut w = params.weights().clone();
                let mut f = base.clone();
                f[k] += d;
                w.set_flat(&f).expect("same shape");
                w.build().map(|pp| simulation_mse(&pp, &u, &y, 5)).unwrap_or(f64::NAN)
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    let err = relative_errors(&grads.to_flat(), &fd, 1e-3);
    CheckResult {
        name: "training_gradient",
        passed: err <= 1e-4,
        samples: base.len(),
        worst: err,
        detail: "max relative error".into(),
    }
}

fn penalty_gradient_check(params: &GruParams) -> CheckResult {
    let nu = crate::gru::stability_metrics(params).nu;
    // threshold at ν/2 keeps the penalty active
    let margin = 1.0 - 0.5 * nu;
    let (_, g) = nu_penalty_grad(params, margin);
    let base = params.to_flat();
    let h = 1e-7;
    let fd: Vec<f64> = (0..base.len())
        .map(|k| {
            let eval = |d: f64| {
                let mut w = params.weights().clone();
                let mut f = base.clone();
                f[k] += d;
                w.set_flat(&f).expect("same shape");
                w.build().map(|pp| nu_penalty(&pp, margin)).unwrap_or(f64::NAN)
            };
            (eval(h) - eval(-h)) / (2.0 * h)
        })
        .collect();
    let err = relative_errors(&g.to_flat(), &fd, 1e-3);
    CheckResult {
        name: "penalty_gradient",
        passed: err <= 1e-4,
        samples: base.len(),
        worst: err,
        detail: format!("ν = {nu}"),
    }
}

fn terminal_set_check(
    design: &ControlDesign,
    params: &GruParams,
    r: &Reference,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> CheckResult {
    let n = params.n();
    let sched = &design.schedule;
    let bound = sched.tightened_bound(&design.constraints, sched.horizon, sched.e_tilde(design.e_o_0));
    let l = design.constraints.l();
    // an unbounded terminal set still has to be safe on the whole state box
    let radius = if r.alpha.is_finite() { r.alpha } else { 2.0 };
    let mut s = Slack::new();
    for _ in 0..samples {
        let mut d = uniform(rng, n, 1.0);
        let j = rng.gen_range(0..n);
        d[j] = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let x: Vec<f64> = r
            .equilibrium
            .x_bar
            .iter()
            .zip(&d)
            .map(|(a, b)| a + radius * b)
            .collect();
        let y = params.output(&x).expect("sized");
        for (v, bnd) in l.mul_vec(&y).iter().zip(&bound) {
            s.add(bnd - v);
        }
    }
    s.result("terminal_set", 1e-9, format!("α = {}", r.alpha))
}

fn solver_gradient_check(
    design: &ControlDesign,
    params: &GruParams,
    r: &Reference,
    rng: &mut ChaCha8Rng,
) -> CheckResult {
    let (n, m) = (params.n(), params.m());
    let x0 = uniform(rng, n, 0.9);
    let problem = match FhocpProblem::new(
        params,
        &design.weights,
        &design.constraints,
        &design.schedule,
        &r.equilibrium,
        r.alpha,
        &x0,
        design.e_o_0,
    ) {
        Ok(p) => p,
        Err(e) => return failed("fhocp_gradient", format!("{e}")),
    };
    let dim = design.schedule.horizon * m + 1;
    let mut z = uniform(rng, dim - 1, 0.9);
    z.push(0.5 * r.alpha);
    let lambda: Vec<f64> = (0..num_merit_constraints(&problem))
        .map(|_| rng.gen_range(0.0..0.5))
        .collect();
    let mu = 5.0;
    let mut grad = vec![0.0; dim];
    if let Err(e) = merit_with_gradient(&problem, &z, &lambda, mu, Some(&mut grad)) {
        return failed("fhocp_gradient", format!("{e}"));
    }
    let h = 1e-6;
    let fd: Vec<f64> = (0..dim)
        .map(|k| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let f = |v: &[f64]| merit_with_gradient(&problem, v, &lambda, mu, None).unwrap_or(f64::NAN);
            (f(&zp) - f(&zm)) / (2.0 * h)
        })
        .collect();
    let err = relative_errors(&grad, &fd, 1e-3);
    CheckResult {
        name: "fhocp_gradient",
        passed: err <= 1e-4,
        samples: dim,
        worst: err,
        detail: "max relative error".into(),
    }
}

/// Short loop on the model itself with bounded output disturbance. Audits
/// candidate feasibility, the ε-propagation bound and the feasibility
/// condition at every step.
fn loop_check(model: &GruModel, design: &ControlDesign, r: &Reference, opts: &VerifyOptions) -> CheckResult {
    let params = &model.params;
    let x0 = r.equilibrium.x_bar.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(11));
    let offset = uniform(&mut rng, params.n(), design.e_o_0);
    let x_hat_0: Vec<f64> = x0
        .iter()
        .zip(&offset)
        .map(|(a, b)| (a + 0.5 * b).clamp(-1.0, 1.0))
        .collect();
    let lo = model.input_scaler.denormalize(&vec![-1.0; params.m()]);
    let hi = model.input_scaler.denormalize(&vec![1.0; params.m()]);
    let plan = RunPlan {
        steps: opts.loop_steps,
        references: vec![ReferenceChange {
            start: 0,
            y_bar: model.output_scaler.denormalize(&r.equilibrium.y_bar),
        }],
        solver: opts.solver.clone(),
        u_lower: lo,
        u_upper: hi,
        ts: 1.0,
        x_hat_0: Some(x_hat_0),
    };
    // plant and observer start on opposite sides of x̄, ê_o,0 apart
    let start: Vec<f64> = x0
        .iter()
        .zip(&offset)
        .map(|(a, b)| (a - 0.5 * b).clamp(-1.0, 1.0))
        .collect();
    let run = GruPlant::new(model.clone(), start, design.w_bar_y, opts.seed)
        .and_then(|mut plant| run_closed_loop(model, design, &plan, &mut plant));
    let run: Result<_> = run;
    match run {
        Err(e) => failed("closed_loop", format!("{e}")),
        Ok(run) => {
            let mut s = Slack::new();
            for rec in &run.log {
                if let Some(c) = rec.candidate_violation {
                    s.add(CANDIDATE_TOL - c);
                }
                if let Some(e) = rec.epsilon_slack {
                    s.add(e + 1e-9);
                }
                s.add(rec.feas_rhs - rec.feas_lhs);
            }
            let mut res = s.result("closed_loop", 0.0, format!("{} steps", run.log.len()));
            if let Some(f) = run.failure {
                res.passed = false;
                res.detail = format!("{f}");
            }
            res
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_loop::{design, DesignSpec};
    use crate::gru::tests::weights_from;
    use crate::gru::Scaler;
    use crate::linalg::Matrix;
    use crate::observer::{synthesize_gains, GainMode};

    fn spec(n: usize) -> DesignSpec {
        DesignSpec {
            horizon: 8,
            q_diag: vec![1.0; n],
            r_diag: vec![0.01; 2],
            s: None,
            e_o_0: 0.02,
            w_bar_y: 0.01,
            y_lower: vec![-1.0; 2],
            y_upper: vec![1.0; 2],
        }
    }

    fn quick() -> VerifyOptions {
        VerifyOptions {
            samples: 500,
            loop_steps: 10,
            iss_steps: 100,
            ..VerifyOptions::default()
        }
    }

    fn unit() -> Scaler {
        Scaler::new(vec![0.0; 2], vec![1.0; 2]).unwrap()
    }

    fn small_model() -> GruModel {
        let vals: Vec<f64> = (0..60).map(|i| 0.15 * libm::sin(1.7 * i as f64 + 0.3)).collect();
        let mut w = weights_from(2, 2, 2, &vals).into_weights();
        w.w_h = Matrix::from_rows(&[vec![0.9, 0.2], vec![-0.3, 0.8]]).unwrap();
        w.u_o = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.7]]).unwrap();
        w.b_o = vec![0.0, 0.0];
        GruModel::new(w.build().unwrap(), unit(), unit()).unwrap()
    }

    fn failures(r: &[CheckResult]) -> Vec<&CheckResult> {
        r.iter().filter(|c| !c.passed).collect()
    }

    #[test]
    fn zero_model_passes_everything() {
        let m = GruModel::new(GruWeights::zeros(3, 2, 2).build().unwrap(), unit(), unit()).unwrap();
        let gains = ObserverGains::zeros(&m.params);
        let d = design(&m, gains.clone(), &spec(3)).unwrap();
        let r = run_verify(&m, &gains, &d, &[vec![0.0, 0.0]], &quick());
        assert!(failures(&r).is_empty(), "{:?}", failures(&r));
    }

    #[test]
    fn certified_model_passes_with_both_gain_modes() {
        let m = small_model();
        for mode in [GainMode::OpenLoop, GainMode::MinNuO] {
            let gains = synthesize_gains(&m.params, mode).gains;
            let d = design(&m, gains.clone(), &spec(2)).unwrap();
            let r = run_verify(&m, &gains, &d, &[vec![0.2, 0.1]], &quick());
            assert!(failures(&r).is_empty(), "{mode:?}: {:?}", failures(&r));
        }
    }

    #[test]
    fn halved_contraction_rate_is_caught() {
        for m in [
            small_model(),
            GruModel::new(GruWeights::zeros(3, 2, 2).build().unwrap(), unit(), unit()).unwrap(),
        ] {
            let gains = ObserverGains::zeros(&m.params);
            let d = design(&m, gains.clone(), &spec(m.params.n())).unwrap();
            let opts = VerifyOptions {
                rho_s_scale: 0.5,
                ..quick()
            };
            let r = run_verify(&m, &gains, &d, &[vec![0.0, 0.0]], &opts);
            let names: Vec<&str> = failures(&r).iter().map(|c| c.name).collect();
            assert_eq!(names, vec!["contraction"], "{:?}", failures(&r));
        }
    }

    #[test]
    fn missing_setpoint_is_reported() {
        let m = small_model();
        let gains = ObserverGains::zeros(&m.params);
        let d = design(&m, gains.clone(), &spec(2)).unwrap();
        let r = run_verify(&m, &gains, &d, &[vec![5.0, 0.0]], &quick());
        let names: Vec<&str> = failures(&r).iter().map(|c| c.name).collect();
        assert_eq!(names, vec!["terminal_set", "fhocp_gradient", "closed_loop"]);
    }
}
