//! Closed-loop harness: observer, uncertainty propagation, MPC and plant in
//! one loop, with a per-step audit log.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fhocp::{CostWeights, MpcController, Reference, SolveStatus, SolverOptions};
use crate::gru::{find_equilibrium, stability_metrics, EquilibriumOptions, GruModel, GruParams, StabilityCertificate};
use crate::linalg::Matrix;
use crate::observer::{observer_metrics, observer_step, ObserverGains, ObserverMetrics};
use crate::plant::{plant_step, FourTankParams, PlantState};
use crate::tightening::{
    build_schedule, compute_alpha, compute_w_bar, compute_w_l, eo_step, feasibility_sides, setpoint_violations,
    OutputConstraints, TighteningSchedule, UncertaintyState,
};

/// Tolerance on the shifted-candidate violation.
pub const CANDIDATE_TOL: f64 = 1e-6;

/// A plant driven in physical units.
pub trait Plant {
    /// Output measured at the current step.
    fn measure(&mut self) -> Vec<f64>;
    /// Applies `u` for one sampling period.
    fn apply(&mut self, u: &[f64]) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct FourTankPlant {
    pub params: FourTankParams,
    pub state: PlantState,
}

impl FourTankPlant {
    pub fn new(params: FourTankParams, state: PlantState) -> Result<Self> {
        params.validate()?;
        Ok(Self { params, state })
    }
}

impl Plant for FourTankPlant {
    fn measure(&mut self) -> Vec<f64> {
        self.state.outputs().to_vec()
    }

    fn apply(&mut self, u: &[f64]) -> Result<()> {
        check_len("four-tank input", 2, u.len())?;
        self.state = plant_step(&self.state, u[0], u[1], &self.params, self.params.ts)?;
        Ok(())
    }
}

/// The GRU itself used as plant, optionally with a bounded uniform output
/// disturbance `w_y` (normalized units).
#[derive(Debug, Clone)]
pub struct GruPlant {
    pub model: GruModel,
    pub state: Vec<f64>,
    noise_bound: f64,
    rng: ChaCha8Rng,
    /// Disturbance drawn at the last `measure`.
    pub last_w_y: Vec<f64>,
}

impl GruPlant {
    pub fn new(model: GruModel, state: Vec<f64>, noise_bound: f64, seed: u64) -> Result<Self> {
        check_len("plant state", model.params.n(), state.len())?;
        if !(noise_bound >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise bound {noise_bound} must be nonnegative"
            )));
        }
        let p = model.params.p();
        Ok(Self {
            model,
            state,
            noise_bound,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_w_y: vec![0.0; p],
        })
    }
}

impl Plant for GruPlant {
    fn measure(&mut self) -> Vec<f64> {
        let mut y = self
            .model
            .params
            .output(&self.state)
            .expect("state sized at construction");
        for (yi, wi) in y.iter_mut().zip(self.last_w_y.iter_mut()) {
            *wi = if self.noise_bound > 0.0 {
                self.rng.gen_range(-self.noise_bound..=self.noise_bound)
            } else {
                0.0
            };
            *yi += *wi;
        }
        self.model.output_scaler.denormalize(&y)
    }

    fn apply(&mut self, u: &[f64]) -> Result<()> {
        let un = self.model.input_scaler.normalize(u);
        self.state = self.model.params.step(&self.state, &un)?;
        Ok(())
    }
}

/// Controller tuning, in normalized units except the output box.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub s: Option<f64>,
    pub e_o_0: f64,
    pub w_bar_y: f64,
    /// Physical output box.
    pub y_lower: Vec<f64>,
    pub y_upper: Vec<f64>,
}

/// Everything derived once from the model and the tuning.
#[derive(Debug, Clone)]
pub struct ControlDesign {
    pub certificate: StabilityCertificate,
    pub gains: ObserverGains,
    pub metrics: ObserverMetrics,
    pub constraints: OutputConstraints,
    pub schedule: TighteningSchedule,
    pub weights: CostWeights,
    pub e_o_0: f64,
    pub w_bar_y: f64,
}

/// Normalized output constraints for a physical box.
pub fn output_box(model: &GruModel, lower: &[f64], upper: &[f64]) -> Result<OutputConstraints> {
    check_len("output bounds", model.params.p(), lower.len())?;
    check_len("output bounds", model.params.p(), upper.len())?;
    OutputConstraints::from_box(
        &model.output_scaler.normalize(lower),
        &model.output_scaler.normalize(upper),
    )
}

/// Fails unless `ν < 1` and the observer converges.
pub fn check_certified(cert: &StabilityCertificate, metrics: &ObserverMetrics) -> Result<()> {
    if !cert.delta_iss {
        return Err(Error::Precondition(format!(
            "model is not δISS certified: ν = {}",
            cert.nu
        )));
    }
    if !metrics.convergent {
        return Err(Error::Precondition(format!(
            "observer is not convergent: ν_o = {}",
            metrics.nu_o
        )));
    }
    Ok(())
}

pub fn design(model: &GruModel, gains: ObserverGains, spec: &DesignSpec) -> Result<ControlDesign> {
    let params = &model.params;
    gains.validate(params)?;
    if !(spec.e_o_0 >= 0.0 && spec.w_bar_y >= 0.0) {
        return Err(Error::InvalidArgument("ê_o,0 and w̄_y must be nonnegative".into()));
    }
    check_len("Q diagonal", params.n(), spec.q_diag.len())?;
    check_len("R diagonal", params.m(), spec.r_diag.len())?;
    let constraints = output_box(model, &spec.y_lower, &spec.y_upper)?;
    let certificate = stability_metrics(params).with_constraint_gain(params, constraints.l())?;
    let metrics = observer_metrics(params, &gains, constraints.l())?;
    check_certified(&certificate, &metrics)?;
    let w_bar = compute_w_bar(metrics.kappa, spec.w_bar_y)?;
    let w_l = compute_w_l(&constraints, spec.w_bar_y)?;
    let schedule = build_schedule(&certificate, &metrics, w_bar, w_l, spec.horizon)?;
    let weights = CostWeights::new(
        Matrix::from_diag(&spec.q_diag),
        Matrix::from_diag(&spec.r_diag),
        spec.s,
        &certificate,
    )?;
    Ok(ControlDesign {
        certificate,
        gains,
        metrics,
        constraints,
        schedule,
        weights,
        e_o_0: spec.e_o_0,
        w_bar_y: spec.w_bar_y,
    })
}

/// Equilibrium and terminal radius for a normalized set-point, after the
/// set-point condition and the feasibility condition at `e_o` and at `ē_∞`.
pub fn prepare_reference(params: &GruParams, design: &ControlDesign, y_bar: &[f64], e_o: f64) -> Result<Reference> {
    let bad = setpoint_violations(y_bar, &design.constraints, &design.schedule, e_o)?;
    if !bad.is_empty() {
        return Err(Error::Precondition(format!(
            "set-point {y_bar:?} violates the tightened output constraint in row(s) {bad:?}"
        )));
    }
    let equilibrium = find_equilibrium(params, y_bar, &EquilibriumOptions::default())?;
    let alpha = compute_alpha(&equilibrium.y_bar, &design.constraints, &design.schedule, e_o)?;
    for e in [e_o, design.schedule.e_inf] {
        let (lhs, rhs) = feasibility_sides(e, alpha, &design.schedule);
        if !(lhs <= rhs) {
            return Err(Error::Precondition(format!(
                "recursive feasibility condition fails for set-point {y_bar:?} at ê_o = {e}: {lhs:e} > {rhs:e}"
            )));
        }
    }
    Ok(Reference { equilibrium, alpha })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceChange {
    pub start: usize,
    /// Physical set-point.
    pub y_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub steps: usize,
    pub references: Vec<ReferenceChange>,
    pub solver: SolverOptions,
    /// Physical input bounds; commands are clipped to them before reaching
    /// the plant so that scaling round-off cannot leave the box.
    pub u_lower: Vec<f64>,
    pub u_upper: Vec<f64>,
    /// Sampling time for the log's time column.
    pub ts: f64,
    /// Observer start; the equilibrium of the first measurement when `None`.
    pub x_hat_0: Option<Vec<f64>>,
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        match self.references.first() {
            Some(r) if r.start == 0 => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "the reference schedule must start at step 0".into(),
                ))
            }
        }
        if self.references.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(Error::InvalidArgument("reference start steps must increase".into()));
        }
        check_len("input bounds", self.u_lower.len(), self.u_upper.len())?;
        if self.u_lower.iter().zip(&self.u_upper).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument("input bounds must satisfy lower < upper".into()));
        }
        Ok(())
    }

    fn segment_of(&self, k: usize) -> usize {
        self.references.iter().rposition(|r| r.start <= k).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub segment: usize,
    pub u: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub y: Vec<f64>,
    pub y_norm: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub e_o: f64,
    pub alpha: f64,
    pub cost: f64,
    pub max_violation: f64,
    pub status: SolveStatus,
    pub feas_lhs: f64,
    pub feas_rhs: f64,
    pub candidate_violation: Option<f64>,
    pub epsilon_slack: Option<f64>,
    /// `‖x̂ − x̄‖₂`.
    pub tracking_error: f64,
    pub candidate_ok: Option<bool>,
    pub constraint_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub start: usize,
    pub end: usize,
    pub y_bar: Vec<f64>,
    pub alpha: f64,
    /// Physical `y − ȳ` at the last step of the segment.
    pub final_error: Vec<f64>,
    /// Largest step-to-step increase of the optimal cost.
    pub max_cost_increase: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub segments: Vec<SegmentSummary>,
    pub constraint_violations: usize,
    pub candidate_checks: usize,
    pub candidate_failures: usize,
    pub epsilon_checks: usize,
    pub epsilon_failures: usize,
    pub feas_failures: usize,
    pub optimal: usize,
    pub suboptimal: usize,
    pub infeasible: usize,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub log: Vec<StepRecord>,
    pub summary: RunSummary,
    /// Set when the run stopped early.
    pub failure: Option<Error>,
    /// Full problem state at an infeasible step.
    pub dump: Option<String>,
}

fn norm2_diff(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Runs the loop of observer update, `ê_o` update, receding-horizon control
/// and plant step for `plan.steps` steps.
pub fn run_closed_loop<P: Plant>(
    model: &GruModel,
    design: &ControlDesign,
    plan: &RunPlan,
    plant: &mut P,
) -> Result<ClosedLoopRun> {
    plan.validate()?;
    let params = &model.params;
    check_len("input bounds", params.m(), plan.u_lower.len())?;
    let ys = &model.output_scaler;
    let us = &model.input_scaler;

    let y_first = plant.measure();
    check_len("plant output", params.p(), y_first.len())?;
    let x_hat_0 = match &plan.x_hat_0 {
        Some(x) => {
            check_len("x̂₀", params.n(), x.len())?;
            x.clone()
        }
        None => match find_equilibrium(params, &ys.normalize(&y_first), &EquilibriumOptions::default()) {
            Ok(eq) => eq.x_bar,
            Err(Error::Unreachable { .. }) => {
                log::warn!("first measurement is unreachable as a steady state; observer starts at zero");
                vec![0.0; params.n()]
            }
            Err(e) => return Err(e),
        },
    };

    let y0 = ys.normalize(&plan.references[0].y_bar);
    let reference = prepare_reference(params, design, &y0, design.e_o_0)?;
    let mut ctl = MpcController::new(
        params.clone(),
        design.weights.clone(),
        design.constraints.clone(),
        design.schedule.clone(),
        plan.solver.clone(),
        reference,
    )?;

    let mut x_hat = x_hat_0;
    let mut eo = UncertaintyState::new(design.e_o_0, &design.schedule)?;
    let mut log: Vec<StepRecord> = Vec::with_capacity(plan.steps);
    let mut failure = None;
    let mut dump = None;
    let mut y = y_first;

    for k in 0..plan.steps {
        if k > 0 {
            y = plant.measure();
        }
        let y_norm = ys.normalize(&y);
        let segment = plan.segment_of(k);
        let e_o = eo.e_o();
        if k > 0 && plan.references[segment].start == k {
            let target = ys.normalize(&plan.references[segment].y_bar);
            match prepare_reference(params, design, &target, e_o).and_then(|r| ctl.set_reference(r)) {
                Ok(()) => {}
                Err(e) => {
                    failure = Some(e.at_step(k));
                    break;
                }
            }
        }
        let step = match ctl.mpc_step(&x_hat, e_o) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e.at_step(k));
                break;
            }
        };
        let alpha = ctl.reference().alpha;
        let (feas_lhs, feas_rhs) = feasibility_sides(e_o, alpha, &design.schedule);
        let mut u: Vec<f64> = us.denormalize(&step.u);
        for ((ui, lo), hi) in u.iter_mut().zip(&plan.u_lower).zip(&plan.u_upper) {
            *ui = ui.clamp(*lo, *hi);
        }
        let output_ok = design
            .constraints
            .l()
            .mul_vec(&y_norm)
            .iter()
            .zip(design.constraints.h())
            .all(|(a, b)| a <= b);
        let input_ok = u
            .iter()
            .zip(&plan.u_lower)
            .zip(&plan.u_upper)
            .all(|((v, l), h)| l <= v && v <= h);
        log.push(StepRecord {
            step: k,
            time: k as f64 * plan.ts,
            segment,
            u: u.clone(),
            u_norm: step.u.clone(),
            y: y.clone(),
            y_norm: y_norm.clone(),
            x_hat: x_hat.clone(),
            e_o,
            alpha,
            cost: step.solution.cost,
            max_violation: step.solution.max_violation,
            status: step.solution.status,
            feas_lhs,
            feas_rhs,
            candidate_violation: step.candidate_violation,
            epsilon_slack: step.epsilon_slack,
            tracking_error: norm2_diff(&x_hat, &ctl.reference().equilibrium.x_bar),
            candidate_ok: step.candidate_violation.map(|v| v <= CANDIDATE_TOL),
            constraint_ok: output_ok && input_ok,
        });
        if step.is_infeasible() {
            failure = Some(Error::Infeasible {
                step: k,
                max_violation: step.solution.max_violation,
            });
            let problem = ctl.problem(&x_hat, e_o)?;
            dump = Some(format!(
                "step {k}\nx_hat = {:?}\ne_o = {e_o:e}\nalpha = {alpha:e}\nequilibrium = {:?}\nu_opt = {:?}\nx_pred = {:?}\ncost = {:e}\nmax_violation = {:e}\nconstraints = {:?}",
                problem.x0(),
                problem.equilibrium(),
                step.solution.u_opt,
                step.solution.x_pred,
                step.solution.cost,
                step.solution.max_violation,
                crate::fhocp::evaluate_constraints(&problem, &step.solution.u_opt)?,
            ));
            break;
        }
        if let Err(e) = plant.apply(&u) {
            failure = Some(e.at_step(k));
            break;
        }
        x_hat = observer_step(params, &design.gains, &x_hat, &step.u, &y_norm)?;
        eo = eo_step(eo, &design.schedule);
    }

    let summary = summarize(&log, plan);
    Ok(ClosedLoopRun {
        log,
        summary,
        failure,
        dump,
    })
}

pub fn summarize(log: &[StepRecord], plan: &RunPlan) -> RunSummary {
    let mut s = RunSummary {
        steps: log.len(),
        ..RunSummary::default()
    };
    for r in log {
        s.constraint_violations += usize::from(!r.constraint_ok);
        if let Some(ok) = r.candidate_ok {
            s.candidate_checks += 1;
            s.candidate_failures += usize::from(!ok);
        }
        if let Some(e) = r.epsilon_slack {
            s.epsilon_checks += 1;
            s.epsilon_failures += usize::from(e < -1e-9);
        }
        s.feas_failures += usize::from(!(r.feas_lhs <= r.feas_rhs));
        match r.status {
            SolveStatus::Optimal => s.optimal += 1,
            SolveStatus::FeasibleSuboptimal => s.suboptimal += 1,
            SolveStatus::Infeasible => s.infeasible += 1,
        }
    }
    for (i, rc) in plan.references.iter().enumerate() {
        let rows: Vec<&StepRecord> = log.iter().filter(|r| r.segment == i).collect();
        let Some(last) = rows.last() else { break };
        let max_cost_increase = rows
            .windows(2)
            .map(|w| w[1].cost - w[0].cost)
            .fold(f64::NEG_INFINITY, f64::max);
        s.segments.push(SegmentSummary {
            start: rc.start,
            end: last.step,
            y_bar: rc.y_bar.clone(),
            alpha: rows[0].alpha,
            final_error: last.y.iter().zip(&rc.y_bar).map(|(a, b)| a - b).collect(),
            max_cost_increase,
        });
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::tests::weights_from;
    use crate::gru::Scaler;
    use crate::observer::{synthesize_gains, GainMode};

    fn model() -> GruModel {
        let vals: Vec<f64> = (0..60).map(|i| 0.15 * libm::sin(1.7 * i as f64 + 0.3)).collect();
        let mut w = weights_from(2, 2, 2, &vals).into_weights();
        w.w_h = Matrix::from_rows(&[vec![0.9, 0.2], vec![-0.3, 0.8]]).unwrap();
        w.u_o = Matrix::from_rows(&[vec![0.9, 0.1], vec![-0.2, 0.7]]).unwrap();
        w.b_o = vec![0.0, 0.0];
        let s = Scaler::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        GruModel::new(w.build().unwrap(), s.clone(), s).unwrap()
    }

    fn spec(w_bar_y: f64) -> DesignSpec {
        DesignSpec {
            horizon: 10,
            q_diag: vec![1.0; 2],
            r_diag: vec![0.01; 2],
            s: None,
            e_o_0: 0.0,
            w_bar_y,
            y_lower: vec![-1.0; 2],
            y_upper: vec![1.0; 2],
        }
    }

    fn plan(x_hat_0: Option<Vec<f64>>) -> RunPlan {
        RunPlan {
            steps: 120,
            references: vec![
                ReferenceChange {
                    start: 0,
                    y_bar: vec![0.2, 0.1],
                },
                ReferenceChange {
                    start: 60,
                    y_bar: vec![0.3, 0.0],
                },
            ],
            solver: SolverOptions::default(),
            u_lower: vec![-1.0; 2],
            u_upper: vec![1.0; 2],
            ts: 1.0,
            x_hat_0,
        }
    }

    #[test]
    fn nominal_gru_loop_decreases_cost_and_converges() {
        let m = model();
        let d = design(&m, ObserverGains::zeros(&m.params), &spec(0.0)).unwrap();
        let x0 = vec![0.3, -0.2];
        let mut plant = GruPlant::new(m.clone(), x0.clone(), 0.0, 0).unwrap();
        let run = run_closed_loop(&m, &d, &plan(Some(x0)), &mut plant).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        assert_eq!(run.log.len(), 120);
        let s = &run.summary;
        assert_eq!(
            s.constraint_violations + s.candidate_failures + s.epsilon_failures + s.feas_failures,
            0
        );
        for seg in &s.segments {
            assert!(seg.max_cost_increase <= 1e-9, "{seg:?}");
        }
        for end in [59, 119] {
            assert!(run.log[end].tracking_error < 1e-3, "{}", run.log[end].tracking_error);
        }
    }

    #[test]
    fn disturbed_loop_with_synthesized_gains_stays_feasible() {
        let m = model();
        let gains = synthesize_gains(&m.params, GainMode::MinNuO).gains;
        let d = design(&m, gains, &spec(0.01)).unwrap();
        let mut plant = GruPlant::new(m.clone(), vec![0.1, 0.0], 0.01, 9).unwrap();
        let run = run_closed_loop(&m, &d, &plan(None), &mut plant).unwrap();
        assert!(run.failure.is_none(), "{:?}", run.failure);
        let s = &run.summary;
        assert_eq!(
            s.constraint_violations + s.candidate_failures + s.epsilon_failures + s.feas_failures,
            0,
            "{s:?}"
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let m = model();
        let gains = synthesize_gains(&m.params, GainMode::MinNuO).gains;
        let d = design(&m, gains, &spec(0.01)).unwrap();
        let go = || {
            let mut plant = GruPlant::new(m.clone(), vec![0.1, 0.0], 0.01, 9).unwrap();
            run_closed_loop(&m, &d, &plan(None), &mut plant).unwrap().log
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn unreachable_setpoint_is_rejected_with_its_row() {
        let m = model();
        let d = design(&m, ObserverGains::zeros(&m.params), &spec(0.0)).unwrap();
        let mut p = plan(None);
        p.references[0].y_bar = vec![1.5, 0.0];
        let mut plant = GruPlant::new(m.clone(), vec![0.0; 2], 0.0, 0).unwrap();
        match run_closed_loop(&m, &d, &p, &mut plant) {
            Err(Error::Precondition(msg)) => assert!(msg.contains("row(s) [0]"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uncertified_model_is_refused() {
        let mut w = model().params.into_weights();
        w.u_z = Matrix::from_diag(&[8.0, 8.0]);
        let m = GruModel::new(w.build().unwrap(), model().input_scaler, model().output_scaler).unwrap();
        assert!(matches!(
            design(&m, ObserverGains::zeros(&m.params), &spec(0.0)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn schedule_validation() {
        let mut p = plan(None);
        p.references[0].start = 3;
        assert!(p.validate().is_err());
        let mut p = plan(None);
        p.references[1].start = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn four_tank_plant_matches_the_simulator() {
        let params = FourTankParams::default();
        let x0 = params.steady_state(4e-4, 5e-4);
        let mut plant = FourTankPlant::new(params.clone(), x0).unwrap();
        let inputs = vec![vec![5e-4, 6e-4]; 5];
        let expected = crate::plant::simulate_plant(&x0, &inputs, &params).unwrap();
        for (u, y) in inputs.iter().zip(expected) {
            assert_eq!(plant.measure(), y.to_vec());
            plant.apply(u).unwrap();
        }
    }
}
