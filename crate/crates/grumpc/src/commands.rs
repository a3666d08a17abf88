//! One function per subcommand. Each returns the text it printed so tests can
//! inspect it; artifacts go under the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use grumpc_core::closed_loop::{
    design, output_box, run_closed_loop, ClosedLoopRun, ControlDesign, DesignSpec, FourTankPlant, GruPlant, RunPlan,
};
use grumpc_core::gru::{stability_metrics, GruModel, GruParams, Scaler};
use grumpc_core::observer::{observer_metrics, synthesize_gains, GainMode, ObserverGains, ObserverMetrics};
use grumpc_core::plant::{multilevel_prs, simulate_plant};
use grumpc_core::training::{estimate_w_bar_y, fit_index, prepare_dataset, test_predictions, train_gru, Dataset};
use grumpc_core::verify::{run_verify, VerifyOptions};

use crate::config::{ExperimentConfig, PlantKind};
use crate::csvio::{self, RawDataset};
use crate::error::{CliError, CliResult};
use crate::weights::{IdentificationDoc, LoadedModel, WeightsFile};

pub const DATASET_FILE: &str = "dataset.csv";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const TRAINING_REPORT_FILE: &str = "training_report.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const CLOSED_LOOP_FILE: &str = "closed_loop.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const DUMP_FILE: &str = "fhocp_dump.txt";

/// Resolved command-line context.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: Option<ExperimentConfig>,
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
}

impl Context {
    /// Applies the `--seed` override and picks the output directory:
    /// `--out`, then the config's `out_dir`, then `out`.
    pub fn new(
        config: Option<PathBuf>,
        weights: Option<PathBuf>,
        out: Option<PathBuf>,
        seed: Option<u64>,
    ) -> CliResult<Self> {
        let mut config = config.map(|p| ExperimentConfig::load(&p)).transpose()?;
        if let (Some(c), Some(s)) = (config.as_mut(), seed) {
            c.seed = s;
        }
        let out = out
            .or_else(|| config.as_ref().and_then(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Context { config, weights, out })
    }

    fn config(&self) -> CliResult<&ExperimentConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| CliError::Schema("this command needs --config".into()))
    }

    fn out_path(&self, name: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    fn weights_path(&self) -> PathBuf {
        self.weights.clone().unwrap_or_else(|| self.out.join(WEIGHTS_FILE))
    }

    fn load_weights(&self) -> CliResult<(WeightsFile, LoadedModel)> {
        let file = WeightsFile::load(&self.weights_path())?;
        let loaded = file.to_loaded()?;
        Ok((file, loaded))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Plant response to the configured excitation, in physical units.
pub fn generate_dataset(cfg: &ExperimentConfig) -> CliResult<RawDataset> {
    let p = &cfg.plant;
    let u = multilevel_prs(&cfg.excitation_spec())?;
    let [qa, qb] = cfg
        .excitation
        .initial_flows
        .unwrap_or([0.5 * p.q_max[0], 0.5 * p.q_max[1]]);
    let y = simulate_plant(&p.steady_state(qa, qb), &u, p)?;
    Ok(RawDataset {
        u,
        y: y.into_iter().map(|v| v.to_vec()).collect(),
    })
}

/// Inputs are scaled by the plant's input bounds, outputs by the observed
/// range of the data.
pub fn build_dataset(cfg: &ExperimentConfig, raw: &RawDataset) -> CliResult<Dataset> {
    let input = Scaler::from_bounds(&cfg.plant.q_min, &cfg.plant.q_max)?;
    let output = Scaler::fit(&raw.y)?;
    Ok(prepare_dataset(
        &raw.u,
        &raw.y,
        input,
        output,
        cfg.split,
        cfg.training.subsequence_len,
    )?)
}

pub fn gen_data(ctx: &Context) -> CliResult<String> {
    let cfg = ctx.config()?;
    let raw = generate_dataset(cfg)?;
    let path = ctx.out_path(DATASET_FILE)?;
    csvio::write_dataset(&path, &raw)?;
    Ok(format!("wrote {} samples to {}\n", raw.u.len(), path.display()))
}

fn fmt_fit(fit: &[Option<f64>]) -> String {
    let parts: Vec<String> = fit
        .iter()
        .map(|f| f.map_or("n/a".to_string(), |v| format!("{v:.2}%")))
        .collect();
    parts.join(" / ")
}

pub fn train(ctx: &Context) -> CliResult<String> {
    let cfg = ctx.config()?;
    let data_path = ctx.out_path(DATASET_FILE)?;
    let raw = if data_path.exists() {
        log::info!("reusing {}", data_path.display());
        csvio::read_dataset(&data_path)?
    } else {
        let raw = generate_dataset(cfg)?;
        csvio::write_dataset(&data_path, &raw)?;
        raw
    };
    let dataset = build_dataset(cfg, &raw)?;
    let tc = cfg.train_config();
    let (params, report) = train_gru(&dataset, &tc)?;
    let (y, xi) = test_predictions(&params, &dataset, tc.washout)?;
    let fit = fit_index(&y, &xi)?;
    let w_bar_y = estimate_w_bar_y(&params, &dataset, tc.washout)?;
    let model = GruModel::new(params, dataset.input_scaler.clone(), dataset.output_scaler.clone())?;

    let mut file = WeightsFile::from_model(&model);
    file.identification = Some(IdentificationDoc {
        w_bar_y,
        fit: fit.clone(),
        nu: report.certificate.nu,
        selected_epoch: report.selected_epoch,
    });
    let weights_path = ctx.weights.clone().unwrap_or(ctx.out_path(WEIGHTS_FILE)?);
    file.save(&weights_path)?;
    csvio::write_training_report(&ctx.out_path(TRAINING_REPORT_FILE)?, &report.epochs)?;

    let mut s = String::new();
    let c = &report.certificate;
    writeln!(s, "hidden units      {}", model.params.n()).unwrap();
    writeln!(s, "epochs run        {}", report.epochs.len()).unwrap();
    writeln!(s, "selected epoch    {}", report.selected_epoch).unwrap();
    if let Some(k) = report.diverged_at {
        writeln!(s, "diverged at epoch {k}").unwrap();
    }
    writeln!(s, "test FIT          {}", fmt_fit(&fit)).unwrap();
    writeln!(s, "nu                {}", c.nu).unwrap();
    writeln!(s, "rho_s             {}", c.rho_s).unwrap();
    writeln!(s, "w_bar_y           {w_bar_y}").unwrap();
    writeln!(s, "weights           {}", weights_path.display()).unwrap();
    write_text(&ctx.out_path("train_summary.txt")?, &s)?;
    if !report.certified() {
        return Err(CliError::Precondition(format!(
            "{s}trained model is not δISS certified (ν = {})",
            c.nu
        )));
    }
    Ok(s)
}

fn mode_name(mode: GainMode) -> &'static str {
    match mode {
        GainMode::OpenLoop => "open_loop",
        GainMode::MinNuO => "min_nu_o",
    }
}

fn write_metrics(s: &mut String, label: &str, m: &ObserverMetrics) {
    writeln!(s, "observer [{label}]").unwrap();
    writeln!(s, "  nu_o   {}", m.nu_o).unwrap();
    writeln!(s, "  rho_o  {}", m.rho_o).unwrap();
    writeln!(s, "  kappa  {}", m.kappa).unwrap();
    writeln!(s, "  L_max  {}", m.l_max).unwrap();
    writeln!(s, "  c_o    {:?}", m.c_o).unwrap();
}

fn output_constraints_l(model: &GruModel, cfg: Option<&ExperimentConfig>) -> CliResult<grumpc_core::linalg::Matrix> {
    let plant = cfg.map(|c| c.plant.clone()).unwrap_or_default();
    Ok(output_box(model, &plant.h_min, &plant.h_max)?.l().clone())
}

/// Gains the pipeline uses: the weights file's observer section, else the
/// configured mode, else open loop.
fn active_gains(loaded: &LoadedModel, cfg: Option<&ExperimentConfig>) -> (GainMode, ObserverGains) {
    if let Some((mode, g)) = &loaded.observer {
        if let Some(c) = cfg {
            if c.observer.mode != *mode {
                log::warn!(
                    "weights carry {} gains; ignoring configured mode {}",
                    mode_name(*mode),
                    mode_name(c.observer.mode)
                );
            }
        }
        return (*mode, g.clone());
    }
    let mode = cfg.map_or(GainMode::OpenLoop, |c| c.observer.mode);
    (mode, synthesize_gains(&loaded.model.params, mode).gains)
}

pub fn certify(ctx: &Context) -> CliResult<String> {
    let (_, loaded) = ctx.load_weights()?;
    let cfg = ctx.config.as_ref();
    let params = &loaded.model.params;
    let cert = stability_metrics(params);
    let l = output_constraints_l(&loaded.model, cfg)?;

    let mut s = String::new();
    writeln!(s, "n = {}, m = {}, p = {}", params.n(), params.m(), params.p()).unwrap();
    writeln!(s, "sigma_bar_z  {}", cert.sigma_bar_z).unwrap();
    writeln!(s, "sigma_bar_r  {}", cert.sigma_bar_r).unwrap();
    writeln!(s, "phi_bar_h    {}", cert.phi_bar_h).unwrap();
    writeln!(s, "nu           {}", cert.nu).unwrap();
    writeln!(s, "rho_s        {}", cert.rho_s).unwrap();
    writeln!(s, "delta_iss    {}", cert.delta_iss).unwrap();
    for mode in [GainMode::OpenLoop, GainMode::MinNuO] {
        let syn = synthesize_gains(params, mode);
        let m = observer_metrics(params, &syn.gains, &l)?;
        let label = match syn.fallback {
            Some(_) => format!("{}, LP failed, open-loop gains", mode_name(mode)),
            None => mode_name(mode).to_string(),
        };
        write_metrics(&mut s, &label, &m);
    }
    let (mode, gains) = active_gains(&loaded, cfg);
    let active = observer_metrics(params, &gains, &l)?;
    if loaded.observer.is_some() {
        write_metrics(&mut s, &format!("{}, from weights file", mode_name(mode)), &active);
    }
    let ok = cert.nu < 1.0 && active.nu_o < 1.0;
    writeln!(s, "certified    {ok} (observer {})", mode_name(mode)).unwrap();
    if ok {
        Ok(s)
    } else {
        Err(CliError::Precondition(format!(
            "{s}certification failed: ν = {}, ν_o = {}",
            cert.nu, active.nu_o
        )))
    }
}

pub fn gains(ctx: &Context) -> CliResult<String> {
    let cfg = ctx.config()?;
    let (mut file, loaded) = ctx.load_weights()?;
    let params = &loaded.model.params;
    let syn = synthesize_gains(params, cfg.observer.mode);
    let l = output_constraints_l(&loaded.model, Some(cfg))?;
    let m = observer_metrics(params, &syn.gains, &l)?;
    file.set_observer(cfg.observer.mode, &syn.gains);
    let path = ctx.out_path(WEIGHTS_FILE)?;
    file.save(&path)?;

    let mut s = String::new();
    if let Some(e) = &syn.fallback {
        writeln!(s, "gain LP failed ({e}); stored open-loop gains").unwrap();
    }
    write_metrics(&mut s, mode_name(cfg.observer.mode), &m);
    writeln!(s, "weights      {}", path.display()).unwrap();
    if m.convergent {
        Ok(s)
    } else {
        Err(CliError::Precondition(format!(
            "{s}observer is not convergent (ν_o = {})",
            m.nu_o
        )))
    }
}

/// Design from the config's MPC block and the weights' gains.
pub fn build_design(cfg: &ExperimentConfig, loaded: &LoadedModel) -> CliResult<ControlDesign> {
    let model = &loaded.model;
    let w_bar_y = match (cfg.mpc.w_bar_y.value(), &loaded.identification) {
        (Some(v), _) => v,
        (None, Some(id)) => id.w_bar_y,
        (None, None) => {
            return Err(CliError::Precondition(
                "w_bar_y is \"auto\" but the weights file has no identification section".into(),
            ))
        }
    };
    let spec = DesignSpec {
        horizon: cfg.mpc.horizon,
        q_diag: ExperimentConfig::diagonal(&cfg.mpc.q_diag, model.params.n(), "q_diag")?,
        r_diag: ExperimentConfig::diagonal(&cfg.mpc.r_diag, model.params.m(), "r_diag")?,
        s: cfg.mpc.s.value(),
        e_o_0: cfg.mpc.e_o_0,
        w_bar_y,
        y_lower: cfg.plant.h_min.to_vec(),
        y_upper: cfg.plant.h_max.to_vec(),
    };
    let (_, gains) = active_gains(loaded, Some(cfg));
    Ok(design(model, gains, &spec)?)
}

/// Steady state the model settles to under a constant normalized input.
pub fn model_steady_state(params: &GruParams, u: &[f64]) -> CliResult<Vec<f64>> {
    let mut x = vec![0.0; params.n()];
    for _ in 0..100_000 {
        let next = params.step(&x, u)?;
        let done = next.iter().zip(&x).all(|(a, b)| a == b);
        x = next;
        if done {
            break;
        }
    }
    Ok(x)
}

pub fn run_plan(cfg: &ExperimentConfig) -> RunPlan {
    RunPlan {
        steps: cfg.simulation.steps,
        references: cfg.references.clone(),
        solver: cfg.mpc.solver.clone(),
        u_lower: cfg.plant.q_min.to_vec(),
        u_upper: cfg.plant.q_max.to_vec(),
        ts: cfg.plant.ts,
        x_hat_0: None,
    }
}

/// Runs the configured plant in closed loop.
pub fn run_simulation(
    cfg: &ExperimentConfig,
    loaded: &LoadedModel,
    design: &ControlDesign,
) -> CliResult<ClosedLoopRun> {
    let model = &loaded.model;
    let [qa, qb] = cfg.simulation.initial_flows;
    let mut plan = run_plan(cfg);
    let run = match cfg.simulation.plant {
        PlantKind::FourTank => {
            let mut plant = FourTankPlant::new(cfg.plant.clone(), cfg.plant.steady_state(qa, qb))?;
            run_closed_loop(model, design, &plan, &mut plant)?
        }
        PlantKind::Model => {
            // The observer starts on the true model state.
            let x0 = model_steady_state(&model.params, &model.input_scaler.normalize(&[qa, qb]))?;
            plan.x_hat_0 = Some(x0.clone());
            let mut plant = GruPlant::new(model.clone(), x0, cfg.simulation.noise, cfg.seed)?;
            run_closed_loop(model, design, &plan, &mut plant)?
        }
    };
    Ok(run)
}

fn run_summary(cfg: &ExperimentConfig, design: &ControlDesign, run: &ClosedLoopRun) -> String {
    let sum = &run.summary;
    let c = &design.certificate;
    let m = &design.metrics;
    let mut s = String::new();
    writeln!(s, "plant             {:?}", cfg.simulation.plant).unwrap();
    writeln!(s, "nu                {}", c.nu).unwrap();
    writeln!(s, "rho_s             {}", c.rho_s).unwrap();
    writeln!(s, "nu_o              {}", m.nu_o).unwrap();
    writeln!(s, "rho_o             {}", m.rho_o).unwrap();
    writeln!(s, "w_bar_y           {}", design.w_bar_y).unwrap();
    writeln!(s, "e_inf             {}", design.schedule.e_inf).unwrap();
    writeln!(s, "steps             {} of {}", sum.steps, cfg.simulation.steps).unwrap();
    writeln!(s, "violations        {}", sum.constraint_violations).unwrap();
    writeln!(
        s,
        "candidate checks  {} ({} failed)",
        sum.candidate_checks, sum.candidate_failures
    )
    .unwrap();
    writeln!(
        s,
        "epsilon checks    {} ({} failed)",
        sum.epsilon_checks, sum.epsilon_failures
    )
    .unwrap();
    writeln!(s, "feas failures     {}", sum.feas_failures).unwrap();
    writeln!(
        s,
        "solver status     {} optimal, {} suboptimal, {} infeasible",
        sum.optimal, sum.suboptimal, sum.infeasible
    )
    .unwrap();
    for (i, seg) in sum.segments.iter().enumerate() {
        writeln!(
            s,
            "segment {i}: steps {}..{} y_bar {:?} alpha {} final error {:?} max cost increase {:e}",
            seg.start, seg.end, seg.y_bar, seg.alpha, seg.final_error, seg.max_cost_increase
        )
        .unwrap();
    }
    if let Some(e) = &run.failure {
        writeln!(s, "stopped: {e}").unwrap();
    }
    s
}

pub fn simulate(ctx: &Context) -> CliResult<String> {
    let cfg = ctx.config()?;
    let (_, loaded) = ctx.load_weights()?;
    let design = build_design(cfg, &loaded)?;
    csvio::write_schedule(
        &ctx.out_path(SCHEDULE_FILE)?,
        &design.schedule,
        &design.constraints,
        design.e_o_0,
    )?;
    let run = run_simulation(cfg, &loaded, &design)?;
    csvio::write_closed_loop(&ctx.out_path(CLOSED_LOOP_FILE)?, &run.log)?;
    let s = run_summary(cfg, &design, &run);
    write_text(&ctx.out_path(SUMMARY_FILE)?, &s)?;
    if let Some(dump) = &run.dump {
        write_text(&ctx.out_path(DUMP_FILE)?, dump)?;
    }
    match run.failure {
        None => Ok(s),
        Some(e) => {
            let e = CliError::from(e);
            let msg = format!("{s}{e}");
            Err(match e {
                CliError::Infeasible(_) => CliError::Infeasible(msg),
                CliError::Precondition(_) => CliError::Precondition(msg),
                other => other,
            })
        }
    }
}

pub fn verify(ctx: &Context, rho_s_scale: f64) -> CliResult<String> {
    let cfg = ctx.config()?;
    let (_, loaded) = ctx.load_weights()?;
    let design = build_design(cfg, &loaded)?;
    let model = &loaded.model;
    let references: Vec<Vec<f64>> = cfg
        .references
        .iter()
        .map(|r| model.output_scaler.normalize(&r.y_bar))
        .collect();
    let opts = VerifyOptions {
        seed: cfg.seed,
        rho_s_scale,
        solver: cfg.mpc.solver.clone(),
        ..VerifyOptions::default()
    };
    let results = run_verify(model, &design.gains, &design, &references, &opts);
    let mut s = String::new();
    for r in &results {
        writeln!(
            s,
            "{} {:<28} samples {:>7}  worst {:>12.4e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.samples,
            r.worst,
            r.detail
        )
        .unwrap();
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(s, "{} checks, {failed} failed", results.len()).unwrap();
    write_text(&ctx.out_path("verify.txt")?, &s)?;
    if failed == 0 {
        Ok(s)
    } else {
        Err(CliError::Precondition(s))
    }
}
