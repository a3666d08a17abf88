//! CSV artifacts. Floats are written in Rust's shortest round-trip form, so
//! every logged value reads back bit-exactly.

use std::path::Path;

use grumpc_core::closed_loop::StepRecord;
use grumpc_core::fhocp::SolveStatus;
use grumpc_core::tightening::{OutputConstraints, TighteningSchedule};
use grumpc_core::training::EpochRecord;

use crate::error::{CliError, CliResult};

/// Physical input/output samples, one row per sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn row(w: &mut csv::Writer<std::fs::File>, path: &Path, fields: Vec<String>) -> CliResult<()> {
    w.write_record(&fields).map_err(|e| CliError::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn flag(v: bool) -> String {
    u8::from(v).to_string()
}

pub fn write_dataset(path: &Path, data: &RawDataset) -> CliResult<()> {
    let mut w = writer(path)?;
    row(&mut w, path, ["k", "q_a", "q_b", "h1", "h2"].map(String::from).to_vec())?;
    for (k, (u, y)) in data.u.iter().zip(&data.y).enumerate() {
        let mut f = vec![k.to_string()];
        f.extend(u.iter().chain(y).map(|v| num(*v)));
        row(&mut w, path, f)?;
    }
    finish(w, path)
}

pub fn read_dataset(path: &Path) -> CliResult<RawDataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["k", "q_a", "q_b", "h1", "h2"] {
        return Err(CliError::Schema(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut data = RawDataset { u: vec![], y: vec![] };
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Schema(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        data.u.push(vals[0..2].to_vec());
        data.y.push(vals[2..4].to_vec());
    }
    if data.u.is_empty() {
        return Err(CliError::Schema(format!("{}: dataset is empty", path.display())));
    }
    Ok(data)
}

pub fn write_training_report(path: &Path, epochs: &[EpochRecord]) -> CliResult<()> {
    let mut w = writer(path)?;
    row(
        &mut w,
        path,
        ["epoch", "train_loss", "validation_loss", "nu"]
            .map(String::from)
            .to_vec(),
    )?;
    for e in epochs {
        row(
            &mut w,
            path,
            vec![
                e.epoch.to_string(),
                num(e.train_loss),
                num(e.validation_loss),
                num(e.nu),
            ],
        )?;
    }
    finish(w, path)
}

/// `a_i`, `b_i` per constraint row, plus the tightened bound at `ê_o,0`.
pub fn write_schedule(path: &Path, s: &TighteningSchedule, c: &OutputConstraints, e_o_0: f64) -> CliResult<()> {
    let q = c.q();
    let mut w = writer(path)?;
    let mut head = vec!["i".to_string()];
    for prefix in ["a", "b", "bound"] {
        head.extend((0..q).map(|j| format!("{prefix}_{j}")));
    }
    row(&mut w, path, head)?;
    for i in 0..=s.horizon {
        let mut f = vec![i.to_string()];
        f.extend(s.a[i].iter().map(|v| num(*v)));
        f.extend(s.b[i].iter().map(|v| num(*v)));
        f.extend(s.tightened_bound(c, i, s.e_tilde(e_o_0)).into_iter().map(num));
        row(&mut w, path, f)?;
    }
    finish(w, path)
}

fn status(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::FeasibleSuboptimal => "feasible_suboptimal",
        SolveStatus::Infeasible => "infeasible",
    }
}

pub fn closed_loop_header(first: &StepRecord) -> Vec<String> {
    let mut h: Vec<String> = ["step", "time", "segment"].map(String::from).to_vec();
    let mut many = |prefix: &str, len: usize| h.extend((0..len).map(|j| format!("{prefix}_{j}")));
    many("u", first.u.len());
    many("u_norm", first.u_norm.len());
    many("y", first.y.len());
    many("y_norm", first.y_norm.len());
    many("x_hat", first.x_hat.len());
    h.extend(
        [
            "e_o",
            "alpha",
            "cost",
            "max_violation",
            "status",
            "feas_lhs",
            "feas_rhs",
            "candidate_violation",
            "epsilon_slack",
            "tracking_error",
            "candidate_ok",
            "constraint_ok",
        ]
        .map(String::from),
    );
    h
}

pub fn closed_loop_row(r: &StepRecord) -> Vec<String> {
    let mut f = vec![r.step.to_string(), num(r.time), r.segment.to_string()];
    for v in [&r.u, &r.u_norm, &r.y, &r.y_norm, &r.x_hat] {
        f.extend(v.iter().map(|x| num(*x)));
    }
    f.extend([
        num(r.e_o),
        num(r.alpha),
        num(r.cost),
        num(r.max_violation),
        status(r.status).to_string(),
        num(r.feas_lhs),
        num(r.feas_rhs),
        opt(r.candidate_violation),
        opt(r.epsilon_slack),
        num(r.tracking_error),
        r.candidate_ok.map(flag).unwrap_or_default(),
        flag(r.constraint_ok),
    ]);
    f
}

pub fn write_closed_loop(path: &Path, log: &[StepRecord]) -> CliResult<()> {
    let mut w = writer(path)?;
    if let Some(first) = log.first() {
        row(&mut w, path, closed_loop_header(first))?;
    }
    for r in log {
        row(&mut w, path, closed_loop_row(r))?;
    }
    finish(w, path)
}
