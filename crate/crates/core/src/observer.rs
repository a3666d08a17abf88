//! GRU state observer
//!
//! ```text
//! ŷ  = U_o x̂ + b_o
//! ẑ  = σ(W_z u + U_z x̂ + b_z + L_z (y − ŷ))
//! r̂  = σ(W_r u + U_r x̂ + b_r + L_r (y − ŷ))
//! ĥ  = tanh(W_h u + U_h (r̂ ∘ x̂) + b_h)
//! x̂⁺ = ẑ ∘ x̂ + (1 − ẑ) ∘ ĥ
//! ```
//!
//! The reset gate uses the estimate `x̂`; the observer never sees the true
//! state.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::gru::{stability_metrics, update_gate_term, GruParams, StabilityCertificate};
use crate::linalg::{inf_norm, stacked_inf_norm, Matrix};
use crate::lp::min_inf_norm_factor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    pub l_z: Matrix,
    pub l_r: Matrix,
}

impl ObserverGains {
    pub fn zeros(params: &GruParams) -> Self {
        Self {
            l_z: Matrix::zeros(params.n(), params.p()),
            l_r: Matrix::zeros(params.n(), params.p()),
        }
    }

    pub fn validate(&self, params: &GruParams) -> Result<()> {
        for (name, g) in [("L_z", &self.l_z), ("L_r", &self.l_r)] {
            check_len(name, params.n(), g.rows())?;
            check_len(name, params.p(), g.cols())?;
            check_finite(name, g.as_slice())?;
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            l_z: self.l_z.scaled(k),
            l_r: self.l_r.scaled(k),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.l_z.as_slice().iter().chain(self.l_r.as_slice()).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverMetrics {
    pub nu_o: f64,
    pub rho_o: f64,
    pub kappa: f64,
    pub l_max: f64,
    pub c_o: Vec<f64>,
    pub convergent: bool,
}

pub fn observer_step(
    params: &GruParams,
    gains: &ObserverGains,
    x_hat: &[f64],
    u: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    let (n, p) = (params.n(), params.p());
    check_len("observer state", n, x_hat.len())?;
    check_len("input", params.m(), u.len())?;
    check_len("measurement", p, y.len())?;
    check_finite("observer state", x_hat)?;
    check_finite("input", u)?;
    check_finite("measurement", y)?;
    gains.validate(params)?;

    let mut innovation = vec![0.0; p];
    params.output_into(x_hat, &mut innovation);
    for (e, yi) in innovation.iter_mut().zip(y) {
        *e = yi - *e;
    }
    let off_z = gains.l_z.mul_vec(&innovation);
    let off_r = gains.l_r.mul_vec(&innovation);
    let (mut z, mut r, mut h) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    params.gates_into(x_hat, u, Some(&off_z), Some(&off_r), &mut z, &mut r, &mut h);
    let mut next = vec![0.0; n];
    GruParams::combine_into(x_hat, &z, &h, &mut next);
    Ok(next)
}

fn metrics_from(
    params: &GruParams,
    cert: &StabilityCertificate,
    gains: &ObserverGains,
) -> Result<(f64, f64, f64, f64)> {
    let w = params.weights();
    let stack_z = stacked_inf_norm(&w.w_z, &w.u_z, &w.b_z);
    let lz_uo = gains.l_z.matmul(&w.u_o)?;
    let lr_uo = gains.l_r.matmul(&w.u_o)?;
    let z_res = w.u_z.sub(&lz_uo)?.inf_norm();
    let r_res = w.u_r.sub(&lr_uo)?.inf_norm();
    let nu_o = cert.uh_norm * (0.25 * r_res + cert.sigma_bar_r) + update_gate_term(stack_z, cert.phi_bar_h, z_res);
    let rho_o = cert.sigma_bar_z + (1.0 - cert.sigma_bar_z) * nu_o;
    let kappa = 0.25 * (1.0 + cert.phi_bar_h) * gains.l_z.inf_norm()
        + 0.25 * cert.sigma_bar_z * cert.uh_norm * gains.l_r.inf_norm();
    let l_max =
        0.25 * (1.0 + cert.phi_bar_h) * lz_uo.inf_norm() + 0.25 * cert.sigma_bar_z * cert.uh_norm * lr_uo.inf_norm();
    Ok((nu_o, rho_o, kappa, l_max))
}

/// ISS constants of the estimation error for gains `(L_z, L_r)` and the
/// output-constraint matrix `L` (used for `c_o`).
pub fn observer_metrics(params: &GruParams, gains: &ObserverGains, l: &Matrix) -> Result<ObserverMetrics> {
    gains.validate(params)?;
    let cert = stability_metrics(params);
    let (nu_o, rho_o, kappa, l_max) = metrics_from(params, &cert, gains)?;
    let c_o = crate::gru::constraint_gain(params, l)?;
    Ok(ObserverMetrics {
        nu_o,
        rho_o,
        kappa,
        l_max,
        c_o,
        convergent: nu_o < 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    OpenLoop,
    MinNuO,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSynthesis {
    pub gains: ObserverGains,
    /// Set when the LP failed and the open-loop gains were returned instead.
    pub fallback: Option<Error>,
}

/// Observer gains for the requested mode. `MinNuO` minimizes
/// `‖U_z − L_z U_o‖∞` and `‖U_r − L_r U_o‖∞` independently.
pub fn synthesize_gains(params: &GruParams, mode: GainMode) -> GainSynthesis {
    match mode {
        GainMode::OpenLoop => GainSynthesis {
            gains: ObserverGains::zeros(params),
            fallback: None,
        },
        GainMode::MinNuO => {
            let w = params.weights();
            let solved =
                min_inf_norm_factor(&w.u_z, &w.u_o).and_then(|l_z| Ok((l_z, min_inf_norm_factor(&w.u_r, &w.u_o)?)));
            match solved {
                Ok((l_z, l_r)) => {
                    // Exact optimum never exceeds the zero-gain norm; guard
                    // against round-off pushing it above.
                    let keep = |u: &Matrix, l: Matrix| -> Matrix {
                        let with = u.sub(&l.matmul(&w.u_o).expect("dims checked")).expect("dims checked");
                        if with.inf_norm() <= u.inf_norm() {
                            l
                        } else {
                            Matrix::zeros(params.n(), params.p())
                        }
                    };
                    GainSynthesis {
                        gains: ObserverGains {
                            l_z: keep(&w.u_z, l_z),
                            l_r: keep(&w.u_r, l_r),
                        },
                        fallback: None,
                    }
                }
                Err(e) => {
                    log::warn!("gain synthesis LP failed ({e}); falling back to the open-loop observer");
                    GainSynthesis {
                        gains: ObserverGains::zeros(params),
                        fallback: Some(e),
                    }
                }
            }
        }
    }
}

fn true_and_observed(
    params: &GruParams,
    gains: &ObserverGains,
    x: &[f64],
    x_hat: &[f64],
    u: &[f64],
    w_y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = params.output(x)?;
    check_len("output disturbance", y.len(), w_y.len())?;
    for (yi, wi) in y.iter_mut().zip(w_y) {
        *yi += wi;
    }
    Ok((params.step(x, u)?, observer_step(params, gains, x_hat, u, &y)?))
}

/// `ρ_o ‖x − x̂‖∞ + κ ‖w_y‖∞ − ‖x⁺ − x̂⁺‖∞` with `y = g(x) + w_y`.
pub fn observer_decrease_gap(
    params: &GruParams,
    gains: &ObserverGains,
    x: &[f64],
    x_hat: &[f64],
    u: &[f64],
    w_y: &[f64],
) -> Result<f64> {
    let cert = stability_metrics(params);
    let (_, rho_o, kappa, _) = metrics_from(params, &cert, gains)?;
    observer_decrease_gap_with(params, gains, (rho_o, kappa), x, x_hat, u, w_y)
}

/// [`observer_decrease_gap`] for precomputed `(ρ_o, κ)`.
pub fn observer_decrease_gap_with(
    params: &GruParams,
    gains: &ObserverGains,
    (rho_o, kappa): (f64, f64),
    x: &[f64],
    x_hat: &[f64],
    u: &[f64],
    w_y: &[f64],
) -> Result<f64> {
    let (xp, xhp) = true_and_observed(params, gains, x, x_hat, u, w_y)?;
    let e: Vec<f64> = x.iter().zip(x_hat).map(|(a, b)| a - b).collect();
    let ep: Vec<f64> = xp.iter().zip(&xhp).map(|(a, b)| a - b).collect();
    Ok(rho_o * inf_norm(&e) + kappa * inf_norm(w_y) - inf_norm(&ep))
}

/// `L_max ‖x − x̂‖∞ + κ ‖w_y‖∞ − ‖x̂⁺ − f(x̂, u)‖∞`.
pub fn observer_correction_gap(
    params: &GruParams,
    gains: &ObserverGains,
    (l_max, kappa): (f64, f64),
    x: &[f64],
    x_hat: &[f64],
    u: &[f64],
    w_y: &[f64],
) -> Result<f64> {
    let (_, xhp) = true_and_observed(params, gains, x, x_hat, u, w_y)?;
    let open = params.step(x_hat, u)?;
    let e: Vec<f64> = x.iter().zip(x_hat).map(|(a, b)| a - b).collect();
    let d: Vec<f64> = xhp.iter().zip(&open).map(|(a, b)| a - b).collect();
    Ok(l_max * inf_norm(&e) + kappa * inf_norm(w_y) - inf_norm(&d))
}
