use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::GruParams;
use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::inf_norm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<f64>,
    pub y_bar: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-9,
        }
    }
}

/// Stacked residual `[f(x,u) − x; U_o x + b_o − ȳ]`.
fn residual(params: &GruParams, x: &[f64], u: &[f64], y_bar: &[f64]) -> Result<Vec<f64>> {
    let mut r = params.step(x, u)?;
    for (ri, xi) in r.iter_mut().zip(x) {
        *ri -= xi;
    }
    let y = params.output(x)?;
    r.extend(y.iter().zip(y_bar).map(|(a, b)| a - b));
    Ok(r)
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Steady state `(x̄, ū)` producing output `ȳ`.
///
/// Damped Newton on the joint residual from `x = 0, u = 0`. Each step is the
/// minimum-norm least-squares solution (SVD pseudo-inverse), so for `m > p`
/// the input is tie-broken towards the smallest correction. The input is
/// projected onto the unit box after every step; a solver that stalls with a
/// saturated input reports [`Error::Unreachable`].
pub fn find_equilibrium(params: &GruParams, y_bar: &[f64], opts: &EquilibriumOptions) -> Result<Equilibrium> {
    check_len("set-point", params.p(), y_bar.len())?;
    check_finite("set-point", y_bar)?;
    let (n, m) = (params.n(), params.m());
    let mut x = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut r = residual(params, &x, &u, y_bar)?;
    let mut iterations = 0;
    while inf_norm(&r) > opts.tolerance && iterations < opts.max_iterations {
        iterations += 1;
        let (jx, ju) = params.jacobians(&x, &u)?;
        let rows = n + params.p();
        let mut jac = nalgebra::DMatrix::<f64>::zeros(rows, n + m);
        for i in 0..n {
            for j in 0..n {
                jac[(i, j)] = jx[(i, j)] - if i == j { 1.0 } else { 0.0 };
            }
            for j in 0..m {
                jac[(i, n + j)] = ju[(i, j)];
            }
        }
        for i in 0..params.p() {
            for j in 0..n {
                jac[(n + i, j)] = params.u_o[(i, j)];
            }
        }
        let rhs = nalgebra::DVector::from_column_slice(&r);
        let svd = jac.svd(true, true);
        let step = match svd.solve(&rhs, 1e-13) {
            Ok(s) => s,
            Err(_) => break,
        };

        let base = sq(&r);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let xt: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - t * step[i]).collect();
            let ut: Vec<f64> = u
                .iter()
                .enumerate()
                .map(|(i, v)| (v - t * step[n + i]).clamp(-1.0, 1.0))
                .collect();
            let rt = residual(params, &xt, &ut, y_bar)?;
            if sq(&rt) < base {
                x = xt;
                u = ut;
                r = rt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let res = inf_norm(&r);
    if res <= opts.tolerance {
        if inf_norm(&x) > 1.0 || inf_norm(&u) > 1.0 {
            return Err(Error::Unreachable { residual: res });
        }
        let y = params.output(&x)?;
        return Ok(Equilibrium {
            x_bar: x,
            u_bar: u,
            y_bar: y,
            residual: res,
        });
    }
    if u.iter().any(|v| v.abs() >= 1.0) {
        Err(Error::Unreachable { residual: res })
    } else {
        Err(Error::NoConvergence {
            iterations,
            residual: res,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::tests::weights_from;
    use crate::gru::{stability_metrics, GruWeights};
    use crate::linalg::Matrix;

    #[test]
    fn zero_model_equilibrium_is_origin_with_zero_input() {
        let mut w = GruWeights::zeros(2, 1, 1);
        w.b_o = vec![0.3];
        let p = w.build().unwrap();
        let eq = find_equilibrium(&p, &[0.3], &EquilibriumOptions::default()).unwrap();
        assert_eq!(eq.x_bar, vec![0.0, 0.0]);
        assert_eq!(eq.u_bar, vec![0.0]);
        assert!(eq.residual <= 1e-9);
    }

    fn example_model() -> GruParams {
        let vals: Vec<f64> = (0..40).map(|i| 0.15 * libm::sin(0.9 * i as f64 + 0.2)).collect();
        let mut w = weights_from(3, 2, 2, &vals).into_weights();
        w.w_h = Matrix::from_rows(&[vec![1.2, 0.1], vec![-0.2, 0.9], vec![0.5, 0.6]]).unwrap();
        w.build().unwrap()
    }

    #[test]
    fn recovers_equilibrium_reached_by_long_simulation() {
        let p = example_model();
        assert!(stability_metrics(&p).delta_iss);
        let u_bar = vec![0.35, -0.2];
        let traj = p.simulate(&[0.0; 3], &vec![u_bar.clone(); 500]).unwrap();
        let x_end = p.step(&traj[499].0, &u_bar).unwrap();
        let y = p.output(&x_end).unwrap();
        let eq = find_equilibrium(&p, &y, &EquilibriumOptions::default()).unwrap();
        for (a, b) in eq.x_bar.iter().zip(&x_end) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in eq.u_bar.iter().zip(&u_bar) {
            assert!((a - b).abs() < 1e-6);
        }
        let back = p.output(&eq.x_bar).unwrap();
        assert!(inf_norm(&crate::linalg::sub(&back, &y)) <= 1e-9);
        let traj = p.simulate(&eq.x_bar, &vec![eq.u_bar.clone(); 5]).unwrap();
        for (x, yk) in traj {
            assert!(inf_norm(&crate::linalg::sub(&x, &eq.x_bar)) < 1e-9);
            assert!(inf_norm(&crate::linalg::sub(&yk, &eq.y_bar)) < 1e-9);
        }
    }

    #[test]
    fn set_point_beyond_steady_state_range_is_unreachable() {
        let p = example_model();
        // Largest first output over steady states on an input grid.
        let mut best = f64::NEG_INFINITY;
        for i in 0..=20 {
            for j in 0..=20 {
                let u = vec![-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64];
                let traj = p.simulate(&[0.0; 3], &vec![u.clone(); 400]).unwrap();
                best = best.max(traj[399].1[0]);
            }
        }
        let err = find_equilibrium(&p, &[best + 0.5, 0.0], &EquilibriumOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Unreachable { .. }), "{err:?}");
    }
}
