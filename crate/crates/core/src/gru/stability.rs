use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{GruParams, GruWeights};
use crate::error::{check_len, Result};
use crate::linalg::{inf_norm, sigmoid, stacked_inf_norm, stacked_row_sums, Matrix};

/// δISS certificate of a GRU. `c_s` stays empty until an output-constraint
/// matrix is supplied through [`StabilityCertificate::with_constraint_gain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub sigma_bar_z: f64,
    pub sigma_bar_r: f64,
    pub phi_bar_h: f64,
    pub nu: f64,
    pub rho_s: f64,
    pub c_s: Vec<f64>,
    pub delta_iss: bool,
    /// `‖U_z‖∞`, `‖U_r‖∞`, `‖U_h‖∞`, reused by the observer metrics.
    pub uz_norm: f64,
    pub ur_norm: f64,
    pub uh_norm: f64,
}

impl StabilityCertificate {
    pub fn with_constraint_gain(mut self, params: &GruParams, l: &Matrix) -> Result<Self> {
        self.c_s = constraint_gain(params, l)?;
        Ok(self)
    }
}

/// `¼ (1 + φ̄_h) / (1 − σ̄_z) · ‖M‖∞`, with `1 − σ̄_z` evaluated as `σ(−s_z)`.
pub(crate) fn update_gate_term(stack_z: f64, phi_bar_h: f64, norm: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else {
        0.25 * (1.0 + phi_bar_h) / sigmoid(-stack_z) * norm
    }
}

pub fn stability_metrics(params: &GruParams) -> StabilityCertificate {
    let w = params.weights();
    let stack_z = stacked_inf_norm(&w.w_z, &w.u_z, &w.b_z);
    let stack_r = stacked_inf_norm(&w.w_r, &w.u_r, &w.b_r);
    let stack_h = stacked_inf_norm(&w.w_h, &w.u_h, &w.b_h);
    let sigma_bar_z = sigmoid(stack_z);
    let sigma_bar_r = sigmoid(stack_r);
    let phi_bar_h = libm::tanh(stack_h);
    let uz_norm = w.u_z.inf_norm();
    let ur_norm = w.u_r.inf_norm();
    let uh_norm = w.u_h.inf_norm();
    let nu = uh_norm * (0.25 * ur_norm + sigma_bar_r) + update_gate_term(stack_z, phi_bar_h, uz_norm);
    let rho_s = sigma_bar_z + (1.0 - sigma_bar_z) * nu;
    StabilityCertificate {
        sigma_bar_z,
        sigma_bar_r,
        phi_bar_h,
        nu,
        rho_s,
        c_s: Vec::new(),
        delta_iss: nu < 1.0,
        uz_norm,
        ur_norm,
        uh_norm,
    }
}

/// `c_s(j) = ‖(L U_o)_(j*)‖∞`, the absolute row sums of `L U_o`.
pub fn constraint_gain(params: &GruParams, l: &Matrix) -> Result<Vec<f64>> {
    check_len("constraint matrix columns", params.p(), l.cols())?;
    Ok(l.matmul(&params.u_o)?.row_abs_sums())
}

/// `ρ_s ‖x_a − x_b‖∞ − ‖f(x_a,u) − f(x_b,u)‖∞`; nonnegative on a certified
/// model for states and inputs in the unit box.
pub fn incremental_contraction_gap(params: &GruParams, x_a: &[f64], x_b: &[f64], u: &[f64]) -> Result<f64> {
    let rho = stability_metrics(params).rho_s;
    contraction_gap_at_rate(params, rho, x_a, x_b, u)
}

/// Same as [`incremental_contraction_gap`] for a caller-supplied rate.
pub fn contraction_gap_at_rate(params: &GruParams, rho: f64, x_a: &[f64], x_b: &[f64], u: &[f64]) -> Result<f64> {
    let fa = params.step(x_a, u)?;
    let fb = params.step(x_b, u)?;
    let before: Vec<f64> = x_a.iter().zip(x_b).map(|(a, b)| a - b).collect();
    let after: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
    Ok(rho * inf_norm(&before) - inf_norm(&after))
}

/// Slack of `‖x+y‖∞² ≤ ‖x‖∞² + ‖y‖∞² + 2‖x∘y‖∞`.
pub fn inf_norm_square_gap(x: &[f64], y: &[f64]) -> f64 {
    let sum: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let prod: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (nx, ny, ns) = (inf_norm(x), inf_norm(y), inf_norm(&sum));
    nx * nx + ny * ny + 2.0 * inf_norm(&prod) - ns * ns
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Adds `scale · ∂‖M‖∞/∂M` into `grad`, selecting the first maximal row.
fn add_norm_subgradient(m: &Matrix, scale: f64, grad: &mut Matrix) {
    if scale == 0.0 || m.rows() == 0 {
        return;
    }
    let i = m.inf_norm_argmax();
    for j in 0..m.cols() {
        grad[(i, j)] += scale * sign(m[(i, j)]);
    }
}

/// Same for the stacked norm `‖[W U b]‖∞`.
fn add_stacked_subgradient(
    (w, u, b): (&Matrix, &Matrix, &[f64]),
    scale: f64,
    (gw, gu, gb): (&mut Matrix, &mut Matrix, &mut [f64]),
) {
    if scale == 0.0 || b.is_empty() {
        return;
    }
    let i = first_argmax(&stacked_row_sums(w, u, b));
    for j in 0..w.cols() {
        gw[(i, j)] += scale * sign(w[(i, j)]);
    }
    for j in 0..u.cols() {
        gu[(i, j)] += scale * sign(u[(i, j)]);
    }
    gb[i] += scale * sign(b[i]);
}

/// `ν` and a subgradient of `ν` with respect to every weight. Each ∞-norm is
/// differentiated through its first maximal row.
pub fn nu_subgradient(params: &GruParams) -> (f64, GruWeights) {
    let w = params.weights();
    let mut g = GruWeights::zeros(params.n(), params.m(), params.p());
    let stack_z = stacked_inf_norm(&w.w_z, &w.u_z, &w.b_z);
    let stack_r = stacked_inf_norm(&w.w_r, &w.u_r, &w.b_r);
    let stack_h = stacked_inf_norm(&w.w_h, &w.u_h, &w.b_h);
    let sz = sigmoid(stack_z);
    let one_minus_sz = sigmoid(-stack_z);
    let sr = sigmoid(stack_r);
    let phi = libm::tanh(stack_h);
    let (nz, nr, nh) = (w.u_z.inf_norm(), w.u_r.inf_norm(), w.u_h.inf_norm());

    let nu = nh * (0.25 * nr + sr) + update_gate_term(stack_z, phi, nz);

    // ν = nh (nr/4 + σ(s_r)) + (1 + tanh(s_h)) nz / (4 σ(−s_z))
    let d_nh = 0.25 * nr + sr;
    let d_nr = 0.25 * nh;
    let d_sr = nh * sr * (1.0 - sr);
    let d_nz = 0.25 * (1.0 + phi) / one_minus_sz;
    let d_sh = 0.25 * nz / one_minus_sz * (1.0 - phi * phi);
    let d_sz = 0.25 * (1.0 + phi) * nz * sz / one_minus_sz;

    add_norm_subgradient(&w.u_h, d_nh, &mut g.u_h);
    add_norm_subgradient(&w.u_r, d_nr, &mut g.u_r);
    add_norm_subgradient(&w.u_z, d_nz, &mut g.u_z);
    add_stacked_subgradient((&w.w_r, &w.u_r, &w.b_r), d_sr, (&mut g.w_r, &mut g.u_r, &mut g.b_r));
    add_stacked_subgradient((&w.w_h, &w.u_h, &w.b_h), d_sh, (&mut g.w_h, &mut g.u_h, &mut g.b_h));
    add_stacked_subgradient((&w.w_z, &w.u_z, &w.b_z), d_sz, (&mut g.w_z, &mut g.u_z, &mut g.b_z));
    (nu, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gru::tests::{scalar_uh, weights_from};
    use crate::gru::GruWeights;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_certificate() {
        let c = stability_metrics(&GruWeights::zeros(3, 2, 1).build().unwrap());
        assert_eq!(c.sigma_bar_z, 0.5);
        assert_eq!(c.sigma_bar_r, 0.5);
        assert_eq!(c.phi_bar_h, 0.0);
        assert_eq!(c.nu, 0.0);
        assert_eq!(c.rho_s, 0.5);
        assert!(c.delta_iss);
    }

    #[test]
    fn recurrent_candidate_certificate() {
        let c = stability_metrics(&scalar_uh(0.5));
        assert!((c.nu - 0.25).abs() < 1e-12);
        assert!((c.rho_s - 0.625).abs() < 1e-12);
        assert!(c.delta_iss);
    }

    #[test]
    fn large_update_gate_is_not_certified() {
        let mut w = GruWeights::zeros(1, 1, 1);
        w.u_z[(0, 0)] = 8.0;
        let c = stability_metrics(&w.build().unwrap());
        let s8 = 1.0 / (1.0 + libm::exp(-8.0));
        assert!((c.sigma_bar_z - s8).abs() < 1e-15);
        // 0.25 * 8 / (1 − σ(8)) computed independently
        assert!((c.nu - 5963.915_974_085_344).abs() / 5963.9 < 1e-12);
        assert!(!c.delta_iss);
    }

    #[test]
    fn constraint_gain_row_sums() {
        let mut w = GruWeights::zeros(2, 1, 1);
        w.u_o = Matrix::from_rows(&[vec![0.2, -0.3]]).unwrap();
        let p = w.build().unwrap();
        let l = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let c = constraint_gain(&p, &l).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15);
        assert_eq!(constraint_gain(&p, &Matrix::zeros(2, 1)).unwrap(), vec![0.0, 0.0]);
        assert!(constraint_gain(&p, &Matrix::zeros(2, 2)).is_err());

        let mut w = GruWeights::zeros(1, 1, 2);
        w.u_o = Matrix::from_rows(&[vec![-0.7], vec![0.4]]).unwrap();
        let p = w.build().unwrap();
        assert_eq!(constraint_gain(&p, &Matrix::identity(2)).unwrap(), vec![0.7, 0.4]);
    }

    #[test]
    fn constraint_gain_bound_is_attained() {
        // Hölder bound L U_o Δx ≤ c_s ‖Δx‖∞ with equality at Δx = sign(row).
        let mut w = GruWeights::zeros(2, 1, 1);
        w.u_o = Matrix::from_rows(&[vec![0.2, -0.3]]).unwrap();
        let p = w.build().unwrap();
        let c = constraint_gain(&p, &Matrix::identity(1)).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let xa: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let xb: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let d = [xa[0] - xb[0], xa[1] - xb[1]];
            assert!(0.2 * d[0] - 0.3 * d[1] <= c * inf_norm(&d) + 1e-15);
        }
        let (xa, xb) = ([1.0, -1.0], [0.0, 0.0]);
        assert!((p.output(&xa).unwrap()[0] - p.output(&xb).unwrap()[0] - c).abs() < 1e-15);
    }

    #[test]
    fn contraction_gap_edge_cases() {
        let zero = GruWeights::zeros(1, 1, 1).build().unwrap();
        assert_eq!(incremental_contraction_gap(&zero, &[0.3], &[0.3], &[0.1]).unwrap(), 0.0);
        assert_eq!(
            incremental_contraction_gap(&zero, &[1.0], &[-1.0], &[0.9]).unwrap(),
            0.0
        );
    }

    #[test]
    fn certified_models_contract_on_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut certified = 0;
        while certified < 20 {
            let vals: Vec<f64> = (0..60).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let p = weights_from(4, 2, 2, &vals);
            let c = stability_metrics(&p);
            if !c.delta_iss {
                continue;
            }
            certified += 1;
            for _ in 0..500 {
                let xa: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let xb: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let gap = contraction_gap_at_rate(&p, c.rho_s, &xa, &xb, &u).unwrap();
                assert!(gap >= -1e-12, "gap {gap}");
            }
        }
    }

    #[test]
    fn gate_bounds_hold_on_the_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = weights_from(3, 2, 1, &vals);
            let c = stability_metrics(&p);
            for _ in 0..100 {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let (_, g) = p.step_with_gates(&x, &u).unwrap();
                for j in 0..3 {
                    assert!(g.z[j] <= c.sigma_bar_z && g.z[j] >= 1.0 - c.sigma_bar_z - 1e-15);
                    assert!(g.r[j].abs() <= c.sigma_bar_r);
                    assert!(g.h[j].abs() <= c.phi_bar_h);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn certified_rate_lies_between_nu_and_one(vals in proptest::collection::vec(-1.0f64..1.0, 33)) {
            let c = stability_metrics(&weights_from(2, 2, 1, &vals));
            if c.nu < 1.0 {
                prop_assert!(c.nu < c.rho_s && c.rho_s < 1.0);
            }
        }

        #[test]
        fn inf_norm_square_bound(
            x in proptest::collection::vec(-10.0f64..10.0, 1..6),
            y in proptest::collection::vec(-10.0f64..10.0, 6),
        ) {
            let y = &y[..x.len()];
            prop_assert!(inf_norm_square_gap(&x, y) >= -1e-12);
        }
    }

    #[test]
    fn nu_subgradient_matches_finite_differences() {
        let vals: Vec<f64> = (0..27).map(|i| 0.6 * libm::sin(1.3 * i as f64 + 0.4)).collect();
        let p = weights_from(2, 1, 1, &vals);
        let (nu, g) = nu_subgradient(&p);
        assert!((nu - stability_metrics(&p).nu).abs() < 1e-15);
        let flat = p.weights().to_flat();
        let gflat = g.to_flat();
        let eps = 1e-7;
        for k in 0..flat.len() {
            let eval = |d: f64| {
                let mut w = p.weights().clone();
                let mut f = flat.clone();
                f[k] += d;
                w.set_flat(&f).unwrap();
                stability_metrics(&w.build().unwrap()).nu
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!(
                (fd - gflat[k]).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {k}: {fd} vs {}",
                gflat[k]
            );
        }
    }
}
