//! Single-layer GRU state-space model
//!
//! ```text
//! z  = σ(W_z u + U_z x + b_z)
//! r  = σ(W_r u + U_r x + b_r)
//! h  = tanh(W_h u + U_h (r ∘ x) + b_h)
//! x⁺ = z ∘ x + (1 − z) ∘ h
//! ξ  = U_o x + b_o
//! ```
//!
//! All quantities live in normalized units: the state and input sets are
//! the unit ∞-balls. [`Scaler`] maps physical signals in and out of that box.

mod equilibrium;
mod stability;

pub use equilibrium::{find_equilibrium, Equilibrium, EquilibriumOptions};
pub(crate) use stability::update_gate_term;
pub use stability::{
    constraint_gain, contraction_gap_at_rate, incremental_contraction_gap, inf_norm_square_gap, nu_subgradient,
    stability_metrics, StabilityCertificate,
};

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::linalg::{sigmoid, Matrix};

/// Raw weight container. Build a validated [`GruParams`] with [`GruWeights::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruWeights {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub u_o: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl GruWeights {
    pub fn zeros(n: usize, m: usize, p: usize) -> Self {
        Self {
            w_z: Matrix::zeros(n, m),
            w_r: Matrix::zeros(n, m),
            w_h: Matrix::zeros(n, m),
            u_z: Matrix::zeros(n, n),
            u_r: Matrix::zeros(n, n),
            u_h: Matrix::zeros(n, n),
            u_o: Matrix::zeros(p, n),
            b_z: vec![0.0; n],
            b_r: vec![0.0; n],
            b_h: vec![0.0; n],
            b_o: vec![0.0; p],
        }
    }

    pub fn build(self) -> Result<GruParams> {
        GruParams::try_from(self)
    }

    fn blocks(&self) -> [&[f64]; 11] {
        [
            self.w_z.as_slice(),
            self.u_z.as_slice(),
            &self.b_z,
            self.w_r.as_slice(),
            self.u_r.as_slice(),
            &self.b_r,
            self.w_h.as_slice(),
            self.u_h.as_slice(),
            &self.b_h,
            self.u_o.as_slice(),
            &self.b_o,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.w_z.as_mut_slice(),
            self.u_z.as_mut_slice(),
            &mut self.b_z,
            self.w_r.as_mut_slice(),
            self.u_r.as_mut_slice(),
            &mut self.b_r,
            self.w_h.as_mut_slice(),
            self.u_h.as_mut_slice(),
            &mut self.b_h,
            self.u_o.as_mut_slice(),
            &mut self.b_o,
        ]
    }

    /// Flattened parameter vector in the fixed order
    /// `W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h, U_o, b_o`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// Inverse of [`GruWeights::to_flat`]; `flat` must have the same length.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.blocks().iter().map(|b| b.len()).sum();
        check_len("flat parameter vector", total, flat.len())?;
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }
}

/// Validated GRU weights with consistent dimensions and finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GruWeights", into = "GruWeights")]
pub struct GruParams {
    weights: GruWeights,
    n: usize,
    m: usize,
    p: usize,
}

impl TryFrom<GruWeights> for GruParams {
    type Error = Error;

    fn try_from(w: GruWeights) -> Result<Self> {
        let n = w.u_z.rows();
        let m = w.w_z.cols();
        let p = w.u_o.rows();
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "GRU dimensions must be positive (n={n}, m={m}, p={p})"
            )));
        }
        for (name, mat, r, c) in [
            ("W_z", &w.w_z, n, m),
            ("W_r", &w.w_r, n, m),
            ("W_h", &w.w_h, n, m),
            ("U_z", &w.u_z, n, n),
            ("U_r", &w.u_r, n, n),
            ("U_h", &w.u_h, n, n),
            ("U_o", &w.u_o, p, n),
        ] {
            check_len(name, r, mat.rows())?;
            check_len(name, c, mat.cols())?;
        }
        check_len("b_z", n, w.b_z.len())?;
        check_len("b_r", n, w.b_r.len())?;
        check_len("b_h", n, w.b_h.len())?;
        check_len("b_o", p, w.b_o.len())?;
        for block in w.blocks() {
            check_finite("GRU weights", block)?;
        }
        Ok(Self { weights: w, n, m, p })
    }
}

impl From<GruParams> for GruWeights {
    fn from(p: GruParams) -> Self {
        p.weights
    }
}

impl Deref for GruParams {
    type Target = GruWeights;

    fn deref(&self) -> &GruWeights {
        &self.weights
    }
}

/// Gate activations of one step, kept for the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruParams {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn weights(&self) -> &GruWeights {
        &self.weights
    }

    pub fn into_weights(self) -> GruWeights {
        self.weights
    }

    /// Gate kernel shared by the model and the observer. `off_z`/`off_r`
    /// are added to the gate pre-activations after the affine part.
    #[inline]
    pub(crate) fn gates_into(
        &self,
        x: &[f64],
        u: &[f64],
        off_z: Option<&[f64]>,
        off_r: Option<&[f64]>,
        z: &mut [f64],
        r: &mut [f64],
        h: &mut [f64],
    ) {
        let w = &self.weights;
        for i in 0..self.n {
            let mut az = w.b_z[i];
            let mut ar = w.b_r[i];
            for (j, &uj) in u.iter().enumerate() {
                az += w.w_z[(i, j)] * uj;
                ar += w.w_r[(i, j)] * uj;
            }
            let uz = w.u_z.row(i);
            let ur = w.u_r.row(i);
            for j in 0..self.n {
                az += uz[j] * x[j];
                ar += ur[j] * x[j];
            }
            if let Some(o) = off_z {
                az += o[i];
            }
            if let Some(o) = off_r {
                ar += o[i];
            }
            z[i] = sigmoid(az);
            r[i] = sigmoid(ar);
        }
        for i in 0..self.n {
            let mut ah = w.b_h[i];
            for (j, &uj) in u.iter().enumerate() {
                ah += w.w_h[(i, j)] * uj;
            }
            let uh = w.u_h.row(i);
            for j in 0..self.n {
                ah += uh[j] * (r[j] * x[j]);
            }
            h[i] = libm::tanh(ah);
        }
    }

    #[inline]
    pub(crate) fn combine_into(x: &[f64], z: &[f64], h: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = z[i] * x[i] + (1.0 - z[i]) * h[i];
        }
    }

    fn check_step_inputs(&self, x: &[f64], u: &[f64]) -> Result<()> {
        check_len("state", self.n, x.len())?;
        check_len("input", self.m, u.len())?;
        check_finite("state", x)?;
        check_finite("input", u)
    }

    /// State update `x⁺ = f(x, u)`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.step_with_gates(x, u).map(|(x, _)| x)
    }

    /// State update together with the gate activations.
    pub fn step_with_gates(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Gates)> {
        self.check_step_inputs(x, u)?;
        let n = self.n;
        let mut g = Gates {
            z: vec![0.0; n],
            r: vec![0.0; n],
            h: vec![0.0; n],
        };
        self.gates_into(x, u, None, None, &mut g.z, &mut g.r, &mut g.h);
        let mut next = vec![0.0; n];
        Self::combine_into(x, &g.z, &g.h, &mut next);
        Ok((next, g))
    }

    /// Output map `ξ = U_o x + b_o`.
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.n, x.len())?;
        let mut y = self.weights.b_o.clone();
        self.weights.u_o.mul_vec_acc(x, &mut y);
        Ok(y)
    }

    #[inline]
    pub(crate) fn output_into(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(&self.weights.b_o);
        self.weights.u_o.mul_vec_acc(x, y);
    }

    /// Free-run simulation. Entry `k` holds `(x_k, ξ_k)` where `x_0 = x0`
    /// and `ξ_k = g(x_k)`; the trajectory has one entry per input.
    pub fn simulate(&self, x0: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        check_len("state", self.n, x0.len())?;
        let mut out = Vec::with_capacity(inputs.len());
        let mut x = x0.to_vec();
        for (k, u) in inputs.iter().enumerate() {
            let y = self.output(&x).map_err(|e| e.at_step(k))?;
            let next = self.step(&x, u).map_err(|e| e.at_step(k))?;
            out.push((x, y));
            x = next;
        }
        Ok(out)
    }

    /// Vector-Jacobian product of one step. Given `g = ∂J/∂x⁺` evaluated at
    /// `(x, u)` with cached gates, adds `∂J/∂x` into `gx`, `∂J/∂u` into `gu`
    /// and, when requested, the weight gradients into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_vjp(
        &self,
        x: &[f64],
        u: &[f64],
        gates: (&[f64], &[f64], &[f64]),
        g: &[f64],
        gx: &mut [f64],
        gu: Option<&mut [f64]>,
        grads: Option<&mut GruWeights>,
        scratch: &mut VjpScratch,
    ) {
        let (z, r, h) = gates;
        let w = &self.weights;
        let n = self.n;
        scratch.resize(n);
        let VjpScratch { daz, dar, dah, drx } = scratch;
        for i in 0..n {
            let dz = g[i] * (x[i] - h[i]);
            let dh = g[i] * (1.0 - z[i]);
            gx[i] += g[i] * z[i];
            dah[i] = dh * (1.0 - h[i] * h[i]);
            daz[i] = dz * z[i] * (1.0 - z[i]);
        }
        drx.iter_mut().for_each(|v| *v = 0.0);
        w.u_h.tr_mul_vec_acc(dah, drx);
        for j in 0..n {
            let dr = drx[j] * x[j];
            gx[j] += drx[j] * r[j];
            dar[j] = dr * r[j] * (1.0 - r[j]);
        }
        w.u_z.tr_mul_vec_acc(daz, gx);
        w.u_r.tr_mul_vec_acc(dar, gx);
        if let Some(gu) = gu {
            w.w_z.tr_mul_vec_acc(daz, gu);
            w.w_r.tr_mul_vec_acc(dar, gu);
            w.w_h.tr_mul_vec_acc(dah, gu);
        }
        if let Some(gr) = grads {
            gr.w_z.add_outer(daz, u);
            gr.u_z.add_outer(daz, x);
            gr.w_r.add_outer(dar, u);
            gr.u_r.add_outer(dar, x);
            gr.w_h.add_outer(dah, u);
            for (i, &d) in dah.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for j in 0..n {
                    gr.u_h[(i, j)] += d * r[j] * x[j];
                }
            }
            for i in 0..n {
                gr.b_z[i] += daz[i];
                gr.b_r[i] += dar[i];
                gr.b_h[i] += dah[i];
            }
        }
    }

    /// Jacobians `(∂f/∂x, ∂f/∂u)` at `(x, u)`, assembled row by row from
    /// vector-Jacobian products.
    pub fn jacobians(&self, x: &[f64], u: &[f64]) -> Result<(Matrix, Matrix)> {
        let (_, gates) = self.step_with_gates(x, u)?;
        let (n, m) = (self.n, self.m);
        let mut jx = Matrix::zeros(n, n);
        let mut ju = Matrix::zeros(n, m);
        let mut scratch = VjpScratch::default();
        let mut e = vec![0.0; n];
        for i in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            let mut gx = vec![0.0; n];
            let mut gu = vec![0.0; m];
            self.step_vjp(
                x,
                u,
                (&gates.z, &gates.r, &gates.h),
                &e,
                &mut gx,
                Some(&mut gu),
                None,
                &mut scratch,
            );
            for j in 0..n {
                jx[(i, j)] = gx[j];
            }
            for j in 0..m {
                ju[(i, j)] = gu[j];
            }
        }
        Ok((jx, ju))
    }
}

#[derive(Debug, Default, Clone)]
pub struct VjpScratch {
    daz: Vec<f64>,
    dar: Vec<f64>,
    dah: Vec<f64>,
    drx: Vec<f64>,
}

impl VjpScratch {
    fn resize(&mut self, n: usize) {
        if self.daz.len() != n {
            self.daz = vec![0.0; n];
            self.dar = vec![0.0; n];
            self.dah = vec![0.0; n];
            self.drx = vec![0.0; n];
        }
    }
}

/// Flat storage of a forward rollout used by the reverse passes in the
/// optimizer and in training. `states` has `T + 1` entries.
#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub n: usize,
    pub states: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.z.len() / self.n.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    pub fn gates(&self, k: usize) -> (&[f64], &[f64], &[f64]) {
        let s = k * self.n..(k + 1) * self.n;
        (&self.z[s.clone()], &self.r[s.clone()], &self.h[s])
    }
}

impl GruParams {
    /// Forward rollout over a flat input sequence (`m` values per step).
    /// Reuses the buffers of `out`.
    pub fn rollout_into(&self, x0: &[f64], inputs: &[f64], out: &mut Rollout) {
        let (n, m) = (self.n, self.m);
        let steps = inputs.len() / m;
        out.n = n;
        out.states.resize((steps + 1) * n, 0.0);
        out.z.resize(steps * n, 0.0);
        out.r.resize(steps * n, 0.0);
        out.h.resize(steps * n, 0.0);
        out.states[..n].copy_from_slice(x0);
        for k in 0..steps {
            let u = &inputs[k * m..(k + 1) * m];
            let (head, tail) = out.states.split_at_mut((k + 1) * n);
            let x = &head[k * n..];
            let s = k * n..(k + 1) * n;
            self.gates_into(
                x,
                u,
                None,
                None,
                &mut out.z[s.clone()],
                &mut out.r[s.clone()],
                &mut out.h[s.clone()],
            );
            Self::combine_into(x, &out.z[s.clone()], &out.h[s], &mut tail[..n]);
        }
    }
}

/// Per-channel affine map between physical units and the normalized range
/// `[-1, 1]`: `normalized = (physical − offset) / half_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScalerRepr", into = "ScalerRepr")]
pub struct Scaler {
    offset: Vec<f64>,
    half_range: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScalerRepr {
    offset: Vec<f64>,
    half_range: Vec<f64>,
}

impl TryFrom<ScalerRepr> for Scaler {
    type Error = Error;

    fn try_from(r: ScalerRepr) -> Result<Self> {
        Scaler::new(r.offset, r.half_range)
    }
}

impl From<Scaler> for ScalerRepr {
    fn from(s: Scaler) -> Self {
        ScalerRepr {
            offset: s.offset,
            half_range: s.half_range,
        }
    }
}

impl Scaler {
    pub fn new(offset: Vec<f64>, half_range: Vec<f64>) -> Result<Self> {
        check_len("scaler", offset.len(), half_range.len())?;
        check_finite("scaler offset", &offset)?;
        check_finite("scaler half-range", &half_range)?;
        if let Some(ch) = half_range.iter().position(|&h| h <= 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "scaler channel {ch} has non-positive half-range"
            )));
        }
        Ok(Self { offset, half_range })
    }

    /// Maps each `[lo_i, hi_i]` onto `[-1, 1]`.
    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        check_len("scaler bounds", lo.len(), hi.len())?;
        let offset = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let half = lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect();
        Self::new(offset, half)
    }

    /// Min/max fit over the given samples.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let dim = samples
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidArgument("cannot fit a scaler to no samples".into()))?;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for s in samples {
            check_len("scaler sample", dim, s.len())?;
            for i in 0..dim {
                lo[i] = lo[i].min(s[i]);
                hi[i] = hi[i].max(s[i]);
            }
        }
        Self::from_bounds(&lo, &hi)
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn half_range(&self) -> &[f64] {
        &self.half_range
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.offset.iter().zip(&self.half_range))
            .map(|(x, (o, h))| (x - o) / h)
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.offset.iter().zip(&self.half_range))
            .map(|(x, (o, h))| o + h * x)
            .collect()
    }
}

/// A GRU together with the scalers that map plant signals onto its
/// normalized input/output ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruModel {
    pub params: GruParams,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

impl GruModel {
    pub fn new(params: GruParams, input_scaler: Scaler, output_scaler: Scaler) -> Result<Self> {
        check_len("input scaler", params.m(), input_scaler.dim())?;
        check_len("output scaler", params.p(), output_scaler.dim())?;
        Ok(Self {
            params,
            input_scaler,
            output_scaler,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::linalg::inf_norm;
    use alloc::vec;
    use proptest::prelude::*;

    pub(crate) fn scalar_uh(v: f64) -> GruParams {
        let mut w = GruWeights::zeros(1, 1, 1);
        w.u_h[(0, 0)] = v;
        w.build().unwrap()
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let p = GruWeights::zeros(1, 1, 1).build().unwrap();
        for u in [-1.0, 0.0, 0.7] {
            assert_eq!(p.step(&[0.4], &[u]).unwrap(), vec![0.2]);
        }
    }

    #[test]
    fn recurrent_candidate_hand_value() {
        // z = r = 0.5, h = tanh(0.5 * 0.5 * 1) = tanh(0.25)
        let p = scalar_uh(0.5);
        let (x, g) = p.step_with_gates(&[1.0], &[0.0]).unwrap();
        assert_eq!(g.z, vec![0.5]);
        assert_eq!(g.r, vec![0.5]);
        assert!((g.h[0] - 0.244_918_662_403_709_1).abs() < 1e-15);
        assert!((x[0] - 0.622_459_331_201_854_6).abs() < 1e-15);
    }

    #[test]
    fn output_map() {
        let mut w = GruWeights::zeros(2, 1, 1);
        w.u_o = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let p = w.build().unwrap();
        let y = p.output(&[0.2, 0.5]).unwrap();
        assert!((y[0] + 0.3).abs() < 1e-15);

        let mut w = GruWeights::zeros(1, 1, 1);
        w.b_o = vec![0.3];
        assert_eq!(w.build().unwrap().output(&[0.0]).unwrap(), vec![0.3]);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let p = GruWeights::zeros(2, 1, 1).build().unwrap();
        assert!(matches!(p.step(&[0.0], &[0.0]), Err(Error::Dimension { .. })));
        assert!(matches!(p.step(&[0.0, 0.0], &[0.0, 1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(p.step(&[f64::NAN, 0.0], &[0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(p.output(&[0.0]), Err(Error::Dimension { .. })));

        let mut w = GruWeights::zeros(2, 1, 1);
        w.b_h = vec![0.0];
        assert!(w.build().is_err());
        let mut w = GruWeights::zeros(1, 1, 1);
        w.u_z[(0, 0)] = f64::INFINITY;
        assert!(w.build().is_err());
        assert!(GruWeights::zeros(0, 1, 1).build().is_err());
    }

    #[test]
    fn simulate_edge_cases() {
        let p = scalar_uh(0.5);
        assert!(p.simulate(&[0.1], &[]).unwrap().is_empty());
        let traj = p.simulate(&[0.3], &[vec![0.2]]).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0].0, vec![0.3]);
        assert_eq!(traj[0].1, p.output(&[0.3]).unwrap());
        let err = p.simulate(&[0.3], &[vec![0.2], vec![0.1, 0.2]]).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 1, .. }));
    }

    #[test]
    fn flat_round_trip() {
        let mut w = GruWeights::zeros(2, 3, 1);
        let flat: Vec<f64> = (0..w.num_params()).map(|i| i as f64).collect();
        w.set_flat(&flat).unwrap();
        assert_eq!(w.to_flat(), flat);
        assert_eq!(w.b_o, vec![(w.num_params() - 1) as f64]);
    }

    #[test]
    fn scaler_round_trip_and_errors() {
        let s = Scaler::from_bounds(&[0.0, -3.0], &[2.0, 5.0]).unwrap();
        assert_eq!(s.normalize(&[0.0, 5.0]), vec![-1.0, 1.0]);
        let v = [1.234_567, -2.5];
        let back = s.denormalize(&s.normalize(&v));
        assert!(back.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(Scaler::from_bounds(&[1.0], &[1.0]).is_err());
        assert!(Scaler::fit(&[vec![2.0], vec![2.0]]).is_err());
    }

    fn jacobian_fd(p: &GruParams, x: &[f64], u: &[f64]) -> (Matrix, Matrix) {
        let eps = 1e-6;
        let (n, m) = (p.n(), p.m());
        let mut jx = Matrix::zeros(n, n);
        let mut ju = Matrix::zeros(n, m);
        for j in 0..n {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += eps;
            b[j] -= eps;
            let fa = p.step(&a, u).unwrap();
            let fb = p.step(&b, u).unwrap();
            for i in 0..n {
                jx[(i, j)] = (fa[i] - fb[i]) / (2.0 * eps);
            }
        }
        for j in 0..m {
            let mut a = u.to_vec();
            let mut b = u.to_vec();
            a[j] += eps;
            b[j] -= eps;
            let fa = p.step(x, &a).unwrap();
            let fb = p.step(x, &b).unwrap();
            for i in 0..n {
                ju[(i, j)] = (fa[i] - fb[i]) / (2.0 * eps);
            }
        }
        (jx, ju)
    }

    pub(crate) fn weights_from(n: usize, m: usize, p: usize, vals: &[f64]) -> GruParams {
        let mut w = GruWeights::zeros(n, m, p);
        let flat: Vec<f64> = (0..w.num_params()).map(|i| vals[i % vals.len()]).collect();
        w.set_flat(&flat).unwrap();
        w.build().unwrap()
    }

    proptest! {
        #[test]
        fn state_box_is_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 40),
            x in proptest::collection::vec(-1.0f64..=1.0, 3),
            u in proptest::collection::vec(-5.0f64..5.0, 2),
        ) {
            let p = weights_from(3, 2, 1, &vals);
            let next = p.step(&x, &u).unwrap();
            prop_assert!(inf_norm(&next) <= 1.0);
        }

        #[test]
        fn jacobians_match_finite_differences(
            vals in proptest::collection::vec(-1.5f64..1.5, 33),
            x in proptest::collection::vec(-1.0f64..=1.0, 2),
            u in proptest::collection::vec(-1.0f64..=1.0, 2),
        ) {
            let p = weights_from(2, 2, 1, &vals);
            let (jx, ju) = p.jacobians(&x, &u).unwrap();
            let (fx, fu) = jacobian_fd(&p, &x, &u);
            for (a, b) in jx.as_slice().iter().zip(fx.as_slice()).chain(ju.as_slice().iter().zip(fu.as_slice())) {
                prop_assert!((a - b).abs() <= 1e-7 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn rollout_matches_step() {
        let p = weights_from(3, 2, 2, &[0.3, -0.7, 0.2, 0.9, -0.1]);
        let inputs = [0.1, -0.4, 0.8, 0.3, -1.0, 0.0];
        let mut ro = Rollout::default();
        p.rollout_into(&[0.2, -0.1, 0.5], &inputs, &mut ro);
        assert_eq!(ro.len(), 3);
        let mut x = vec![0.2, -0.1, 0.5];
        for k in 0..3 {
            x = p.step(&x, &inputs[2 * k..2 * k + 2]).unwrap();
            assert_eq!(ro.state(k + 1), &x[..]);
        }
    }
}
