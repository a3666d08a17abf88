//! Four-tank benchmark and excitation signals.
//!
//! ```text
//! ḣ1 = −a1/S √(2g h1) + a3/S √(2g h3) + γa/S qa
//! ḣ2 = −a2/S √(2g h2) + a4/S √(2g h4) + γb/S qb
//! ḣ3 = −a3/S √(2g h3) + (1 − γb)/S qb
//! ḣ4 = −a4/S √(2g h4) + (1 − γa)/S qa
//! ```

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Physical parameters. The defaults are an externally sourced set for the
/// HD-MPC four-tank rig, not values derived here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FourTankParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub s: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub g: f64,
    /// Lower/upper flow bounds for `(q_a, q_b)`, m³/s.
    pub q_min: [f64; 2],
    pub q_max: [f64; 2],
    /// Lower/upper level bounds for the measured `(h1, h2)`, m.
    pub h_min: [f64; 2],
    pub h_max: [f64; 2],
    /// Sampling time, s.
    pub ts: f64,
    /// RK4 substep, s.
    pub substep: f64,
}

impl Default for FourTankParams {
    fn default() -> Self {
        Self {
            a1: 1.31e-4,
            a2: 1.51e-4,
            a3: 9.27e-5,
            a4: 8.82e-5,
            s: 0.06,
            gamma_a: 0.3,
            gamma_b: 0.4,
            g: 9.81,
            q_min: [0.0, 0.0],
            q_max: [9.05e-4, 11.1e-4],
            h_min: [0.0, 0.0],
            h_max: [2.0, 2.0],
            ts: 25.0,
            substep: 1.0,
        }
    }
}

impl FourTankParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.a1,
            self.a2,
            self.a3,
            self.a4,
            self.s,
            self.g,
            self.ts,
            self.substep,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(
                "areas, gravity, sampling time and substep must be positive".into(),
            ));
        }
        if !(self.gamma_a > 0.0 && self.gamma_a < 1.0 && self.gamma_b > 0.0 && self.gamma_b < 1.0) {
            return Err(Error::InvalidArgument("valve ratios must lie in (0, 1)".into()));
        }
        if self.substep > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "substep {} s exceeds 1 s",
                self.substep
            )));
        }
        for k in 0..2 {
            if !(self.q_min[k] < self.q_max[k] && self.q_min[k] >= 0.0) || !(self.h_min[k] < self.h_max[k]) {
                return Err(Error::InvalidArgument("plant bounds must be ordered".into()));
            }
        }
        Ok(())
    }

    /// Levels at which constant flows `(q_a, q_b)` are in equilibrium.
    pub fn steady_state(&self, q_a: f64, q_b: f64) -> PlantState {
        let lvl = |flow: f64, a: f64| {
            let v = flow / a;
            v * v / (2.0 * self.g)
        };
        let h3 = lvl((1.0 - self.gamma_b) * q_b, self.a3);
        let h4 = lvl((1.0 - self.gamma_a) * q_a, self.a4);
        let h1 = lvl((1.0 - self.gamma_b) * q_b + self.gamma_a * q_a, self.a1);
        let h2 = lvl((1.0 - self.gamma_a) * q_a + self.gamma_b * q_b, self.a2);
        PlantState { h: [h1, h2, h3, h4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// `h1..h4`, m.
    pub h: [f64; 4],
}

impl PlantState {
    pub fn outputs(&self) -> [f64; 2] {
        [self.h[0], self.h[1]]
    }
}

pub fn four_tank_derivative(state: &PlantState, q_a: f64, q_b: f64, p: &FourTankParams) -> Result<[f64; 4]> {
    if state.h.iter().any(|h| !(*h >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "negative or non-finite level {:?}",
            state.h
        )));
    }
    if !(q_a >= 0.0 && q_b >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative flow ({q_a}, {q_b})")));
    }
    Ok(derivative(&state.h, q_a, q_b, p))
}

fn derivative(h: &[f64; 4], q_a: f64, q_b: f64, p: &FourTankParams) -> [f64; 4] {
    let out = |a: f64, level: f64| a / p.s * libm::sqrt(2.0 * p.g * level);
    [
        -out(p.a1, h[0]) + out(p.a3, h[2]) + p.gamma_a / p.s * q_a,
        -out(p.a2, h[1]) + out(p.a4, h[3]) + p.gamma_b / p.s * q_b,
        -out(p.a3, h[2]) + (1.0 - p.gamma_b) / p.s * q_b,
        -out(p.a4, h[3]) + (1.0 - p.gamma_a) / p.s * q_a,
    ]
}

/// Integrates one sampling interval `ts` with classical RK4 at a fixed
/// substep of at most `p.substep`. Stage arguments and the result of each
/// substep are clamped at zero.
pub fn plant_step(state: &PlantState, q_a: f64, q_b: f64, p: &FourTankParams, ts: f64) -> Result<PlantState> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling time {ts} must be positive")));
    }
    if state.h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state"));
    }
    if !(q_a >= 0.0 && q_b >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative flow ({q_a}, {q_b})")));
    }
    let substeps = libm::ceil(ts / p.substep - 1e-9).max(1.0) as usize;
    let dt = ts / substeps as f64;
    let mut h = state.h.map(|v| v.max(0.0));
    let mut clamped = 0usize;
    let clamp = |v: [f64; 4], clamped: &mut usize| {
        v.map(|x| {
            if x < 0.0 {
                *clamped += 1;
                0.0
            } else {
                x
            }
        })
    };
    let axpy = |h: &[f64; 4], k: &[f64; 4], c: f64| core::array::from_fn::<f64, 4, _>(|i| h[i] + c * k[i]);
    for _ in 0..substeps {
        let k1 = derivative(&h, q_a, q_b, p);
        let k2 = derivative(&clamp(axpy(&h, &k1, dt / 2.0), &mut clamped), q_a, q_b, p);
        let k3 = derivative(&clamp(axpy(&h, &k2, dt / 2.0), &mut clamped), q_a, q_b, p);
        let k4 = derivative(&clamp(axpy(&h, &k3, dt), &mut clamped), q_a, q_b, p);
        let next = core::array::from_fn(|i| h[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        h = clamp(next, &mut clamped);
    }
    if clamped > 0 {
        log::debug!("plant level clamped at zero {clamped} times");
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("plant state"));
    }
    Ok(PlantState { h })
}

/// Multilevel pseudo-random excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSpec {
    pub levels: usize,
    /// Samples per hold period.
    pub hold: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seed: u64,
    pub length: usize,
}

impl ExcitationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.hold < 1 {
            return Err(Error::InvalidArgument(
                "excitation needs at least 2 levels and hold ≥ 1".into(),
            ));
        }
        check_len("excitation bounds", self.lower.len(), self.upper.len())?;
        if self.lower.is_empty() || self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("excitation bounds must be ordered".into()));
        }
        Ok(())
    }

    pub fn level_values(&self, channel: usize) -> Vec<f64> {
        let (lo, hi) = (self.lower[channel], self.upper[channel]);
        (0..self.levels)
            .map(|k| lo + (hi - lo) * k as f64 / (self.levels - 1) as f64)
            .collect()
    }
}

/// 64-bit LCG with high-word extraction.
#[derive(Debug, Clone)]
pub struct Lcg(u64);

impl Lcg {
    pub const MULTIPLIER: u64 = 6364136223846793005;
    pub const INCREMENT: u64 = 1442695040888963407;

    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u32(&mut self) -> u32 {
        self.0 = self.0.wrapping_mul(Self::MULTIPLIER).wrapping_add(Self::INCREMENT);
        (self.0 >> 32) as u32
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u32() as u64 * n as u64) >> 32) as usize
    }
}

/// Piecewise-constant signal; at the start of each hold period every channel
/// draws a level in channel order.
pub fn multilevel_prs(spec: &ExcitationSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let ch = spec.lower.len();
    let levels: Vec<Vec<f64>> = (0..ch).map(|c| spec.level_values(c)).collect();
    let mut rng = Lcg::new(spec.seed);
    let mut out = Vec::with_capacity(spec.length);
    let mut current = alloc::vec![0.0; ch];
    for k in 0..spec.length {
        if k % spec.hold == 0 {
            for (c, v) in current.iter_mut().enumerate() {
                *v = levels[c][rng.below(spec.levels)];
            }
        }
        out.push(current.clone());
    }
    Ok(out)
}

/// Runs the plant under `inputs` from `x0`; returns the measured levels
/// `(h1, h2)` sampled before each input is applied.
pub fn simulate_plant(x0: &PlantState, inputs: &[Vec<f64>], p: &FourTankParams) -> Result<Vec<[f64; 2]>> {
    let mut x = *x0;
    let mut ys = Vec::with_capacity(inputs.len());
    for (k, u) in inputs.iter().enumerate() {
        check_len("plant input", 2, u.len())?;
        ys.push(x.outputs());
        x = plant_step(&x, u[0], u[1], p, p.ts).map_err(|e| e.at_step(k))?;
    }
    Ok(ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn derivative_examples() {
        let p = FourTankParams::default();
        let zero = PlantState { h: [0.0; 4] };
        assert_eq!(four_tank_derivative(&zero, 0.0, 0.0, &p).unwrap(), [0.0; 4]);

        let q_b = 5.0e-4;
        let h3 = ((1.0 - p.gamma_b) * q_b / p.a3).powi(2) / (2.0 * p.g);
        let st = PlantState { h: [0.3, 0.4, h3, 0.2] };
        assert!(four_tank_derivative(&st, 2e-4, q_b, &p).unwrap()[2].abs() < 1e-12);

        let mut p2 = p.clone();
        p2.s *= 2.0;
        let a = four_tank_derivative(&st, 2e-4, q_b, &p).unwrap();
        let b = four_tank_derivative(&st, 2e-4, q_b, &p2).unwrap();
        for i in 0..4 {
            assert_eq!(b[i], a[i] / 2.0);
        }
        assert!(four_tank_derivative(
            &PlantState {
                h: [-0.1, 0.0, 0.0, 0.0]
            },
            0.0,
            0.0,
            &p
        )
        .is_err());
        assert!(four_tank_derivative(&zero, -1e-4, 0.0, &p).is_err());
    }

    #[test]
    fn nominal_operating_point() {
        let p = FourTankParams::default();
        let ss = p.steady_state(1.63 / 3600.0, 2.0 / 3600.0);
        for h in ss.h {
            assert!((h - 0.655).abs() < 0.02, "{h}");
        }
    }

    #[test]
    fn step_examples() {
        let p = FourTankParams::default();
        let zero = PlantState { h: [0.0; 4] };
        assert_eq!(plant_step(&zero, 0.0, 0.0, &p, 25.0).unwrap(), zero);
        assert!(plant_step(&zero, 0.0, 0.0, &p, 0.0).is_err());
        assert!(plant_step(
            &PlantState {
                h: [f64::NAN, 0.0, 0.0, 0.0]
            },
            0.0,
            0.0,
            &p,
            25.0
        )
        .is_err());

        let (qa, qb) = (4e-4, 6e-4);
        let target = p.steady_state(qa, qb);
        let mut x = zero;
        for _ in 0..2000 {
            x = plant_step(&x, qa, qb, &p, p.ts).unwrap();
        }
        for i in 0..4 {
            assert!((x.h[i] - target.h[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn step_halving_self_convergence() {
        let p = FourTankParams::default();
        let mut fine = p.clone();
        fine.substep = p.substep / 2.0;
        // interior flows keep every level away from the √h singularity at 0
        let spec = ExcitationSpec {
            levels: 5,
            hold: 10,
            lower: vec![0.2 * p.q_max[0], 0.2 * p.q_max[1]],
            upper: vec![0.8 * p.q_max[0], 0.8 * p.q_max[1]],
            seed: 3,
            length: 300,
        };
        let u = multilevel_prs(&spec).unwrap();
        let (mut a, mut b) = (p.steady_state(4e-4, 5e-4), p.steady_state(4e-4, 5e-4));
        let mut worst = 0.0f64;
        for uk in &u {
            a = plant_step(&a, uk[0], uk[1], &p, p.ts).unwrap();
            b = plant_step(&b, uk[0], uk[1], &fine, fine.ts).unwrap();
            for i in 0..4 {
                worst = worst.max((a.h[i] - b.h[i]).abs());
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn levels_stay_nonnegative_and_respond_monotonically() {
        let p = FourTankParams::default();
        let mut x = PlantState {
            h: [1e-6, 0.0, 2e-6, 0.0],
        };
        for k in 0..200 {
            let q = if k % 7 < 3 { 0.0 } else { 9e-4 };
            x = plant_step(&x, q, 0.0, &p, p.ts).unwrap();
            assert!(x.h.iter().all(|h| *h >= 0.0));
        }
        let base = p.steady_state(3e-4, 5e-4);
        let more = p.steady_state(3.5e-4, 5e-4);
        assert!(more.h[0] > base.h[0]);
        let mut x = base;
        for _ in 0..3000 {
            x = plant_step(&x, 3.5e-4, 5e-4, &p, p.ts).unwrap();
        }
        assert!(x.h[0] > base.h[0] + 1e-3);
    }

    #[test]
    fn excitation_is_deterministic_and_on_levels() {
        let spec = ExcitationSpec {
            levels: 5,
            hold: 10,
            lower: vec![0.0, 0.0],
            upper: vec![9.05e-4, 11.1e-4],
            seed: 42,
            length: 500,
        };
        let a = multilevel_prs(&spec).unwrap();
        assert_eq!(a, multilevel_prs(&spec).unwrap());
        assert_eq!(a.len(), 500);
        for (k, u) in a.iter().enumerate() {
            for c in 0..2 {
                assert!(spec.level_values(c).contains(&u[c]));
            }
            if k % 10 != 0 {
                assert_eq!(u, &a[k - 1]);
            }
        }
        let bad = ExcitationSpec {
            levels: 1,
            ..spec.clone()
        };
        assert!(multilevel_prs(&bad).is_err());
        assert!(multilevel_prs(&ExcitationSpec { length: 0, ..spec })
            .unwrap()
            .is_empty());
    }

    #[test]
    fn lcg_first_draws() {
        // two levels {0, 1}, hold 1, seed 1, a single channel
        let spec = ExcitationSpec {
            levels: 2,
            hold: 1,
            lower: vec![0.0],
            upper: vec![1.0],
            seed: 1,
            length: 3,
        };
        let s = multilevel_prs(&spec).unwrap();
        assert_eq!(s, vec![vec![0.0], vec![1.0], vec![1.0]]);
    }
}
