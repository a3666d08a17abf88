//! Dataset handling, GRU training with the ν penalty, and fit metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gru::{
    nu_subgradient, stability_metrics, GruParams, GruWeights, Rollout, Scaler, StabilityCertificate, VjpScratch,
};

/// Chronological split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 15000,
            validation: 2500,
            test: 2500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Normalized inputs and outputs, one row per sample.
    pub u: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
    pub subsequence_len: usize,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

impl Dataset {
    /// Training chunks of `subsequence_len` samples; a shorter tail is dropped.
    pub fn subsequences(&self) -> Vec<Range<usize>> {
        let l = self.subsequence_len;
        let count = self.train.len() / l;
        (0..count)
            .map(|i| self.train.start + i * l..self.train.start + (i + 1) * l)
            .collect()
    }
}

/// Normalizes physical samples and splits them chronologically.
pub fn prepare_dataset(
    u_raw: &[Vec<f64>],
    y_raw: &[Vec<f64>],
    input_scaler: Scaler,
    output_scaler: Scaler,
    split: SplitSpec,
    subsequence_len: usize,
) -> Result<Dataset> {
    check_len("dataset outputs", u_raw.len(), y_raw.len())?;
    let need = split.train + split.validation + split.test;
    if u_raw.len() < need {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} samples, split needs {need}",
            u_raw.len()
        )));
    }
    if split.train == 0 || subsequence_len == 0 || subsequence_len > split.train {
        return Err(Error::InvalidArgument(format!(
            "subsequence length {subsequence_len} does not fit a training split of {}",
            split.train
        )));
    }
    let mut u = Vec::with_capacity(need);
    let mut y = Vec::with_capacity(need);
    for k in 0..need {
        check_len("input sample", input_scaler.dim(), u_raw[k].len())?;
        check_len("output sample", output_scaler.dim(), y_raw[k].len())?;
        u.push(input_scaler.normalize(&u_raw[k]));
        y.push(output_scaler.normalize(&y_raw[k]));
    }
    let a = split.train;
    let b = a + split.validation;
    Ok(Dataset {
        u,
        y,
        train: 0..a,
        validation: a..b,
        test: b..need,
        subsequence_len,
        input_scaler,
        output_scaler,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub subsequence_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub washout: usize,
    pub penalty_weight: f64,
    pub margin: f64,
    pub clip_norm: f64,
    /// Initial weights are uniform in `±init_scale / √n`.
    pub init_scale: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 10,
            subsequence_len: 500,
            batch_size: 5,
            learning_rate: 0.01,
            epochs: 200,
            washout: 50,
            penalty_weight: 1.0,
            margin: 0.05,
            clip_norm: 1.0,
            init_scale: 0.5,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.subsequence_len > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.washout < self.subsequence_len
            && self.penalty_weight >= 0.0
            && self.margin > 0.0
            && self.margin < 1.0
            && self.clip_norm > 0.0
            && self.init_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid training configuration {self:?}"
            )))
        }
    }
}

/// `max(0, ν − (1 − margin))²`.
pub fn nu_penalty(params: &GruParams, margin: f64) -> f64 {
    let excess = (stability_metrics(params).nu - (1.0 - margin)).max(0.0);
    excess * excess
}

/// [`nu_penalty`] and its subgradient.
pub fn nu_penalty_grad(params: &GruParams, margin: f64) -> (f64, GruWeights) {
    let (nu, mut g) = nu_subgradient(params);
    let excess = (nu - (1.0 - margin)).max(0.0);
    let scale = 2.0 * excess;
    let mut flat = g.to_flat();
    flat.iter_mut().for_each(|v| *v *= scale);
    g.set_flat(&flat).expect("same shape");
    (excess * excess, g)
}

fn mse_and_grad(
    params: &GruParams,
    u: &[Vec<f64>],
    y: &[Vec<f64>],
    washout: usize,
    grads: Option<&mut GruWeights>,
    ro: &mut Rollout,
    scratch: &mut VjpScratch,
) -> f64 {
    let (n, p) = (params.n(), params.p());
    let t = u.len();
    let flat: Vec<f64> = u.iter().flatten().copied().collect();
    ro.n = n;
    params.rollout_into(&vec![0.0; n], &flat, ro);
    let count = ((t - washout.min(t)) * p).max(1) as f64;
    let mut loss = 0.0;
    let mut err = vec![vec![0.0; p]; t];
    let mut xi = vec![0.0; p];
    for k in washout.min(t)..t {
        xi.iter_mut().for_each(|v| *v = 0.0);
        params.output_into(ro.state(k), &mut xi);
        for j in 0..p {
            let e = xi[j] - y[k][j];
            loss += e * e;
            err[k][j] = 2.0 * e / count;
        }
    }
    let Some(grads) = grads else {
        return loss / count;
    };
    let mut g = vec![0.0; n];
    let mut gnew = vec![0.0; n];
    for k in (0..t).rev() {
        gnew.iter_mut().for_each(|v| *v = 0.0);
        params.step_vjp(
            ro.state(k),
            &u[k],
            ro.gates(k),
            &g,
            &mut gnew,
            None,
            Some(grads),
            scratch,
        );
        if k >= washout {
            let d = &err[k];
            params.u_o.tr_mul_vec_acc(d, &mut gnew);
            grads.u_o.add_outer(d, ro.state(k));
            for j in 0..p {
                grads.b_o[j] += d[j];
            }
        }
        core::mem::swap(&mut g, &mut gnew);
    }
    loss / count
}

/// Free-run mean squared output error from a zero state, samples before
/// `washout` excluded.
pub fn simulation_mse(params: &GruParams, u: &[Vec<f64>], y: &[Vec<f64>], washout: usize) -> f64 {
    mse_and_grad(
        params,
        u,
        y,
        washout,
        None,
        &mut Rollout::default(),
        &mut VjpScratch::default(),
    )
}

/// Loss of one sequence and its gradient (added into `grads`).
pub fn sequence_loss_grad(
    params: &GruParams,
    u: &[Vec<f64>],
    y: &[Vec<f64>],
    washout: usize,
    grads: &mut GruWeights,
) -> f64 {
    mse_and_grad(
        params,
        u,
        y,
        washout,
        Some(grads),
        &mut Rollout::default(),
        &mut VjpScratch::default(),
    )
}

/// Free-run outputs from a zero state.
pub fn free_run(params: &GruParams, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(params
        .simulate(&vec![0.0; params.n()], u)?
        .into_iter()
        .map(|(_, y)| y)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub certificate: StabilityCertificate,
    /// Epoch whose weights were returned.
    pub selected_epoch: usize,
    /// Set when a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
}

impl TrainingReport {
    pub fn certified(&self) -> bool {
        self.certificate.delta_iss
    }
}

fn random_weights(n: usize, m: usize, p: usize, scale: f64, rng: &mut ChaCha8Rng) -> GruWeights {
    let mut w = GruWeights::zeros(n, m, p);
    let bound = scale / libm::sqrt(n as f64);
    let flat: Vec<f64> = (0..w.num_params()).map(|_| rng.gen_range(-bound..bound)).collect();
    w.set_flat(&flat).expect("sized from the same shape");
    w
}

struct OptState {
    m1: Vec<f64>,
    m2: Vec<f64>,
    t: i32,
}

/// Mini-batch training on free-run simulation error plus the weighted ν
/// penalty. Returns the lowest-validation-loss certified epoch when one
/// exists, otherwise the last finite weights.
pub fn train_gru(dataset: &Dataset, config: &TrainConfig) -> Result<(GruParams, TrainingReport)> {
    config.validate()?;
    let (m, p) = (dataset.input_scaler.dim(), dataset.output_scaler.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = random_weights(config.hidden, m, p, config.init_scale, &mut rng).build()?;
    let dim = params.num_params();
    let mut opt = OptState {
        m1: vec![0.0; dim],
        m2: vec![0.0; dim],
        t: 0,
    };
    let mut chunks = Dataset {
        subsequence_len: config.subsequence_len,
        ..dataset.clone()
    }
    .subsequences();
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("no training subsequences".into()));
    }
    let val = dataset.validation.clone();
    let mut ro = Rollout::default();
    let mut scratch = VjpScratch::default();

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, GruParams)> = None;
    let mut last_finite = (0usize, params.clone());
    let mut diverged_at = None;

    'epochs: for epoch in 0..config.epochs {
        chunks.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in chunks.chunks(config.batch_size) {
            let mut grads = GruWeights::zeros(config.hidden, m, p);
            let mut batch_loss = 0.0;
            for r in batch {
                batch_loss += mse_and_grad(
                    &params,
                    &dataset.u[r.clone()],
                    &dataset.y[r.clone()],
                    config.washout,
                    Some(&mut grads),
                    &mut ro,
                    &mut scratch,
                );
            }
            let inv = 1.0 / batch.len() as f64;
            let mut g = grads.to_flat();
            g.iter_mut().for_each(|v| *v *= inv);
            batch_loss *= inv;
            if config.penalty_weight > 0.0 {
                let (pen, pg) = nu_penalty_grad(&params, config.margin);
                batch_loss += config.penalty_weight * pen;
                for (a, b) in g.iter_mut().zip(pg.to_flat()) {
                    *a += config.penalty_weight * b;
                }
            }
            if !batch_loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            epoch_loss += batch_loss * batch.len() as f64;
            let norm = libm::sqrt(g.iter().map(|v| v * v).sum::<f64>());
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
            let mut w = params.to_flat();
            apply_update(&mut w, &g, &mut opt, config);
            let mut weights = params.into_weights();
            weights.set_flat(&w)?;
            params = match weights.build() {
                Ok(p) => p,
                Err(_) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
            };
        }
        let train_loss = epoch_loss / chunks.len() as f64;
        let validation_loss = mse_and_grad(
            &params,
            &dataset.u[val.clone()],
            &dataset.y[val.clone()],
            config.washout,
            None,
            &mut ro,
            &mut scratch,
        );
        let nu = stability_metrics(&params).nu;
        if !validation_loss.is_finite() {
            diverged_at = Some(epoch);
            break;
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            nu,
        });
        last_finite = (epoch, params.clone());
        if nu < 1.0 && best.as_ref().map_or(true, |(v, _, _)| validation_loss < *v) {
            best = Some((validation_loss, epoch, params.clone()));
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e}, validation {validation_loss:.3e}, ν = {nu:.4}");
    }

    let (selected_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => last_finite,
    };
    let certificate = stability_metrics(&params);
    Ok((
        params,
        TrainingReport {
            epochs: records,
            certificate,
            selected_epoch,
            diverged_at,
        },
    ))
}

fn apply_update(w: &mut [f64], g: &[f64], opt: &mut OptState, config: &TrainConfig) {
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
        Optimizer::Momentum { beta } => {
            for ((wi, gi), v) in w.iter_mut().zip(g).zip(opt.m1.iter_mut()) {
                *v = beta * *v + gi;
                *wi -= lr * *v;
            }
        }
        Optimizer::Adam { beta1, beta2, epsilon } => {
            opt.t += 1;
            let c1 = 1.0 - libm::pow(beta1, opt.t as f64);
            let c2 = 1.0 - libm::pow(beta2, opt.t as f64);
            for i in 0..w.len() {
                opt.m1[i] = beta1 * opt.m1[i] + (1.0 - beta1) * g[i];
                opt.m2[i] = beta2 * opt.m2[i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (opt.m1[i] / c1) / (libm::sqrt(opt.m2[i] / c2) + epsilon);
            }
        }
    }
}

/// Per-channel `100 (1 − ‖y − ξ‖₂ / ‖y − ȳ‖₂)`; `None` for a constant channel.
pub fn fit_index(y: &[Vec<f64>], xi: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    check_len("fit sequences", y.len(), xi.len())?;
    if y.len() < 2 {
        return Err(Error::InvalidArgument("FIT needs at least two samples".into()));
    }
    let p = y[0].len();
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let mean = y.iter().map(|v| v[j]).sum::<f64>() / y.len() as f64;
        let num = libm::sqrt(
            y.iter()
                .zip(xi)
                .map(|(a, b)| (a[j] - b[j]) * (a[j] - b[j]))
                .sum::<f64>(),
        );
        let den = libm::sqrt(y.iter().map(|a| (a[j] - mean) * (a[j] - mean)).sum::<f64>());
        out.push(if den > 0.0 {
            Some(100.0 * (1.0 - num / den))
        } else {
            None
        });
    }
    Ok(out)
}

/// Largest absolute free-run output error on the test split (normalized
/// units, samples before `washout` excluded).
pub fn estimate_w_bar_y(params: &GruParams, dataset: &Dataset, washout: usize) -> Result<f64> {
    let u = &dataset.u[dataset.test.clone()];
    let y = &dataset.y[dataset.test.clone()];
    let xi = free_run(params, u)?;
    Ok(y.iter()
        .zip(&xi)
        .skip(washout)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

/// Test-split outputs and free-run predictions, for FIT reporting.
pub fn test_predictions(
    params: &GruParams,
    dataset: &Dataset,
    washout: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let u = &dataset.u[dataset.test.clone()];
    let y = dataset.y[dataset.test.clone()].to_vec();
    let xi = free_run(params, u)?;
    Ok((y[washout..].to_vec(), xi[washout..].to_vec()))
}
