//! Forward-diffusion schedules, latent noising, DDIM inversion, and the
//! noise-prediction training loss.
//!
//! Timesteps are 1-based: `t` in `1..=t_max` indexes the schedule and `t = 0`
//! means the clean latent, with `alpha_bar(0) = 1` by definition. Schedule
//! tables are computed and stored in f64; tensor math narrows per element to
//! the active scalar type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// beta_t = (sqrt(b0) + (t-1)/(T-1) * (sqrt(b1) - sqrt(b0)))^2
    ScaledLinear,
    /// beta_t = b0 + (t-1)/(T-1) * (b1 - b0)
    Linear,
    /// beta_t = 0: alpha_bar stays 1, noising is the identity.
    Zero,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scaled-linear" => Ok(ScheduleKind::ScaledLinear),
            "linear" => Ok(ScheduleKind::Linear),
            "zero" => Ok(ScheduleKind::Zero),
            other => Err(Error::config(format!("unknown schedule kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::ScaledLinear => "scaled-linear",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Zero => "zero",
        }
    }
}

pub const DEFAULT_BETA_START: f64 = 8.5e-4;
pub const DEFAULT_BETA_END: f64 = 1.2e-2;
pub const DEFAULT_T_MAX: usize = 1000;

/// Precomputed noise schedule.
#[derive(Debug, Clone)]
pub struct ScheduleTable {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl ScheduleTable {
    /// Schedule with the stock hyperparameters.
    pub fn default_table() -> Self {
        make_schedule(
            ScheduleKind::ScaledLinear,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
            DEFAULT_T_MAX,
        )
        .expect("default schedule parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "beta index {t} out of range");
        self.betas[t - 1]
    }

    /// Cumulative product of `(1 - beta_s)` for `s <= t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max(), "alpha_bar index {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Builds the schedule table for `t_max` steps.
pub fn make_schedule(
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    t_max: usize,
) -> Result<ScheduleTable> {
    if t_max == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if kind != ScheduleKind::Zero {
        if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must lie in (0,1): start {beta_start}, end {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::config(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
    }

    let betas: Vec<f64> = (1..=t_max)
        .map(|t| {
            // With a single step the interpolant degenerates to beta_start.
            let frac = if t_max == 1 {
                0.0
            } else {
                (t - 1) as f64 / (t_max - 1) as f64
            };
            match kind {
                ScheduleKind::ScaledLinear => {
                    let s = beta_start.sqrt() + frac * (beta_end.sqrt() - beta_start.sqrt());
                    s * s
                }
                ScheduleKind::Linear => beta_start + frac * (beta_end - beta_start),
                ScheduleKind::Zero => 0.0,
            }
        })
        .collect();

    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut acc = 1.0f64;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(ScheduleTable {
        kind,
        beta_start,
        beta_end,
        betas,
        alpha_bars,
    })
}

/// Closed-form forward noising: `z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps`.
/// `t = 0` returns `z0` unchanged, bit for bit.
pub fn q_sample<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    table: &ScheduleTable,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "q_sample: latent {:?} vs noise {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t > table.t_max() {
        return Err(Error::invalid(format!(
            "t {} exceeds schedule length {}",
            t,
            table.t_max()
        )));
    }
    if t == 0 {
        return Ok(z0.clone());
    }
    let abar = table.alpha_bar(t);
    let a = T::from_f64(abar.sqrt());
    let b = T::from_f64((1.0 - abar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Tensor::from_vec(z0.shape(), data)
}

/// Draws seeded Gaussian noise and applies [`q_sample`]. Returns the noised
/// latent together with the noise so callers can form training targets.
pub fn ddpm_noise<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    table: &ScheduleTable,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut r = rng::rng_from(seed);
    let eps = rng::normal_tensor(&mut r, z0.shape());
    let zt = q_sample(z0, t, &eps, table)?;
    Ok((zt, eps))
}

/// Uniform integer step grid `0 = t_0 < t_1 < ... < t_n = t_target`.
pub fn ddim_grid(t_target: usize, n_steps: usize) -> Result<Vec<usize>> {
    if t_target == 0 {
        return Ok(vec![0]);
    }
    if n_steps == 0 {
        return Err(Error::invalid("ddim grid needs at least one step"));
    }
    if n_steps > t_target {
        return Err(Error::invalid(format!(
            "{n_steps} steps cannot fit strictly increasing integers up to {t_target}"
        )));
    }
    Ok((0..=n_steps).map(|k| k * t_target / n_steps).collect())
}

fn ddim_step_coeffs(table: &ScheduleTable, from: usize, to: usize) -> (f64, f64) {
    let ab_from = table.alpha_bar(from);
    let ab_to = table.alpha_bar(to);
    let ratio = (ab_to / ab_from).sqrt();
    let coef_eps = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    (ratio, coef_eps)
}

/// Deterministic DDIM inversion from the clean latent up to `t_target`.
///
/// Each step applies
/// `z_next = sqrt(abar_next/abar_cur) z_cur
///         + (sqrt(1-abar_next) - sqrt(abar_next/abar_cur) sqrt(1-abar_cur)) eps_fn(z_cur, t_cur)`
/// over the uniform grid from [`ddim_grid`]. `t_target = 0` returns `z0`
/// bitwise without evaluating `eps_fn`.
pub fn ddim_invert<T: Scalar>(
    z0: &Tensor<T>,
    t_target: usize,
    n_steps: usize,
    table: &ScheduleTable,
    mut eps_fn: impl FnMut(&Tensor<T>, usize) -> Tensor<T>,
) -> Result<Tensor<T>> {
    if t_target > table.t_max() {
        return Err(Error::invalid(format!(
            "t_target {} exceeds schedule length {}",
            t_target,
            table.t_max()
        )));
    }
    if t_target == 0 {
        return Ok(z0.clone());
    }
    let grid = ddim_grid(t_target, n_steps)?;
    let mut z = z0.clone();
    for w in grid.windows(2) {
        let (cur, next) = (w[0], w[1]);
        let eps = eps_fn(&z, cur);
        if eps.shape() != z.shape() {
            return Err(Error::shape(format!(
                "eps_fn returned {:?} for latent {:?}",
                eps.shape(),
                z.shape()
            )));
        }
        let (a, b) = ddim_step_coeffs(table, cur, next);
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zv, &ev)| a * zv + b * ev)
            .collect();
        z = Tensor::from_vec(z.shape(), data)?;
    }
    Ok(z)
}

/// Deterministic DDIM generation from `z` at `t_start` down the same grid,
/// evaluating `eps_fn` at the current (higher) timestep of each transition.
/// With an `eps_fn` whose value per transition matches the one used by
/// [`ddim_invert`], this is its exact inverse.
pub fn ddim_generate<T: Scalar>(
    z: &Tensor<T>,
    t_start: usize,
    n_steps: usize,
    table: &ScheduleTable,
    mut eps_fn: impl FnMut(&Tensor<T>, usize) -> Tensor<T>,
) -> Result<Tensor<T>> {
    if t_start > table.t_max() {
        return Err(Error::invalid(format!(
            "t_start {} exceeds schedule length {}",
            t_start,
            table.t_max()
        )));
    }
    if t_start == 0 {
        return Ok(z.clone());
    }
    let grid = ddim_grid(t_start, n_steps)?;
    let mut out = z.clone();
    for w in grid.windows(2).rev() {
        let (lower, upper) = (w[0], w[1]);
        let eps = eps_fn(&out, upper);
        if eps.shape() != out.shape() {
            return Err(Error::shape(format!(
                "eps_fn returned {:?} for latent {:?}",
                eps.shape(),
                out.shape()
            )));
        }
        let (a, b) = ddim_step_coeffs(table, upper, lower);
        let (a, b) = (T::from_f64(a), T::from_f64(b));
        let data = out
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zv, &ev)| a * zv + b * ev)
            .collect();
        out = Tensor::from_vec(out.shape(), data)?;
    }
    Ok(out)
}

/// Noise-prediction objective: mean squared error over all elements.
pub fn simple_loss<T: Scalar>(eps_pred: &Tensor<T>, eps: &Tensor<T>) -> Result<f64> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "simple_loss: {:?} vs {:?}",
            eps_pred.shape(),
            eps.shape()
        )));
    }
    let n = eps_pred.numel();
    if n == 0 {
        return Err(Error::invalid("simple_loss on empty tensors"));
    }
    let mut acc = 0.0f64;
    for (a, b) in eps_pred.data().iter().zip(eps.data()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    Ok(acc / n as f64)
}
