//! DDPM noise schedule and the closed-form forward/prediction equations.
//!
//! Timesteps are 1-based: `t` runs over `1..=T` and `alpha_bar(t)` is the
//! product of `1 - beta_s` for `s = 1..=t`.

use crate::denoiser::Denoiser;
use crate::error::{ensure, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(
            steps >= 2,
            "schedule needs at least 2 timesteps, got {steps}"
        );
        ensure!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        );
        let span = (steps - 1) as f64;
        let betas = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(betas.len() >= 2, "schedule needs at least 2 timesteps");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            "every beta must lie in (0, 1)"
        );
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// T = 100, beta linear in [1e-4, 0.02].
    pub fn toy_default() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("valid default schedule")
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.len()).contains(&t),
            "timestep {t} outside 1..={}",
            self.len()
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

pub(crate) fn diffuse_with_alpha_bar(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    diffuse_with_alpha_bar(x0, eps, sched.alpha_bar(t))
}

/// `(x_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)`.
pub fn predict_x0(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (inv_a, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(eps_pred, |x, e| (x - b * e) * inv_a)
}

pub fn diffuse_var<'t>(
    x0: Var<'t>,
    t: usize,
    eps: Var<'t>,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    x0.scale(ab.sqrt()).add(eps.scale((1.0 - ab).sqrt()))
}

pub fn predict_x0_var<'t>(
    x_t: Var<'t>,
    eps_pred: Var<'t>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(x_t
        .sub(eps_pred.scale((1.0 - ab).sqrt()))?
        .scale(1.0 / ab.sqrt()))
}

/// DDPM training loss `mean((eps - eps_theta(x_t, t))^2)` with the noise
/// predictor supplied as a closure over the tape.
pub fn ddpm_loss_with<'t>(
    predict: impl FnOnce(Var<'t>, usize) -> Result<Var<'t>>,
    x0: Var<'t>,
    t: usize,
    eps: Var<'t>,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    let x_t = diffuse_var(x0, t, eps, sched)?;
    let pred = predict(x_t, t)?;
    eps.mse(pred)
}

pub fn ddpm_loss<'t, D: Denoiser + ?Sized>(
    model: &D,
    tape: &'t Tape,
    x0: Var<'t>,
    t: usize,
    eps: Var<'t>,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    ddpm_loss_with(|x, t| model.forward(tape, x, t), x0, t, eps, sched)
}

/// Ancestral DDPM sampling from `t_from` down to `t_to` with posterior
/// variance `beta_t`. Fresh Gaussian noise is injected after every step but
/// the last.
pub fn reverse<D: Denoiser + ?Sized>(
    x_t: &Tensor,
    t_from: usize,
    t_to: usize,
    model: &D,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    ensure!(
        t_from > t_to,
        "reverse needs t_from > t_to, got {t_from} -> {t_to}"
    );
    sched.check_t(t_from)?;
    let mut rng = rng::from_seed(seed);
    let mut x = x_t.clone();
    for t in (t_to + 1..=t_from).rev() {
        let eps = model.predict(&x, t)?;
        let (alpha, beta, ab) = (sched.alpha(t), sched.beta(t), sched.alpha_bar(t));
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        x = x.zip_map(&eps, |x, e| inv_sqrt_alpha * (x - coef * e))?;
        if t > t_to + 1 {
            let z = rng::gaussian(x.shape(), &mut rng);
            let sigma = beta.sqrt();
            x = x.zip_map(&z, |x, z| x + sigma * z)?;
        }
    }
    Ok(x)
}
