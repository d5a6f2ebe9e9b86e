//! The attack: patch-wise frequency guidance, erroneous-timestep guidance,
//! their combination with the DDPM loss, and the l-infinity PGD driver.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dct::{high_quarter_mask, PatchGrid};
use crate::denoiser::Denoiser;
use crate::diffusion::{diffuse_var, predict_x0_var, NoiseSchedule};
use crate::error::{ensure, invalid, Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which terms of the combined objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub ddpm: bool,
    pub fre: bool,
    pub err_t: bool,
}

impl LossMask {
    pub const DDPM: Self = Self {
        ddpm: true,
        fre: false,
        err_t: false,
    };
    pub const DDPM_FRE: Self = Self {
        ddpm: true,
        fre: true,
        err_t: false,
    };
    pub const DDPM_ERR_T: Self = Self {
        ddpm: true,
        fre: false,
        err_t: true,
    };
    pub const FULL: Self = Self {
        ddpm: true,
        fre: true,
        err_t: true,
    };

    pub fn any(&self) -> bool {
        self.ddpm || self.fre || self.err_t
    }
}

impl Default for LossMask {
    fn default() -> Self {
        Self::FULL
    }
}

/// `ddpm+fre+err_t` style; `antipure` is accepted for the full mask.
impl FromStr for LossMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "antipure" || s == "full" {
            return Ok(Self::FULL);
        }
        let mut mask = Self {
            ddpm: false,
            fre: false,
            err_t: false,
        };
        for part in s.split('+') {
            match part.trim() {
                "ddpm" | "pgd_ddpm" => mask.ddpm = true,
                "fre" => mask.fre = true,
                "err_t" => mask.err_t = true,
                other => return Err(invalid(format!("unknown loss term `{other}` in `{s}`"))),
            }
        }
        Ok(mask)
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.ddpm, "ddpm"),
            (self.fre, "fre"),
            (self.err_t, "err_t"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        write!(f, "{}", parts.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// l-infinity budget in the [-1, 1] image range.
    pub eta: f64,
    /// PGD step size.
    pub alpha: f64,
    pub steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub t_err: usize,
    /// Attack timesteps are drawn from `U(1, t_p)`.
    pub t_p: usize,
    pub patch_size: usize,
    pub loss_mask: LossMask,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eta: 16.0 / 255.0,
            alpha: 5e-3,
            steps: 100,
            lambda1: 0.5,
            lambda2: 0.5,
            t_err: 99,
            t_p: 10,
            patch_size: 8,
            loss_mask: LossMask::FULL,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        ensure!(self.eta > 0.0, "eta must be > 0, got {}", self.eta);
        ensure!(self.alpha > 0.0, "alpha must be > 0, got {}", self.alpha);
        sched.check_t(self.t_p)?;
        sched.check_t(self.t_err)?;
        ensure!(
            self.patch_size >= 2 && self.patch_size.is_multiple_of(2),
            "patch size must be even and >= 2, got {}",
            self.patch_size
        );
        ensure!(self.loss_mask.any(), "loss mask disables every term");
        Ok(())
    }
}

/// Patch-wise frequency guidance: the mean over patches (and channels) of
/// `4/s^2 * sum of the bottom-right DCT quarter`, passed through a sigmoid.
pub fn loss_fre<'t>(x0_hat: Var<'t>, s: usize) -> Result<Var<'t>> {
    let grid = PatchGrid::new(&x0_hat.shape(), s)?;
    let mask = Tensor::new(x0_hat.shape(), high_quarter_mask(&grid))?;
    let tape = x0_hat.tape();
    let coeffs = x0_hat.patch_dct(s)?;
    let scale = 4.0 / (s * s) as f64 / grid.patch_count() as f64;
    Ok(coeffs
        .mul(tape.constant(mask))?
        .sum()
        .scale(scale)
        .sigmoid())
}

/// Erroneous-timestep guidance `-mean((eps(x_t, t_err) - eps(x_t, t))^2)`.
pub fn loss_err_t<'t, D: Denoiser + ?Sized>(
    model: &D,
    tape: &'t Tape,
    x_t: Var<'t>,
    t: usize,
    t_err: usize,
    sched: &NoiseSchedule,
) -> Result<Var<'t>> {
    sched.check_t(t)?;
    sched.check_t(t_err)?;
    let at_t = model.forward(tape, x_t, t)?;
    err_t_from(model, tape, x_t, at_t, t_err)
}

fn err_t_from<'t, D: Denoiser + ?Sized>(
    model: &D,
    tape: &'t Tape,
    x_t: Var<'t>,
    at_t: Var<'t>,
    t_err: usize,
) -> Result<Var<'t>> {
    let at_err = model.forward(tape, x_t, t_err)?;
    Ok(at_err.mse(at_t)?.neg())
}

/// Component values of one evaluation of the combined objective. Masked
/// terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub ddpm: Option<f64>,
    pub fre: Option<f64>,
    pub err_t: Option<f64>,
    pub total: f64,
}

/// `L_ddpm + lambda1 e^(abar_t - 1) L_fre + lambda2 e^(L_err_t)` at
/// `x_t = diffuse(x0 + delta, t, eps)`, restricted to the terms in
/// `cfg.loss_mask`.
#[allow(clippy::too_many_arguments)]
pub fn loss_pgd<'t, D: Denoiser + ?Sized>(
    model: &D,
    tape: &'t Tape,
    x0: Var<'t>,
    delta: Var<'t>,
    t: usize,
    eps: Var<'t>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<(Var<'t>, LossComponents)> {
    ensure!(
        t >= 1 && t <= cfg.t_p,
        "attack timestep {t} outside 1..={}",
        cfg.t_p
    );
    ensure!(cfg.loss_mask.any(), "loss mask disables every term");
    let x_t = diffuse_var(x0.add(delta)?, t, eps, sched)?;
    let eps_pred = model.forward(tape, x_t, t)?;

    let mut total: Option<Var<'t>> = None;
    let mut push = |term: Var<'t>| -> Result<()> {
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
        Ok(())
    };
    let mut parts = LossComponents {
        ddpm: None,
        fre: None,
        err_t: None,
        total: 0.0,
    };
    if cfg.loss_mask.ddpm {
        let l = eps.mse(eps_pred)?;
        parts.ddpm = Some(l.item());
        push(l)?;
    }
    if cfg.loss_mask.fre {
        let x0_hat = predict_x0_var(x_t, eps_pred, t, sched)?;
        let l = loss_fre(x0_hat, cfg.patch_size)?;
        parts.fre = Some(l.item());
        let weight = cfg.lambda1 * (sched.alpha_bar(t) - 1.0).exp();
        push(l.scale(weight))?;
    }
    if cfg.loss_mask.err_t {
        sched.check_t(cfg.t_err)?;
        let l = err_t_from(model, tape, x_t, eps_pred, cfg.t_err)?;
        parts.err_t = Some(l.item());
        push(l.exp().scale(cfg.lambda2))?;
    }
    let total = total.expect("mask has at least one term");
    parts.total = total.item();
    Ok((total, parts))
}

/// How `(t, eps)` are drawn across PGD steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Fresh `t ~ U(1, t_p)` and `eps` every step.
    #[default]
    Resample,
    /// One draw held fixed for the whole run.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Objective at the iterate the step started from.
    pub losses: LossComponents,
    /// `max |delta|` after the step's projection.
    pub delta_linf: f64,
    /// Range of `x0 + delta` after the projection.
    pub adv_min: f64,
    pub adv_max: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackTrace {
    pub steps: Vec<StepRecord>,
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

pub fn pgd_attack<D: Denoiser + ?Sized>(
    x0: &Tensor,
    model: &D,
    sched: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<(Tensor, AttackTrace)> {
    pgd_attack_with(x0, model, sched, cfg, NoiseMode::Resample)
}

/// Sign-gradient ascent on [`loss_pgd`] projected onto the `eta` ball
/// around `x0` intersected with `[-1, 1]`.
pub fn pgd_attack_with<D: Denoiser + ?Sized>(
    x0: &Tensor,
    model: &D,
    sched: &NoiseSchedule,
    cfg: &AttackConfig,
    mode: NoiseMode,
) -> Result<(Tensor, AttackTrace)> {
    cfg.validate(sched)?;
    ensure!(
        x0.data().iter().all(|v| (-1.0..=1.0).contains(v)),
        "attack input must lie in [-1, 1]"
    );
    let mut rng = rng::from_seed(cfg.seed);
    let draw = |rng: &mut rng::Rng| {
        let t = rng.random_range(1..=cfg.t_p);
        (t, rng::gaussian(x0.shape(), rng))
    };
    let frozen = match mode {
        NoiseMode::Frozen => Some(draw(&mut rng)),
        NoiseMode::Resample => None,
    };

    let lo: Vec<f64> = x0.data().iter().map(|x| (-cfg.eta).max(-1.0 - x)).collect();
    let hi: Vec<f64> = x0.data().iter().map(|x| cfg.eta.min(1.0 - x)).collect();
    let mut delta = Tensor::zeros(x0.shape());
    let mut trace = AttackTrace::default();

    for _ in 0..cfg.steps {
        let (t, eps) = match &frozen {
            Some((t, eps)) => (*t, eps.clone()),
            None => draw(&mut rng),
        };
        let tape = Tape::new();
        let d = tape.leaf(delta.clone());
        let (loss, losses) = loss_pgd(
            model,
            &tape,
            tape.constant(x0.clone()),
            d,
            t,
            tape.constant(eps),
            cfg,
            sched,
        )?;
        let grad = tape.gradients(loss)?.wrt(d);
        for (i, (dv, g)) in delta.data_mut().iter_mut().zip(grad.data()).enumerate() {
            *dv = (*dv + cfg.alpha * sign(*g)).clamp(lo[i], hi[i]);
        }
        let (adv_min, adv_max) = x0
            .data()
            .iter()
            .zip(delta.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, d)| {
                (lo.min(x + d), hi.max(x + d))
            });
        trace.steps.push(StepRecord {
            t,
            losses,
            delta_linf: delta.max_abs(),
            adv_min,
            adv_max,
        });
    }

    let adv = x0.add(&delta)?.clamp(-1.0, 1.0);
    Ok((adv, trace))
}
