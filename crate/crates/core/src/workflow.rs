//! Purification-customization harness: perturb, purify, fine-tune a fresh
//! copy of the model on the purified set, sample from it and score.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::antipure::{pgd_attack, AttackConfig, LossMask};
use crate::dct::{self, PatchGrid};
use crate::denoiser::{fit, Denoiser, DenoiserModel, TrainConfig};
use crate::diffusion::{ddpm_loss, reverse, NoiseSchedule};
use crate::error::{ensure, invalid, Error, Result};
use crate::purification::{gridpure_with_checkpoints, PurifyConfig};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::Rng;

/// Fraction of per-patch DCT energy held in the high-frequency quarters.
/// Zero for an all-zero image.
pub fn hf_energy_ratio(x: &Tensor, s: usize) -> Result<f64> {
    let grid = PatchGrid::new(x.shape(), s)?;
    let coeffs = dct::patch_dct_exact_ac(&grid, x.data());
    let mask = dct::high_quarter_mask(&grid);
    let total: f64 = coeffs.iter().map(|c| c * c).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let high: f64 = coeffs.iter().zip(&mask).map(|(c, m)| m * c * c).sum();
    Ok(high / total)
}

/// Mean DCT energy at each in-patch frequency `(m, n)`, row-major `s x s`.
pub fn patch_spectrum(x: &Tensor, s: usize) -> Result<Vec<f64>> {
    let grid = PatchGrid::new(x.shape(), s)?;
    let coeffs = dct::patch_dct_exact_ac(&grid, x.data());
    let (h, w) = (grid.height, grid.width);
    let mut out = vec![0.0; s * s];
    for (k, c) in coeffs.iter().enumerate() {
        let (y, xx) = ((k / w) % h, k % w);
        out[(y % s) * s + xx % s] += c * c;
    }
    let n = grid.patch_count() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

const PSNR_MSE_FLOOR: f64 = 1e-12;

/// PSNR in dB for images in `[-1, 1]` (peak-to-peak 2).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?.max(PSNR_MSE_FLOOR);
    Ok(10.0 * (4.0 / mse).log10())
}

/// Mean DDPM loss over `images` with `draws` seeded `(t, eps)` samples each.
pub fn eval_ddpm_loss<D: Denoiser + ?Sized>(
    model: &D,
    images: &[Tensor],
    sched: &NoiseSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(
        !images.is_empty() && draws > 0,
        "evaluation needs images and draws"
    );
    let mut rng = rng::from_seed(seed);
    let mut total = 0.0;
    for x0 in images {
        for _ in 0..draws {
            let t = rng.random_range(1..=sched.len());
            let eps = rng::gaussian(x0.shape(), &mut rng);
            let tape = Tape::new();
            let l = ddpm_loss(
                model,
                &tape,
                tape.constant(x0.clone()),
                t,
                tape.constant(eps),
                sched,
            )?;
            total += l.item();
        }
    }
    Ok(total / (images.len() * draws) as f64)
}

/// Continues DDPM training of `base` on `dataset`; `base` is untouched.
pub fn finetune_on(
    dataset: &[Tensor],
    base: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<DenoiserModel> {
    fit(base, dataset, sched, cfg)
}

/// Full-chain samples from `N(0, I)` at `T` down to 0, clamped to `[-1, 1]`.
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    shape: &[usize],
    count: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|k| {
            let s = rng::derive(seed, &[k as u64]);
            let x_t = rng::gaussian(shape, &mut rng::from_seed(s));
            Ok(reverse(&x_t, sched.len(), 0, model, sched, rng::derive(s, &[1]))?.clamp(-1.0, 1.0))
        })
        .collect()
}

/// Perturbation method applied before purification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    None,
    PgdDdpm,
    PgdDdpmFre,
    PgdDdpmErrT,
    AntiPure,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::None,
        Arm::PgdDdpm,
        Arm::PgdDdpmFre,
        Arm::PgdDdpmErrT,
        Arm::AntiPure,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::PgdDdpm => "pgd_ddpm",
            Arm::PgdDdpmFre => "pgd_ddpm+fre",
            Arm::PgdDdpmErrT => "pgd_ddpm+err_t",
            Arm::AntiPure => "antipure",
        }
    }

    pub fn loss_mask(&self) -> Option<LossMask> {
        match self {
            Arm::None => None,
            Arm::PgdDdpm => Some(LossMask::DDPM),
            Arm::PgdDdpmFre => Some(LossMask::DDPM_FRE),
            Arm::PgdDdpmErrT => Some(LossMask::DDPM_ERR_T),
            Arm::AntiPure => Some(LossMask::FULL),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| invalid(format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowConfig {
    pub arms: Vec<Arm>,
    pub attack: AttackConfig,
    pub purify: PurifyConfig,
    pub finetune: TrainConfig,
    /// Cumulative purification iteration counts after which the purified set
    /// is fine-tuned on and scored. Empty means only the final result.
    pub checkpoints: Vec<usize>,
    pub samples: usize,
    /// Patch side used by the HF energy metric.
    pub metric_patch: usize,
    pub eval_draws: usize,
    pub seed: u64,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            arms: Arm::ALL.to_vec(),
            attack: AttackConfig::default(),
            purify: PurifyConfig::default(),
            finetune: TrainConfig {
                steps: 200,
                lr: 0.05,
                batch_size: 8,
                seed: 0,
            },
            checkpoints: vec![10, 20, 30, 40],
            samples: 16,
            metric_patch: 8,
            eval_draws: 4,
            seed: 0,
        }
    }
}

impl WorkflowConfig {
    pub fn resolved_checkpoints(&self) -> Vec<usize> {
        let total = self.purify.total_iterations();
        if self.checkpoints.is_empty() {
            vec![total]
        } else {
            self.checkpoints.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub arm: Arm,
    pub checkpoint: usize,
    pub image: usize,
    /// `max |x_adv - x_clean|` of the perturbation stage.
    pub perturbation_linf: f64,
    pub hf_ratio_perturbed: f64,
    pub mse_to_clean: f64,
    pub psnr: f64,
    pub hf_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub checkpoint: usize,
    pub mean_mse_to_clean: f64,
    pub mean_psnr: f64,
    pub mean_hf_ratio_perturbed: f64,
    /// Mean HF ratio of the purified set before fine-tuning.
    pub mean_hf_ratio_purified: f64,
    /// Mean HF ratio of samples from the fine-tuned model.
    pub sample_hf_ratio: f64,
    /// `sample_hf_ratio / mean_hf_ratio_purified`.
    pub amplification: f64,
    pub eval_ddpm_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: WorkflowConfig,
    pub images: Vec<ImageRecord>,
    pub summary: Vec<ArmSummary>,
}

/// Seed of the attack on clean image `i`; shared by every arm.
pub fn attack_seed(cfg: &WorkflowConfig, i: usize) -> u64 {
    rng::derive(cfg.attack.seed, &[i as u64])
}

/// Seed of the purification of image `i`; shared by every arm.
pub fn purify_seed(cfg: &WorkflowConfig, i: usize) -> u64 {
    rng::derive(cfg.purify.seed, &[i as u64])
}

/// Perturbs every image with the arm's objective (identity for `none`).
pub fn perturb_set<D: Denoiser + ?Sized>(
    clean: &[Tensor],
    arm: Arm,
    model: &D,
    sched: &NoiseSchedule,
    cfg: &WorkflowConfig,
) -> Result<Vec<Tensor>> {
    let Some(mask) = arm.loss_mask() else {
        return Ok(clean.to_vec());
    };
    clean
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let acfg = AttackConfig {
                loss_mask: mask,
                seed: attack_seed(cfg, i),
                ..cfg.attack
            };
            Ok(pgd_attack(x, model, sched, &acfg)?.0)
        })
        .collect()
}

/// Purifies every image, returning one purified set per checkpoint.
pub fn purify_set<D: Denoiser + ?Sized>(
    images: &[Tensor],
    model: &D,
    sched: &NoiseSchedule,
    cfg: &WorkflowConfig,
) -> Result<Vec<(usize, Vec<Tensor>)>> {
    let checkpoints = cfg.resolved_checkpoints();
    let total = cfg.purify.total_iterations();
    ensure!(
        checkpoints.iter().all(|&c| c >= 1 && c <= total),
        "checkpoints {:?} must lie in 1..={total}",
        checkpoints
    );
    let mut sets: Vec<(usize, Vec<Tensor>)> =
        checkpoints.iter().map(|&c| (c, Vec::new())).collect();
    for (i, x) in images.iter().enumerate() {
        let pcfg = PurifyConfig {
            seed: purify_seed(cfg, i),
            ..cfg.purify
        };
        let (_, recorded) = gridpure_with_checkpoints(x, &pcfg, model, sched, &checkpoints)?;
        for (c, img) in recorded {
            for (cp, set) in sets.iter_mut() {
                if *cp == c {
                    set.push(img.clone());
                }
            }
        }
    }
    Ok(sets)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Runs the purification-customization workflow for every arm in `cfg`.
pub fn run_pc(
    clean: &[Tensor],
    eval_set: &[Tensor],
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &WorkflowConfig,
) -> Result<ExperimentReport> {
    ensure!(!clean.is_empty(), "clean set is empty");
    ensure!(!cfg.arms.is_empty(), "no arms selected");
    cfg.attack.validate(sched)?;
    cfg.purify.validate(sched)?;
    let s = cfg.metric_patch;
    let shape = clean[0].shape().to_vec();
    let mut images = Vec::new();
    let mut summary = Vec::new();

    for &arm in &cfg.arms {
        log::info!("arm {arm}: perturbing {} images", clean.len());
        let perturbed = perturb_set(clean, arm, model, sched, cfg)?;
        let linf: Vec<f64> = perturbed
            .iter()
            .zip(clean)
            .map(|(p, c)| p.linf_distance(c))
            .collect::<Result<_>>()?;
        let hf_in: Vec<f64> = perturbed
            .iter()
            .map(|p| hf_energy_ratio(p, s))
            .collect::<Result<_>>()?;

        log::info!("arm {arm}: purifying");
        for (checkpoint, purified) in purify_set(&perturbed, model, sched, cfg)? {
            let mut hf = Vec::with_capacity(purified.len());
            for (i, p) in purified.iter().enumerate() {
                let rec = ImageRecord {
                    arm,
                    checkpoint,
                    image: i,
                    perturbation_linf: linf[i],
                    hf_ratio_perturbed: hf_in[i],
                    mse_to_clean: p.mse(&clean[i])?,
                    psnr: psnr(p, &clean[i])?,
                    hf_ratio: hf_energy_ratio(p, s)?,
                };
                hf.push(rec.hf_ratio);
                images.push(rec);
            }

            log::info!("arm {arm}: fine-tuning at checkpoint {checkpoint}");
            let tuned = finetune_on(&purified, model, sched, &cfg.finetune)?;
            let samples = sample(
                &tuned,
                &shape,
                cfg.samples,
                sched,
                rng::derive(cfg.seed, &[1]),
            )?;
            let sample_hf = mean(
                samples
                    .iter()
                    .map(|x| hf_energy_ratio(x, s))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter(),
            );
            let eval_loss = if eval_set.is_empty() {
                f64::NAN
            } else {
                eval_ddpm_loss(
                    &tuned,
                    eval_set,
                    sched,
                    cfg.eval_draws,
                    rng::derive(cfg.seed, &[2]),
                )?
            };
            let recs = &images[images.len() - purified.len()..];
            let mean_hf = mean(hf.iter().copied());
            summary.push(ArmSummary {
                arm,
                checkpoint,
                mean_mse_to_clean: mean(recs.iter().map(|r| r.mse_to_clean)),
                mean_psnr: mean(recs.iter().map(|r| r.psnr)),
                mean_hf_ratio_perturbed: mean(hf_in.iter().copied()),
                mean_hf_ratio_purified: mean_hf,
                sample_hf_ratio: sample_hf,
                amplification: if mean_hf > 0.0 {
                    sample_hf / mean_hf
                } else {
                    0.0
                },
                eval_ddpm_loss: eval_loss,
            });
        }
    }

    Ok(ExperimentReport {
        config: cfg.clone(),
        images,
        summary,
    })
}

pub const IMAGE_CSV_HEADER: &str =
    "arm,checkpoint,image,perturbation_linf,hf_ratio_perturbed,mse_to_clean,psnr,hf_ratio";

pub const SUMMARY_CSV_HEADER: &str = "arm,checkpoint,mean_mse_to_clean,mean_psnr,mean_hf_ratio_perturbed,mean_hf_ratio_purified,sample_hf_ratio,amplification,eval_ddpm_loss";

impl ExperimentReport {
    pub fn summary_for(&self, arm: Arm, checkpoint: usize) -> Option<&ArmSummary> {
        self.summary
            .iter()
            .find(|s| s.arm == arm && s.checkpoint == checkpoint)
    }

    pub fn write_images_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{IMAGE_CSV_HEADER}")?;
        for r in &self.images {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.arm,
                r.checkpoint,
                r.image,
                r.perturbation_linf,
                r.hf_ratio_perturbed,
                r.mse_to_clean,
                r.psnr,
                r.hf_ratio
            )?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{SUMMARY_CSV_HEADER}")?;
        for s in &self.summary {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.arm,
                s.checkpoint,
                s.mean_mse_to_clean,
                s.mean_psnr,
                s.mean_hf_ratio_perturbed,
                s.mean_hf_ratio_purified,
                s.sample_hf_ratio,
                s.amplification,
                s.eval_ddpm_loss
            )?;
        }
        Ok(())
    }
}
