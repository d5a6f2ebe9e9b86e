//! Subcommand implementations. Every command writes into its `--out`
//! directory and leaves a `run.conf` snapshot there.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use antipure_core::antipure::pgd_attack;
use antipure_core::data::{generate, DatasetConfig};
use antipure_core::denoiser::{block_probe, fit, load_checkpoint, save_checkpoint, train};
use antipure_core::purification::{diffpure, gridpure};
use antipure_core::workflow::{
    eval_ddpm_loss, hf_energy_ratio, patch_spectrum, psnr, run_pc, sample, ExperimentReport,
};
use antipure_core::{AttackConfig, DenoiserModel, PurifyConfig, Tensor};

use crate::config::{PurifyMethod, RunConfig, Split, SNAPSHOT_NAME};
use crate::imageio::{read_set, write_set};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn finish(mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush()?;
    Ok(())
}

/// Creates the output directory and writes the configuration snapshot.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let snap = out.join(SNAPSHOT_NAME);
    fs::write(&snap, cfg.to_text()).with_context(|| format!("writing {}", snap.display()))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<DenoiserModel> {
    let m = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if *m.spec() != cfg.model {
        log::warn!(
            "checkpoint spec {:?} differs from [model] {:?}; using the checkpoint",
            m.spec(),
            cfg.model
        );
    }
    Ok(m)
}

fn dataset(cfg: &RunConfig, split: Split) -> Vec<Tensor> {
    generate(&DatasetConfig {
        count: cfg.dataset_count(split),
        size: cfg.data.size,
        seed: cfg.dataset_seed(split),
    })
}

fn check_nonempty(images: &[Tensor], what: &str) -> Result<()> {
    if images.is_empty() {
        bail!("{what} is empty");
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let split = cfg.data.split;
    let images = dataset(cfg, split);
    check_nonempty(&images, "dataset")?;
    info!("writing {} {split} images", images.len());
    write_set(&out.join("images"), &images)
}

fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,loss")?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    finish(w)
}

pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let images = read_set(data)?;
    let sched = cfg.schedule()?;
    info!(
        "training for {} steps on {} images",
        cfg.train.steps,
        images.len()
    );
    let model = train(cfg.model, &images, &sched, &cfg.train_config())?;
    save_checkpoint(&model, out.join("model.ckpt"))?;
    write_loss_curve(&out.join("loss.csv"), &model.training_meta.loss_curve)
}

pub fn attack(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let model = load_model(model, cfg)?;
    let sched = cfg.schedule()?;
    let images = read_set(input)?;
    let base = cfg.attack_config();
    let mut trace_csv = create(&out.join("trace.csv"))?;
    writeln!(
        trace_csv,
        "image,step,t,ddpm,fre,err_t,total,delta_linf,adv_min,adv_max"
    )?;
    let mut adv = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        info!("attacking image {i}");
        let acfg = AttackConfig {
            seed: antipure_core::rng::derive(base.seed, &[i as u64]),
            ..base
        };
        let (x_adv, trace) = pgd_attack(x, &model, &sched, &acfg)?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (k, s) in trace.steps.iter().enumerate() {
            writeln!(
                trace_csv,
                "{i},{},{},{},{},{},{},{},{},{}",
                k + 1,
                s.t,
                opt(s.losses.ddpm),
                opt(s.losses.fre),
                opt(s.losses.err_t),
                s.losses.total,
                s.delta_linf,
                s.adv_min,
                s.adv_max
            )?;
        }
        adv.push(x_adv);
    }
    finish(trace_csv)?;
    write_set(&out.join("images"), &adv)
}

pub fn purify(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let model = load_model(model, cfg)?;
    let sched = cfg.schedule()?;
    let images = read_set(input)?;
    let base = cfg.purify_config();
    let purified = images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            info!("purifying image {i}");
            let pcfg = PurifyConfig {
                seed: antipure_core::rng::derive(base.seed, &[i as u64]),
                ..base
            };
            Ok(match cfg.purify_method {
                PurifyMethod::GridPure => gridpure(x, &pcfg, &model, &sched)?,
                PurifyMethod::DiffPure => diffpure(x, pcfg.t_p, &model, &sched, pcfg.seed)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_set(&out.join("images"), &purified)
}

pub fn finetune(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let base = load_model(model, cfg)?;
    let sched = cfg.schedule()?;
    let images = read_set(data)?;
    info!(
        "fine-tuning for {} steps on {} images",
        cfg.finetune.steps,
        images.len()
    );
    let tuned = fit(&base, &images, &sched, &cfg.finetune_config())?;
    save_checkpoint(&tuned, out.join("model.ckpt"))?;
    write_loss_curve(&out.join("loss.csv"), &tuned.training_meta.loss_curve)
}

pub fn sample_cmd(cfg: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let model = load_model(model, cfg)?;
    let sched = cfg.schedule()?;
    let spec = model.spec();
    let shape = [spec.in_channels, cfg.data.size, cfg.data.size];
    info!("drawing {} samples", cfg.workflow.samples);
    let samples = sample(
        &model,
        &shape,
        cfg.workflow.samples,
        &sched,
        cfg.sample_seed(),
    )?;
    write_set(&out.join("images"), &samples)
}

pub fn probe_blocks(cfg: &RunConfig, model: &Path, a: &Path, b: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let model = load_model(model, cfg)?;
    let sched = cfg.schedule()?;
    let (xa, xb) = (read_set(a)?, read_set(b)?);
    if xa.len() != xb.len() {
        bail!("image sets differ in size: {} vs {}", xa.len(), xb.len());
    }
    let mut w = create(&out.join("block_probe.csv"))?;
    writeln!(w, "image,t,block,mse")?;
    for &t in &cfg.probe_timesteps {
        sched.check_t(t)?;
        for (i, (u, v)) in xa.iter().zip(&xb).enumerate() {
            for (k, m) in block_probe(&model, u, v, t)?.iter().enumerate() {
                writeln!(w, "{i},{t},{k},{m}")?;
            }
        }
    }
    finish(w)
}

pub fn spectra(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let images = read_set(input)?;
    let s = cfg.workflow.metric_patch;
    let mut w = create(&out.join("spectra.csv"))?;
    writeln!(w, "image,row,col,energy")?;
    let mut r = create(&out.join("hf_ratio.csv"))?;
    writeln!(r, "image,hf_ratio")?;
    for (i, x) in images.iter().enumerate() {
        for (k, e) in patch_spectrum(x, s)?.iter().enumerate() {
            writeln!(w, "{i},{},{},{e}", k / s, k % s)?;
        }
        writeln!(r, "{i},{}", hf_energy_ratio(x, s)?)?;
    }
    finish(w)?;
    finish(r)
}

/// Per-image metrics; distances need `reference`, the DDPM loss a model.
pub fn eval(
    cfg: &RunConfig,
    input: &Path,
    reference: Option<&Path>,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    prepare_out(out, cfg)?;
    let images = read_set(input)?;
    let refs = reference.map(read_set).transpose()?;
    if let Some(r) = &refs {
        if r.len() != images.len() {
            bail!(
                "reference set has {} images, input has {}",
                r.len(),
                images.len()
            );
        }
    }
    let model = model.map(|m| load_model(m, cfg)).transpose()?;
    let sched = cfg.schedule()?;
    let s = cfg.workflow.metric_patch;
    let mut w = create(&out.join("metrics.csv"))?;
    writeln!(
        w,
        "image,linf_to_reference,mse_to_reference,psnr,hf_ratio,ddpm_loss"
    )?;
    let mut max_linf: f64 = 0.0;
    for (i, x) in images.iter().enumerate() {
        let (linf, mse, p) = match &refs {
            Some(r) => {
                let l = x.linf_distance(&r[i])?;
                max_linf = max_linf.max(l);
                (
                    l.to_string(),
                    x.mse(&r[i])?.to_string(),
                    psnr(x, &r[i])?.to_string(),
                )
            }
            None => Default::default(),
        };
        let loss = match &model {
            Some(m) => eval_ddpm_loss(
                m,
                std::slice::from_ref(x),
                &sched,
                cfg.workflow.eval_draws,
                antipure_core::rng::derive(cfg.eval_seed(), &[i as u64]),
            )?
            .to_string(),
            None => String::new(),
        };
        writeln!(w, "{i},{linf},{mse},{p},{},{loss}", hf_energy_ratio(x, s)?)?;
    }
    finish(w)?;
    if refs.is_some() {
        println!("max linf to reference: {max_linf}");
    }
    Ok(())
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    let mut w = create(&out.join("report_images.csv"))?;
    report.write_images_csv(&mut w)?;
    finish(w)?;
    let mut w = create(&out.join("report_summary.csv"))?;
    report.write_summary_csv(&mut w)?;
    finish(w)
}

/// The full workflow. Without `--model` a purifier is trained first and
/// saved as `model.ckpt`.
pub fn run_pc_cmd(cfg: &RunConfig, model: Option<&Path>, out: &Path) -> Result<()> {
    prepare_out(out, cfg)?;
    let sched = cfg.schedule()?;
    let model = match model {
        Some(p) => load_model(p, cfg)?,
        None => {
            let train_set = dataset(cfg, Split::Train);
            check_nonempty(&train_set, "training set")?;
            info!("training the purifier for {} steps", cfg.train.steps);
            let m = train(cfg.model, &train_set, &sched, &cfg.train_config())?;
            save_checkpoint(&m, out.join("model.ckpt"))?;
            write_loss_curve(&out.join("loss.csv"), &m.training_meta.loss_curve)?;
            m
        }
    };
    let clean = dataset(cfg, Split::Clean);
    let eval_set = dataset(cfg, Split::Eval);
    check_nonempty(&clean, "clean set")?;
    write_set(&out.join("clean"), &clean)?;
    let report = run_pc(&clean, &eval_set, &model, &sched, &cfg.workflow_config())?;
    write_report(&report, out)
}

/// Where a command run with `--out out` leaves its snapshot.
pub fn snapshot_path(out: &Path) -> PathBuf {
    out.join(SNAPSHOT_NAME)
}
