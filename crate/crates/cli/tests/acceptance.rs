//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4 to 7 share one purifier trained with the default settings and
//! one run of the full five-arm workflow.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use antipure_core::antipure::{loss_err_t, loss_fre, loss_pgd, pgd_attack_with, NoiseMode};
use antipure_core::data::{generate, DatasetConfig};
use antipure_core::dct::dct2d;
use antipure_core::denoiser::{train, TrainConfig};
use antipure_core::diffusion::{diffuse, predict_x0};
use antipure_core::gradcheck::{check, DEFAULT_STEP};
use antipure_core::purification::diffpure;
use antipure_core::workflow::{perturb_set, run_pc, Arm, ExperimentReport, WorkflowConfig};
use antipure_core::{
    rng, AttackConfig, Denoiser, DenoiserModel, DenoiserSpec, NoiseSchedule, Tape, Tensor,
};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn uniform(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut r = rng::from_seed(1);
    let sched = NoiseSchedule::toy_default();
    let spec = DenoiserSpec {
        in_channels: 1,
        base_channels: 4,
        num_blocks: 2,
        embed_dim: 8,
    };
    let model = DenoiserModel::init(spec, 3).map_err(|e| e.to_string())?;
    let x = uniform(&[1, 8, 8], &mut r);
    let x0 = uniform(&[1, 8, 8], &mut r).scale(0.9);
    let eps = rng::gaussian(&[1, 8, 8], &mut r);
    let cfg = AttackConfig {
        t_p: 10,
        t_err: 99,
        patch_size: 4,
        ..Default::default()
    };

    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut run =
        |name: &'static str, g: antipure_core::Result<antipure_core::gradcheck::GradCheck>| {
            let e = g.map(|g| g.max_relative_error).unwrap_or(f64::INFINITY);
            worst.push((name, e));
        };
    run(
        "forward",
        check(&x, DEFAULT_STEP, |tape, v| {
            Ok(model.forward(tape, v, 7)?.mean())
        }),
    );
    run("loss_fre", check(&x, DEFAULT_STEP, |_, v| loss_fre(v, 4)));
    run(
        "loss_err_t",
        check(&x, DEFAULT_STEP, |tape, v| {
            loss_err_t(&model, tape, v, 10, 99, &sched)
        }),
    );
    run(
        "loss_pgd",
        check(&x.scale(0.05), DEFAULT_STEP, |tape, d| {
            let (l, _) = loss_pgd(
                &model,
                tape,
                tape.constant(x0.clone()),
                d,
                6,
                tape.constant(eps.clone()),
                &cfg,
                &sched,
            )?;
            Ok(l)
        }),
    );
    let elapsed = start.elapsed();
    let detail = format!(
        "{} in {:.1}s",
        worst
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", "),
        elapsed.as_secs_f64()
    );
    require(
        worst.iter().all(|(_, e)| *e < 1e-4) && elapsed < Duration::from_secs(60),
        detail,
    )
}

// 2 ------------------------------------------------------------------------

fn dct_fidelity() -> Outcome {
    let mut r = rng::from_seed(2);
    let (mut round_trip, mut parseval): (f64, f64) = (0.0, 0.0);
    for k in 0..1000 {
        let s = [2, 4, 8, 16][k % 4];
        let patch = uniform(&[s, s], &mut r).scale(3.0);
        let coeffs = dct2d(&patch, false).map_err(|e| e.to_string())?;
        let back = dct2d(&coeffs, true).map_err(|e| e.to_string())?;
        round_trip = round_trip.max(back.linf_distance(&patch).unwrap());
        let e_in: f64 = patch.data().iter().map(|v| v * v).sum();
        let e_out: f64 = coeffs.data().iter().map(|v| v * v).sum();
        parseval = parseval.max((e_in - e_out).abs());
    }
    let tape = Tape::new();
    let fre = loss_fre(tape.constant(Tensor::full(&[1, 32, 32], 0.37)), 8)
        .map_err(|e| e.to_string())?
        .item();
    require(
        round_trip <= 1e-10 && parseval <= 1e-10 && fre == 0.5,
        format!("round-trip {round_trip:.1e}, Parseval {parseval:.1e}, loss_fre(constant) = {fre}"),
    )
}

// 3 ------------------------------------------------------------------------

fn diffusion_algebra() -> Outcome {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut r = rng::from_seed(3);
    let mut worst: f64 = 0.0;
    for t in 1..=sched.len() {
        let x0 = uniform(&[1, 32, 32], &mut r);
        let eps = rng::gaussian(&[1, 32, 32], &mut r);
        let x_t = diffuse(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
        let back = predict_x0(&x_t, &eps, t, &sched).map_err(|e| e.to_string())?;
        worst = worst.max(back.linf_distance(&x0).unwrap());
    }
    require(
        worst <= 1e-10,
        format!("max error {worst:.1e} over t = 1..=100"),
    )
}

// Shared trained setup ------------------------------------------------------

struct Lab {
    sched: NoiseSchedule,
    model: DenoiserModel,
    clean: Vec<Tensor>,
    eval_set: Vec<Tensor>,
    train_time: Duration,
}

fn lab() -> Lab {
    let start = Instant::now();
    let sched = NoiseSchedule::toy_default();
    let train_set = generate(&DatasetConfig::default());
    let model = train(
        DenoiserSpec::default(),
        &train_set,
        &sched,
        &TrainConfig::default(),
    )
    .expect("training");
    Lab {
        sched,
        model,
        clean: generate(&DatasetConfig {
            count: 16,
            seed: 2,
            ..Default::default()
        }),
        eval_set: generate(&DatasetConfig {
            count: 64,
            seed: 1,
            ..Default::default()
        }),
        train_time: start.elapsed(),
    }
}

// 4 ------------------------------------------------------------------------

fn pgd_invariants(lab: &Lab) -> Outcome {
    let eta = 16.0 / 255.0;
    let cfg = AttackConfig::default();
    let (mut budget, mut range, mut steps) = (true, true, 0);
    let (mut rises, mut pairs) = (0, 0);
    for (i, x0) in lab.clean.iter().enumerate() {
        let cfg = AttackConfig {
            seed: i as u64,
            ..cfg
        };
        for mode in [NoiseMode::Resample, NoiseMode::Frozen] {
            let (adv, trace) = pgd_attack_with(x0, &lab.model, &lab.sched, &cfg, mode)
                .map_err(|e| e.to_string())?;
            if trace.steps.len() != 100 {
                return Err(format!("trace has {} steps", trace.steps.len()));
            }
            for s in &trace.steps {
                steps += 1;
                budget &= s.delta_linf <= eta + 1e-9;
                range &= s.adv_min >= -1.0 && s.adv_max <= 1.0;
            }
            budget &= adv.linf_distance(x0).unwrap() <= eta + 1e-9;
            range &= adv.data().iter().all(|v| (-1.0..=1.0).contains(v));
            if mode == NoiseMode::Frozen {
                for w in trace.steps.windows(2) {
                    pairs += 1;
                    rises += (w[1].losses.total >= w[0].losses.total) as usize;
                }
            }
        }
    }
    let frac = rises as f64 / pairs as f64;
    require(
        budget && range && frac >= 0.9,
        format!(
            "{steps} steps: budget held {budget}, range held {range}; frozen mode non-decreasing {rises}/{pairs} ({:.1}%)",
            100.0 * frac
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn purification_convergence(lab: &Lab, adversarial: &[Tensor]) -> Outcome {
    let start = Instant::now();
    let gap = |t_p: usize| -> f64 {
        let mut v = Vec::new();
        for seed in 0..4u64 {
            for (i, (c, a)) in lab.clean.iter().zip(adversarial).enumerate() {
                let s = rng::derive(seed, &[i as u64]);
                let pc = diffpure(c, t_p, &lab.model, &lab.sched, s).unwrap();
                let pa = diffpure(a, t_p, &lab.model, &lab.sched, s).unwrap();
                v.push(pc.mse(&pa).unwrap());
            }
        }
        mean(&v)
    };
    let (g10, g50) = (gap(10), gap(50));
    let elapsed = start.elapsed();
    require(
        g50 < g10 && elapsed < Duration::from_secs(600),
        format!(
            "mean MSE(purified clean, purified adversarial): t_p=10 {g10:.3e}, t_p=50 {g50:.3e}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 6 and 7 --------------------------------------------------------------------

fn anti_purification_ordering(report: &ExperimentReport, elapsed: Duration) -> Outcome {
    let deepest = *report.config.checkpoints.iter().max().unwrap();
    let s = |arm| report.summary_for(arm, deepest).unwrap();
    let (none, base, anti) = (s(Arm::None), s(Arm::PgdDdpm), s(Arm::AntiPure));
    let purified_order = anti.mean_hf_ratio_purified > base.mean_hf_ratio_purified
        && base.mean_hf_ratio_purified > none.mean_hf_ratio_purified;
    let finetune_order = anti.sample_hf_ratio > base.sample_hf_ratio;
    require(
        purified_order && finetune_order && elapsed < Duration::from_secs(7200),
        format!(
            "purified HF ratio antipure {:.6} / pgd_ddpm {:.6} / none {:.6} (ordered: {purified_order}); \
             post-finetune HF at {deepest} iterations antipure {:.6} vs pgd_ddpm {:.6} (ordered: {finetune_order}); {:.0}s",
            anti.mean_hf_ratio_purified,
            base.mean_hf_ratio_purified,
            none.mean_hf_ratio_purified,
            anti.sample_hf_ratio,
            base.sample_hf_ratio,
            elapsed.as_secs_f64()
        ),
    )
}

fn ablation_structure(report: &ExperimentReport) -> Outcome {
    let deepest = *report.config.checkpoints.iter().max().unwrap();
    let hf = |arm| report.summary_for(arm, deepest).map(|s| s.sample_hf_ratio);
    let full = hf(Arm::AntiPure).ok_or("full arm missing")?;
    let mut parts = vec![format!("full {full:.6}")];
    let mut ok = true;
    for arm in [Arm::PgdDdpm, Arm::PgdDdpmFre, Arm::PgdDdpmErrT] {
        let v = hf(arm).ok_or(format!("{arm} arm missing"))?;
        parts.push(format!("{arm} {v:.6}"));
        if arm != Arm::PgdDdpm {
            ok &= full >= 0.95 * v;
        }
    }
    require(
        ok,
        format!(
            "post-finetune HF ratio at {deepest} iterations: {}",
            parts.join(", ")
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_antipure"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`{}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!(
            "{} and {} hold different files",
            a.display(),
            b.display()
        ));
    }
    for f in &fa {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs between runs", f.display()));
        }
    }
    Ok(fa.len())
}

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    let tiny: Vec<String> = [
        "run.seed=11",
        "data.size=16",
        "data.train_count=8",
        "data.eval_count=4",
        "data.clean_count=3",
        "data.split=clean",
        "model.base_channels=4",
        "model.embed_dim=8",
        "train.steps=6",
        "attack.steps=5",
        "purify.iterations=2",
        "purify.rounds=2",
        "purify.grid_size=8",
        "purify.grid_stride=4",
        "finetune.steps=3",
        "workflow.arms=none,pgd_ddpm,antipure",
        "workflow.checkpoints=2,4",
        "workflow.samples=2",
        "workflow.eval_draws=2",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect();

    // (name, command, extra arguments); each is run with the overrides into
    // `<name>.1`, then replayed from that run's snapshot into `<name>.2`.
    let model = format!("{}/model.ckpt", d("train.1"));
    let clean = format!("{}/images", d("gen-data.1"));
    let adv = format!("{}/images", d("attack.1"));
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec![]),
        ("train", vec!["--data".into(), clean.clone()]),
        (
            "attack",
            vec![
                "--model".into(),
                model.clone(),
                "--input".into(),
                clean.clone(),
            ],
        ),
        (
            "purify",
            vec![
                "--model".into(),
                model.clone(),
                "--input".into(),
                adv.clone(),
            ],
        ),
        (
            "finetune",
            vec![
                "--model".into(),
                model.clone(),
                "--data".into(),
                adv.clone(),
            ],
        ),
        ("sample", vec!["--model".into(), model.clone()]),
        (
            "probe-blocks",
            vec![
                "--model".into(),
                model.clone(),
                "--a".into(),
                clean.clone(),
                "--b".into(),
                adv.clone(),
            ],
        ),
        ("spectra", vec!["--input".into(), adv.clone()]),
        (
            "eval",
            vec![
                "--input".into(),
                adv.clone(),
                "--reference".into(),
                clean.clone(),
                "--model".into(),
                model.clone(),
            ],
        ),
        ("run-pc", vec![]),
    ];
    let mut files = 0;
    for (name, extra) in &steps {
        let first = d(&format!("{name}.1"));
        let second = d(&format!("{name}.2"));
        let snapshot = format!("{first}/run.conf");
        let mut a: Vec<&str> = vec![name, "--out", &first];
        a.extend(extra.iter().map(String::as_str));
        a.extend(tiny.iter().map(String::as_str));
        cli(&a)?;
        let mut b: Vec<&str> = vec![name, "--out", &second, "--config", &snapshot];
        b.extend(extra.iter().map(String::as_str));
        cli(&b)?;
        files += same_tree(Path::new(&first), Path::new(&second))?;
    }
    Ok(format!(
        "{} commands replayed from their snapshots, {files} files bit-identical",
        steps.len()
    ))
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn report_line(id: usize, name: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} [{id}] {name}: {detail}");
}

fn main() {
    // libtest-style flags (for example `--nocapture`) are accepted and ignored.
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, outcome: Outcome| {
        report_line(id, name, &outcome);
        results.push((id, name, outcome));
    };

    record(1, "gradient correctness", guarded(gradient_correctness));
    record(2, "DCT fidelity", guarded(dct_fidelity));
    record(3, "diffusion algebra", guarded(diffusion_algebra));

    let lab = lab();
    println!(
        "     reference purifier trained in {:.0}s",
        lab.train_time.as_secs_f64()
    );
    record(
        4,
        "PGD constraint invariants",
        guarded(|| pgd_invariants(&lab)),
    );

    let cfg = WorkflowConfig::default();
    let adversarial = perturb_set(&lab.clean, Arm::AntiPure, &lab.model, &lab.sched, &cfg);
    record(
        5,
        "purification convergence",
        match &adversarial {
            Ok(adv) => guarded(|| purification_convergence(&lab, adv)),
            Err(e) => Err(e.to_string()),
        },
    );

    let start = Instant::now();
    let report = run_pc(&lab.clean, &lab.eval_set, &lab.model, &lab.sched, &cfg);
    let end_to_end = lab.train_time + start.elapsed();
    match &report {
        Ok(report) => {
            let mut csv = Vec::new();
            report.write_summary_csv(&mut csv).unwrap();
            print!(
                "{}",
                String::from_utf8_lossy(&csv)
                    .lines()
                    .map(|l| format!("     {l}\n"))
                    .collect::<String>()
            );
            record(
                6,
                "anti-purification ordering",
                guarded(|| anti_purification_ordering(report, end_to_end)),
            );
            record(
                7,
                "ablation structure",
                guarded(|| ablation_structure(report)),
            );
        }
        Err(e) => {
            record(6, "anti-purification ordering", Err(e.to_string()));
            record(7, "ablation structure", Err(e.to_string()));
        }
    }

    record(8, "CLI determinism", guarded(cli_determinism));

    let failed: Vec<_> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    println!(
        "\nacceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
