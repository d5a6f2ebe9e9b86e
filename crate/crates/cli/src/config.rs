//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Numbers may be written as fractions (`eta = 16/255`). Stage seeds are not
//! configured one by one; they are derived from the single `[run] seed`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;

use antipure_core::denoiser::TrainConfig;
use antipure_core::purification::Anchor;
use antipure_core::workflow::{Arm, WorkflowConfig};
use antipure_core::{rng, AttackConfig, DenoiserSpec, LossMask, NoiseSchedule, PurifyConfig};

/// File name of the snapshot written next to every command's outputs.
pub const SNAPSHOT_NAME: &str = "run.conf";

/// Configuration problems are usage errors (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Clean,
}

impl FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "clean" => Ok(Split::Clean),
            _ => bail!("unknown split `{s}` (expected train, eval or clean)"),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Clean => "clean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurifyMethod {
    GridPure,
    DiffPure,
}

impl FromStr for PurifyMethod {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gridpure" => Ok(PurifyMethod::GridPure),
            "diffpure" => Ok(PurifyMethod::DiffPure),
            _ => bail!("unknown purification method `{s}` (expected gridpure or diffpure)"),
        }
    }
}

impl std::fmt::Display for PurifyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PurifyMethod::GridPure => "gridpure",
            PurifyMethod::DiffPure => "diffpure",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub clean_count: usize,
    /// Split written by `gen-data`.
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowSection {
    pub arms: Vec<Arm>,
    pub checkpoints: Vec<usize>,
    pub samples: usize,
    pub metric_patch: usize,
    pub eval_draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: DenoiserSpec,
    pub schedule: ScheduleSection,
    pub train: SgdSection,
    pub attack: AttackConfig,
    pub purify: PurifyConfig,
    pub purify_method: PurifyMethod,
    pub finetune: SgdSection,
    pub workflow: WorkflowSection,
    /// Timesteps at which `probe-blocks` compares activations.
    pub probe_timesteps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let wf = WorkflowConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            data: DataSection {
                size: 32,
                train_count: 256,
                eval_count: 64,
                clean_count: 16,
                split: Split::Train,
            },
            model: DenoiserSpec::default(),
            schedule: ScheduleSection {
                steps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            train: SgdSection {
                steps: train.steps,
                lr: train.lr,
                batch_size: train.batch_size,
            },
            attack: AttackConfig::default(),
            purify: PurifyConfig::default(),
            purify_method: PurifyMethod::GridPure,
            finetune: SgdSection {
                steps: wf.finetune.steps,
                lr: wf.finetune.lr,
                batch_size: wf.finetune.batch_size,
            },
            workflow: WorkflowSection {
                arms: wf.arms,
                checkpoints: wf.checkpoints,
                samples: wf.samples,
                metric_patch: wf.metric_patch,
                eval_draws: wf.eval_draws,
            },
            probe_timesteps: vec![10, 50],
        }
    }
}

/// Sub-seed tags; each stage draws from `derive(seed, [tag])`.
mod tag {
    pub const TRAIN_SET: u64 = 1;
    pub const EVAL_SET: u64 = 2;
    pub const CLEAN_SET: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const PURIFY: u64 = 6;
    pub const FINETUNE: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const WORKFLOW: u64 = 9;
    pub const EVAL: u64 = 10;
}

fn parse_f64(v: &str) -> Result<f64> {
    let v = v.trim();
    let x = match v.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse()?, b.trim().parse()?);
            if b == 0.0 {
                bail!("zero denominator");
            }
            a / b
        }
        None => v.parse()?,
    };
    if !x.is_finite() {
        bail!("not a finite number");
    }
    Ok(x)
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("`{s}`: {e}")))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| anyhow!("{e}"))
}

impl RunConfig {
    /// Reads a configuration file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| anyhow!("{e}"))?;
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("run");
            for (key, value) in props.iter() {
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{spec}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| usage(format!("override `{spec}` is not section.key=value")))?;
        self.set(section, key, value)
            .map_err(|e| usage(e.to_string()))
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let r: Result<()> = (|| {
            match (section, key) {
                ("run", "seed") => self.seed = parse(v)?,

                ("data", "size") => self.data.size = parse(v)?,
                ("data", "train_count") => self.data.train_count = parse(v)?,
                ("data", "eval_count") => self.data.eval_count = parse(v)?,
                ("data", "clean_count") => self.data.clean_count = parse(v)?,
                ("data", "split") => self.data.split = parse(v)?,

                ("model", "in_channels") => self.model.in_channels = parse(v)?,
                ("model", "base_channels") => self.model.base_channels = parse(v)?,
                ("model", "num_blocks") => self.model.num_blocks = parse(v)?,
                ("model", "embed_dim") => self.model.embed_dim = parse(v)?,

                ("schedule", "steps") => self.schedule.steps = parse(v)?,
                ("schedule", "beta_start") => self.schedule.beta_start = parse_f64(v)?,
                ("schedule", "beta_end") => self.schedule.beta_end = parse_f64(v)?,

                ("train", "steps") => self.train.steps = parse(v)?,
                ("train", "lr") => self.train.lr = parse_f64(v)?,
                ("train", "batch_size") => self.train.batch_size = parse(v)?,

                ("attack", "eta") => self.attack.eta = parse_f64(v)?,
                ("attack", "alpha") => self.attack.alpha = parse_f64(v)?,
                ("attack", "steps") => self.attack.steps = parse(v)?,
                ("attack", "lambda1") => self.attack.lambda1 = parse_f64(v)?,
                ("attack", "lambda2") => self.attack.lambda2 = parse_f64(v)?,
                ("attack", "t_err") => self.attack.t_err = parse(v)?,
                ("attack", "t_p") => self.attack.t_p = parse(v)?,
                ("attack", "patch_size") => self.attack.patch_size = parse(v)?,
                ("attack", "loss_mask") => self.attack.loss_mask = parse::<LossMask>(v)?,

                ("purify", "method") => self.purify_method = parse(v)?,
                ("purify", "t_p") => self.purify.t_p = parse(v)?,
                ("purify", "iterations") => self.purify.iterations = parse(v)?,
                ("purify", "rounds") => self.purify.rounds = parse(v)?,
                ("purify", "gamma") => self.purify.gamma = parse_f64(v)?,
                ("purify", "grid_size") => self.purify.grid_size = parse(v)?,
                ("purify", "grid_stride") => self.purify.grid_stride = parse(v)?,
                ("purify", "anchor") => self.purify.anchor = parse::<Anchor>(v)?,

                ("finetune", "steps") => self.finetune.steps = parse(v)?,
                ("finetune", "lr") => self.finetune.lr = parse_f64(v)?,
                ("finetune", "batch_size") => self.finetune.batch_size = parse(v)?,

                ("workflow", "arms") => self.workflow.arms = parse_list(v)?,
                ("workflow", "checkpoints") => self.workflow.checkpoints = parse_list(v)?,
                ("workflow", "samples") => self.workflow.samples = parse(v)?,
                ("workflow", "metric_patch") => self.workflow.metric_patch = parse(v)?,
                ("workflow", "eval_draws") => self.workflow.eval_draws = parse(v)?,

                ("probe", "timesteps") => self.probe_timesteps = parse_list(v)?,

                _ => bail!("unknown key `{section}.{key}`"),
            }
            Ok(())
        })();
        r.map_err(|e| usage(format!("{section}.{key} = `{v}`: {e}")))
    }

    /// The full configuration in the file format; parsing it back gives an
    /// identical configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut sec = |name: &str, kv: &[(&str, String)]| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        sec("run", &[("seed", self.seed.to_string())]);
        sec(
            "data",
            &[
                ("size", self.data.size.to_string()),
                ("train_count", self.data.train_count.to_string()),
                ("eval_count", self.data.eval_count.to_string()),
                ("clean_count", self.data.clean_count.to_string()),
                ("split", self.data.split.to_string()),
            ],
        );
        sec(
            "model",
            &[
                ("in_channels", self.model.in_channels.to_string()),
                ("base_channels", self.model.base_channels.to_string()),
                ("num_blocks", self.model.num_blocks.to_string()),
                ("embed_dim", self.model.embed_dim.to_string()),
            ],
        );
        sec(
            "schedule",
            &[
                ("steps", self.schedule.steps.to_string()),
                ("beta_start", self.schedule.beta_start.to_string()),
                ("beta_end", self.schedule.beta_end.to_string()),
            ],
        );
        let sgd = |c: &SgdSection| {
            vec![
                ("steps", c.steps.to_string()),
                ("lr", c.lr.to_string()),
                ("batch_size", c.batch_size.to_string()),
            ]
        };
        sec("train", &sgd(&self.train));
        let a = &self.attack;
        sec(
            "attack",
            &[
                ("eta", a.eta.to_string()),
                ("alpha", a.alpha.to_string()),
                ("steps", a.steps.to_string()),
                ("lambda1", a.lambda1.to_string()),
                ("lambda2", a.lambda2.to_string()),
                ("t_err", a.t_err.to_string()),
                ("t_p", a.t_p.to_string()),
                ("patch_size", a.patch_size.to_string()),
                ("loss_mask", a.loss_mask.to_string()),
            ],
        );
        let p = &self.purify;
        sec(
            "purify",
            &[
                ("method", self.purify_method.to_string()),
                ("t_p", p.t_p.to_string()),
                ("iterations", p.iterations.to_string()),
                ("rounds", p.rounds.to_string()),
                ("gamma", p.gamma.to_string()),
                ("grid_size", p.grid_size.to_string()),
                ("grid_stride", p.grid_stride.to_string()),
                ("anchor", p.anchor.to_string()),
            ],
        );
        sec("finetune", &sgd(&self.finetune));
        let w = &self.workflow;
        sec(
            "workflow",
            &[
                ("arms", join(&w.arms)),
                ("checkpoints", join(&w.checkpoints)),
                ("samples", w.samples.to_string()),
                ("metric_patch", w.metric_patch.to_string()),
                ("eval_draws", w.eval_draws.to_string()),
            ],
        );
        sec("probe", &[("timesteps", join(&self.probe_timesteps))]);
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)
            .map_err(|e| usage(format!("schedule: {e}")))
    }

    pub fn stage_seed(&self, tag: u64) -> u64 {
        rng::derive(self.seed, &[tag])
    }

    pub fn dataset_seed(&self, split: Split) -> u64 {
        self.stage_seed(match split {
            Split::Train => tag::TRAIN_SET,
            Split::Eval => tag::EVAL_SET,
            Split::Clean => tag::CLEAN_SET,
        })
    }

    pub fn dataset_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.data.train_count,
            Split::Eval => self.data.eval_count,
            Split::Clean => self.data.clean_count,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed: self.stage_seed(tag::TRAIN),
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune.steps,
            lr: self.finetune.lr,
            batch_size: self.finetune.batch_size,
            seed: self.stage_seed(tag::FINETUNE),
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            seed: self.stage_seed(tag::ATTACK),
            ..self.attack
        }
    }

    pub fn purify_config(&self) -> PurifyConfig {
        PurifyConfig {
            seed: self.stage_seed(tag::PURIFY),
            ..self.purify
        }
    }

    pub fn sample_seed(&self) -> u64 {
        self.stage_seed(tag::SAMPLE)
    }

    pub fn eval_seed(&self) -> u64 {
        self.stage_seed(tag::EVAL)
    }

    pub fn workflow_config(&self) -> WorkflowConfig {
        WorkflowConfig {
            arms: self.workflow.arms.clone(),
            attack: self.attack_config(),
            purify: self.purify_config(),
            finetune: self.finetune_config(),
            checkpoints: self.workflow.checkpoints.clone(),
            samples: self.workflow.samples,
            metric_patch: self.workflow.metric_patch,
            eval_draws: self.workflow.eval_draws,
            seed: self.stage_seed(tag::WORKFLOW),
        }
    }
}
