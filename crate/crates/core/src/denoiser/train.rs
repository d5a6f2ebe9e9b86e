use rand::Rng;

use super::{DenoiserModel, DenoiserSpec};
use crate::diffusion::{ddpm_loss_with, NoiseSchedule};
use crate::error::{ensure, Result};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Trains a freshly initialized model with plain SGD on the DDPM loss.
pub fn train(
    spec: DenoiserSpec,
    dataset: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<DenoiserModel> {
    ensure!(cfg.steps >= 1, "training needs at least one step");
    let model = DenoiserModel::init(spec, rng::derive(cfg.seed, &[0]))?;
    fit(&model, dataset, sched, cfg)
}

/// Continues SGD on the DDPM loss from `base`'s parameters. Each step draws
/// `batch_size` images uniformly with a fresh `t ~ U(1, T)` and noise each.
pub fn fit(
    base: &DenoiserModel,
    dataset: &[Tensor],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<DenoiserModel> {
    ensure!(!dataset.is_empty(), "training dataset is empty");
    ensure!(cfg.batch_size >= 1, "batch_size must be >= 1");
    ensure!(
        cfg.lr.is_finite() && cfg.lr >= 0.0,
        "learning rate must be finite and >= 0"
    );
    let mut model = base.clone();
    let mut rng = rng::from_seed(rng::derive(cfg.seed, &[1]));
    let mut curve = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let params = model.bind(&tape, true);
        let mut total = None;
        for _ in 0..cfg.batch_size {
            let x0 = &dataset[rng.random_range(0..dataset.len())];
            let t = rng.random_range(1..=sched.len());
            let eps = rng::gaussian(x0.shape(), &mut rng);
            let loss = ddpm_loss_with(
                |x, t| model.forward_with(&tape, &params, x, t, None),
                tape.constant(x0.clone()),
                t,
                tape.constant(eps),
                sched,
            )?;
            total = Some(match total {
                None => loss,
                Some(acc) => loss.add(acc)?,
            });
        }
        let loss = total
            .expect("batch_size >= 1")
            .scale(1.0 / cfg.batch_size as f64);
        curve.push(loss.item());
        let grads = tape.gradients(loss)?;
        let updates: Vec<Tensor> = params.iter().map(|&p| grads.wrt(p)).collect();
        for (p, g) in model.params_mut().zip(&updates) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= cfg.lr * d;
            }
        }
    }

    model.training_meta.steps += cfg.steps as u64;
    if let Some(&last) = curve.last() {
        model.training_meta.final_loss = last;
    }
    model.training_meta.loss_curve = curve;
    Ok(model)
}
