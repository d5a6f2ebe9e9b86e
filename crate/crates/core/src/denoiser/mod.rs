//! Toy UNet noise predictor `eps_theta(x_t, t)`.
//!
//! Layout for `num_blocks = n` (channel width `base << i` at depth `i`):
//!
//! ```text
//! conv_in -> down_0 .. down_{n-1} -> mid -> up_{n-1} .. up_0 -> conv_out
//! ```
//!
//! Every block is `silu(conv3x3(h) + temb_i(t))`. Down blocks end with a 2x2
//! average pool; up blocks start with a nearest 2x upsample and concatenate
//! the matching down block's pre-pool activation. The sinusoidal timestep
//! embedding goes through one shared SiLU layer and then a per-block linear
//! projection to a channel bias.

mod checkpoint;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use train::{fit, train, TrainConfig};

use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything that predicts the noise in `x_t` at timestep `t`.
pub trait Denoiser {
    fn forward<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: usize) -> Result<Var<'t>>;

    /// Forward pass without gradient bookkeeping.
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(x_t.clone());
        Ok(self.forward(&tape, x, t)?.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of down/up block pairs.
    pub num_blocks: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub embed_dim: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            num_blocks: 2,
            embed_dim: 32,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels >= 1, "in_channels must be >= 1");
        ensure!(self.base_channels >= 1, "base_channels must be >= 1");
        ensure!(self.num_blocks >= 1, "num_blocks must be >= 1");
        ensure!(
            self.embed_dim >= 2 && self.embed_dim.is_multiple_of(2),
            "embed_dim must be even and >= 2, got {}",
            self.embed_dim
        );
        Ok(())
    }

    fn width(&self, depth: usize) -> usize {
        self.base_channels << depth
    }

    /// Number of activations reported by [`block_probe`].
    pub fn probe_len(&self) -> usize {
        2 * self.num_blocks + 1
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let mut out = vec![
            ("time.fc.w".to_string(), vec![e, e]),
            ("time.fc.b".to_string(), vec![e]),
            (
                "conv_in.w".to_string(),
                vec![self.base_channels, self.in_channels, 3, 3],
            ),
            ("conv_in.b".to_string(), vec![self.base_channels]),
        ];
        let mut block = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.conv.w"), vec![cout, cin, 3, 3]));
            out.push((format!("{name}.conv.b"), vec![cout]));
            out.push((format!("{name}.temb.w"), vec![cout, e]));
            out.push((format!("{name}.temb.b"), vec![cout]));
        };
        let n = self.num_blocks;
        for i in 0..n {
            let cin = if i == 0 {
                self.base_channels
            } else {
                self.width(i - 1)
            };
            block(format!("down{i}"), cin, self.width(i));
        }
        block("mid".to_string(), self.width(n - 1), self.width(n - 1));
        for i in (0..n).rev() {
            let below = if i == n - 1 {
                self.width(n - 1)
            } else {
                self.width(i + 1)
            };
            block(format!("up{i}"), below + self.width(i), self.width(i));
        }
        out.push((
            "conv_out.w".to_string(),
            vec![self.in_channels, self.base_channels, 3, 3],
        ));
        out.push(("conv_out.b".to_string(), vec![self.in_channels]));
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingMeta {
    pub steps: u64,
    pub final_loss: f64,
    /// Per-step minibatch loss of the most recent training run (not persisted).
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    spec: DenoiserSpec,
    params: Vec<(String, Tensor)>,
    pub training_meta: TrainingMeta,
}

/// Sinusoidal embedding `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]`
/// with `f_i = 10000^(-i/h)` and `h = dim / 2`.
pub fn timestep_embed(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    Tensor::from_fn(&[2 * half], |k| {
        if k < half {
            (t as f64 * freq(k)).sin()
        } else {
            (t as f64 * freq(k - half)).cos()
        }
    })
}

impl DenoiserModel {
    /// All-zero parameters; predicts zero noise everywhere.
    pub fn zeros(spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor::zeros(&shape);
                (name, t)
            })
            .collect();
        Ok(Self {
            spec,
            params,
            training_meta: TrainingMeta::default(),
        })
    }

    /// Scaled-normal initialization; biases start at zero.
    pub fn init(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::from_seed(seed);
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".b") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut std = (2.0 / fan_in as f64).sqrt();
                    if name.starts_with("conv_out") {
                        std *= 0.1;
                    }
                    let normal = Normal::new(0.0, std).expect("finite std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                };
                (name, value)
            })
            .collect();
        Ok(Self {
            spec,
            params,
            training_meta: TrainingMeta::default(),
        })
    }

    pub(crate) fn from_parts(
        spec: DenoiserSpec,
        params: Vec<(String, Tensor)>,
        meta: TrainingMeta,
    ) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        ensure!(
            layout.len() == params.len(),
            "expected {} parameter tensors, got {}",
            layout.len(),
            params.len()
        );
        for ((name, shape), (pname, p)) in layout.iter().zip(&params) {
            ensure!(
                name == pname && shape.as_slice() == p.shape(),
                "parameter {pname} {:?} does not match expected {name} {:?}",
                p.shape(),
                shape
            );
            ensure!(p.is_finite(), "parameter {pname} has non-finite values");
        }
        Ok(Self {
            spec,
            params,
            training_meta: meta,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|(_, p)| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = 1usize << self.spec.num_blocks;
        ensure!(
            shape.len() == 3
                && shape[0] == self.spec.in_channels
                && shape[1].is_multiple_of(m)
                && shape[2].is_multiple_of(m),
            "denoiser expects [{}, H, W] with H, W divisible by {m}, got {:?}",
            self.spec.in_channels,
            shape
        );
        Ok(())
    }

    /// Forward pass with parameters already bound on `tape` (see [`bind`]).
    /// When `probe` is given, each down/mid/up block output is pushed to it.
    ///
    /// [`bind`]: DenoiserModel::bind
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        x_t: Var<'t>,
        t: usize,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'t>> {
        self.check_input(&x_t.shape())?;
        ensure!(
            params.len() == self.params.len(),
            "parameter binding has wrong length"
        );
        let p = |name: &str| -> Var<'t> {
            let idx = self
                .params
                .iter()
                .position(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("missing parameter {name}"));
            params[idx]
        };

        let emb = tape.constant(timestep_embed(t, self.spec.embed_dim));
        let temb = emb.linear(p("time.fc.w"), p("time.fc.b"))?.silu();
        let block = |h: Var<'t>, name: &str| -> Result<Var<'t>> {
            let bias = temb.linear(p(&format!("{name}.temb.w")), p(&format!("{name}.temb.b")))?;
            let c = h.conv2d(p(&format!("{name}.conv.w")), p(&format!("{name}.conv.b")))?;
            Ok(c.add_channel(bias)?.silu())
        };
        let mut record = |v: Var<'t>| {
            if let Some(out) = probe.as_deref_mut() {
                out.push(v.value());
            }
        };

        let n = self.spec.num_blocks;
        let mut h = x_t.conv2d(p("conv_in.w"), p("conv_in.b"))?;
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            let a = block(h, &format!("down{i}"))?;
            skips.push(a);
            h = a.avg_pool2()?;
            record(h);
        }
        h = block(h, "mid")?;
        record(h);
        for i in (0..n).rev() {
            let u = h.upsample2()?.concat(skips[i])?;
            h = block(u, &format!("up{i}"))?;
            record(h);
        }
        h.conv2d(p("conv_out.w"), p("conv_out.b"))
    }
}

impl Denoiser for DenoiserModel {
    fn forward<'t>(&self, tape: &'t Tape, x_t: Var<'t>, t: usize) -> Result<Var<'t>> {
        let params = self.bind(tape, false);
        self.forward_with(tape, &params, x_t, t, None)
    }
}

/// Block-by-block activations of one forward pass (down, mid, up order).
pub fn block_activations(model: &DenoiserModel, x: &Tensor, t: usize) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let mut acts = Vec::with_capacity(model.spec.probe_len());
    model.forward_with(&tape, &params, xv, t, Some(&mut acts))?;
    Ok(acts)
}

/// MSE between the intermediate activations of `x_a` and `x_b` after each
/// down, mid and up block, in network order.
pub fn block_probe(
    model: &DenoiserModel,
    x_a: &Tensor,
    x_b: &Tensor,
    t: usize,
) -> Result<Vec<f64>> {
    x_a.check_same_shape(x_b)?;
    let a = block_activations(model, x_a, t)?;
    let b = block_activations(model, x_b, t)?;
    a.iter().zip(&b).map(|(u, v)| u.mse(v)).collect()
}
