//! Procedural grayscale dataset: a linear gradient background with a few
//! anti-aliased ellipses on top, all in `[-1, 1]`.

use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 256,
            size: 32,
            seed: 0,
        }
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// One `[1, size, size]` image drawn from `rng`.
pub fn sample_image(size: usize, rng: &mut rng::Rng) -> Tensor {
    let s = size as f64;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let slope: f64 = rng.random_range(0.0..0.6);
    let level: f64 = rng.random_range(-0.4..0.4);
    let (gx, gy) = (angle.cos() * slope, angle.sin() * slope);

    let count = rng.random_range(1..=3);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.random_range(0.2..0.8) * s,
                cy: rng.random_range(0.2..0.8) * s,
                rx: rng.random_range(0.1..0.3) * s,
                ry: rng.random_range(0.1..0.3) * s,
                cos: theta.cos(),
                sin: theta.sin(),
                value: rng.random_range(-0.9..0.9),
            }
        })
        .collect();

    let sub = SUPERSAMPLE as f64;
    Tensor::from_fn(&[1, size, size], |k| {
        let (py, px) = ((k / size) as f64, (k % size) as f64);
        let mut acc = 0.0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px + (sx as f64 + 0.5) / sub;
                let y = py + (sy as f64 + 0.5) / sub;
                let mut v = level + gx * (x / s - 0.5) + gy * (y / s - 0.5);
                for e in &ellipses {
                    if e.contains(x, y) {
                        v = e.value;
                    }
                }
                acc += v;
            }
        }
        (acc / (sub * sub)).clamp(-1.0, 1.0)
    })
}

pub fn generate(cfg: &DatasetConfig) -> Vec<Tensor> {
    let mut rng = rng::from_seed(cfg.seed);
    (0..cfg.count)
        .map(|_| sample_image(cfg.size, &mut rng))
        .collect()
}
