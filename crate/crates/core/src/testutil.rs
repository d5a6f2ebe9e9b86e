use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn check_gradient<F>(x0: &Tensor, f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let r = gradcheck::check(x0, gradcheck::DEFAULT_STEP, f).unwrap();
    assert!(
        r.max_relative_error < 1e-4,
        "max relative error {:e}\nanalytic {:?}\nnumeric {:?}",
        r.max_relative_error,
        r.analytic,
        r.numeric
    );
}
