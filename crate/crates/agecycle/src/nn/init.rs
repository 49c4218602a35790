use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{same_padding, Conv2d, Linear, Scalar};

/// Weight initialization schemes. Values are drawn in `f64` and converted,
/// so the same seed yields the same network in either precision.
#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    /// He-normal: `N(0, sqrt(2 / fan_in))`.
    He,
    /// `N(0, std)`.
    Normal(f64),
    /// All zeros (used for output heads that should start as the identity).
    Zero,
}

impl ParamInit {
    fn sample<T: Scalar, R: Rng>(&self, fan_in: usize, rng: &mut R) -> T {
        match self {
            ParamInit::He => {
                let std = (2.0 / fan_in as f64).sqrt();
                let n = Normal::new(0.0, std).expect("valid normal");
                T::of_f64(n.sample(rng))
            }
            ParamInit::Normal(std) => {
                let n = Normal::new(0.0, *std).expect("valid normal");
                T::of_f64(n.sample(rng))
            }
            ParamInit::Zero => T::zero(),
        }
    }
}

pub fn conv2d<T: Scalar, R: Rng>(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    init: ParamInit,
    rng: &mut R,
) -> Conv2d<T> {
    let fan_in = c_in * kernel * kernel;
    let w = Array4::from_shape_simple_fn((c_out, c_in, kernel, kernel), || {
        init.sample::<T, R>(fan_in, rng)
    });
    Conv2d {
        w,
        b: Array1::zeros(c_out),
        stride,
        pad: same_padding(kernel, stride),
    }
}

pub fn linear<T: Scalar, R: Rng>(
    n_in: usize,
    n_out: usize,
    init: ParamInit,
    rng: &mut R,
) -> Linear<T> {
    let w = Array2::from_shape_simple_fn((n_out, n_in), || init.sample::<T, R>(n_in, rng));
    Linear {
        w,
        b: Array1::zeros(n_out),
    }
}
