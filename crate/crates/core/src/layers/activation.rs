use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Leaky ReLU in the divisor form: negatives are divided by `a > 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeakyRelu {
    a: f64,
}

impl LeakyRelu {
    pub const DEFAULT_A: f64 = 10.0;

    pub fn new(a: f64) -> Result<Self> {
        if !a.is_finite() || a <= 1.0 {
            return Err(Error::Config(format!("leaky ReLU divisor must be finite and > 1, got {a}")));
        }
        Ok(LeakyRelu { a })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    #[inline]
    pub fn apply<T: Float>(&self, x: T) -> T {
        if x >= T::zero() {
            x
        } else {
            x / T::from_f64(self.a)
        }
    }

    #[inline]
    pub fn slope<T: Float>(&self, x: T) -> T {
        if x >= T::zero() {
            T::one()
        } else {
            T::one() / T::from_f64(self.a)
        }
    }

    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    /// `cached_x` is the forward input.
    pub fn backward<T: Float>(&self, grad_out: &Tensor<T>, cached_x: &Tensor<T>) -> Result<Tensor<T>> {
        grad_out.zip_map(cached_x, |g, x| g * self.slope(x))
    }
}

impl Default for LeakyRelu {
    fn default() -> Self {
        LeakyRelu { a: Self::DEFAULT_A }
    }
}
