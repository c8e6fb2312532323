use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch normalization with a learned affine rescale.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// What a training-mode forward pass leaves behind for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::Config(format!("batch norm over {} channels got input {}", self.channels(), x.shape())));
        }
        Ok(())
    }

    /// Normalizes with batch statistics over `(n, h, w)` and folds them into
    /// the running statistics.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane();
        let m = (s.n * plane) as f64;
        let mut out = Tensor::filled(s, T::zero());
        let mut x_hat = Tensor::filled(s, T::zero());
        let mut inv_std = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += x.item(n)[c * plane..(c + 1) * plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += x.item(n)[c * plane..(c + 1) * plane].iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + self.epsilon).sqrt();
            inv_std.push(istd);
            let (g, b) = (self.gamma[c].to_f64(), self.beta[c].to_f64());
            for n in 0..s.n {
                let off = n * s.item_len() + c * plane;
                for i in off..off + plane {
                    let xh = (x.data()[i].to_f64() - mean) * istd;
                    x_hat.data_mut()[i] = T::from_f64(xh);
                    out.data_mut()[i] = T::from_f64(g * xh + b);
                }
            }
            let mom = self.momentum;
            self.running_mean[c] = T::from_f64(mom * self.running_mean[c].to_f64() + (1.0 - mom) * mean);
            self.running_var[c] = T::from_f64(mom * self.running_var[c].to_f64() + (1.0 - mom) * var);
        }
        Ok((out, BnCache { x_hat, inv_std }))
    }

    /// Normalizes with the running statistics.
    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let s = x.shape();
        let plane = s.plane();
        let mut out = x.clone();
        for c in 0..s.c {
            let istd = 1.0 / (self.running_var[c].to_f64() + self.epsilon).sqrt();
            let scale = self.gamma[c].to_f64() * istd;
            let shift = self.beta[c].to_f64() - self.running_mean[c].to_f64() * scale;
            for n in 0..s.n {
                let off = n * s.item_len() + c * plane;
                for v in &mut out.data_mut()[off..off + plane] {
                    *v = T::from_f64(v.to_f64() * scale + shift);
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        if training {
            let (y, cache) = self.forward_train(x)?;
            Ok((y, Some(cache)))
        } else {
            Ok((self.forward_infer(x)?, None))
        }
    }

    pub fn backward(&self, grad_out: &Tensor<T>, cache: Option<&BnCache<T>>) -> Result<BnGrads<T>> {
        let cache = cache.ok_or(Error::MissingCache)?;
        let s = grad_out.shape();
        if s != cache.x_hat.shape() {
            return Err(Error::ShapeMismatch { left: s, right: cache.x_hat.shape() });
        }
        let plane = s.plane();
        let m = (s.n * plane) as f64;
        let mut grad_in = Tensor::filled(s, T::zero());
        let mut grad_gamma = Vec::with_capacity(s.c);
        let mut grad_beta = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xh = 0.0;
            for n in 0..s.n {
                let off = n * s.item_len() + c * plane;
                for i in off..off + plane {
                    let dy = grad_out.data()[i].to_f64();
                    sum_dy += dy;
                    sum_dy_xh += dy * cache.x_hat.data()[i].to_f64();
                }
            }
            grad_gamma.push(T::from_f64(sum_dy_xh));
            grad_beta.push(T::from_f64(sum_dy));
            let g = self.gamma[c].to_f64();
            let k = g * cache.inv_std[c] / m;
            for n in 0..s.n {
                let off = n * s.item_len() + c * plane;
                for i in off..off + plane {
                    let dy = grad_out.data()[i].to_f64();
                    let xh = cache.x_hat.data()[i].to_f64();
                    grad_in.data_mut()[i] = T::from_f64(k * (m * dy - sum_dy - xh * sum_dy_xh));
                }
            }
        }
        Ok(BnGrads { input: grad_in, gamma: grad_gamma, beta: grad_beta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad, random_tensor};
    use crate::tensor::Shape;
    use rand::SeedableRng;

    fn channel_stats(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let vals: Vec<f64> = (0..s.n).flat_map(|n| t.item(n)[c * s.plane()..(c + 1) * s.plane()].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn training_mode_standardizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, Shape::new(4, 3, 5, 5), 3.0).add_scalar(2.0);
        let mut bn = BatchNorm::<f64>::new(3);
        let (y, _) = bn.forward_train(&x).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(&y, c);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn affine_law() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, Shape::new(3, 2, 4, 4), 1.0);
        let mut plain = BatchNorm::<f64>::new(2);
        let (xh, _) = plain.forward_train(&x).unwrap();
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![2.0, 2.0];
        bn.beta = vec![3.0, 3.0];
        let (y, _) = bn.forward_train(&x).unwrap();
        for (a, b) in y.data().iter().zip(xh.data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_with_identity_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&mut rng, Shape::new(2, 2, 3, 3), 1.0);
        let bn = BatchNorm::<f64>::new(2);
        let y = bn.forward_infer(&x).unwrap();
        let k = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-15);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::from_vec((2, 1, 1, 1), vec![1.0f64, 3.0]).unwrap();
        let mut bn = BatchNorm::<f64>::new(1);
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean[0] - 0.01 * 2.0).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn backward_needs_cache_and_handles_constant_input() {
        let bn = BatchNorm::<f64>::new(1);
        let g = Tensor::new((2, 1, 2, 2), 1.0).unwrap();
        assert!(matches!(bn.backward(&g, None), Err(Error::MissingCache)));

        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new((2, 1, 2, 2), 4.0).unwrap();
        let (y, cache) = bn.forward_train(&x).unwrap();
        assert!(y.is_finite());
        let grads = bn.backward(&g, Some(&cache)).unwrap();
        assert!(grads.input.is_finite());
        assert_eq!(grads.beta[0], 8.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let s = Shape::new(3, 2, 3, 3);
        let x = random_tensor(&mut rng, s, 1.0);
        let probe = random_tensor(&mut rng, s, 1.0);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = vec![1.5, -0.7];
        bn.beta = vec![0.2, 0.4];
        let loss = |bn: &BatchNorm<f64>, x: &[f64]| {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(&Tensor::from_vec(s, x.to_vec()).unwrap()).unwrap();
            y.mul(&probe).unwrap().sum()
        };
        let mut fwd = bn.clone();
        let (_, cache) = fwd.forward_train(&x).unwrap();
        let grads = bn.backward(&probe, Some(&cache)).unwrap();

        let num_x = numeric_grad(x.data(), 1e-3, |v| loss(&bn, v));
        assert!(max_rel_error(grads.input.data(), &num_x) < 1e-4);
        let num_g = numeric_grad(&bn.gamma, 1e-3, |v| {
            let mut b = bn.clone();
            b.gamma = v.to_vec();
            loss(&b, x.data())
        });
        assert!(max_rel_error(&grads.gamma, &num_g) < 1e-4);
        let num_b = numeric_grad(&bn.beta, 1e-3, |v| {
            let mut b = bn.clone();
            b.beta = v.to_vec();
            loss(&b, x.data())
        });
        assert!(max_rel_error(&grads.beta, &num_b) < 1e-4);
    }
}
