use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Max pooling over square windows.
///
/// Padded positions never win: they are excluded from the window rather than
/// read as zeros, so border outputs are the max over the in-bounds part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

/// Flat input index (within the whole tensor) that produced each output element.
#[derive(Clone, Debug)]
pub struct PoolCache {
    pub input_shape: Shape,
    pub argmax: Vec<usize>,
}

impl MaxPool2d {
    /// Symmetric padding on both sides.
    pub fn new(size: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::with_padding(size, stride, pad, pad)
    }

    pub fn with_padding(size: usize, stride: usize, pad_begin: usize, pad_end: usize) -> Result<Self> {
        if size == 0 || stride == 0 || pad_begin >= size || pad_end >= size {
            return Err(Error::Config(format!(
                "invalid max-pool: size {size}, stride {stride}, pad ({pad_begin}, {pad_end})"
            )));
        }
        Ok(MaxPool2d { size, stride, pad_begin, pad_end })
    }

    /// Stride-1 pool that preserves spatial size: total padding `size - 1`,
    /// `(size - 1) / 2` of it before. Symmetric for odd windows.
    pub fn same(size: usize) -> Result<Self> {
        let before = size.saturating_sub(1) / 2;
        Self::with_padding(size, 1, before, size.saturating_sub(1) - before)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let span_h = input.h + self.pad_begin + self.pad_end;
        let span_w = input.w + self.pad_begin + self.pad_end;
        if span_h < self.size || span_w < self.size {
            return Err(Error::Config(format!("input {input} too small for {0}x{0} pooling", self.size)));
        }
        Ok(Shape::new(input.n, input.c, (span_h - self.size) / self.stride + 1, (span_w - self.size) / self.stride + 1))
    }

    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
        let s = x.shape();
        let os = self.output_shape(s)?;
        let mut out = Tensor::filled(os, T::zero());
        let mut argmax = vec![0usize; os.len()];
        let data = x.data();
        let mut k = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                for oy in 0..os.h {
                    let y0 = (oy * self.stride) as isize - self.pad_begin as isize;
                    let ys = y0.max(0) as usize..((y0 + self.size as isize).min(s.h as isize)) as usize;
                    for ox in 0..os.w {
                        let x0 = (ox * self.stride) as isize - self.pad_begin as isize;
                        let xs = x0.max(0) as usize..((x0 + self.size as isize).min(s.w as isize)) as usize;
                        let mut best_i = usize::MAX;
                        let mut best = T::from_f64(f64::NEG_INFINITY);
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                let i = base + iy * s.w + ix;
                                // strict > keeps the first maximum in scan order
                                if best_i == usize::MAX || data[i] > best {
                                    best = data[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.data_mut()[k] = best;
                        argmax[k] = best_i;
                        k += 1;
                    }
                }
            }
        }
        Ok((out, PoolCache { input_shape: s, argmax }))
    }

    pub fn backward<T: Float>(&self, grad_out: &Tensor<T>, cache: &PoolCache) -> Result<Tensor<T>> {
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::Config(format!(
                "max-pool gradient {} does not match cached output of {} elements",
                grad_out.shape(),
                cache.argmax.len()
            )));
        }
        let mut grad_in = Tensor::filled(cache.input_shape, T::zero());
        let gi = grad_in.data_mut();
        for (&g, &i) in grad_out.data().iter().zip(&cache.argmax) {
            gi[i] += g;
        }
        Ok(grad_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numeric_grad};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    #[test]
    fn strided_halves_and_same_preserves() {
        let p = MaxPool2d::new(2, 2, 0).unwrap();
        assert_eq!(p.output_shape(Shape::new(1, 32, 416, 416)).unwrap(), Shape::new(1, 32, 208, 208));
        let p = MaxPool2d::new(13, 1, 6).unwrap();
        assert_eq!(p.output_shape(Shape::new(1, 512, 13, 13)).unwrap(), Shape::new(1, 512, 13, 13));
        for size in 1..=14 {
            for dim in [3, 4, 6, 13] {
                let p = MaxPool2d::same(size).unwrap();
                assert_eq!(
                    p.output_shape(Shape::new(1, 1, dim, dim)).unwrap(),
                    Shape::new(1, 1, dim, dim),
                    "size {size} dim {dim}"
                );
            }
        }
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::new((1, 2, 7, 7), 3.5f32).unwrap();
        for size in [3, 5, 7] {
            let (y, _) = MaxPool2d::same(size).unwrap().forward(&x).unwrap();
            assert!(y.data().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn ties_route_to_first_in_scan_order() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0f32, 1.0, 1.0, 1.0]).unwrap();
        let p = MaxPool2d::new(2, 2, 0).unwrap();
        let (_, cache) = p.forward(&x).unwrap();
        assert_eq!(cache.argmax, vec![0]);
        let g = p.backward(&Tensor::new((1, 1, 1, 1), 2.0f32).unwrap(), &cache).unwrap();
        assert_eq!(g.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    fn distinct_input(seed: u64, s: Shape) -> Tensor<f64> {
        // a shuffled ramp: unique values with gaps far larger than the FD step
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..s.len()).map(|i| i as f64 * 0.1 - 1.0).collect();
        v.shuffle(&mut rng);
        Tensor::from_vec(s, v).unwrap()
    }

    #[test]
    fn backward_conserves_mass_and_matches_fd() {
        let s = Shape::new(2, 2, 6, 6);
        let x = distinct_input(7, s);
        for p in [MaxPool2d::new(2, 2, 0).unwrap(), MaxPool2d::same(3).unwrap(), MaxPool2d::same(4).unwrap()] {
            let (y, cache) = p.forward(&x).unwrap();
            let probe = distinct_input(8, y.shape());
            let g = p.backward(&probe, &cache).unwrap();
            assert!((g.sum() - probe.sum()).abs() < 1e-9);
            let num = numeric_grad(x.data(), 1e-3, |v| {
                let t = Tensor::from_vec(s, v.to_vec()).unwrap();
                p.forward(&t).unwrap().0.mul(&probe).unwrap().sum()
            });
            assert!(max_rel_error(g.data(), &num) < 1e-4);
        }
    }
}
