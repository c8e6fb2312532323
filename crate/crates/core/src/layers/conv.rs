use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// 2-D convolution with square kernels and symmetric zero padding.
///
/// Weights are stored `(out_c, in_c, k, k)`. The forward pass lowers each batch
/// item to a column matrix and runs one GEMM; the backward pass uses the same
/// lowering for the weight gradient and scatters the input gradient back
/// (correlation with the 180°-rotated kernel).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Float> Conv2d<T> {
    /// Zero-initialized convolution.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(Error::Config(format!("invalid convolution: kernel {kernel}, stride {stride}, pad {pad}")));
        }
        let weight = Tensor::zeros((out_channels, in_channels, kernel, kernel))?;
        Ok(Conv2d { in_channels, out_channels, kernel, stride, pad, weight, bias: vec![T::zero(); out_channels] })
    }

    /// Stride-1 convolution that preserves spatial size (`pad = (k-1)/2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, (kernel - 1) / 2)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::Config(format!(
                "convolution expects {} input channels, got {} (input {input})",
                self.in_channels, input.c
            )));
        }
        let span_h = input.h + 2 * self.pad;
        let span_w = input.w + 2 * self.pad;
        if span_h < self.kernel || span_w < self.kernel {
            return Err(Error::Config(format!(
                "input {input} too small for {k}x{k} kernel with pad {p}",
                k = self.kernel,
                p = self.pad
            )));
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            (span_h - self.kernel) / self.stride + 1,
            (span_w - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[T], in_shape: Shape, out_shape: Shape, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (oh, ow) = (out_shape.h, out_shape.w);
        let ohw = oh * ow;
        for c in 0..in_shape.c {
            let plane = &x[c * in_shape.plane()..(c + 1) * in_shape.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= in_shape.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * in_shape.w..][..in_shape.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *d = if ix < 0 || ix >= in_shape.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], in_shape: Shape, out_shape: Shape, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        let (oh, ow) = (out_shape.h, out_shape.w);
        let ohw = oh * ow;
        for c in 0..in_shape.c {
            let plane = &mut dx[c * in_shape.plane()..(c + 1) * in_shape.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= in_shape.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * in_shape.w..][..in_shape.w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < in_shape.w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let in_shape = x.shape();
        let out_shape = self.output_shape(in_shape)?;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let ohw = out_shape.plane();
        let mut out = Tensor::filled(out_shape, T::zero());
        let weight = self.weight.data();
        out.data_mut().par_chunks_mut(out_shape.item_len()).enumerate().for_each(|(n, dst)| {
            for (o, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(self.bias[o]);
            }
            if self.is_pointwise() {
                T::gemm(self.out_channels, kdim, ohw, weight, false, x.item(n), false, T::one(), dst);
            } else {
                let mut cols = vec![T::zero(); kdim * ohw];
                self.im2col(x.item(n), in_shape, out_shape, &mut cols);
                T::gemm(self.out_channels, kdim, ohw, weight, false, &cols, false, T::one(), dst);
            }
        });
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<ConvGrads<T>> {
        let in_shape = x.shape();
        let out_shape = self.output_shape(in_shape)?;
        if grad_out.shape() != out_shape {
            return Err(Error::ShapeMismatch { left: grad_out.shape(), right: out_shape });
        }
        let kdim = self.in_channels * self.kernel * self.kernel;
        let ohw = out_shape.plane();
        let weight = self.weight.data();

        let per_item: Vec<(Vec<T>, Vec<T>)> = (0..in_shape.n)
            .into_par_iter()
            .map(|n| {
                let g = grad_out.item(n);
                let mut dw = vec![T::zero(); self.weight.len()];
                let mut dx = vec![T::zero(); in_shape.item_len()];
                if self.is_pointwise() {
                    T::gemm(self.out_channels, ohw, kdim, g, false, x.item(n), true, T::zero(), &mut dw);
                    T::gemm(kdim, self.out_channels, ohw, weight, true, g, false, T::zero(), &mut dx);
                } else {
                    let mut cols = vec![T::zero(); kdim * ohw];
                    self.im2col(x.item(n), in_shape, out_shape, &mut cols);
                    T::gemm(self.out_channels, ohw, kdim, g, false, &cols, true, T::zero(), &mut dw);
                    T::gemm(kdim, self.out_channels, ohw, weight, true, g, false, T::zero(), &mut cols);
                    self.col2im(&cols, in_shape, out_shape, &mut dx);
                }
                (dx, dw)
            })
            .collect();

        let mut grad_input = Vec::with_capacity(in_shape.len());
        let mut grad_weight = vec![T::zero(); self.weight.len()];
        for (dx, dw) in per_item {
            grad_input.extend_from_slice(&dx);
            for (a, b) in grad_weight.iter_mut().zip(dw) {
                *a += b;
            }
        }

        let mut grad_bias = vec![0f64; self.out_channels];
        for n in 0..out_shape.n {
            for (o, row) in grad_out.item(n).chunks(ohw).enumerate() {
                grad_bias[o] += row.iter().map(|v| v.to_f64()).sum::<f64>();
            }
        }

        Ok(ConvGrads {
            input: Tensor::from_vec(in_shape, grad_input)?,
            weight: Tensor::from_vec(self.weight.shape(), grad_weight)?,
            bias: grad_bias.into_iter().map(T::from_f64).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error_tensor, numeric_grad, random_tensor};
    use rand::SeedableRng;

    /// Direct seven-loop convolution, independent of the im2col path.
    fn naive_forward(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let os = conv.output_shape(x.shape()).unwrap();
        let mut out = Tensor::filled(os, 0.0);
        let xs = x.shape();
        for n in 0..os.n {
            for o in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = conv.bias[o];
                        for c in 0..xs.c {
                            for ky in 0..conv.kernel {
                                for kx in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += conv.weight.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn random_conv(
        rng: &mut rand_chacha::ChaCha8Rng,
        ic: usize,
        oc: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Conv2d<f64> {
        let mut conv = Conv2d::<f64>::new(ic, oc, k, s, p).unwrap();
        conv.weight = random_tensor(rng, conv.weight.shape(), 1.0);
        conv.bias = random_tensor(rng, Shape::new(1, 1, 1, oc), 1.0).into_vec();
        conv
    }

    #[test]
    fn table_shapes() {
        let c = Conv2d::<f32>::same(3, 32, 3).unwrap();
        assert_eq!(c.output_shape(Shape::new(1, 3, 416, 416)).unwrap(), Shape::new(1, 32, 416, 416));
        let c = Conv2d::<f32>::same(2304, 1024, 3).unwrap();
        assert_eq!(c.output_shape(Shape::new(1, 2304, 13, 13)).unwrap(), Shape::new(1, 1024, 13, 13));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let c = Conv2d::<f32>::same(3, 8, 3).unwrap();
        assert!(c.forward(&Tensor::zeros((1, 4, 5, 5)).unwrap()).is_err());
    }

    #[test]
    fn identity_kernel_passes_input_and_gradient() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut c = Conv2d::<f64>::new(1, 1, 1, 1, 0).unwrap();
        c.weight.data_mut()[0] = 1.0;
        let x = random_tensor(&mut rng, Shape::new(2, 1, 3, 4), 1.0);
        assert_eq!(c.forward(&x).unwrap(), x);
        let g = random_tensor(&mut rng, Shape::new(2, 1, 3, 4), 1.0);
        assert_eq!(c.backward(&g, &x).unwrap().input, g);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (1, 2, 0)] {
            let conv = random_conv(&mut rng, 3, 4, k, s, p);
            let x = random_tensor(&mut rng, Shape::new(2, 3, 6, 5), 1.0);
            let fast = conv.forward(&x).unwrap();
            let slow = naive_forward(&conv, &x);
            assert!(max_rel_error_tensor(&fast, &slow) < 1e-12, "k{k} s{s} p{p}");
        }
    }

    #[test]
    fn bias_gradient_is_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let conv = random_conv(&mut rng, 2, 3, 3, 1, 1);
        let x = random_tensor(&mut rng, Shape::new(2, 2, 4, 4), 1.0);
        let g = random_tensor(&mut rng, Shape::new(2, 3, 4, 4), 1.0);
        let grads = conv.backward(&g, &x).unwrap();
        for o in 0..3 {
            let mut s = 0.0;
            for n in 0..2 {
                for i in 0..16 {
                    s += g.item(n)[o * 16 + i];
                }
            }
            assert!((grads.bias[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let conv = random_conv(&mut rng, 2, 3, k, s, p);
            let x = random_tensor(&mut rng, Shape::new(2, 2, 5, 5), 1.0);
            let os = conv.output_shape(x.shape()).unwrap();
            let probe = random_tensor(&mut rng, os, 1.0);
            let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 { c.forward(x).unwrap().mul(&probe).unwrap().sum() };
            let grads = conv.backward(&probe, &x).unwrap();

            let num_x =
                numeric_grad(x.data(), 1e-3, |v| loss(&conv, &Tensor::from_vec(x.shape(), v.to_vec()).unwrap()));
            assert!(max_rel_error_tensor(&grads.input, &Tensor::from_vec(x.shape(), num_x).unwrap()) < 1e-4);

            let num_w = numeric_grad(conv.weight.data(), 1e-3, |v| {
                let mut c = conv.clone();
                c.weight.data_mut().copy_from_slice(v);
                loss(&c, &x)
            });
            assert!(max_rel_error_tensor(&grads.weight, &Tensor::from_vec(conv.weight.shape(), num_w).unwrap()) < 1e-4);
        }
    }
}
