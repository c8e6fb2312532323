use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// Output shape of space-to-depth with block size `stride`.
pub fn reorg_shape(input: Shape, stride: usize) -> Result<Shape> {
    if stride == 0 || !input.h.is_multiple_of(stride) || !input.w.is_multiple_of(stride) {
        return Err(Error::Config(format!("reorg stride {stride} does not divide spatial dims of {input}")));
    }
    Ok(Shape::new(input.n, input.c * stride * stride, input.h / stride, input.w / stride))
}

// out[n, c·s² + dy·s + dx, i, j] = in[n, c, i·s + dy, j·s + dx]
#[inline]
fn source_index(in_s: Shape, stride: usize, oc: usize, i: usize, j: usize) -> usize {
    let c = oc / (stride * stride);
    let r = oc % (stride * stride);
    let (dy, dx) = (r / stride, r % stride);
    (c * in_s.h + i * stride + dy) * in_s.w + j * stride + dx
}

/// Space-to-depth: `(n, c, h, w) → (n, c·s², h/s, w/s)`.
pub fn reorg_forward<T: Float>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let in_s = x.shape();
    let out_s = reorg_shape(in_s, stride)?;
    let mut out = Tensor::filled(out_s, T::zero());
    for n in 0..in_s.n {
        let src = x.item(n);
        let dst = out.item_mut(n);
        let mut k = 0;
        for oc in 0..out_s.c {
            for i in 0..out_s.h {
                for j in 0..out_s.w {
                    dst[k] = src[source_index(in_s, stride, oc, i, j)];
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse permutation of [`reorg_forward`]; `input_shape` is the forward input shape.
pub fn reorg_backward<T: Float>(grad_out: &Tensor<T>, input_shape: Shape, stride: usize) -> Result<Tensor<T>> {
    let out_s = reorg_shape(input_shape, stride)?;
    if grad_out.shape() != out_s {
        return Err(Error::ShapeMismatch { left: grad_out.shape(), right: out_s });
    }
    let mut grad_in = Tensor::filled(input_shape, T::zero());
    for n in 0..input_shape.n {
        let src = grad_out.item(n);
        let dst = grad_in.item_mut(n);
        let mut k = 0;
        for oc in 0..out_s.c {
            for i in 0..out_s.h {
                for j in 0..out_s.w {
                    dst[source_index(input_shape, stride, oc, i, j)] = src[k];
                    k += 1;
                }
            }
        }
    }
    Ok(grad_in)
}
