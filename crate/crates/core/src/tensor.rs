//! Dense 4-D tensors in `(n, c, h, w)` layout.
//!
//! Storage is a single contiguous `Vec<T>`, batch-major, then channel, row and
//! column. Every layer in the crate assumes this layout. The element type is
//! generic so the same kernels can run in 32-bit (training, inference) and
//! 64-bit (finite-difference gradient checks).

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    num_traits::Num
    + Copy
    + PartialOrd
    + std::ops::Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    /// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`.
    /// When a `*_t` flag is set the corresponding operand is stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_float {
    ($t:ty, $gemm:path) => {
        impl Float for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: bounds asserted above; strides describe dense row-major storage.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);

/// Dimensions of a 4-D tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Element count, `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.n.checked_mul(self.c)?.checked_mul(self.h)?.checked_mul(self.w)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1
            && self.c >= 1
            && self.h >= 1
            && self.w >= 1
            && self.checked_len().is_some_and(|l| l <= isize::MAX as usize / 8)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl<T: Float> Tensor<T> {
    /// A tensor of the given shape with every element set to `fill`.
    pub fn new(shape: impl Into<Shape>, fill: T) -> Result<Self> {
        let shape = shape.into();
        if !shape.is_valid() {
            return Err(Error::InvalidShape(shape));
        }
        Ok(Tensor { shape, data: vec![fill; shape.len()] })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if !shape.is_valid() {
            return Err(Error::InvalidShape(shape));
        }
        if data.len() != shape.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for shapes already known to be valid.
    pub(crate) fn filled(shape: Shape, fill: T) -> Self {
        debug_assert!(shape.is_valid());
        Tensor { shape, data: vec![fill; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Slice of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let l = self.shape.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let l = self.shape.item_len();
        &mut self.data[n * l..(n + 1) * l]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { left: self.shape, right: other.shape });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Tensor { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Sum with 64-bit accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    /// Concatenates along the channel axis, blocks in argument order.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Config("concat_channels needs at least one part".into()))?;
        let base = first.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return Err(Error::ShapeMismatch { left: base, right: s });
            }
            c += s.c;
        }
        let shape = base.with_channels(c);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..base.n {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits into blocks of the given channel counts.
    pub fn split_channels(&self, channels: &[usize]) -> Result<Vec<Self>> {
        let total: usize = channels.iter().sum();
        if total != self.shape.c || channels.contains(&0) {
            return Err(Error::Config(format!("cannot split {} channels into {channels:?}", self.shape.c)));
        }
        let plane = self.shape.plane();
        let mut out: Vec<Tensor<T>> = channels
            .iter()
            .map(|&c| Tensor { shape: self.shape.with_channels(c), data: Vec::with_capacity(self.shape.n * c * plane) })
            .collect();
        for n in 0..self.shape.n {
            let item = self.item(n);
            let mut off = 0;
            for (o, &c) in out.iter_mut().zip(channels) {
                o.data.extend_from_slice(&item[off..off + c * plane]);
                off += c * plane;
            }
        }
        Ok(out)
    }

    /// Copies batch items `[start, start+count)` into a new tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.n {
            return Err(Error::Config(format!(
                "batch slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let l = self.shape.item_len();
        Ok(Tensor { shape: Shape { n: count, ..self.shape }, data: self.data[start * l..(start + count) * l].to_vec() })
    }

    /// Stacks single-or-multi item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Config("stack needs at least one tensor".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.c != first.shape.c || t.shape.h != first.shape.h || t.shape.w != first.shape.w {
                return Err(Error::ShapeMismatch { left: first.shape, right: t.shape });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape { n, ..first.shape }, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_fills() {
        let t = Tensor::<f32>::new((1, 1, 2, 2), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f32>::new((1, 3, 416, 416), 0.5).unwrap();
        assert_eq!(t.len(), 519_168);
        assert!(t.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_zero_and_overflow_dims() {
        assert!(matches!(Tensor::<f32>::new((2, 0, 1, 1), 0.0), Err(Error::InvalidShape(_))));
        assert!(Tensor::<f32>::new((usize::MAX, 2, 2, 2), 0.0).is_err());
    }

    #[test]
    fn elementwise_ops() {
        let a = Tensor::from_vec((1, 1, 1, 2), vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::from_vec((1, 1, 1, 2), vec![3.0f32, 4.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        let z = Tensor::zeros((1, 1, 1, 2)).unwrap();
        assert_eq!(a.add(&z).unwrap(), a);
        assert_eq!(a.scale(1.0), a);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros((1, 1, 1, 2)).unwrap();
        let b = Tensor::<f32>::zeros((1, 2, 1, 1)).unwrap();
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("(1, 1, 1, 2)") && msg.contains("(1, 2, 1, 1)"), "{msg}");
    }

    #[test]
    fn concat_matches_dense_block_widths() {
        let parts: Vec<Tensor<f32>> =
            [512, 256, 512, 512, 512].iter().map(|&c| Tensor::zeros((1, c, 13, 13)).unwrap()).collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        assert_eq!(Tensor::concat_channels(&refs).unwrap().shape(), Shape::new(1, 2304, 13, 13));
        let a = Tensor::<f32>::zeros((1, 1024, 13, 13)).unwrap();
        let b = Tensor::<f32>::zeros((1, 256, 13, 13)).unwrap();
        assert_eq!(Tensor::concat_channels(&[&a, &b]).unwrap().shape(), Shape::new(1, 1280, 13, 13));
    }

    #[test]
    fn concat_single_is_identity_and_rejects_spatial_mismatch() {
        let a = Tensor::from_vec((1, 2, 1, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::concat_channels(&[&a]).unwrap(), a);
        let b = Tensor::<f32>::zeros((1, 1, 2, 2)).unwrap();
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    fn arb_parts() -> impl Strategy<Value = (usize, usize, usize, Vec<usize>, u64)> {
        (1usize..3, 1usize..4, 1usize..4, prop::collection::vec(1usize..4, 1..5), any::<u64>())
    }

    proptest! {
        #[test]
        fn concat_then_split_round_trips((n, h, w, chans, seed) in arb_parts()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let parts: Vec<Tensor<f32>> = chans
                .iter()
                .map(|&c| {
                    let s = Shape::new(n, c, h, w);
                    Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
                })
                .collect();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let cat = Tensor::concat_channels(&refs).unwrap();
            prop_assert!(cat.is_finite());
            let back = cat.split_channels(&chans).unwrap();
            prop_assert_eq!(back, parts);
        }

        #[test]
        fn elementwise_commutes_with_batch_permutation(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Shape::new(3, 2, 2, 2);
            let mut rand_t = || Tensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-1.0f64..1.0)).collect()).unwrap();
            let a = rand_t();
            let b = rand_t();
            let perm = [2usize, 0, 1];
            let permute = |t: &Tensor<f64>| {
                let items: Vec<Tensor<f64>> = perm.iter().map(|&i| t.batch_slice(i, 1).unwrap()).collect();
                Tensor::stack(&items).unwrap()
            };
            prop_assert_eq!(permute(&a.mul(&b).unwrap()), permute(&a).mul(&permute(&b)).unwrap());
            prop_assert_eq!(permute(&a.sub(&b).unwrap()), permute(&a).sub(&permute(&b)).unwrap());
        }
    }
}
