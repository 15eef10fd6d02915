//! Dense rank-5 tensors laid out as (batch, channel, H, W, D) with D fastest.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type usable by the network engine.
///
/// Implemented for `f32` (training, checkpoints) and `f64` (gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row/column-major operands.
    ///
    /// # Safety
    /// Every pointer and stride combination must address memory valid for the
    /// given `m x k`, `k x n` and `m x n` extents, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// The five extents of a [`Tensor`]: batch `n`, channels `c`, and spatial `h`, `w`, `d`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims(pub [usize; 5]);

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize, d: usize) -> Self {
        Dims([n, c, h, w, d])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn d(&self) -> usize {
        self.0[4]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    /// Number of voxels in one channel of one batch item.
    pub fn voxels(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(self, c: usize) -> Self {
        Dims([self.0[0], c, self.0[2], self.0[3], self.0[4]])
    }

    pub fn with_spatial(self, s: [usize; 3]) -> Self {
        Dims([self.0[0], self.0[1], s[0], s[1], s[2]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&x| x == 0) {
            return Err(Error::Shape(format!("all dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

impl fmt::Debug for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w, d] = self.0;
        write!(f, "({n}, {c}, {h}, {w}, {d})")
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense rank-5 array in row-major (n, c, h, w, d) order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.numel()],
        }
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.numel()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.numel() {
            return Err(Error::Shape(format!(
                "{} elements do not fill dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Builds a tensor by evaluating `f` at every (n, c, h, w, d) index.
    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let [n, c, h, w, d] = dims.0;
        let mut data = Vec::with_capacity(dims.numel());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    for i3 in 0..w {
                        for i4 in 0..d {
                            data.push(f([i0, i1, i2, i3, i4]));
                        }
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 5]) -> usize {
        let [_, c, h, w, d] = self.dims.0;
        (((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]) * d + idx[4]
    }

    pub fn get(&self, idx: [usize; 5]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    /// Same data under new dims with equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.numel() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {dims}", self.dims)));
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    /// Contiguous slice holding batch item `i`.
    pub fn item(&self, i: usize) -> &[T] {
        let per = self.dims.numel() / self.dims.n();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let per = self.dims.numel() / self.dims.n();
        &mut self.data[i * per..(i + 1) * per]
    }

    /// Stacks single-item tensors of equal dims along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let one = first.dims;
        let mut data = Vec::with_capacity(one.numel() * items.len());
        let mut n = 0;
        for t in items {
            if t.dims.0[1..] != one.0[1..] {
                return Err(Error::Shape(format!("cannot stack {} with {}", t.dims, one)));
            }
            n += t.dims.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: Dims([n, one.0[1], one.0[2], one.0[3], one.0[4]]),
            data,
        })
    }

    /// Splits the batch axis back into single-item tensors.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        (0..self.dims.n())
            .map(|i| Tensor {
                dims: Dims([1, self.dims.0[1], self.dims.0[2], self.dims.0[3], self.dims.0[4]]),
                data: self.item(i).to_vec(),
            })
            .collect()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("cannot add {} to {}", other.dims, self.dims)));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
