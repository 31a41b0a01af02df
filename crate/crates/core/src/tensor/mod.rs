//! Rank-4 tensors in `(batch, channels, rows, cols)` layout and the layer
//! primitives the U-Net is assembled from.
//!
//! Every primitive is a pure function with an explicit backward pass. The
//! naive loops here are the reference implementation; convolution is
//! cross-correlation (the kernel is not flipped).

mod conv;
mod fd;
mod layers;
mod pool;

pub use conv::{conv2d, conv2d_backward, upconv2, upconv2_backward};
pub use fd::{finite_diff_grad, relative_error};
pub use layers::{concat_channels, relu, relu_backward, softmax_channels, split_channels};
pub use pool::{maxpool2, maxpool2_backward, PoolIndices};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a [`Tensor4`]: batch count, channel count, rows, cols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major rank-4 array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// The `h × w` plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let len = self.shape.plane_len();
        let start = (n * self.shape.c + c) * len;
        &mut self.data[start..start + len]
    }

    /// Copies batch item `n` out as a tensor with batch count 1.
    pub fn item(&self, n: usize) -> Tensor4 {
        let len = self.shape.c * self.shape.plane_len();
        Tensor4 {
            shape: Shape4 { n: 1, ..self.shape },
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack an empty list of tensors"))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor4::len).sum());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (base.c, base.h, base.w) {
                return Err(Error::dim(format!(
                    "cannot stack {} with {}",
                    t.shape, base
                )));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4 { n, ..base },
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot add {} to {}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "inner product of {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize, usize, usize)> for Tensor4 {
    type Output = f64;

    fn index(&self, (n, c, y, x): (usize, usize, usize, usize)) -> &f64 {
        &self.data[self.offset(n, c, y, x)]
    }
}

impl std::ops::IndexMut<(usize, usize, usize, usize)> for Tensor4 {
    fn index_mut(&mut self, (n, c, y, x): (usize, usize, usize, usize)) -> &mut f64 {
        let i = self.offset(n, c, y, x);
        &mut self.data[i]
    }
}

/// Convolution weights `(out_channels, in_channels, kh, kw)` plus one bias
/// per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let k = Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kh == 0 || self.kw == 0 {
            return Err(Error::dim(format!(
                "kernel spatial size {}x{} must be at least 1x1",
                self.kh, self.kw
            )));
        }
        let expect = self.out_channels * self.in_channels * self.kh * self.kw;
        if self.weights.len() != expect || self.bias.len() != self.out_channels {
            return Err(Error::dim(format!(
                "kernel ({}, {}, {}, {}) has {} weights and {} biases",
                self.out_channels,
                self.in_channels,
                self.kh,
                self.kw,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn weight_offset(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[self.weight_offset(o, c, ky, kx)]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_shape(&self, other: &ConvKernel) -> bool {
        (self.out_channels, self.in_channels, self.kh, self.kw)
            == (other.out_channels, other.in_channels, other.kh, other.kw)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn dims_string(&self) -> String {
        format!(
            "({}, {}, {}, {})",
            self.out_channels, self.in_channels, self.kh, self.kw
        )
    }
}
