//! Dense rank-3 tensors.
//!
//! Every activation, gradient and weighting field in the crate is a
//! [`Tensor3`] laid out w-major: the scalar at `(w, h, d)` lives at flat
//! index `(w * H + h) * D + d`. All modules share this layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial width, spatial height and channel depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Shape {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Shape { width, height, depth }
    }

    pub const fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn spatial(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub const fn index(&self, w: usize, h: usize, d: usize) -> usize {
        (w * self.height + h) * self.depth + d
    }

    /// Inverse of [`Shape::index`].
    pub const fn coords(&self, index: usize) -> (usize, usize, usize) {
        let d = index % self.depth;
        let wh = index / self.depth;
        (wh / self.height, wh % self.height, d)
    }

    pub const fn contains(&self, w: usize, h: usize, d: usize) -> bool {
        w < self.width && h < self.height && d < self.depth
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

pub(crate) fn check_finite(data: &[f64], context: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(Error::NonFinite {
            context: context.to_string(),
            index,
            value: data[index],
        }),
    }
}

/// Dense `W x H x D` array of finite `f64` scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor3 {
    /// Builds a tensor, rejecting empty shapes, wrong lengths and NaN/Inf.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::EmptyShape(shape));
        }
        if data.len() != shape.len() {
            return Err(Error::DataLength {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        check_finite(&data, "tensor construction")?;
        Ok(Tensor3 { shape, data })
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Builds a tensor by evaluating `f(w, h, d)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for w in 0..shape.width {
            for h in 0..shape.height {
                for d in 0..shape.depth {
                    data.push(f(w, h, d));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn depth(&self) -> usize {
        self.shape.depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, w: usize, h: usize, d: usize) -> f64 {
        self.data[self.shape.index(w, h, d)]
    }

    /// Checked variant of [`Tensor3::get`].
    pub fn try_get(&self, w: usize, h: usize, d: usize) -> Result<f64> {
        if self.shape.contains(w, h, d) {
            Ok(self.get(w, h, d))
        } else {
            Err(Error::OutOfRange(format!(
                "({w}, {h}, {d}) outside tensor {}",
                self.shape
            )))
        }
    }

    /// Applies `f` to every scalar, re-checking finiteness.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Per-channel mean over all spatial positions.
    pub fn spatial_average(&self) -> ChannelVector {
        let mut sums = self.channel_sums();
        let n = self.shape.spatial() as f64;
        for v in &mut sums {
            *v /= n;
        }
        ChannelVector(sums)
    }

    /// Per-channel maximum over all spatial positions.
    pub fn spatial_max(&self) -> ChannelVector {
        let mut out = vec![f64::NEG_INFINITY; self.shape.depth];
        for chunk in self.data.chunks_exact(self.shape.depth) {
            for (m, &v) in out.iter_mut().zip(chunk) {
                if v > *m {
                    *m = v;
                }
            }
        }
        ChannelVector(out)
    }

    /// Per-channel sum over all spatial positions, accumulated in index order.
    pub fn channel_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.shape.depth];
        for chunk in self.data.chunks_exact(self.shape.depth) {
            for (s, &v) in sums.iter_mut().zip(chunk) {
                *s += v;
            }
        }
        sums
    }

    /// Sum over channels at every spatial position, as a `W x H x 1` tensor.
    pub fn channel_sum_map(&self) -> Tensor3 {
        let data = self
            .data
            .chunks_exact(self.shape.depth)
            .map(|c| c.iter().sum())
            .collect();
        Tensor3 {
            shape: Shape::new(self.shape.width, self.shape.height, 1),
            data,
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Self::new(self.shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// One scalar per channel: a spatially summarized tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelVector(pub Vec<f64>);

impl ChannelVector {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ChannelVector {
    fn from(v: Vec<f64>) -> Self {
        ChannelVector(v)
    }
}
