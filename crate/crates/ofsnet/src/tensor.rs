//! Dense row-major tensors and square filter banks.

use crate::error::{Error, Result};

/// Dense rank-0..4 array of `f64` in row-major order.
///
/// Rank-4 tensors use the (batch, channels, height, width) convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("{shape:?} ({expected} values)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Dimensions of a rank-4 tensor as (B, C, H, W).
    pub fn dims4(&self, context: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(context, "rank-4 (B,C,H,W)", format!("{:?}", self.shape))),
        }
    }

    pub fn dims2(&self, context: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(context, "rank-2 (rows,cols)", format!("{:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of `(b, c, y, x)` in a rank-4 tensor.
    #[inline]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Bank of square convolution filters, shape (out_channels, in_channels, s, s).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub size: usize,
    pub weights: Tensor,
}

impl FilterBank {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, weights: Tensor) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::InvalidArgument(format!(
                "filter size must be odd and >= 1, got {size}"
            )));
        }
        let expected = vec![out_channels, in_channels, size, size];
        if weights.shape != expected {
            return Err(Error::shape(
                "FilterBank::new",
                format!("{expected:?}"),
                format!("{:?}", weights.shape),
            ));
        }
        Ok(FilterBank {
            out_channels,
            in_channels,
            size,
            weights,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, size: usize) -> Result<Self> {
        FilterBank::new(
            out_channels,
            in_channels,
            size,
            Tensor::zeros(vec![out_channels, in_channels, size, size]),
        )
    }

    /// Flat offset of tap `(co, ci, dy, dx)`.
    #[inline]
    pub fn at(&self, co: usize, ci: usize, dy: usize, dx: usize) -> usize {
        ((co * self.in_channels + ci) * self.size + dy) * self.size + dx
    }

    /// One `s*s` spatial slice of the bank.
    pub fn tap_slice(&self, co: usize, ci: usize) -> &[f64] {
        let start = self.at(co, ci, 0, 0);
        &self.weights.data[start..start + self.size * self.size]
    }
}
