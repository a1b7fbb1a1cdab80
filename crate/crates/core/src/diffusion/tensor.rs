use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense single-image tensor in channel-major (`[c][y][x]`) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length does not match {c}x{h}x{w}");
        Self { c, h, w, data }
    }

    pub fn randn(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let data = (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { c, h, w, data }
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.h, self.w) == (other.c, other.h, other.w)
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", self.c, self.h, self.w),
                actual: format!("{}x{}x{}", other.c, other.h, other.w),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { c: self.c, h: self.h, w: self.w, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stack along channels.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor { c: self.c + other.c, h: self.h, w: self.w, data }
    }

    /// Split channels at `c`.
    pub fn split(&self, c: usize) -> (Tensor, Tensor) {
        let at = c * self.plane();
        (
            Tensor { c, h: self.h, w: self.w, data: self.data[..at].to_vec() },
            Tensor { c: self.c - c, h: self.h, w: self.w, data: self.data[at..].to_vec() },
        )
    }

    pub fn squared_distance(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}
