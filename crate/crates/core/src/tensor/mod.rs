//! Dense tensor storage and the reverse-mode autodiff graph.
//!
//! Layout is row-major with channel-last `(h, w, c)` indexing for feature
//! maps. There is no implicit broadcasting: shape agreement is explicit in
//! every primitive, and per-channel / per-row combinations are their own
//! named operations.

mod graph;
pub mod io;

pub use graph::{Graph, Tensor};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A plain tensor value: shape plus flat row-major data. This is the
/// storage form used for parameters, datasets, and files; graph-attached
/// tensors wrap one of these.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorData<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorData<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        TensorData { shape, data: vec![S::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = numel(&shape);
        TensorData { shape, data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        TensorData { shape: vec![], data: vec![value] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Uniform fill in [lo, hi); the draw order is the flat data order.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut StreamRng) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| S::from_f64(rng.range_f64(lo, hi))).collect();
        TensorData { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<S>) {
        (self.shape, self.data)
    }

    /// Offset of `(i, j, k)` in an `[h, w, c]` map.
    pub fn idx3(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (i * self.shape[1] + j) * self.shape[2] + k
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> S {
        self.data[self.idx3(i, j, k)]
    }

    pub fn cast<T: Scalar>(&self) -> TensorData<T> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-channel mean and standard deviation of an `[h, w, c]` map over its
/// spatial positions. Population statistics (divide by h*w); sigma is
/// `sqrt(var + eps)`.
pub fn channel_stats<S: Scalar>(x: &TensorData<S>, eps: f64) -> Result<(Vec<S>, Vec<S>)> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::dim(format!("channel_stats expects [h,w,c], got {sh:?}")));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    if h * w == 0 {
        return Err(Error::dim("channel_stats needs h*w >= 1".to_string()));
    }
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut mu = vec![S::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (m, &v) in mu.iter_mut().zip(px) {
            *m = *m + v;
        }
    }
    for m in mu.iter_mut() {
        *m = *m * inv;
    }
    let mut var = vec![S::zero(); c];
    for px in x.data().chunks_exact(c) {
        for ((vv, &v), &m) in var.iter_mut().zip(px).zip(&mu) {
            let d = v - m;
            *vv = *vv + d * d;
        }
    }
    let eps = S::from_f64(eps);
    let sigma = var.iter().map(|&v| (v * inv + eps).sqrt()).collect();
    Ok((mu, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        let r = TensorData::<f64>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_stats_constant_channel() {
        // constant channel v -> mu = v, sigma = sqrt(eps)
        let x = TensorData::<f64>::filled(vec![2, 2, 1], 3.5);
        let (mu, sigma) = channel_stats(&x, 1e-5).unwrap();
        assert_eq!(mu, vec![3.5]);
        assert!((sigma[0] - 1e-5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_two_point() {
        // channel values {1, 3} -> mu = 2, sigma = sqrt(1 + eps)
        let x = TensorData::<f64>::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let (mu, sigma) = channel_stats(&x, 1e-5).unwrap();
        assert_eq!(mu, vec![2.0]);
        assert!((sigma[0] - (1.0 + 1e-5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn channel_stats_matches_two_pass_oracle() {
        // random 8x8x4 against a direct two-pass mean/variance loop
        let mut rng = StreamRng::from_seed(42);
        let x = TensorData::<f64>::uniform(vec![8, 8, 4], -2.0, 2.0, &mut rng);
        let (mu, sigma) = channel_stats(&x, 0.0).unwrap();
        for k in 0..4 {
            let mut s = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    s += x.at3(i, j, k);
                }
            }
            let m = s / 64.0;
            let mut v = 0.0;
            for i in 0..8 {
                for j in 0..8 {
                    v += (x.at3(i, j, k) - m) * (x.at3(i, j, k) - m);
                }
            }
            let sd = (v / 64.0).sqrt();
            assert!((mu[k] - m).abs() < 1e-12);
            assert!((sigma[k] - sd).abs() < 1e-12);
        }
    }
}
