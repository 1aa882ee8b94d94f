//! Dense 4-axis tensors (batch, channel, height, width) with an optional
//! paired gradient buffer, and trainable parameters with Adam state.

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major `(batch, channel, height, width)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Tensor4 {
            shape,
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor4 {
            shape,
            data,
            grad: None,
        })
    }

    /// Fill with samples from `f` (used for weight init).
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut() -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor4 {
            shape,
            data: (0..n).map(|_| f()).collect(),
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(b, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.idx(b, c, y, x);
        &mut self.data[i]
    }

    /// Contiguous `H*W` slice for one `(batch, channel)` plane.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Allocate (or keep) the paired gradient buffer, zeroed.
    pub fn reset_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocating on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    #[inline]
    pub fn grad_plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &mut self.grad_mut()[start..start + hw]
    }

    /// True when every value (and gradient, if present) is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Elementwise map into a new tensor (gradient buffer not carried).
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Lossy precision conversion.
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }
}

/// Adam hyperparameters. `beta1` plays the role of the momentum
/// coefficient; weight decay is decoupled from the moment estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps <= 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidArgument(format!(
                "adam hyperparameters out of range: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Trainable tensor: value, gradient accumulator, and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let n = value.len();
        let grad = Tensor4::zeros(value.shape());
        Param {
            value,
            grad,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update with decoupled weight decay, consuming
    /// the accumulated gradient.
    pub fn adam_step(&mut self, hp: &AdamParams) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(hp.beta1);
        let b2 = T::from_f64(hp.beta2);
        let one = T::one();
        let lr = T::from_f64(hp.lr);
        let eps = T::from_f64(hp.eps);
        let wd = T::from_f64(hp.weight_decay);
        let c1 = one - T::from_f64(hp.beta1.powi(t));
        let c2 = one - T::from_f64(hp.beta2.powi(t));
        let g = self.grad.data();
        let p = self.value.data_mut();
        for i in 0..p.len() {
            let gi = g[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * gi;
            self.v[i] = b2 * self.v[i] + (one - b2) * gi * gi;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }

    /// Adam moment buffers in `(m, v)` order, for checkpointing.
    pub fn adam_state(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn restore_adam_state(&mut self, m: Vec<T>, v: Vec<T>, step: u64) -> Result<()> {
        if m.len() != self.value.len() || v.len() != self.value.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state length {}/{} does not match parameter length {}",
                m.len(),
                v.len(),
                self.value.len()
            )));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4::from_vec([1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
        assert_eq!(t.plane(0, 1), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn adam_first_step_decreases_by_about_lr() {
        // Bias correction makes the very first update ≈ lr regardless of
        // gradient magnitude (sans weight decay).
        let mut p = Param::new(Tensor4::from_vec([1, 1, 1, 1], vec![1.0f64]).unwrap());
        p.grad.data_mut()[0] = 1.0;
        let hp = AdamParams {
            lr: 0.001,
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        p.adam_step(&hp);
        let moved = 1.0 - p.value.data()[0];
        assert!((moved - 0.001).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_zero_grad_zero_decay_is_identity() {
        let mut p = Param::new(Tensor4::from_vec([1, 1, 1, 1], vec![0.7f64]).unwrap());
        let hp = AdamParams {
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        p.adam_step(&hp);
        assert_eq!(p.value.data()[0], 0.7);
    }

    #[test]
    fn adam_params_validation() {
        assert!(AdamParams::default().validate().is_ok());
        assert!(AdamParams {
            lr: 0.0,
            ..AdamParams::default()
        }
        .validate()
        .is_err());
    }
}
