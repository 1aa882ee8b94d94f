//! Parameterized layer wrappers used to assemble the detector:
//! convolution, fully-connected, and active-rotating-filter layers.
//! Backward passes accumulate into the owned parameter gradients and
//! return the input gradient.

use crate::arf::{self, ArfBank};
use crate::error::Result;
use crate::ops;
use crate::real::Real;
use crate::tensor::{Param, Tensor4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
    /// He initialization: Gaussian with σ = √(2 / fan_in).
    HeNormal,
    Zero,
}

impl Init {
    fn sample<T: Real>(&self, fan_in: usize, rng: &mut impl Rng) -> T {
        let sigma = match self {
            Init::Gaussian(s) => *s,
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
            Init::Zero => return T::zero(),
        };
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * sigma)
    }
}

/// 2-D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let weights = Tensor4::from_fn([out_ch, in_ch, k, k], || init.sample(fan_in, rng));
        ConvLayer {
            weights: Param::new(weights),
            bias: Param::new(Tensor4::zeros([1, out_ch, 1, 1])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d(
            x,
            &self.weights.value,
            Some(self.bias.value.data()),
            self.stride,
            self.pad,
        )
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (gx, gw, gb) =
            ops::conv2d_backward(x, &self.weights.value, self.stride, self.pad, grad_out)?;
        accumulate(self.weights.grad.data_mut(), gw.data());
        accumulate(self.bias.grad.data_mut(), &gb);
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Fully-connected layer; weights stored as `(out, in, 1, 1)`.
#[derive(Debug, Clone)]
pub struct FcLayer<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> FcLayer<T> {
    pub fn new(in_dim: usize, out_dim: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weights = Tensor4::from_fn([out_dim, in_dim, 1, 1], || init.sample(in_dim, rng));
        FcLayer {
            weights: Param::new(weights),
            bias: Param::new(Tensor4::zeros([1, out_dim, 1, 1])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.value.shape()[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        ops::fully_connected(x, &self.weights.value, self.bias.value.data())
    }

    pub fn backward(&mut self, x: &[T], grad_out: &[T]) -> Vec<T> {
        let (gx, gw, gb) = ops::fully_connected_backward(x, &self.weights.value, grad_out);
        accumulate(self.weights.grad.data_mut(), gw.data());
        accumulate(self.bias.grad.data_mut(), &gb);
        gx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// One multi-oriented response layer: an ARF bank applied at stride 1
/// with same-size padding. Has no bias so the oriented channels stay
/// exact rotations of each other.
#[derive(Debug, Clone)]
pub struct ArfLayer<T> {
    pub base: Param<T>,
    pub n_orient: usize,
}

impl<T: Real> ArfLayer<T> {
    pub fn new(
        in_ch: usize,
        filters: usize,
        k: usize,
        n_orient: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let base = Tensor4::from_fn([filters, in_ch, k, k], || init.sample(fan_in, rng));
        ArfLayer {
            base: Param::new(base),
            n_orient,
        }
    }

    pub fn bank(&self) -> ArfBank<T> {
        ArfBank {
            base: self.base.value.clone(),
            n_orient: self.n_orient,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.base.value.shape()[0] * self.n_orient
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        arf::multi_oriented_response(x, &self.bank())
    }

    pub fn backward(&mut self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (gx, gbase) = arf::multi_oriented_response_backward(x, &self.bank(), grad_out)?;
        accumulate(self.base.grad.data_mut(), gbase.data());
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.base]
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = ConvLayer::<f64>::new(3, 5, 3, 1, 1, Init::HeNormal, &mut rng);
        layer.bias.value.data_mut()[2] = 1.5;
        let x = Tensor4::zeros([2, 3, 8, 8]);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.shape(), [2, 5, 8, 8]);
        assert!(y.plane(0, 2).iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_init_layer_outputs_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = ConvLayer::<f64>::new(2, 2, 1, 1, 0, Init::Zero, &mut rng);
        let x = Tensor4::from_fn([1, 2, 4, 4], || 3.0);
        let y = layer.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_layer_roundtrip_grad_accumulates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = FcLayer::<f64>::new(3, 2, Init::Gaussian(0.1), &mut rng);
        let x = [1.0, -0.5, 2.0];
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.len(), 2);
        let before: Vec<f64> = layer.weights.grad.data().to_vec();
        layer.backward(&x, &[1.0, 0.0]);
        layer.backward(&x, &[1.0, 0.0]);
        let after = layer.weights.grad.data();
        // two identical backward passes accumulate twice
        for i in 0..3 {
            assert!((after[i] - (before[i] + 2.0 * x[i])).abs() < 1e-12);
        }
    }
}
