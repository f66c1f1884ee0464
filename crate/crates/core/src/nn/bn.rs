//! Batch-normalization parameters and folding into a preceding convolution.

use crate::error::{Error, Result};
use crate::nn::conv::ConvFilter;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inference-time batch normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub eps: S,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn new(mean: Vec<S>, var: Vec<S>, gamma: Vec<S>, beta: Vec<S>, eps: S) -> Result<Self> {
        let c = mean.len();
        if var.len() != c || gamma.len() != c || beta.len() != c {
            return Err(Error::shape("batch-norm vectors differ in length"));
        }
        if var.iter().any(|&v| v < S::zero()) {
            return Err(Error::config("batch-norm variance must be non-negative"));
        }
        if eps < S::zero() || var.iter().any(|&v| v + eps <= S::zero()) {
            return Err(Error::config("batch-norm var + eps must be positive"));
        }
        Ok(BatchNormParams {
            mean,
            var,
            gamma,
            beta,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn scale(&self, c: usize) -> f64 {
        self.gamma[c].as_f64() / (self.var[c].as_f64() + self.eps.as_f64()).sqrt()
    }

    /// Applies the normalization channel-wise.
    pub fn apply(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        if x.c() != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels applied to {}",
                self.channels(),
                x.c()
            )));
        }
        let mut out = x.clone();
        for n in 0..x.n() {
            for c in 0..x.c() {
                let (k, m, b) = (self.scale(c), self.mean[c].as_f64(), self.beta[c].as_f64());
                for v in out.plane_mut(n, c) {
                    *v = S::from_f64_lossy(k * (v.as_f64() - m) + b);
                }
            }
        }
        Ok(out)
    }
}

/// Absorbs `bn` into `f` so that `conv(x, folded) == bn(conv(x, f))`.
pub fn fold_batchnorm<S: Scalar>(f: &ConvFilter<S>, bn: &BatchNormParams<S>) -> Result<ConvFilter<S>> {
    if bn.channels() != f.n_out() {
        return Err(Error::shape(format!(
            "batch norm has {} channels, filter has {} outputs",
            bn.channels(),
            f.n_out()
        )));
    }
    let mut folded = f.clone();
    let per = f.c_in() * f.weights.h() * f.weights.w();
    let data = folded.weights.data_mut();
    for o in 0..f.n_out() {
        let k = bn.scale(o);
        for v in &mut data[o * per..(o + 1) * per] {
            *v = S::from_f64_lossy(v.as_f64() * k);
        }
        folded.bias[o] =
            S::from_f64_lossy((f.bias[o].as_f64() - bn.mean[o].as_f64()) * k + bn.beta[o].as_f64());
    }
    Ok(folded)
}
