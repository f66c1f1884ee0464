use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer's calibration sample and its channel budget.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningProblem {
    /// Input patches, (N, c, k_h, k_w).
    pub x: Tensor<f64>,
    /// Responses of the unpruned layer without bias, (N, n, 1, 1).
    pub y: Tensor<f64>,
    /// Filter being pruned, (n, c, k_h, k_w).
    pub w: Tensor<f64>,
    /// Maximum number of input channels to keep.
    pub budget: usize,
}

/// `Σ_{i ∈ kept} X_i W_iᵀ` where `weights` holds one filter slice per kept channel.
pub(crate) fn responses(x: &Tensor<f64>, kept: &[usize], weights: &Tensor<f64>) -> Vec<f64> {
    let (samples, n) = (x.n(), weights.n());
    let kk = x.h() * x.w();
    let xd = x.data();
    let wd = weights.data();
    let per_sample = x.c() * kk;
    let per_filter = kept.len() * kk;
    let mut out = vec![0.0; samples * n];
    for s in 0..samples {
        let row = &xd[s * per_sample..(s + 1) * per_sample];
        for o in 0..n {
            let filt = &wd[o * per_filter..(o + 1) * per_filter];
            let mut acc = 0.0;
            for (j, &i) in kept.iter().enumerate() {
                let xs = &row[i * kk..(i + 1) * kk];
                let ws = &filt[j * kk..(j + 1) * kk];
                acc += xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
            }
            out[s * n + o] = acc;
        }
    }
    out
}

impl PruningProblem {
    /// Builds a problem from patches and the layer's filter, computing `Y = Σ X_i W_iᵀ`.
    pub fn from_patches(x: Tensor<f64>, w: Tensor<f64>, budget: usize) -> Result<Self> {
        Self::check_shapes(&x, &w)?;
        let all: Vec<usize> = (0..x.c()).collect();
        let y = Tensor::from_vec((x.n(), w.n(), 1, 1), responses(&x, &all, &w))?;
        let p = PruningProblem { x, y, w, budget };
        p.check_budget()?;
        Ok(p)
    }

    /// Builds a problem from explicit responses, checking that `y` is the unpruned
    /// layer's output on `x`.
    pub fn new(x: Tensor<f64>, y: Tensor<f64>, w: Tensor<f64>, budget: usize) -> Result<Self> {
        Self::check_shapes(&x, &w)?;
        if y.shape() != (x.n(), w.n(), 1, 1).into() {
            return Err(Error::shape(format!(
                "responses {} do not match {} samples of {} outputs",
                y.shape(),
                x.n(),
                w.n()
            )));
        }
        let p = PruningProblem { x, y, w, budget };
        p.check_budget()?;
        let all: Vec<usize> = (0..p.channels()).collect();
        let res = p.residual_with(&all, &p.w)?;
        if res > 1e-6 * p.y_norm_sq().max(f64::MIN_POSITIVE) {
            return Err(Error::Calibration(format!(
                "responses were not produced by the given filter (residual {res:.3e})"
            )));
        }
        Ok(p)
    }

    fn check_shapes(x: &Tensor<f64>, w: &Tensor<f64>) -> Result<()> {
        if (x.c(), x.h(), x.w()) != (w.c(), w.h(), w.w()) {
            return Err(Error::shape(format!(
                "patches {} do not match filter {}",
                x.shape(),
                w.shape()
            )));
        }
        let required = 10 * x.c();
        if x.n() < required {
            return Err(Error::Calibration(format!(
                "{} samples for {} channels; at least {required} required",
                x.n(),
                x.c()
            )));
        }
        Ok(())
    }

    fn check_budget(&self) -> Result<()> {
        if self.budget == 0 || self.budget > self.channels() {
            return Err(Error::config(format!(
                "budget {} outside 1..={}",
                self.budget,
                self.channels()
            )));
        }
        Ok(())
    }

    pub fn with_budget(mut self, budget: usize) -> Result<Self> {
        self.budget = budget;
        self.check_budget()?;
        Ok(self)
    }

    pub fn samples(&self) -> usize {
        self.x.n()
    }

    pub fn channels(&self) -> usize {
        self.x.c()
    }

    pub fn outputs(&self) -> usize {
        self.w.n()
    }

    pub fn kernel_len(&self) -> usize {
        self.x.h() * self.x.w()
    }

    pub fn y_norm_sq(&self) -> f64 {
        self.y.frobenius_norm_sq()
    }

    /// `‖Y − Σ_{i ∈ kept} X_i W'_iᵀ‖²_F` for filters `weights` of shape (n, |kept|, k_h, k_w).
    pub fn residual_with(&self, kept: &[usize], weights: &Tensor<f64>) -> Result<f64> {
        if weights.shape() != (self.outputs(), kept.len(), self.x.h(), self.x.w()).into() {
            return Err(Error::shape(format!(
                "weights {} do not fit {} kept channels",
                weights.shape(),
                kept.len()
            )));
        }
        if let Some(&bad) = kept.iter().find(|&&i| i >= self.channels()) {
            return Err(Error::Bounds {
                what: "channel",
                index: bad,
                len: self.channels(),
            });
        }
        let pred = responses(&self.x, kept, weights);
        Ok(self
            .y
            .data()
            .iter()
            .zip(&pred)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Residual divided by `2N`, the normalization of the pruning objective.
    pub fn objective(&self, residual: f64) -> f64 {
        residual / (2.0 * self.samples() as f64)
    }

    /// Per-channel contribution `Z_i = X_i W_iᵀ`, flattened over (sample, output).
    pub(crate) fn contributions(&self) -> Vec<Vec<f64>> {
        (0..self.channels())
            .map(|i| {
                let wi = self.w.select_channels(&[i]).expect("channel in range");
                let xi = self.x.select_channels(&[i]).expect("channel in range");
                responses(&xi, &[0], &wi)
            })
            .collect()
    }
}
