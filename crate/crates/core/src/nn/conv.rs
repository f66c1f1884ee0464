//! Direct 2-D cross-correlation with stride, dilation and zero padding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A convolution layer: weights (n_out, c_in, k_h, k_w) plus one bias per output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter<S> {
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub dilation: usize,
    /// Zero padding applied to (rows, cols).
    pub padding: (usize, usize),
}

impl<S: Scalar> ConvFilter<S> {
    pub fn new(
        weights: Tensor<S>,
        bias: Vec<S>,
        stride: usize,
        dilation: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        if bias.len() != weights.n() {
            return Err(Error::shape(format!(
                "bias length {} != n_out {}",
                bias.len(),
                weights.n()
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::config("stride and dilation must be >= 1"));
        }
        Ok(ConvFilter {
            weights,
            bias,
            stride,
            dilation,
            padding,
        })
    }

    /// Unit-stride, undilated filter with "same" padding for odd kernels.
    pub fn same(weights: Tensor<S>, bias: Vec<S>) -> Result<Self> {
        let pad = ((weights.h() - 1) / 2, (weights.w() - 1) / 2);
        Self::new(weights, bias, 1, 1, pad)
    }

    pub fn n_out(&self) -> usize {
        self.weights.n()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.h(), self.weights.w())
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Output spatial size for an `h`×`w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let out = |len: usize, k: usize, pad: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = len + 2 * pad;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        match (out(h, kh, self.padding.0), out(w, kw, self.padding.1)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(format!(
                "{kh}x{kw} kernel (dilation {}, padding {:?}) does not fit a {h}x{w} input",
                self.dilation, self.padding
            ))),
        }
    }

    /// Keeps only the listed output filters (and their biases).
    pub fn select_outputs(&self, keep: &[usize]) -> Result<Self> {
        let weights = {
            let per = self.c_in() * self.weights.h() * self.weights.w();
            let mut data = Vec::with_capacity(keep.len() * per);
            for &o in keep {
                if o >= self.n_out() {
                    return Err(Error::Bounds {
                        what: "output filter",
                        index: o,
                        len: self.n_out(),
                    });
                }
                data.extend_from_slice(&self.weights.data()[o * per..(o + 1) * per]);
            }
            Tensor::from_vec((keep.len(), self.c_in(), self.weights.h(), self.weights.w()), data)?
        };
        let bias = keep.iter().map(|&o| self.bias[o]).collect();
        Self::new(weights, bias, self.stride, self.dilation, self.padding)
    }

    /// Keeps only the listed input channels.
    pub fn select_inputs(&self, keep: &[usize]) -> Result<Self> {
        let weights = self.weights.select_channels(keep)?;
        Self::new(weights, self.bias.clone(), self.stride, self.dilation, self.padding)
    }

    pub fn cast<T: Scalar>(&self) -> ConvFilter<T> {
        ConvFilter {
            weights: self.weights.cast(),
            bias: self.bias.iter().map(|b| T::from_f64_lossy(b.as_f64())).collect(),
            stride: self.stride,
            dilation: self.dilation,
            padding: self.padding,
        }
    }
}

/// Output index range `[lo, hi)` whose input coordinate `o*stride + offset - pad` lies in `[0, len)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let shift = offset as isize - pad as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let last = in_len as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Cross-correlation of `input` with `f`, bias added once per output element.
pub fn conv_forward<S: Scalar>(input: &Tensor<S>, f: &ConvFilter<S>) -> Result<Tensor<S>> {
    if input.c() != f.c_in() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            f.c_in(),
            input.c()
        )));
    }
    let (h, w) = (input.h(), input.w());
    let (ho, wo) = f.output_dims(h, w)?;
    let (kh, kw) = f.kernel();
    let mut out = Tensor::zeros((input.n(), f.n_out(), ho, wo))?;
    let mut acc = vec![0.0f64; ho * wo];
    let (s, d) = (f.stride, f.dilation);
    let rows: Vec<_> = (0..kh).map(|ky| valid_range(ho, h, ky * d, f.padding.0, s)).collect();
    let cols: Vec<_> = (0..kw).map(|kx| valid_range(wo, w, kx * d, f.padding.1, s)).collect();
    let taps = kh * kw;
    let pointwise = taps == 1 && s == 1 && f.padding == (0, 0);
    let weights: Vec<f64> = f.weights.data().iter().map(|v| v.as_f64()).collect();
    for n in 0..input.n() {
        for o in 0..f.n_out() {
            acc.iter_mut().for_each(|a| *a = f.bias[o].as_f64());
            for c in 0..f.c_in() {
                let plane = input.plane(n, c);
                let wk = &weights[(o * f.c_in() + c) * taps..][..taps];
                if pointwise {
                    let wt = wk[0];
                    for (a, v) in acc.iter_mut().zip(plane) {
                        *a += wt * v.as_f64();
                    }
                    continue;
                }
                for (ky, &(y0, y1)) in rows.iter().enumerate() {
                    for (kx, &(x0, x1)) in cols.iter().enumerate() {
                        let wt = wk[ky * kw + kx];
                        if wt == 0.0 || x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - f.padding.0;
                            let row = &plane[iy * w..(iy + 1) * w];
                            let arow = &mut acc[oy * wo + x0..oy * wo + x1];
                            let ix0 = x0 * s + kx * d - f.padding.1;
                            if s == 1 {
                                for (a, v) in arow.iter_mut().zip(&row[ix0..]) {
                                    *a += wt * v.as_f64();
                                }
                            } else {
                                for (j, a) in arow.iter_mut().enumerate() {
                                    *a += wt * row[ix0 + j * s].as_f64();
                                }
                            }
                        }
                    }
                }
            }
            for (dst, &a) in out.plane_mut(n, o).iter_mut().zip(&acc) {
                *dst = S::from_f64_lossy(a);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

pub fn conv_backward<S: Scalar>(input: &Tensor<S>, f: &ConvFilter<S>, grad_out: &Tensor<S>) -> Result<ConvGrads<S>> {
    let (h, w) = (input.h(), input.w());
    let (ho, wo) = f.output_dims(h, w)?;
    if grad_out.shape() != (input.n(), f.n_out(), ho, wo).into() {
        return Err(Error::shape("conv_backward: gradient shape does not match output"));
    }
    let (kh, kw) = f.kernel();
    let (s, d) = (f.stride, f.dilation);
    let mut g_in = vec![0.0f64; input.len()];
    let mut g_w = vec![0.0f64; f.weights.len()];
    let mut g_b = vec![0.0f64; f.n_out()];
    let plane_in = h * w;
    let pointwise = kh * kw == 1 && s == 1 && f.padding == (0, 0);
    for n in 0..input.n() {
        for o in 0..f.n_out() {
            let g = grad_out.plane(n, o);
            g_b[o] += g.iter().map(|v| v.as_f64()).sum::<f64>();
            for c in 0..f.c_in() {
                let x = input.plane(n, c);
                let gi_base = (n * input.c() + c) * plane_in;
                if pointwise {
                    let widx = o * f.c_in() + c;
                    let wt = f.weights.data()[widx].as_f64();
                    let gi = &mut g_in[gi_base..gi_base + plane_in];
                    let mut gw = 0.0;
                    for ((go, xv), dst) in g.iter().zip(x).zip(gi) {
                        let go = go.as_f64();
                        gw += go * xv.as_f64();
                        *dst += go * wt;
                    }
                    g_w[widx] += gw;
                    continue;
                }
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ho, h, ky * d, f.padding.0, s);
                    for kx in 0..kw {
                        let widx = f.weights.offset(o, c, ky, kx);
                        let wt = f.weights.data()[widx].as_f64();
                        let (x0, x1) = valid_range(wo, w, kx * d, f.padding.1, s);
                        let mut gw = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * s + ky * d - f.padding.0;
                            for ox in x0..x1 {
                                let ix = ox * s + kx * d - f.padding.1;
                                let go = g[oy * wo + ox].as_f64();
                                gw += go * x[iy * w + ix].as_f64();
                                g_in[gi_base + iy * w + ix] += go * wt;
                            }
                        }
                        g_w[widx] += gw;
                    }
                }
            }
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(S::from_f64_lossy).collect::<Vec<S>>();
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape(), conv(g_in))?,
        weights: Tensor::from_vec(f.weights.shape(), conv(g_w))?,
        bias: conv(g_b),
    })
}

/// Applies an n×1 filter followed by a 1×n filter.
pub fn factorized_conv_forward<S: Scalar>(
    input: &Tensor<S>,
    vert: &ConvFilter<S>,
    horiz: &ConvFilter<S>,
) -> Result<Tensor<S>> {
    if vert.n_out() != horiz.c_in() {
        return Err(Error::shape(format!(
            "factorized pair: vertical filter emits {} channels, horizontal expects {}",
            vert.n_out(),
            horiz.c_in()
        )));
    }
    conv_forward(&conv_forward(input, vert)?, horiz)
}
