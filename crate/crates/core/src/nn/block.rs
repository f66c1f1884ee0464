//! Residual bottleneck blocks: 1×1 reduce, spatial conv, 1×1 expand, plus a skip path.

use crate::error::{Error, Result};
use crate::nn::conv::{conv_forward, ConvFilter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which channel-factor group a block belongs to when pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageTag {
    Shallow,
    Deep,
}

/// The spatial convolution in the middle of a bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub enum Middle<S> {
    /// Plain or dilated k×k convolution.
    Single(ConvFilter<S>),
    /// n×1 followed by 1×n.
    Factorized { vert: ConvFilter<S>, horiz: ConvFilter<S> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Skip<S> {
    Identity,
    Projection(ConvFilter<S>),
    /// 2×2 stride-2 max pooling, zero-padded up to the block's output channels.
    MaxPoolPad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<S> {
    pub conv1: ConvFilter<S>,
    pub middle: Middle<S>,
    pub conv3: ConvFilter<S>,
    pub skip: Skip<S>,
    /// ReLU after conv1 and after each middle conv.
    pub inner_relu: bool,
    /// ReLU after the residual addition.
    pub output_relu: bool,
    pub stage: StageTag,
    pub no_prune: bool,
}

pub(crate) fn relu_in_place<S: Scalar>(t: &mut Tensor<S>) {
    for v in t.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// 2×2, stride-2 max pooling followed by zero channels up to `out_c`.
pub fn maxpool_pad<S: Scalar>(x: &Tensor<S>, out_c: usize) -> Result<Tensor<S>> {
    if out_c < x.c() {
        return Err(Error::shape(format!(
            "pooled skip cannot shrink {} channels to {out_c}",
            x.c()
        )));
    }
    let (ho, wo) = (x.h() / 2, x.w() / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape(format!("cannot pool a {}x{} map", x.h(), x.w())));
    }
    let mut out = Tensor::zeros((x.n(), out_c, ho, wo))?;
    for n in 0..x.n() {
        for c in 0..x.c() {
            let src = x.plane(n, c);
            let w = x.w();
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xo in 0..wo {
                    let i = 2 * y * w + 2 * xo;
                    dst[y * wo + xo] = src[i].max(src[i + 1]).max(src[i + w]).max(src[i + w + 1]);
                }
            }
        }
    }
    Ok(out)
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn in_channels(&self) -> usize {
        self.conv1.c_in()
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.n_out()
    }

    /// Convolutions on the residual branch, in application order.
    pub fn chain(&self) -> Vec<&ConvFilter<S>> {
        let mut v = vec![&self.conv1];
        match &self.middle {
            Middle::Single(f) => v.push(f),
            Middle::Factorized { vert, horiz } => {
                v.push(vert);
                v.push(horiz);
            }
        }
        v.push(&self.conv3);
        v
    }

    pub fn chain_mut(&mut self) -> Vec<&mut ConvFilter<S>> {
        let mut v = vec![&mut self.conv1];
        match &mut self.middle {
            Middle::Single(f) => v.push(f),
            Middle::Factorized { vert, horiz } => {
                v.push(vert);
                v.push(horiz);
            }
        }
        v.push(&mut self.conv3);
        v
    }

    /// Names of the branch convolutions, matching [`Self::chain`].
    pub fn chain_names(&self) -> &'static [&'static str] {
        match self.middle {
            Middle::Single(_) => &["conv1", "conv2", "conv3"],
            Middle::Factorized { .. } => &["conv1", "conv2v", "conv2h", "conv3"],
        }
    }

    /// Width of the bottleneck (channels between conv1 and conv3).
    pub fn internal_channels(&self) -> usize {
        self.conv1.n_out()
    }

    pub fn param_count(&self) -> usize {
        let skip = match &self.skip {
            Skip::Projection(p) => p.param_count(),
            _ => 0,
        };
        self.chain().iter().map(|f| f.param_count()).sum::<usize>() + skip
    }

    /// Checks that adjacent channel counts agree.
    pub fn validate(&self) -> Result<()> {
        let chain = self.chain();
        let names = self.chain_names();
        for (i, pair) in chain.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].c_in() {
                return Err(Error::shape(format!(
                    "{} emits {} channels but {} expects {}",
                    names[i],
                    pair[0].n_out(),
                    names[i + 1],
                    pair[1].c_in()
                )));
            }
        }
        match &self.skip {
            Skip::Identity if self.in_channels() != self.out_channels() => Err(Error::shape(format!(
                "identity skip carries {} channels, branch emits {}",
                self.in_channels(),
                self.out_channels()
            ))),
            Skip::Projection(p) if p.c_in() != self.in_channels() || p.n_out() != self.out_channels() => {
                Err(Error::shape("skip projection does not match block channels"))
            }
            Skip::MaxPoolPad if self.out_channels() < self.in_channels() => {
                Err(Error::shape("pooled skip cannot reduce channels"))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn skip_forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.skip {
            Skip::Identity => Ok(input.clone()),
            Skip::Projection(p) => conv_forward(input, p),
            Skip::MaxPoolPad => maxpool_pad(input, self.out_channels()),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ResidualBlock<T> {
        ResidualBlock {
            conv1: self.conv1.cast(),
            middle: match &self.middle {
                Middle::Single(f) => Middle::Single(f.cast()),
                Middle::Factorized { vert, horiz } => Middle::Factorized {
                    vert: vert.cast(),
                    horiz: horiz.cast(),
                },
            },
            conv3: self.conv3.cast(),
            skip: match &self.skip {
                Skip::Identity => Skip::Identity,
                Skip::Projection(p) => Skip::Projection(p.cast()),
                Skip::MaxPoolPad => Skip::MaxPoolPad,
            },
            inner_relu: self.inner_relu,
            output_relu: self.output_relu,
            stage: self.stage,
            no_prune: self.no_prune,
        }
    }
}

/// `act(skip(x) + conv3(act(middle(act(conv1(x))))))`.
pub fn block_forward<S: Scalar>(input: &Tensor<S>, b: &ResidualBlock<S>) -> Result<Tensor<S>> {
    b.validate()?;
    if input.c() != b.in_channels() {
        return Err(Error::shape(format!(
            "block input has {} channels, conv1 expects {}",
            input.c(),
            b.in_channels()
        )));
    }
    let chain = b.chain();
    let last = chain.len() - 1;
    let mut x = input.clone();
    for (i, f) in chain.iter().enumerate() {
        x = conv_forward(&x, f)?;
        if i < last && b.inner_relu {
            relu_in_place(&mut x);
        }
    }
    let skip = b.skip_forward(input)?;
    if skip.shape() != x.shape() {
        return Err(Error::shape(format!(
            "skip path yields {} but branch yields {}",
            skip.shape(),
            x.shape()
        )));
    }
    let mut out = x.add(&skip)?;
    if b.output_relu {
        relu_in_place(&mut out);
    }
    Ok(out)
}
