//! Hand-derived backpropagation for [`ModelGraph`] and the per-pixel cross-entropy loss.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::nn::block::{relu_in_place, ResidualBlock, Skip};
use crate::nn::conv::{conv_backward, conv_forward};
use crate::nn::graph::{upsample_nearest, Layer, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient of one convolution's parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad<S> {
    pub weights: Tensor<S>,
    pub bias: Vec<S>,
}

enum Cache<S> {
    Conv { input: Tensor<S>, output: Tensor<S> },
    Block { acts: Vec<Tensor<S>>, output: Tensor<S> },
    Upsample,
}

/// Mean per-pixel cross-entropy of `scores` against `labels`, ignoring [`IGNORE_LABEL`].
///
/// Returns the loss, the number of scored pixels and the gradient with respect to
/// the scores.
pub fn cross_entropy<S: Scalar>(scores: &Tensor<S>, labels: &LabelMap) -> Result<(f64, usize, Tensor<S>)> {
    let (n, h, w) = labels.dims();
    if (scores.n(), scores.h(), scores.w()) != (n, h, w) {
        return Err(Error::shape(format!(
            "scores {} do not match labels {n}x{h}x{w}",
            scores.shape()
        )));
    }
    let k = scores.c();
    let plane = h * w;
    let mut grad = vec![0.0f64; scores.len()];
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0f64; k];
    for b in 0..n {
        for p in 0..plane {
            let label = labels.data()[b * plane + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let label = label as usize;
            if label >= k {
                return Err(Error::shape(format!("label {label} out of range for {k} classes")));
            }
            let base = b * k * plane + p;
            let max = (0..k)
                .map(|c| scores.data()[base + c * plane].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (scores.data()[base + c * plane].as_f64() - max).exp();
                z += *pr;
            }
            loss -= (probs[label] / z).ln();
            for (c, pr) in probs.iter().enumerate() {
                grad[base + c * plane] = pr / z - if c == label { 1.0 } else { 0.0 };
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, 0, Tensor::zeros(scores.shape())?));
    }
    let inv = 1.0 / count as f64;
    let grad = grad.into_iter().map(|g| S::from_f64_lossy(g * inv)).collect();
    Ok((loss * inv, count, Tensor::from_vec(scores.shape(), grad)?))
}

fn mask_relu<S: Scalar>(grad: &mut Tensor<S>, activated: &Tensor<S>) {
    for (g, a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if *a <= S::zero() {
            *g = S::zero();
        }
    }
}

fn maxpool_pad_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(x.shape())?;
    let (w, ho, wo) = (x.w(), grad.h(), grad.w());
    for n in 0..x.n() {
        for c in 0..x.c() {
            let src = x.plane(n, c);
            let g = grad.plane(n, c).to_vec();
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                for xo in 0..wo {
                    let cand = [2 * y * w + 2 * xo, 2 * y * w + 2 * xo + 1, (2 * y + 1) * w + 2 * xo, (2 * y + 1) * w + 2 * xo + 1];
                    let best = cand
                        .iter()
                        .copied()
                        .fold(cand[0], |b, i| if src[i] > src[b] { i } else { b });
                    dst[best] += g[y * wo + xo];
                }
            }
        }
    }
    Ok(out)
}

fn upsample_backward<S: Scalar>(grad: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (h, w) = (grad.h() / factor, grad.w() / factor);
    let mut out = Tensor::zeros((grad.n(), grad.c(), h, w))?;
    for n in 0..grad.n() {
        for c in 0..grad.c() {
            let g = grad.plane(n, c);
            let gw = grad.w();
            let dst = out.plane_mut(n, c);
            for (i, v) in g.iter().enumerate() {
                let (y, x) = (i / gw, i % gw);
                dst[(y / factor) * w + x / factor] += *v;
            }
        }
    }
    Ok(out)
}

fn block_forward_cached<S: Scalar>(x: &Tensor<S>, b: &ResidualBlock<S>) -> Result<(Tensor<S>, Cache<S>)> {
    let chain = b.chain();
    let last = chain.len() - 1;
    let mut acts = vec![x.clone()];
    for (i, f) in chain.iter().enumerate() {
        let mut z = conv_forward(acts.last().unwrap(), f)?;
        if i < last && b.inner_relu {
            relu_in_place(&mut z);
        }
        acts.push(z);
    }
    let mut out = acts.pop().unwrap().add(&b.skip_forward(x)?)?;
    if b.output_relu {
        relu_in_place(&mut out);
    }
    Ok((
        out.clone(),
        Cache::Block {
            acts,
            output: out,
        },
    ))
}

/// Loss and parameter gradients for one labelled batch.
///
/// Gradients are returned in the order of [`ModelGraph::conv_filters`]; entries
/// for filters with `trainable[i] == false` are `None`.
pub fn loss_and_grads<S: Scalar>(
    g: &ModelGraph<S>,
    input: &Tensor<S>,
    labels: &LabelMap,
    trainable: &[bool],
) -> Result<(f64, Vec<Option<ParamGrad<S>>>)> {
    // filter index ranges per node, matching conv_filters() order
    let mut ranges = Vec::with_capacity(g.nodes().len());
    let mut next = 0;
    for node in g.nodes() {
        let k = match &node.layer {
            Layer::Conv { .. } => 1,
            Layer::Block(b) => b.chain().len() + matches!(b.skip, Skip::Projection(_)) as usize,
            _ => 0,
        };
        ranges.push(next..next + k);
        next += k;
    }
    if trainable.len() != next {
        return Err(Error::config(format!(
            "trainable mask has {} entries for {next} filters",
            trainable.len()
        )));
    }
    let first_trainable = ranges
        .iter()
        .position(|r| r.clone().any(|i| trainable[i]))
        .unwrap_or(g.nodes().len());

    let head = g.nodes().len() - 1;
    let mut caches = Vec::with_capacity(head);
    let mut x = input.clone();
    for node in &g.nodes()[..head] {
        let (y, cache) = match &node.layer {
            Layer::Conv { filter, relu } => {
                let mut y = conv_forward(&x, filter)?;
                if *relu {
                    relu_in_place(&mut y);
                }
                let cache = Cache::Conv {
                    input: x.clone(),
                    output: if *relu { y.clone() } else { Tensor::new((1, 1, 1, 1), S::one())? },
                };
                (y, cache)
            }
            Layer::Block(b) => block_forward_cached(&x, b)?,
            Layer::Upsample { factor } => (upsample_nearest(&x, *factor)?, Cache::Upsample),
            Layer::ArgMax => unreachable!("head is excluded"),
        };
        caches.push(cache);
        x = y;
    }
    let (loss, _, mut grad) = cross_entropy(&x, labels)?;

    let mut grads: Vec<Option<ParamGrad<S>>> = vec![None; next];
    for idx in (first_trainable..head).rev() {
        let node = &g.nodes()[idx];
        let range = ranges[idx].clone();
        let cache = caches.pop().expect("one cache per layer");
        let need_input = idx > first_trainable;
        grad = match (&node.layer, cache) {
            (Layer::Conv { filter, relu }, Cache::Conv { input, output }) => {
                if *relu {
                    mask_relu(&mut grad, &output);
                }
                let cg = conv_backward(&input, filter, &grad)?;
                if trainable[range.start] {
                    grads[range.start] = Some(ParamGrad {
                        weights: cg.weights,
                        bias: cg.bias,
                    });
                }
                cg.input
            }
            (Layer::Block(b), Cache::Block { acts, output }) => {
                if b.output_relu {
                    mask_relu(&mut grad, &output);
                }
                let chain = b.chain();
                let last = chain.len() - 1;
                let mut g_branch = grad.clone();
                for i in (0..chain.len()).rev() {
                    if i < last && b.inner_relu {
                        mask_relu(&mut g_branch, &acts[i + 1]);
                    }
                    let cg = conv_backward(&acts[i], chain[i], &g_branch)?;
                    if trainable[range.start + i] {
                        grads[range.start + i] = Some(ParamGrad {
                            weights: cg.weights,
                            bias: cg.bias,
                        });
                    }
                    g_branch = cg.input;
                }
                let g_skip = match &b.skip {
                    Skip::Identity => grad,
                    Skip::Projection(p) => {
                        let cg = conv_backward(&acts[0], p, &grad)?;
                        let pi = range.start + chain.len();
                        if trainable[pi] {
                            grads[pi] = Some(ParamGrad {
                                weights: cg.weights,
                                bias: cg.bias,
                            });
                        }
                        cg.input
                    }
                    Skip::MaxPoolPad => {
                        let sliced = grad.select_channels(&(0..b.in_channels()).collect::<Vec<_>>())?;
                        maxpool_pad_backward(&acts[0], &sliced)?
                    }
                };
                g_branch.add(&g_skip)?
            }
            (Layer::Upsample { factor }, Cache::Upsample) => {
                if need_input {
                    upsample_backward(&grad, *factor)?
                } else {
                    grad
                }
            }
            _ => unreachable!("cache kind follows layer kind"),
        };
    }
    Ok((loss, grads))
}

/// Mean loss of `g` over a labelled set, without gradients.
pub fn dataset_loss<S: Scalar>(g: &ModelGraph<S>, data: &[(Tensor<S>, LabelMap)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in data {
        let scores = g.forward_scores(x)?;
        let (l, c, _) = cross_entropy(&scores, y)?;
        total += l * c as f64;
        count += c;
    }
    if count == 0 {
        return Err(Error::Undefined("no labelled pixels".into()));
    }
    Ok(total / count as f64)
}
