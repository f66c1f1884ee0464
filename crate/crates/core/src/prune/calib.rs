use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::block::relu_in_place;
use crate::nn::conv::{conv_forward, ConvFilter};
use crate::nn::graph::{Layer, ModelGraph};
use crate::prune::problem::PruningProblem;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input feature map of the convolution at `path` when `g` runs on `input`.
///
/// `path` is either a top-level conv node (`"decoder.proj1"`) or a branch conv
/// inside a block (`"stage2.block3.conv2"`), as listed by
/// [`ModelGraph::conv_filters`].
pub fn layer_input<S: Scalar>(g: &ModelGraph<S>, path: &str, input: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, node, branch) = resolve(g, path)?;
    let x = g.forward_range(input, 0, node)?;
    let Some(j) = branch else {
        return Ok(x);
    };
    let Layer::Block(b) = &g.nodes()[node].layer else {
        unreachable!("branch index implies a block");
    };
    let mut x = x;
    for f in &b.chain()[..j] {
        x = conv_forward(&x, f)?;
        if b.inner_relu {
            relu_in_place(&mut x);
        }
    }
    Ok(x)
}

/// Finds the filter at `path`, its node index and its position in the block chain.
fn resolve<'a, S: Scalar>(g: &'a ModelGraph<S>, path: &str) -> Result<(&'a ConvFilter<S>, usize, Option<usize>)> {
    if let Ok(idx) = g.node_index(path) {
        if let Layer::Conv { filter, .. } = &g.nodes()[idx].layer {
            return Ok((filter, idx, None));
        }
        return Err(Error::config(format!("{path} is not a convolution")));
    }
    let (node, conv) = path
        .rsplit_once('.')
        .ok_or_else(|| Error::config(format!("no layer named {path}")))?;
    let idx = g.node_index(node)?;
    let b = g.block(node)?;
    let j = b
        .chain_names()
        .iter()
        .position(|n| *n == conv)
        .ok_or_else(|| Error::config(format!("{node} has no branch conv {conv}")))?;
    Ok((b.chain()[j], idx, Some(j)))
}

/// Draws `per_image` receptive-field patches per batch item, uniformly over the
/// filter's output grid. Out-of-bounds taps read as zero.
pub fn sample_patches<S: Scalar>(
    input: &Tensor<S>,
    f: &ConvFilter<S>,
    per_image: usize,
    rng: &mut rng::Rng,
) -> Result<Tensor<f64>> {
    if input.c() != f.c_in() {
        return Err(Error::shape(format!(
            "filter expects {} channels, feature map has {}",
            f.c_in(),
            input.c()
        )));
    }
    let (ho, wo) = f.output_dims(input.h(), input.w())?;
    let (kh, kw) = f.kernel();
    let (c, h, w) = (input.c(), input.h(), input.w());
    let (pad_h, pad_w) = (f.padding.0 as isize, f.padding.1 as isize);
    let (s, d) = (f.stride as isize, f.dilation as isize);
    let total = input.n() * per_image;
    let mut data = Vec::with_capacity(total * c * kh * kw);
    for n in 0..input.n() {
        for _ in 0..per_image {
            let oy = rng.random_range(0..ho) as isize;
            let ox = rng.random_range(0..wo) as isize;
            for ch in 0..c {
                let plane = input.plane(n, ch);
                for ky in 0..kh as isize {
                    let iy = oy * s + ky * d - pad_h;
                    for kx in 0..kw as isize {
                        let ix = ox * s + kx * d - pad_w;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        data.push(if inside {
                            plane[iy as usize * w + ix as usize].as_f64()
                        } else {
                            0.0
                        });
                    }
                }
            }
        }
    }
    Tensor::from_vec((total, c, kh, kw), data)
}

/// Samples a pruning problem for the conv at `path` from calibration images.
///
/// Every batch item of every tensor in `inputs` contributes `samples_per_image`
/// patches. The budget is set to the full channel count; narrow it with
/// [`PruningProblem::with_budget`].
pub fn collect_calibration<S: Scalar>(
    g: &ModelGraph<S>,
    path: &str,
    inputs: &[Tensor<S>],
    samples_per_image: usize,
    seed: u64,
) -> Result<PruningProblem> {
    let (filter, _, _) = resolve(g, path)?;
    let total = inputs.iter().map(|t| t.n()).sum::<usize>() * samples_per_image;
    if total < 10 * filter.c_in() {
        return Err(Error::Calibration(format!(
            "{path}: {total} samples for {} channels; at least {} required",
            filter.c_in(),
            10 * filter.c_in()
        )));
    }
    let mut r = rng::stream(seed, rng::stream_id(path));
    let mut parts = Vec::with_capacity(inputs.len());
    for input in inputs {
        let x = layer_input(g, path, input)?;
        parts.push(sample_patches(&x, filter, samples_per_image, &mut r)?);
    }
    PruningProblem::from_patches(concat_batches(parts)?, filter.weights.cast(), filter.c_in())
}

pub(crate) fn concat_batches(parts: Vec<Tensor<f64>>) -> Result<Tensor<f64>> {
    let mut it = parts.into_iter();
    let first = it.next().ok_or_else(|| Error::Calibration("no calibration images".into()))?;
    let (c, h, w) = (first.c(), first.h(), first.w());
    let mut n = first.n();
    let mut data = first.into_vec();
    for p in it {
        n += p.n();
        data.extend(p.into_vec());
    }
    Tensor::from_vec((n, c, h, w), data)
}
