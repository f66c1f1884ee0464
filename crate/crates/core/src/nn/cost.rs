//! FLOP, parameter and model-size accounting.

use crate::error::{Error, Result};
use crate::nn::block::{ResidualBlock, Skip};
use crate::nn::conv::ConvFilter;
use crate::nn::graph::{Layer, ModelGraph};
use crate::scalar::Scalar;

/// How a multiply-accumulate is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacConvention {
    /// One operation per multiply-accumulate.
    Single = 1,
    /// Multiply and add counted separately.
    Double = 2,
}

impl MacConvention {
    pub fn from_factor(v: u32) -> Result<Self> {
        match v {
            1 => Ok(MacConvention::Single),
            2 => Ok(MacConvention::Double),
            _ => Err(Error::config(format!("MAC convention must be 1 or 2, got {v}"))),
        }
    }

    pub fn factor(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostOptions {
    pub mac: MacConvention,
    /// Count the argmax head's comparisons.
    pub include_head: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            mac: MacConvention::Single,
            include_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub flops: u64,
    pub params: u64,
    pub bytes: u64,
}

/// Totals plus a per-layer breakdown. `model_size_bytes == 4 * params`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub flops: u64,
    pub params: u64,
    pub model_size_bytes: u64,
}

impl CostReport {
    /// Per-layer rows plus a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,flops,params,bytes\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", l.layer, l.flops, l.params, l.bytes));
        }
        s.push_str(&format!(
            "total,{},{},{}\n",
            self.flops, self.params, self.model_size_bytes
        ));
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .layers
            .iter()
            .map(|l| l.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!(
            "{:<width$}  {:>14}  {:>10}  {:>10}\n",
            "layer", "flops", "params", "bytes"
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{:<width$}  {:>14}  {:>10}  {:>10}\n",
                l.layer, l.flops, l.params, l.bytes
            ));
        }
        s.push_str(&format!(
            "{:<width$}  {:>14}  {:>10}  {:>10}\n",
            "total", self.flops, self.params, self.model_size_bytes
        ));
        s
    }
}

fn conv_cost<S: Scalar>(f: &ConvFilter<S>, h: usize, w: usize, mac: u64) -> Result<(u64, usize, usize)> {
    let (ho, wo) = f.output_dims(h, w)?;
    let (kh, kw) = f.kernel();
    let outputs = (f.n_out() * ho * wo) as u64;
    let macs = (kh * kw * f.c_in()) as u64 * outputs;
    Ok((mac * macs + outputs, ho, wo))
}

fn block_cost<S: Scalar>(b: &ResidualBlock<S>, h: usize, w: usize, mac: u64) -> Result<(u64, usize, usize)> {
    let chain = b.chain();
    let last = chain.len() - 1;
    let (mut ch, mut cw) = (h, w);
    let mut flops = 0;
    for (i, f) in chain.iter().enumerate() {
        let (fl, ho, wo) = conv_cost(f, ch, cw, mac)?;
        flops += fl;
        if i < last && b.inner_relu {
            flops += (f.n_out() * ho * wo) as u64;
        }
        (ch, cw) = (ho, wo);
    }
    match &b.skip {
        Skip::Identity => {}
        Skip::Projection(p) => {
            let (fl, ho, wo) = conv_cost(p, h, w, mac)?;
            if (ho, wo) != (ch, cw) {
                return Err(Error::shape("skip projection output size differs from branch"));
            }
            flops += fl;
        }
        Skip::MaxPoolPad => {
            if (h / 2, w / 2) != (ch, cw) {
                return Err(Error::shape("pooled skip output size differs from branch"));
            }
            flops += 3 * (b.in_channels() * ch * cw) as u64;
        }
    }
    let out = (b.out_channels() * ch * cw) as u64;
    flops += out;
    if b.output_relu {
        flops += out;
    }
    Ok((flops, ch, cw))
}

/// Counts the cost of one forward pass on a `height`×`width` input.
///
/// Convolutions cost `mac · k_h·k_w·c_in` per output element plus one bias add;
/// ReLU, residual addition and each pooling comparison cost one operation per
/// element; the argmax head costs `classes − 1` comparisons per pixel when
/// included. Upsampling is a copy and costs nothing.
pub fn count_cost<S: Scalar>(g: &ModelGraph<S>, height: usize, width: usize, opts: CostOptions) -> Result<CostReport> {
    if height == 0 || width == 0 {
        return Err(Error::shape("input dimensions must be positive"));
    }
    let mac = opts.mac.factor();
    let (mut h, mut w, mut c) = (height, width, g.input_channels());
    let mut layers = Vec::with_capacity(g.nodes().len());
    for node in g.nodes() {
        let layer = &node.layer;
        let flops = match layer {
            Layer::Conv { filter, relu } => {
                let (fl, ho, wo) =
                    conv_cost(filter, h, w, mac).map_err(|e| Error::shape(format!("{}: {e}", node.name)))?;
                (h, w) = (ho, wo);
                fl + if *relu { (filter.n_out() * ho * wo) as u64 } else { 0 }
            }
            Layer::Block(b) => {
                let (fl, ho, wo) =
                    block_cost(b, h, w, mac).map_err(|e| Error::shape(format!("{}: {e}", node.name)))?;
                (h, w) = (ho, wo);
                fl
            }
            Layer::Upsample { factor } => {
                h *= factor;
                w *= factor;
                0
            }
            Layer::ArgMax => {
                if opts.include_head {
                    ((c - 1) * h * w) as u64
                } else {
                    0
                }
            }
        };
        c = layer.out_channels(c);
        let params = layer.param_count() as u64;
        layers.push(LayerCost {
            layer: node.name.clone(),
            flops,
            params,
            bytes: 4 * params,
        });
    }
    let flops = layers.iter().map(|l| l.flops).sum();
    let params: u64 = layers.iter().map(|l| l.params).sum();
    Ok(CostReport {
        layers,
        flops,
        params,
        model_size_bytes: 4 * params,
    })
}
