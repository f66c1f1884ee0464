//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PBM1"  u32 input_channels  u32 classes  u32 layer_count
//! per layer: u8 tag, u16 name_len, name (UTF-8), body
//!   tag 1 conv:     u8 relu, conv record
//!   tag 2 block:    u8 stage (0 shallow, 1 deep), u8 no_prune, u8 inner_relu, u8 output_relu,
//!                   u8 middle (0 single, 1 factorized), u8 skip (0 identity, 1 projection, 2 pool),
//!                   conv1, middle conv record(s), conv3, [skip projection]
//!   tag 3 upsample: u32 factor
//!   tag 4 argmax:   empty
//! conv record: u32 n_out, c_in, k_h, k_w, stride, dilation, pad_h, pad_w,
//!              then n_out·c_in·k_h·k_w weights and n_out biases as f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::block::{Middle, ResidualBlock, Skip, StageTag};
use crate::nn::conv::ConvFilter;
use crate::nn::graph::{Layer, ModelGraph, Node};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PBM1";

const TAG_CONV: u8 = 1;
const TAG_BLOCK: u8 = 2;
const TAG_UPSAMPLE: u8 = 3;
const TAG_ARGMAX: u8 = 4;

/// Serialized model plus the size of its raw weight payload.
#[derive(Debug, Clone)]
pub struct EncodedModel {
    pub bytes: Vec<u8>,
    /// Bytes occupied by f32 weights and biases only.
    pub weight_payload_bytes: usize,
}

struct Writer {
    buf: Vec<u8>,
    payload: usize,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Size(format!("{v} does not fit a u32 field")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s<S: Scalar>(&mut self, vals: &[S]) {
        for v in vals {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        self.payload += 4 * vals.len();
    }

    fn conv<S: Scalar>(&mut self, f: &ConvFilter<S>) -> Result<()> {
        let (kh, kw) = f.kernel();
        for v in [f.n_out(), f.c_in(), kh, kw, f.stride, f.dilation, f.padding.0, f.padding.1] {
            self.u32(v)?;
        }
        self.f32s(f.weights.data());
        self.f32s(&f.bias);
        Ok(())
    }
}

pub fn encode_model<S: Scalar>(g: &ModelGraph<S>) -> Result<EncodedModel> {
    let mut w = Writer {
        buf: Vec::new(),
        payload: 0,
    };
    w.buf.extend_from_slice(MAGIC);
    w.u32(g.input_channels())?;
    w.u32(g.classes())?;
    w.u32(g.nodes().len())?;
    for node in g.nodes() {
        let tag = match node.layer {
            Layer::Conv { .. } => TAG_CONV,
            Layer::Block(_) => TAG_BLOCK,
            Layer::Upsample { .. } => TAG_UPSAMPLE,
            Layer::ArgMax => TAG_ARGMAX,
        };
        w.u8(tag);
        let name = node.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Size(format!("layer name {} too long", node.name)))?;
        w.buf.extend_from_slice(&len.to_le_bytes());
        w.buf.extend_from_slice(name);
        match &node.layer {
            Layer::Conv { filter, relu } => {
                w.u8(*relu as u8);
                w.conv(filter)?;
            }
            Layer::Block(b) => {
                w.u8(match b.stage {
                    StageTag::Shallow => 0,
                    StageTag::Deep => 1,
                });
                w.u8(b.no_prune as u8);
                w.u8(b.inner_relu as u8);
                w.u8(b.output_relu as u8);
                w.u8(match b.middle {
                    Middle::Single(_) => 0,
                    Middle::Factorized { .. } => 1,
                });
                w.u8(match b.skip {
                    Skip::Identity => 0,
                    Skip::Projection(_) => 1,
                    Skip::MaxPoolPad => 2,
                });
                for f in b.chain() {
                    w.conv(f)?;
                }
                if let Skip::Projection(p) = &b.skip {
                    w.conv(p)?;
                }
            }
            Layer::Upsample { factor } => w.u32(*factor)?,
            Layer::ArgMax => {}
        }
    }
    Ok(EncodedModel {
        weight_payload_bytes: w.payload,
        bytes: w.buf,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file (needed {n} more bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => {
                self.pos -= 1;
                Err(self.err(format!("invalid flag byte {v}")))
            }
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(S::from_f64_lossy(v as f64))
                } else {
                    Err(Error::Parse {
                        offset: start + 4 * i,
                        msg: "non-finite weight".into(),
                    })
                }
            })
            .collect()
    }

    fn conv<S: Scalar>(&mut self) -> Result<ConvFilter<S>> {
        let start = self.pos;
        let mut d = [0usize; 8];
        for v in &mut d {
            *v = self.u32()?;
        }
        let [n, c, kh, kw, stride, dilation, ph, pw] = d;
        let count = crate::tensor::Shape::new(n, c, kh, kw).volume().map_err(|e| Error::Parse {
            offset: start,
            msg: e.to_string(),
        })?;
        let weights = self.f32s(count)?;
        let bias = self.f32s(n)?;
        let weights = Tensor::from_vec((n, c, kh, kw), weights)?;
        ConvFilter::new(weights, bias, stride, dilation, (ph, pw)).map_err(|e| Error::Parse {
            offset: start,
            msg: e.to_string(),
        })
    }
}

pub fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<ModelGraph<S>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        if &magic[..3] == b"PBM" {
            return Err(Error::Version(format!(
                "model file version {:?} is not supported (expected 1)",
                magic[3] as char
            )));
        }
        return Err(Error::Parse {
            offset: 0,
            msg: "missing PBM1 magic".into(),
        });
    }
    let input_channels = r.u32()?;
    let classes = r.u32()?;
    let count = r.u32()?;
    let mut nodes = Vec::new();
    for _ in 0..count {
        let tag_at = r.pos;
        let tag = r.u8()?;
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Parse {
                offset: name_at,
                msg: "layer name is not UTF-8".into(),
            })?
            .to_string();
        let layer = match tag {
            TAG_CONV => {
                let relu = r.flag()?;
                Layer::Conv {
                    filter: r.conv()?,
                    relu,
                }
            }
            TAG_BLOCK => {
                let stage = match r.u8()? {
                    0 => StageTag::Shallow,
                    1 => StageTag::Deep,
                    v => return Err(r.err(format!("invalid stage tag {v}"))),
                };
                let no_prune = r.flag()?;
                let inner_relu = r.flag()?;
                let output_relu = r.flag()?;
                let middle_kind = r.u8()?;
                let skip_kind = r.u8()?;
                let conv1 = r.conv()?;
                let middle = match middle_kind {
                    0 => Middle::Single(r.conv()?),
                    1 => Middle::Factorized {
                        vert: r.conv()?,
                        horiz: r.conv()?,
                    },
                    v => return Err(r.err(format!("invalid middle kind {v}"))),
                };
                let conv3 = r.conv()?;
                let skip = match skip_kind {
                    0 => Skip::Identity,
                    1 => Skip::Projection(r.conv()?),
                    2 => Skip::MaxPoolPad,
                    v => return Err(r.err(format!("invalid skip kind {v}"))),
                };
                Layer::Block(ResidualBlock {
                    conv1,
                    middle,
                    conv3,
                    skip,
                    inner_relu,
                    output_relu,
                    stage,
                    no_prune,
                })
            }
            TAG_UPSAMPLE => Layer::Upsample { factor: r.u32()? },
            TAG_ARGMAX => Layer::ArgMax,
            other => {
                return Err(Error::Version(format!(
                    "layer tag {other} at byte {tag_at} is not part of format version 1"
                )))
            }
        };
        nodes.push(Node { name, layer });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelGraph::new(input_channels, classes, nodes).map_err(|e| Error::Parse {
        offset: bytes.len(),
        msg: format!("invalid graph: {e}"),
    })
}

pub fn save_model<S: Scalar>(g: &ModelGraph<S>, path: impl AsRef<Path>) -> Result<EncodedModel> {
    let enc = encode_model(g)?;
    std::fs::write(path, &enc.bytes)?;
    Ok(enc)
}

pub fn load_model<S: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<S>> {
    decode_model(&std::fs::read(path)?)
}
