//! Dense N×C×H×W tensors.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tensor extent in N, C, H, W order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Checked element count. Fails on zero or overflowing dimensions.
    pub fn volume(&self) -> Result<usize> {
        let dims = [self.n, self.c, self.h, self.w];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Size(format!("zero dimension in {self}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Size(format!("{self} overflows usize")))
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major N,C,H,W tensor. All values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Shape>, fill: S) -> Result<Self> {
        let shape = shape.into();
        let len = shape.volume()?;
        if !fill.is_finite() {
            return Err(Error::Numeric(format!("non-finite fill value {fill}")));
        }
        Ok(Tensor {
            shape,
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, S::zero())
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.volume()?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "{} values supplied for shape {shape} ({len} required)",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every position.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Result<Self> {
        let shape = shape.into();
        let len = shape.volume()?;
        let mut data = Vec::with_capacity(len);
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape.n
    }

    pub fn c(&self) -> usize {
        self.shape.c
    }

    pub fn h(&self) -> usize {
        self.shape.h
    }

    pub fn w(&self) -> usize {
        self.shape.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable element access. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: S) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// The H×W plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Channel `i` of every batch item, as an (n, 1, h, w) tensor.
    pub fn slice_channel(&self, i: usize) -> Result<Self> {
        self.select_channels(&[i])
    }

    /// Gathers the listed channels, in the listed order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Size("empty channel selection".into()));
        }
        for &i in channels {
            if i >= self.shape.c {
                return Err(Error::Bounds {
                    what: "channel",
                    index: i,
                    len: self.shape.c,
                });
            }
        }
        let shape = Shape::new(self.shape.n, channels.len(), self.shape.h, self.shape.w);
        let mut data = Vec::with_capacity(shape.volume()?);
        for n in 0..self.shape.n {
            for &c in channels {
                data.extend_from_slice(self.plane(n, c));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("nothing to concatenate".into()))?;
        let (n, h, w) = (first.n(), first.h(), first.w());
        if parts.iter().any(|t| t.n() != n || t.h() != h || t.w() != w) {
            return Err(Error::shape("concat_channels: mismatched n/h/w"));
        }
        let c = parts.iter().map(|t| t.c()).sum();
        let shape = Shape::new(n, c, h, w);
        let mut data = Vec::with_capacity(shape.volume()?);
        for b in 0..n {
            for t in parts {
                let p = t.shape.plane();
                let start = b * t.c() * p;
                data.extend_from_slice(&t.data[start..start + t.c() * p]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Size("nothing to stack".into()))?;
        let per = Shape::new(1, first.c(), first.h(), first.w());
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if (t.c(), t.h(), t.w()) != (per.c, per.h, per.w) {
                return Err(Error::shape(format!("stack: {} vs {}", t.shape, first.shape)));
            }
            n += t.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, per.c, per.h, per.w),
            data,
        })
    }

    /// Batch item `i` as an (1, c, h, w) tensor.
    pub fn item(&self, i: usize) -> Result<Self> {
        if i >= self.shape.n {
            return Err(Error::Bounds {
                what: "batch item",
                index: i,
                len: self.shape.n,
            });
        }
        let per = self.shape.c * self.shape.plane();
        Ok(Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[i * per..(i + 1) * per].to_vec(),
        })
    }

    /// Sum of squares, accumulated in f64.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "max_abs_diff on {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.volume()? != self.data.len() {
            return Err(Error::Size(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Writes the binary dump: four u32 LE dims then f32 LE values.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.data.len());
        for d in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            let d = u32::try_from(d).map_err(|_| Error::Size(format!("dimension {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::decode_dump(&bytes)
    }

    pub fn decode_dump(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "tensor header needs 16 bytes".into(),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
        let len = shape.volume().map_err(|e| Error::Parse {
            offset: 0,
            msg: e.to_string(),
        })?;
        let need = len
            .checked_mul(4)
            .and_then(|b| b.checked_add(16))
            .ok_or_else(|| Error::Parse {
                offset: 0,
                msg: "payload size overflows".into(),
            })?;
        if bytes.len() != need {
            return Err(Error::Parse {
                offset: bytes.len().min(need),
                msg: format!("expected {need} bytes for shape {shape}, found {}", bytes.len()),
            });
        }
        let mut data = Vec::with_capacity(len);
        for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Parse {
                    offset: 16 + 4 * i,
                    msg: "non-finite value".into(),
                });
            }
            data.push(S::from_f64_lossy(v as f64));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_dump(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_dump(&std::fs::read(path)?)
    }
}
