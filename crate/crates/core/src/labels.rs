//! Per-pixel class index maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Label value for pixels that carry no class.
pub const IGNORE_LABEL: u32 = 255;

/// (n, h, w) map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, fill: u32) -> Result<Self> {
        let len = Shape::new(n, 1, h, w).volume()?;
        Ok(LabelMap {
            n,
            h,
            w,
            data: vec![fill; len],
        })
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        let len = Shape::new(n, 1, h, w).volume()?;
        if data.len() != len {
            return Err(Error::Size(format!(
                "{} labels for a {n}x{h}x{w} map",
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, h: usize, w: usize) -> u32 {
        self.data[(n * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn set(&mut self, n: usize, h: usize, w: usize, v: u32) {
        self.data[(n * self.h + h) * self.w + w] = v;
    }

    /// Batch item `i` as a single-image map.
    pub fn item(&self, i: usize) -> Result<LabelMap> {
        if i >= self.n {
            return Err(Error::Bounds {
                what: "batch item",
                index: i,
                len: self.n,
            });
        }
        let per = self.h * self.w;
        LabelMap::from_vec(1, self.h, self.w, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Rectangular crop `[top, top+h) × [left, left+w)` of every batch item.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<LabelMap> {
        if top + h > self.h || left + w > self.w {
            return Err(Error::shape("crop exceeds label map"));
        }
        let mut data = Vec::with_capacity(self.n * h * w);
        for n in 0..self.n {
            for y in top..top + h {
                for x in left..left + w {
                    data.push(self.at(n, y, x));
                }
            }
        }
        LabelMap::from_vec(self.n, h, w, data)
    }

    /// Stores the map as an (n, 1, h, w) tensor of class indices.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            (self.n, 1, self.h, self.w),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("label map dimensions are valid")
    }

    /// Reads a label map back from an (n, 1, h, w) tensor of integral values.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<LabelMap> {
        if t.c() != 1 {
            return Err(Error::shape(format!(
                "label tensor must have one channel, found {}",
                t.c()
            )));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::Numeric(format!("{v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::from_vec(t.n(), t.h(), t.w(), data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_tensor().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LabelMap> {
        LabelMap::from_tensor(&Tensor::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let m = LabelMap::from_vec(1, 2, 2, vec![0, 3, IGNORE_LABEL, 1]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
    }

    #[test]
    fn rejects_fractional_labels() {
        let t = Tensor::from_vec((1, 1, 1, 1), vec![0.5f32]).unwrap();
        assert!(LabelMap::from_tensor(&t).is_err());
    }
}
