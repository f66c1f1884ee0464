//! Seeded synthetic inputs: calibration images and a toy segmentation task.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Classes in the toy task.
pub const TOY_CLASSES: usize = 4;
/// Side length of one toy label cell in pixels.
pub const TOY_CELL: usize = 8;
const TOY_TEXTURE: f64 = 0.5;
const TOY_NOISE: f64 = 0.4;

/// `count` single images (1, 3, h, w) mixing smooth gradients, oriented
/// stripes, a few bright discs and Gaussian noise.
pub fn calibration_images<S: Scalar>(count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<Tensor<S>>> {
    let mut r = rng::stream(seed, rng::stream_id("calibration_images"));
    let noise = Normal::new(0.0, 0.25).expect("positive std");
    (0..count)
        .map(|_| {
            let mut pattern = [[0.0f64; 6]; 3];
            for row in &mut pattern {
                for v in row.iter_mut() {
                    *v = r.random_range(-1.0..1.0);
                }
            }
            let freq = r.random_range(0.05..0.6);
            let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
            let discs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        r.random_range(0.0..h as f64),
                        r.random_range(0.0..w as f64),
                        r.random_range(2.0..(h.min(w) as f64 / 3.0).max(3.0)),
                        r.random_range(-1.5..1.5),
                    )
                })
                .collect();
            let mut data = Vec::with_capacity(3 * h * w);
            for p in &pattern {
                for y in 0..h {
                    for x in 0..w {
                        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                        let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq;
                        let mut v = p[0] + p[1] * fy + p[2] * fx + p[3] * t.sin() + p[4] * (2.0 * t).cos();
                        for &(cy, cx, rad, amp) in &discs {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            if d2 < rad * rad {
                                v += amp * p[5].signum();
                            }
                        }
                        v += noise.sample(&mut r);
                        data.push(S::from_f64_lossy(v));
                    }
                }
            }
            Tensor::from_vec((1, 3, h, w), data)
        })
        .collect()
}

/// Labelled toy images (1, 3, h, w).
///
/// The label map is a grid of [`TOY_CELL`]-pixel cells, each holding a random
/// class. Classes differ only in texture: flat, vertical stripes, horizontal
/// stripes or a checkerboard, each at a random phase per cell. Every cell also
/// gets a random colour offset that carries no class information, and every
/// pixel gets Gaussian noise.
pub fn toy_segmentation<S: Scalar>(
    count: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<(Tensor<S>, LabelMap)>> {
    if h % TOY_CELL != 0 || w % TOY_CELL != 0 || h == 0 || w == 0 {
        return Err(Error::config(format!(
            "toy images must be positive multiples of {TOY_CELL}, got {h}x{w}"
        )));
    }
    let mut r = rng::stream(seed, rng::stream_id("toy_segmentation"));
    let noise = Normal::new(0.0, TOY_NOISE).expect("positive std");
    let (rows, cols) = (h / TOY_CELL, w / TOY_CELL);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let cells: Vec<(usize, usize, [f64; 3])> = (0..rows * cols)
            .map(|_| {
                let class = r.random_range(0..TOY_CLASSES);
                let phase = r.random_range(0..2);
                let tint = [
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                ];
                (class, phase, tint)
            })
            .collect();
        let mut labels = LabelMap::new(1, h, w, 0)?;
        let mut data = vec![0.0f64; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (class, phase, tint) = cells[(y / TOY_CELL) * cols + x / TOY_CELL];
                labels.set(0, y, x, class as u32);
                let bit = match class {
                    0 => None,
                    1 => Some(x + phase),
                    2 => Some(y + phase),
                    _ => Some(x + y + phase),
                };
                let texture = match bit {
                    None => 0.0,
                    Some(b) if b % 2 == 0 => TOY_TEXTURE,
                    Some(_) => -TOY_TEXTURE,
                };
                for (ch, t) in tint.iter().enumerate() {
                    data[(ch * h + y) * w + x] = t + texture + noise.sample(&mut r);
                }
            }
        }
        let image = Tensor::from_vec((1, 3, h, w), data.into_iter().map(S::from_f64_lossy).collect())?;
        out.push((image, labels));
    }
    Ok(out)
}
