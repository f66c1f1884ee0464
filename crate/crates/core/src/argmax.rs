//! Per-pixel argmax over the channel axis, serial and data-parallel, plus a timing harness.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Index of the maximum along the channel stride; ties go to the lowest index.
#[inline]
fn pixel_argmax<S: Scalar>(data: &[S], base: usize, plane: usize, c: usize) -> u32 {
    let mut best = 0usize;
    let mut best_v = data[base];
    for i in 1..c {
        let v = data[base + i * plane];
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Reference implementation: one pixel at a time.
pub fn argmax_serial<S: Scalar>(scores: &Tensor<S>) -> LabelMap {
    let Shape { n, c, h, w } = scores.shape();
    let plane = h * w;
    let data = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            out.push(pixel_argmax(data, b * c * plane + p, plane, c));
        }
    }
    LabelMap::from_vec(n, h, w, out).expect("shape taken from a valid tensor")
}

/// Splits the `n·h·w` pixels into `worker_count` balanced contiguous ranges, one thread each.
///
/// Output ranges are disjoint so workers never contend; every score is read once.
pub fn argmax_parallel<S: Scalar>(scores: &Tensor<S>, worker_count: usize) -> LabelMap {
    let Shape { n, c, h, w } = scores.shape();
    let plane = h * w;
    let total = n * plane;
    let workers = worker_count.max(1);
    let data = scores.data();
    let mut out = vec![0u32; total];
    std::thread::scope(|s| {
        let mut rest: &mut [u32] = &mut out;
        let mut start = 0;
        for k in 0..workers {
            let end = (k + 1) * total / workers;
            let (dst, tail) = rest.split_at_mut(end - start);
            rest = tail;
            if !dst.is_empty() {
                let first = start;
                s.spawn(move || {
                    for (j, slot) in dst.iter_mut().enumerate() {
                        let px = first + j;
                        let (b, p) = (px / plane, px % plane);
                        *slot = pixel_argmax(data, b * c * plane + p, plane, c);
                    }
                });
            }
            start = end;
        }
    });
    LabelMap::from_vec(n, h, w, out).expect("shape taken from a valid tensor")
}

/// Which argmax kernel a benchmark row measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgmaxImpl {
    Serial,
    Parallel { workers: usize },
}

impl ArgmaxImpl {
    /// Parses `serial` or `parallel`; parallel uses `workers` threads.
    pub fn parse(name: &str, workers: usize) -> Result<Self> {
        match name {
            "serial" => Ok(ArgmaxImpl::Serial),
            "parallel" => Ok(ArgmaxImpl::Parallel {
                workers: workers.max(1),
            }),
            other => Err(Error::config(format!(
                "unknown argmax implementation {other:?} (expected serial or parallel)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArgmaxImpl::Serial => "serial",
            ArgmaxImpl::Parallel { .. } => "parallel",
        }
    }

    pub fn workers(&self) -> usize {
        match self {
            ArgmaxImpl::Serial => 1,
            ArgmaxImpl::Parallel { workers } => *workers,
        }
    }

    pub fn run<S: Scalar>(&self, scores: &Tensor<S>) -> LabelMap {
        match self {
            ArgmaxImpl::Serial => argmax_serial(scores),
            ArgmaxImpl::Parallel { workers } => argmax_parallel(scores, *workers),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub implementation: String,
    pub workers: usize,
    pub shape: Shape,
    pub repetitions: usize,
    /// Median wall time of one pass, in seconds.
    pub seconds_per_pass: f64,
    pub fps: f64,
}

/// Times each implementation on one random tensor of `shape`.
///
/// The first repetition is a warm-up and is discarded; the median of the rest is
/// reported. Every implementation's output is checked against the serial result.
pub fn bench_argmax(shape: Shape, implementations: &[ArgmaxImpl], repetitions: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    use rand::Rng as _;
    if repetitions < 3 {
        return Err(Error::config(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::stream_id("bench_argmax"));
    let len = shape.volume()?;
    let scores = Tensor::<f32>::from_vec(shape, (0..len).map(|_| rng.random::<f32>()).collect())?;
    let reference = argmax_serial(&scores);
    let mut records = Vec::with_capacity(implementations.len());
    for imp in implementations {
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t0 = Instant::now();
            let labels = imp.run(&scores);
            times.push(t0.elapsed().as_secs_f64());
            if labels != reference {
                return Err(Error::Numeric(format!(
                    "{} argmax disagrees with the serial reference",
                    imp.name()
                )));
            }
        }
        let mut timed = times.split_off(1);
        timed.sort_by(f64::total_cmp);
        let median = timed[timed.len() / 2].max(1e-9);
        records.push(BenchRecord {
            implementation: imp.name().to_string(),
            workers: imp.workers(),
            shape,
            repetitions,
            seconds_per_pass: median,
            fps: 1.0 / median,
        });
    }
    Ok(records)
}

pub fn bench_table(records: &[BenchRecord]) -> String {
    let mut s = format!(
        "{:<10}  {:>7}  {:>18}  {:>12}  {:>12}\n",
        "argmax", "workers", "shape", "median ms", "fps"
    );
    for r in records {
        s.push_str(&format!(
            "{:<10}  {:>7}  {:>18}  {:>12.4}  {:>12.2}\n",
            r.implementation,
            r.workers,
            format!("{}x{}x{}x{}", r.shape.n, r.shape.c, r.shape.h, r.shape.w),
            r.seconds_per_pass * 1e3,
            r.fps
        ));
    }
    s
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("implementation,workers,n,c,h,w,repetitions,median_seconds,fps\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.9},{:.3}\n",
            r.implementation, r.workers, r.shape.n, r.shape.c, r.shape.h, r.shape.w, r.repetitions, r.seconds_per_pass, r.fps
        ));
    }
    s
}
