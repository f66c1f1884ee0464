//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p prunebench-cli --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use prunebench::argmax::{argmax_parallel, argmax_serial, bench_argmax, ArgmaxImpl};
use prunebench::bev::{render_ground_labels, stitch_topview, FisheyeCamera, TopViewGrid};
use prunebench::metrics::ConfusionMatrix;
use prunebench::nn::{
    build_enet_mini, conv_forward, encode_model, fold_batchnorm, BatchNormParams, ConvFilter, Layer, ModelGraph,
};
use prunebench::prune::{
    fine_tune, prune_model, reconstruct_weights, solve_selection, FineTuneConfig, PruneOptions, PruneReport,
    PruningProblem, PruningSpec, TrainScope,
};
use prunebench::rng::stream;
use prunebench::synth::{calibration_images, toy_segmentation};
use prunebench::{LabelMap, Shape, Tensor, IGNORE_LABEL};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A pruned graph kept for the surgery-safety check.
struct PrunedCase {
    label: String,
    original: ModelGraph<f32>,
    pruned: ModelGraph<f32>,
    report: PruneReport,
    input: Shape,
}

// ---------------------------------------------------------------- 1

fn argmax_equivalence() -> Outcome {
    let mut rng = stream(11, 1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let shape = Shape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=32),
            rng.random_range(1..=64),
            rng.random_range(1..=96),
        );
        let len = shape.volume().unwrap();
        // coarse values force plenty of ties
        let coarse = rng.random_bool(0.5);
        let data: Vec<f32> = (0..len)
            .map(|_| {
                if coarse {
                    rng.random_range(0..4) as f32
                } else {
                    rng.random::<f32>()
                }
            })
            .collect();
        let t = Tensor::from_vec(shape, data).unwrap();
        let serial = argmax_serial(&t);
        // naive scan, first maximum wins
        let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
        let mut naive = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0;
                    for k in 1..c {
                        if t.at(b, k, y, x) > t.at(b, best, y, x) {
                            best = k;
                        }
                    }
                    naive.push(best as u32);
                }
            }
        }
        if serial.data() != naive.as_slice() {
            mismatches += 1;
        }
        for workers in [1, 2, 4, 8] {
            if argmax_parallel(&t, workers) != serial {
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches} mismatching outputs over 1000 tensors"));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cores < 4 {
        return Ok(format!(
            "1000 tensors x 4 worker counts bitwise equal; speed comparison not applicable on {cores} core(s)"
        ));
    }
    let shape = Shape::new(1, 20, 400, 640);
    let recs = bench_argmax(
        shape,
        &[ArgmaxImpl::Serial, ArgmaxImpl::Parallel { workers: cores }],
        9,
        0,
    )
    .map_err(|e| e.to_string())?;
    let (s, p) = (recs[0].seconds_per_pass, recs[1].seconds_per_pass);
    check(
        p < s,
        format!(
            "1000 tensors bitwise equal; median serial {:.3} ms, parallel ({cores} workers) {:.3} ms",
            s * 1e3,
            p * 1e3
        ),
    )
}

// ---------------------------------------------------------------- 2

fn flop_ratio(cases: &mut Vec<PrunedCase>) -> Outcome {
    let g = build_enet_mini::<f32>(20, 1.0, 0).map_err(|e| e.to_string())?;
    let calib = calibration_images::<f32>(4, 64, 64, 0).map_err(|e| e.to_string())?;
    let spec = PruningSpec::new(1.1, 1.25);
    let opts = PruneOptions {
        samples_per_image: 100,
        seed: 0,
        cost_input: (400, 640),
        ..PruneOptions::default()
    };
    let (pruned, report) = prune_model(&g, &spec, &calib, &opts).map_err(|e| e.to_string())?;
    let last = g.block_names().last().map(|s| s.to_string()).unwrap_or_default();
    let last_untouched = pruned.block(&last).ok() == g.block(&last).ok();
    let fr = report.flops_ratio();
    let pr = report.params_ratio();
    let detail = format!(
        "FLOPs {:.3}G -> {:.3}G (ratio {fr:.4}), params {} -> {} (ratio {pr:.4}), last block untouched: {last_untouched}",
        report.before.flops as f64 / 1e9,
        report.after.flops as f64 / 1e9,
        report.before.params,
        report.after.params
    );
    cases.push(PrunedCase {
        label: "width-1 graph".into(),
        original: g,
        pruned,
        report,
        input: Shape::new(1, 3, 400, 640),
    });
    check(
        (0.67..=0.77).contains(&fr) && (0.65..=0.75).contains(&pr) && last_untouched,
        detail,
    )
}

// ---------------------------------------------------------------- 3

/// Eight u32 header fields per conv record.
const CONV_RECORD_HEADER: usize = 8 * 4;

fn model_size() -> Outcome {
    let mut rng = stream(13, 3);
    for i in 0..20 {
        let classes = rng.random_range(2..=24);
        let width = [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)];
        let g = build_enet_mini::<f32>(classes, width, 100 + i).map_err(|e| e.to_string())?;
        let enc = encode_model(&g).map_err(|e| e.to_string())?;
        // independent parameter count straight from the filters
        let params: usize = g
            .conv_filters()
            .iter()
            .map(|(_, f)| f.weights.len() + f.bias.len())
            .sum();
        // expected file length from the documented layout
        let mut structure = 4 + 3 * 4;
        for node in g.nodes() {
            structure += 1 + 2 + node.name.len();
            structure += match &node.layer {
                Layer::Conv { .. } => 1 + CONV_RECORD_HEADER,
                Layer::Block(b) => {
                    let extra = matches!(b.skip, prunebench::nn::Skip::Projection(_)) as usize;
                    6 + (b.chain().len() + extra) * CONV_RECORD_HEADER
                }
                Layer::Upsample { .. } => 4,
                Layer::ArgMax => 0,
            };
        }
        if enc.weight_payload_bytes != 4 * params
            || params != g.param_count()
            || enc.bytes.len() != structure + 4 * params
        {
            return Err(format!(
                "graph {i}: payload {} bytes, file {} bytes, {params} parameters",
                enc.weight_payload_bytes,
                enc.bytes.len()
            ));
        }
    }
    Ok("20 random graphs: weight payload == 4 x parameters".into())
}

// ---------------------------------------------------------------- 4, 5

fn random_problem(rng: &mut impl Rng, c: usize, budget: usize) -> PruningProblem {
    let n_out = rng.random_range(2..=6);
    let k = [1, 3][rng.random_range(0..2)];
    let samples = rng.random_range(10 * c..=20 * c);
    // channels share a few latent factors and differ in scale
    let latents = rng.random_range(2..=c);
    let mix: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..latents).map(|_| gauss(rng)).collect())
        .collect();
    let scale: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut x = Vec::with_capacity(samples * c * k * k);
    for _ in 0..samples {
        let z: Vec<Vec<f64>> = (0..k * k)
            .map(|_| (0..latents).map(|_| gauss(rng)).collect())
            .collect();
        for ch in 0..c {
            for zp in &z {
                let v: f64 = mix[ch].iter().zip(zp).map(|(a, b)| a * b).sum::<f64>() + 0.3 * gauss(rng);
                x.push(scale[ch] * v);
            }
        }
    }
    let w: Vec<f64> = (0..n_out * c * k * k).map(|_| gauss(rng)).collect();
    PruningProblem::from_patches(
        Tensor::from_vec((samples, c, k, k), x).unwrap(),
        Tensor::from_vec((n_out, c, k, k), w).unwrap(),
        budget,
    )
    .unwrap()
}

/// Least-squares residual of predicting Y from the kept channels' patches.
fn subset_residual(p: &PruningProblem, kept: &[usize]) -> f64 {
    let (n, kl, outs) = (p.samples(), p.kernel_len(), p.outputs());
    let cols = kept.len() * kl;
    let a = DMatrix::from_fn(n, cols, |r, j| {
        let (ci, t) = (kept[j / kl], j % kl);
        p.x.data()[(r * p.channels() + ci) * kl + t]
    });
    let mut total = 0.0;
    for o in 0..outs {
        let y = DVector::from_fn(n, |r, _| p.y.data()[r * outs + o]);
        let coef = a.clone().svd(true, true).solve(&y, 1e-12).unwrap();
        total += (&a * coef - y).norm_squared();
    }
    total
}

fn subsets(c: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << c)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..c).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn lasso_oracle() -> Outcome {
    let mut rng = stream(17, 4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let c = [4, 6, 8][i % 3];
        let p = random_problem(&mut rng, c, c / 2);
        let sel = solve_selection(&p).map_err(|e| e.to_string())?;
        let rec = reconstruct_weights(&p, &sel.kept).map_err(|e| e.to_string())?;
        let best = subsets(c, c / 2)
            .iter()
            .map(|s| subset_residual(&p, s))
            .fold(f64::INFINITY, f64::min);
        let gap = (rec.residual - best) / p.y_norm_sq();
        if sel.kept.len() != c / 2 {
            return Err(format!("problem {i}: kept {} channels, budget {}", sel.kept.len(), c / 2));
        }
        worst = worst.max(gap);
    }
    check(
        worst <= 0.05,
        format!("50 problems, worst excess residual {:.3}% of |Y|^2 over best subset", 100.0 * worst),
    )
}

fn reconstruction_exact() -> Outcome {
    let mut rng = stream(19, 5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let c = rng.random_range(2..=8);
        let p = random_problem(&mut rng, c, c);
        let all: Vec<usize> = (0..c).collect();
        let rec = reconstruct_weights(&p, &all).map_err(|e| e.to_string())?;
        let rel = rec.residual / p.y_norm_sq();
        if !(rel < 1e-6) {
            return Err(format!("problem {i}: relative residual {rel:.3e}"));
        }
        worst = worst.max(rel);
    }
    Ok(format!("100 problems, worst relative residual {worst:.2e}"))
}

// ---------------------------------------------------------------- 6

fn bn_folding() -> Outcome {
    let mut rng = stream(23, 6);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (n_out, c_in) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let w: Vec<f32> = (0..n_out * c_in * k * k).map(|_| 0.5 * gauss(&mut rng) as f32).collect();
        let bias: Vec<f32> = (0..n_out).map(|_| gauss(&mut rng) as f32).collect();
        let f = ConvFilter::new(Tensor::from_vec((n_out, c_in, k, k), w).unwrap(), bias, stride, 1, (k / 2, k / 2))
            .unwrap();
        let mean: Vec<f32> = (0..n_out).map(|_| gauss(&mut rng) as f32).collect();
        let var: Vec<f32> = (0..n_out).map(|_| rng.random_range(0.2f32..3.0)).collect();
        let gamma: Vec<f32> = (0..n_out).map(|_| rng.random_range(0.5f32..1.5)).collect();
        let beta: Vec<f32> = (0..n_out).map(|_| gauss(&mut rng) as f32).collect();
        let bn = BatchNormParams::new(mean.clone(), var.clone(), gamma.clone(), beta.clone(), 1e-5).unwrap();
        let (h, wd) = (rng.random_range(4..=16), rng.random_range(4..=16));
        let x = Tensor::<f32>::from_fn((1, c_in, h, wd), |_, _, _, _| rng.random_range(-1.0f32..1.0)).unwrap();
        // two-path: convolution, then normalisation written out by hand
        let y = conv_forward(&x, &f).unwrap();
        let folded = conv_forward(&x, &fold_batchnorm(&f, &bn).unwrap()).unwrap();
        for o in 0..n_out {
            let s = gamma[o] as f64 / (var[o] as f64 + 1e-5).sqrt();
            for (a, b) in y.plane(0, o).iter().zip(folded.plane(0, o)) {
                let want = (*a as f64 - mean[o] as f64) * s + beta[o] as f64;
                worst = worst.max((want - *b as f64).abs());
            }
        }
        if worst >= 1e-5 {
            return Err(format!("pair {i}: max abs diff {worst:.3e}"));
        }
    }
    Ok(format!("100 conv+BN pairs, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------- 7

fn surgery_safety(cases: &[PrunedCase]) -> Outcome {
    if cases.is_empty() {
        return Err("no pruned graphs were produced".into());
    }
    let mut lines = Vec::new();
    for case in cases {
        let x = calibration_images::<f32>(1, case.input.h, case.input.w, 99)
            .map_err(|e| e.to_string())?
            .remove(0);
        let a = case.original.forward_scores(&x).map_err(|e| format!("{}: {e}", case.label))?;
        let b = case.pruned.forward_scores(&x).map_err(|e| format!("{}: {e}", case.label))?;
        if a.shape() != b.shape() {
            return Err(format!("{}: output {} became {}", case.label, a.shape(), b.shape()));
        }
        let mut worst: f64 = 0.0;
        for blk in &case.report.blocks {
            let bound = 10.0 * blk.residual_scale;
            if !(blk.output_rms_deviation <= bound) {
                return Err(format!(
                    "{} {}: rms deviation {:.3e} exceeds 10 x scale {:.3e}",
                    case.label, blk.block, blk.output_rms_deviation, blk.residual_scale
                ));
            }
            if blk.residual_scale > 0.0 {
                worst = worst.max(blk.output_rms_deviation / blk.residual_scale);
            }
        }
        lines.push(format!("{} ({} blocks, worst {worst:.2})", case.label, case.report.blocks.len()));
    }
    Ok(format!(
        "shapes preserved, rms block deviation / residual scale <= 10: {}",
        lines.join("; ")
    ))
}

// ---------------------------------------------------------------- 8

fn miou(g: &ModelGraph<f32>, data: &[(Tensor<f32>, LabelMap)]) -> f64 {
    let mut cm = ConfusionMatrix::new(g.classes());
    for (x, y) in data {
        cm.accumulate(y, &g.predict(x, 1).unwrap()).unwrap();
    }
    cm.mean_iou().unwrap()
}

fn toy_direction(cases: &mut Vec<PrunedCase>) -> Outcome {
    let train = toy_segmentation::<f32>(64, 32, 32, 1).map_err(|e| e.to_string())?;
    let test = toy_segmentation::<f32>(64, 32, 32, 2).map_err(|e| e.to_string())?;
    let calib: Vec<Tensor<f32>> = train[..16].iter().map(|(x, _)| x.clone()).collect();
    let opts = PruneOptions {
        samples_per_image: 64,
        seed: 0,
        cost_input: (32, 32),
        ..PruneOptions::default()
    };
    let recover = FineTuneConfig {
        epochs: 2,
        lr: 0.01,
        batch: 4,
        momentum: 0.0,
        seed: 9,
        scope: TrainScope::PrunableAndClassifier,
    };
    let factors = [(1.1, 1.25), (1.5, 1.25)];
    let mut drops = [0.0f64; 2];
    let mut per_base = Vec::new();
    for bs in 0..3u64 {
        let g = build_enet_mini::<f32>(4, 0.5, 7 + bs).map_err(|e| e.to_string())?;
        let cfg = FineTuneConfig {
            epochs: 30,
            lr: 0.05,
            batch: 4,
            momentum: 0.0,
            seed: bs,
            scope: TrainScope::All,
        };
        let base = fine_tune(&g, &train, &cfg).map_err(|e| e.to_string())?.model;
        let base_miou = miou(&base, &test);
        let mut row = vec![format!("base {base_miou:.3}")];
        for (i, &(shallow, deep)) in factors.iter().enumerate() {
            let spec = PruningSpec::new(shallow, deep);
            let (pruned, report) = prune_model(&base, &spec, &calib, &opts).map_err(|e| e.to_string())?;
            let tuned = fine_tune(&pruned, &train, &recover).map_err(|e| e.to_string())?.model;
            let m = miou(&tuned, &test);
            drops[i] += (base_miou - m) / 3.0;
            row.push(format!("{shallow}: {m:.3}"));
            if bs == 0 {
                cases.push(PrunedCase {
                    label: format!("toy ({shallow}, {deep})"),
                    original: base.clone(),
                    pruned,
                    report,
                    input: Shape::new(1, 3, 32, 32),
                });
            }
        }
        per_base.push(row.join(", "));
    }
    check(
        drops[1] > drops[0],
        format!(
            "mean mIoU drop (1.1, 1.25) {:.4} vs (1.5, 1.25) {:.4} [{}]",
            drops[0],
            drops[1],
            per_base.join(" | ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn metrics_oracle() -> Outcome {
    let mut rng = stream(29, 9);
    for i in 0..200 {
        let k = rng.random_range(2..=8);
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let truth: Vec<u32> = (0..h * w)
            .map(|_| {
                if rng.random_bool(0.05) {
                    IGNORE_LABEL
                } else {
                    rng.random_range(0..k as u32)
                }
            })
            .collect();
        let pred: Vec<u32> = truth
            .iter()
            .map(|&t| {
                if t != IGNORE_LABEL && rng.random_bool(0.6) {
                    t
                } else {
                    rng.random_range(0..k as u32)
                }
            })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(
            &LabelMap::from_vec(1, h, w, truth.clone()).unwrap(),
            &LabelMap::from_vec(1, h, w, pred.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let scored: Vec<(u32, u32)> = truth
            .iter()
            .zip(&pred)
            .filter(|(t, _)| **t != IGNORE_LABEL)
            .map(|(t, p)| (*t, *p))
            .collect();
        let mut ious = Vec::new();
        for c in 0..k as u32 {
            let tp = scored.iter().filter(|(t, p)| *t == c && *p == c).count();
            let fp = scored.iter().filter(|(t, p)| *t != c && *p == c).count();
            let fn_ = scored.iter().filter(|(t, p)| *t == c && *p != c).count();
            let union = tp + fp + fn_;
            let want = (union > 0).then(|| tp as f64 / union as f64);
            let got = cm.iou_per_class()[c as usize];
            match (want, got) {
                (None, None) => {}
                (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
                _ => return Err(format!("matrix {i} class {c}: {got:?} vs oracle {want:?}")),
            }
            ious.extend(want);
        }
        let correct = scored.iter().filter(|(t, p)| t == p).count();
        if scored.is_empty() {
            continue;
        }
        let acc = correct as f64 / scored.len() as f64;
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let (ga, mi) = (cm.global_accuracy().unwrap(), cm.mean_iou().unwrap());
        if (ga - acc).abs() > 1e-12 || (mi - mean).abs() > 1e-12 {
            return Err(format!("matrix {i}: accuracy {ga} vs {acc}, mIoU {mi} vs {mean}"));
        }
    }
    // imbalanced set: 900 background, 50 of each rare class
    let truth: Vec<u32> = (0..1000).map(|i| if i < 900 { 0 } else if i < 950 { 1 } else { 2 }).collect();
    let pred_a: Vec<u32> = truth
        .iter()
        .enumerate()
        .map(|(i, &t)| if i < 100 { 1 } else { t })
        .collect();
    let pred_b: Vec<u32> = truth.iter().map(|&t| if t == 1 { 0 } else { t }).collect();
    let score = |pred: &[u32]| {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(
            &LabelMap::from_vec(1, 1, 1000, truth.clone()).unwrap(),
            &LabelMap::from_vec(1, 1, 1000, pred.to_vec()).unwrap(),
        )
        .unwrap();
        (cm.global_accuracy().unwrap(), cm.mean_iou().unwrap())
    };
    let (acc_a, miou_a) = score(&pred_a);
    let (acc_b, miou_b) = score(&pred_b);
    check(
        acc_b > acc_a && miou_b < miou_a,
        format!(
            "200 matrices match to 1e-12; example: accuracy {acc_a:.3} -> {acc_b:.3}, mIoU {miou_a:.3} -> {miou_b:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn checker(x: f64, y: f64) -> u32 {
    (x.floor().rem_euclid(2.0) as u32) * 2 + y.floor().rem_euclid(2.0) as u32
}

fn bev_round_trip() -> Outcome {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mounts = [
        ("front", [2.0, 0.0, 1.0], 0.0),
        ("left", [0.0, 1.0, 1.0], FRAC_PI_2),
        ("rear", [-2.0, 0.0, 1.0], PI),
        ("right", [0.0, -1.0, 1.0], -FRAC_PI_2),
    ];
    let cams: Vec<FisheyeCamera> = mounts
        .iter()
        .map(|(name, pos, yaw)| FisheyeCamera::mounted(*name, 400.0, 1280, 800, *pos, *yaw, 0.6).unwrap())
        .collect();
    let theta_max = 95f64.to_radians();
    let labels: Vec<LabelMap> = cams.iter().map(|c| render_ground_labels(c, checker, 9)).collect();
    let grid = TopViewGrid::parse("12x12m@0.1").map_err(|e| e.to_string())?;
    let top = stitch_topview(&cams, &labels, &grid, theta_max, 4).map_err(|e| e.to_string())?;
    let (mut seen, mut correct) = (0usize, 0usize);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let v = top.at(0, r, c);
            if v == IGNORE_LABEL {
                continue;
            }
            seen += 1;
            let (x, y) = grid.cell_center(r, c);
            correct += (v == checker(x, y)) as usize;
        }
    }
    let frac = correct as f64 / seen.max(1) as f64;

    let mut rng = stream(31, 10);
    let mut worst: f64 = 0.0;
    let mut tried = 0;
    while tried < 50 {
        let (x, y) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
        let cam = &cams[rng.random_range(0..4)];
        let Some(p) = cam.project_ground_to_pixel(x, y, theta_max) else {
            continue;
        };
        let Some((bx, by)) = cam.pixel_to_ground(p.u, p.v) else {
            return Err(format!("{}: pixel ({:.2}, {:.2}) misses the ground", cam.name, p.u, p.v));
        };
        worst = worst.max((bx - x).hypot(by - y));
        tried += 1;
    }
    check(
        frac >= 0.99 && worst < 1e-6 && seen > grid.rows * grid.cols / 2,
        format!(
            "{correct}/{seen} visible cells correct ({:.2}%), round-trip error {worst:.2e} m over 50 points",
            100.0 * frac
        ),
    )
}

// ---------------------------------------------------------------- 11

fn cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_prunebench"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "prunebench {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let model = path("base.pbm");
    cli(&["build", "--classes", "8", "--width", "0.5", "--seed", "3", "--out", &model])?;
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let (out, report) = (path(&format!("{tag}.pbm")), path(&format!("{tag}.csv")));
        let stdout = cli(&[
            "prune", "--model", &model, "--out", &out, "--report", &report, "--seed", "5", "--calib-count", "3",
            "--calib-size", "64x64", "--samples", "64",
        ])?;
        let m = std::fs::read(&out).map_err(|e| e.to_string())?;
        let r = std::fs::read(&report).map_err(|e| e.to_string())?;
        // the first line carries a hash of the arguments, which name different files
        let body: Vec<u8> = stdout.splitn(2, |&c| c == b'\n').nth(1).unwrap_or_default().to_vec();
        runs.push((m, r, body));
    }
    let base_len = std::fs::metadata(&model).map_err(|e| e.to_string())?.len() as usize;
    let (a, b) = (&runs[0], &runs[1]);
    check(
        a.0 == b.0 && a.1 == b.1 && a.2 == b.2 && a.0.len() < base_len,
        format!(
            "two seeded prune runs: model {} bytes (from {base_len}), report {} bytes, model/report/table identical: {}/{}/{}",
            a.0.len(),
            a.1.len(),
            a.0 == b.0,
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

// ----------------------------------------------------------------

fn run(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t0 = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    (out, t0.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let names = [
        "argmax equivalence",
        "FLOP/parameter ratio",
        "model-size identity",
        "LASSO oracle equivalence",
        "reconstruction exactness",
        "BN-folding equivalence",
        "surgery safety",
        "toy end-to-end direction",
        "metrics oracle",
        "BEV round trip",
        "determinism",
    ];
    let mut cases = Vec::new();
    let mut results: Vec<Option<(Outcome, f64)>> = (0..11).map(|_| None).collect();
    // surgery safety inspects the graphs pruned by criteria 2 and 8, so it runs after them
    for id in [1, 2, 3, 4, 5, 6, 8, 7, 9, 10, 11] {
        eprintln!("running criterion {id}: {}", names[id - 1]);
        let r = match id {
            1 => run(argmax_equivalence),
            2 => run(|| flop_ratio(&mut cases)),
            3 => run(model_size),
            4 => run(lasso_oracle),
            5 => run(reconstruction_exact),
            6 => run(bn_folding),
            7 => run(|| surgery_safety(&cases)),
            8 => run(|| toy_direction(&mut cases)),
            9 => run(metrics_oracle),
            10 => run(bev_round_trip),
            _ => run(determinism),
        };
        results[id - 1] = Some(r);
    }
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        let (outcome, secs) = r.expect("every criterion ran");
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {} ({secs:.1}s): {detail}", i + 1, names[i]);
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
