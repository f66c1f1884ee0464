use nalgebra::DMatrix;
use prunebench::metrics::ConfusionMatrix;
use prunebench::nn::{build_enet_mini, conv_forward, ModelGraph};
use prunebench::prune::{
    collect_calibration, fine_tune, kept_channels, lasso_path, layer_input, prune_block, prune_model,
    reconstruct_weights, solve_selection, FineTuneConfig, PruneOptions, PruningProblem, PruningSpec,
    SelectionMethod, TrainScope,
};
use prunebench::rng::stream;
use prunebench::synth::{calibration_images, toy_segmentation};
use prunebench::{Error, LabelMap, Tensor, Tensor64};
use rand::Rng;

fn random_problem(seed: u64, samples: usize, c: usize, n_out: usize, k: usize, budget: usize) -> PruningProblem {
    let mut rng = stream(seed, 7);
    let x = Tensor64::from_fn((samples, c, k, k), |_, ch, _, _| rng.random_range(-1.0..1.0) * (1.0 + ch as f64 * 0.3))
        .unwrap();
    let w = Tensor64::from_fn((n_out, c, k, k), |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap();
    PruningProblem::from_patches(x, w, budget).unwrap()
}

/// Design matrix of the kept channels' patches, one row per sample.
fn design(p: &PruningProblem, kept: &[usize]) -> DMatrix<f64> {
    let kl = p.kernel_len();
    DMatrix::from_fn(p.samples(), kept.len() * kl, |r, j| {
        p.x.data()[(r * p.channels() + kept[j / kl]) * kl + j % kl]
    })
}

fn normal_equation_residual(p: &PruningProblem, kept: &[usize]) -> (f64, DMatrix<f64>) {
    let a = design(p, kept);
    let y = DMatrix::from_fn(p.samples(), p.outputs(), |r, o| p.y.data()[r * p.outputs() + o]);
    let coef = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &y));
    ((&a * &coef - y).norm_squared(), coef)
}

#[test]
fn reconstruction_matches_normal_equations() {
    let p = random_problem(1, 80, 4, 3, 3, 2);
    let rec = reconstruct_weights(&p, &[0, 2]).unwrap();
    let (want, coef) = normal_equation_residual(&p, &[0, 2]);
    assert!((rec.residual - want).abs() <= 1e-9 * want.max(1.0));
    assert_eq!(rec.weights.shape(), (3, 2, 3, 3).into());
    // weights are laid out (n, kept, kh, kw); coef is (kept·kh·kw) × n
    for o in 0..3 {
        for j in 0..18 {
            assert!((rec.weights.data()[o * 18 + j] - coef[(j, o)]).abs() < 1e-8);
        }
    }
    assert!((p.residual_with(&[0, 2], &rec.weights).unwrap() - rec.residual).abs() < 1e-9);
}

#[test]
fn full_budget_is_the_fast_path() {
    let p = random_problem(2, 60, 5, 2, 1, 5);
    let sel = solve_selection(&p).unwrap();
    assert_eq!(sel.method, SelectionMethod::Full);
    assert_eq!(sel.beta, vec![1; 5]);
    assert!(sel.residual < 1e-6 * p.y_norm_sq());
    let rec = reconstruct_weights(&p, &sel.kept).unwrap();
    assert!(rec.residual < 1e-6 * p.y_norm_sq());
}

#[test]
fn selection_is_near_the_best_subset_and_beats_the_norm_ranking() {
    for seed in 0..10 {
        let p = random_problem(10 + seed, 90, 6, 4, 3, 3);
        let sel = solve_selection(&p).unwrap();
        assert_eq!(sel.kept.len(), 3);
        assert_eq!(sel.beta.iter().filter(|&&b| b == 1).count(), 3);
        let best = (0u32..64)
            .filter(|m| m.count_ones() == 3)
            .map(|m| normal_equation_residual(&p, &(0..6).filter(|i| m >> i & 1 == 1).collect::<Vec<_>>()).0)
            .fold(f64::INFINITY, f64::min);
        assert!(sel.residual - best <= 0.05 * p.y_norm_sq(), "seed {seed}");
        // the norm-ranked heuristic: keep the channels with the largest ‖X_i W_iᵀ‖²
        let kl = p.kernel_len();
        let mut norms: Vec<(f64, usize)> = (0..6)
            .map(|i| {
                let mut s = 0.0;
                for r in 0..p.samples() {
                    for o in 0..p.outputs() {
                        let z: f64 = (0..kl)
                            .map(|t| p.x.data()[(r * 6 + i) * kl + t] * p.w.data()[(o * 6 + i) * kl + t])
                            .sum();
                        s += z * z;
                    }
                }
                (s, i)
            })
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut top: Vec<usize> = norms[..3].iter().map(|&(_, i)| i).collect();
        top.sort_unstable();
        assert!(sel.residual <= normal_equation_residual(&p, &top).0 * (1.0 + 1e-9));
    }
}

#[test]
fn lasso_penalty_grows_and_support_shrinks() {
    let p = random_problem(3, 120, 8, 3, 1, 2);
    let path = lasso_path(&p);
    assert_eq!(path.lambdas.len(), path.support.len());
    for w in path.lambdas.windows(2) {
        assert!((w[1] / w[0] - 1.3).abs() < 1e-9);
    }
    assert!(*path.support.last().unwrap() <= 2);
    assert_eq!(path.beta.iter().filter(|&&b| b != 0.0).count(), *path.support.last().unwrap());
    let mut rank = path.rank.clone();
    rank.sort_unstable();
    assert_eq!(rank, (0..8).collect::<Vec<_>>());
}

#[test]
fn problems_validate_their_inputs() {
    let p = random_problem(4, 40, 4, 2, 1, 2);
    let fake = p.y.map(|v| v + 1.0);
    assert!(matches!(
        PruningProblem::new(p.x.clone(), fake, p.w.clone(), 2),
        Err(Error::Calibration(_))
    ));
    assert!(PruningProblem::new(p.x.clone(), p.y.clone(), p.w.clone(), 2).is_ok());
    let few = Tensor64::new((39, 4, 1, 1), 1.0).unwrap();
    assert!(matches!(PruningProblem::from_patches(few, p.w.clone(), 2), Err(Error::Calibration(_))));
    assert!(p.clone().with_budget(0).is_err());
    assert!(p.clone().with_budget(5).is_err());
    assert!(matches!(p.residual_with(&[4], &p.w), Err(Error::Shape(_)) | Err(Error::Bounds { .. })));
}

#[test]
fn budget_rule() {
    assert_eq!(kept_channels(32, 1.25), (25, false));
    assert_eq!(kept_channels(16, 1.1), (14, false));
    assert_eq!(kept_channels(10, 1.25), (8, false));
    assert_eq!(kept_channels(4, 1.0), (4, false));
    assert_eq!(kept_channels(2, 3.0), (1, true));
}

fn small_model() -> ModelGraph<f32> {
    build_enet_mini::<f32>(4, 0.25, 11).unwrap()
}

#[test]
fn layer_input_and_calibration_follow_the_branch() {
    let g = small_model();
    let x = calibration_images::<f32>(1, 32, 32, 1).unwrap().remove(0);
    let idx = g.node_index("stage1.block2").unwrap();
    let b = g.block("stage1.block2").unwrap();
    let mut want = conv_forward(&g.forward_range(&x, 0, idx).unwrap(), &b.conv1).unwrap();
    want = want.map(|v| v.max(0.0));
    let got = layer_input(&g, "stage1.block2.conv2", &x).unwrap();
    assert_eq!(got, want);
    assert!(layer_input(&g, "stage1.block2.conv9", &x).is_err());
    assert!(layer_input(&g, "nope", &x).is_err());

    let p = collect_calibration(&g, "stage1.block2.conv2", &[x.clone()], 50, 3).unwrap();
    assert_eq!(p.samples(), 50);
    assert_eq!(p.channels(), b.conv1.n_out());
    let again = collect_calibration(&g, "stage1.block2.conv2", &[x.clone()], 50, 3).unwrap();
    assert_eq!(p.x, again.x);
    assert!(matches!(
        collect_calibration(&g, "stage1.block2.conv2", &[x], 1, 3),
        Err(Error::Calibration(_))
    ));
}

#[test]
fn pruning_a_block_shrinks_the_bottleneck_and_keeps_shapes() {
    let g = build_enet_mini::<f32>(4, 0.5, 12).unwrap();
    let calib = calibration_images::<f32>(2, 32, 32, 2).unwrap();
    let opts = PruneOptions { samples_per_image: 100, cost_input: (32, 32), ..PruneOptions::default() };
    let (pruned, report) = prune_block(&g, "stage2.block3", 1.25, &calib, &opts).unwrap();
    let b = pruned.block("stage2.block3").unwrap();
    // internal width 16: the factorized middle prunes three inputs
    assert_eq!(report.layers.len(), 3);
    assert!(report.layers.iter().all(|l| l.c == 16 && l.c_kept == 12));
    for f in &b.chain()[1..] {
        assert_eq!(f.c_in(), 12);
    }
    assert_eq!(b.in_channels(), 64);
    assert_eq!(b.out_channels(), 64);
    assert!(report.flops_after < report.flops_before);
    let x = &calib[0];
    assert_eq!(pruned.forward_scores(x).unwrap().shape(), g.forward_scores(x).unwrap().shape());
    assert!(prune_block(&g, "decoder.block2", 1.25, &calib, &opts).is_err());
    assert!(prune_block(&g, "stage2.block3", 0.5, &calib, &opts).is_err());
}

#[test]
fn factor_one_and_exclusions_leave_blocks_untouched() {
    let g = small_model();
    let calib = calibration_images::<f32>(2, 32, 32, 3).unwrap();
    let opts = PruneOptions { samples_per_image: 64, cost_input: (32, 32), ..PruneOptions::default() };
    let (same, report) = prune_model(&g, &PruningSpec::new(1.0, 1.0), &calib, &opts).unwrap();
    assert_eq!(same, g);
    assert!(report.blocks.is_empty());
    assert_eq!(report.flops_ratio(), 1.0);

    let mut spec = PruningSpec::new(1.0, 1.25);
    spec.excluded_blocks = vec!["stage2.block1".into()];
    let (pruned, report) = prune_model(&g, &spec, &calib, &opts).unwrap();
    assert_eq!(pruned.block("stage2.block1").unwrap(), g.block("stage2.block1").unwrap());
    assert_eq!(pruned.block("stage1.block1").unwrap(), g.block("stage1.block1").unwrap());
    assert_ne!(pruned.block("stage2.block2").unwrap(), g.block("stage2.block2").unwrap());
    assert!(report.skipped.iter().any(|(b, _)| b == "stage2.block1"));
    assert!(report.skipped.iter().any(|(b, _)| b == "decoder.block2"));

    spec.excluded_blocks = vec!["no.such.block".into()];
    assert!(prune_model(&g, &spec, &calib, &opts).is_err());
    assert!(prune_model(&g, &PruningSpec::new(0.9, 1.25), &calib, &opts).is_err());
}

#[test]
fn pruning_is_deterministic_and_reports_csv() {
    let g = small_model();
    let calib = calibration_images::<f32>(2, 32, 32, 4).unwrap();
    let opts = PruneOptions { samples_per_image: 64, seed: 5, cost_input: (32, 32), ..PruneOptions::default() };
    let spec = PruningSpec::default();
    let (a, ra) = prune_model(&g, &spec, &calib, &opts).unwrap();
    let (b, rb) = prune_model(&g, &spec, &calib, &opts).unwrap();
    assert_eq!(a, b);
    let csv = ra.to_csv();
    assert_eq!(csv, rb.to_csv());
    assert!(csv.starts_with("block,layer,c,c_kept,residual,flops_before,flops_after\n"));
    assert!(csv.trim_end().ends_with(&format!("total,,,,,{},{}", ra.before.flops, ra.after.flops)));
    assert!(ra.flops_ratio() < 1.0);
}

fn miou(g: &ModelGraph<f32>, data: &[(Tensor<f32>, LabelMap)]) -> f64 {
    let mut cm = ConfusionMatrix::new(g.classes());
    for (x, y) in data {
        cm.accumulate(y, &g.predict(x, 1).unwrap()).unwrap();
    }
    cm.mean_iou().unwrap()
}

#[test]
fn fine_tuning_recovers_pruned_accuracy() {
    let train = toy_segmentation::<f32>(32, 32, 32, 21).unwrap();
    let test = toy_segmentation::<f32>(32, 32, 32, 22).unwrap();
    let g = build_enet_mini::<f32>(4, 0.5, 8).unwrap();
    let cfg = FineTuneConfig { epochs: 12, lr: 0.05, scope: TrainScope::All, ..FineTuneConfig::default() };
    let base = fine_tune(&g, &train, &cfg).unwrap();
    assert!(base.improved && base.end_loss < base.start_loss);
    let base_miou = miou(&base.model, &test);

    let calib: Vec<Tensor<f32>> = train[..8].iter().map(|(x, _)| x.clone()).collect();
    let opts = PruneOptions { samples_per_image: 64, cost_input: (32, 32), ..PruneOptions::default() };
    let (pruned, _) = prune_model(&base.model, &PruningSpec::default(), &calib, &opts).unwrap();
    let recover = FineTuneConfig { epochs: 3, lr: 0.01, ..FineTuneConfig::default() };
    let tuned = fine_tune(&pruned, &train, &recover).unwrap();
    let tuned_miou = miou(&tuned.model, &test);
    assert!(tuned_miou >= base_miou - 0.03, "base {base_miou:.3}, pruned and tuned {tuned_miou:.3}");
}

#[test]
fn fine_tune_edge_cases() {
    let g = small_model();
    let data = toy_segmentation::<f32>(2, 16, 16, 1).unwrap();
    let idle = fine_tune(&g, &data, &FineTuneConfig { lr: 0.0, ..FineTuneConfig::default() }).unwrap();
    assert_eq!(idle.model, g);
    assert!(!idle.improved);
    let none = fine_tune(&g, &data, &FineTuneConfig { epochs: 0, ..FineTuneConfig::default() }).unwrap();
    assert_eq!(none.model, g);
    assert!(fine_tune(&g, &[], &FineTuneConfig::default()).is_err());
    assert!(fine_tune(&g, &data, &FineTuneConfig { batch: 0, ..FineTuneConfig::default() }).is_err());
    assert!(fine_tune(&g, &data, &FineTuneConfig { momentum: 1.0, ..FineTuneConfig::default() }).is_err());
    // a diverging step size hands back the input model
    let wild = fine_tune(&g, &data, &FineTuneConfig { lr: 1e6, epochs: 1, ..FineTuneConfig::default() }).unwrap();
    assert!(!wild.improved);
    assert_eq!(wild.model, g);
}

#[test]
fn default_scope_freezes_excluded_layers() {
    let g = small_model();
    let data = toy_segmentation::<f32>(4, 16, 16, 2).unwrap();
    let out = fine_tune(&g, &data, &FineTuneConfig { epochs: 2, lr: 0.05, ..FineTuneConfig::default() }).unwrap();
    assert!(out.improved);
    let (before, after) = (g.conv_filters(), out.model.conv_filters());
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let frozen = name == "initial" || name.starts_with("decoder.proj") || name.starts_with("decoder.block2");
        if frozen {
            assert_eq!(a, b, "{name} changed");
        }
    }
    assert_ne!(g.conv_filters().last(), out.model.conv_filters().last());
}
