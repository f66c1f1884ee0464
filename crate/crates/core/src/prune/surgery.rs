use crate::error::{Error, Result};
use crate::nn::block::{block_forward, relu_in_place, ResidualBlock, StageTag};
use crate::nn::conv::conv_forward;
use crate::nn::cost::{count_cost, CostOptions, CostReport};
use crate::nn::graph::{Layer, ModelGraph};
use crate::prune::calib::{concat_batches, sample_patches};
use crate::prune::lasso::{solve_selection, SelectionMethod};
use crate::prune::problem::PruningProblem;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel factors per stage and blocks to leave alone.
///
/// Blocks flagged `no_prune` in the graph are always skipped, listed or not.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningSpec {
    pub shallow_factor: f64,
    pub deep_factor: f64,
    pub excluded_blocks: Vec<String>,
}

impl Default for PruningSpec {
    fn default() -> Self {
        PruningSpec {
            shallow_factor: 1.1,
            deep_factor: 1.25,
            excluded_blocks: Vec::new(),
        }
    }
}

impl PruningSpec {
    pub fn new(shallow_factor: f64, deep_factor: f64) -> Self {
        PruningSpec {
            shallow_factor,
            deep_factor,
            excluded_blocks: Vec::new(),
        }
    }

    pub fn factor_for(&self, stage: StageTag) -> f64 {
        match stage {
            StageTag::Shallow => self.shallow_factor,
            StageTag::Deep => self.deep_factor,
        }
    }

    pub fn validate<S: Scalar>(&self, g: &ModelGraph<S>) -> Result<()> {
        for (name, f) in [("shallow", self.shallow_factor), ("deep", self.deep_factor)] {
            check_factor(name, f)?;
        }
        for b in &self.excluded_blocks {
            g.block(b)?;
        }
        Ok(())
    }
}

fn check_factor(name: &str, f: f64) -> Result<()> {
    if !(f.is_finite() && f >= 1.0) {
        return Err(Error::config(format!("{name} factor must be a finite value >= 1, got {f}")));
    }
    Ok(())
}

/// Knobs shared by [`prune_block`] and [`prune_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneOptions {
    /// Patches drawn per calibration image and layer.
    pub samples_per_image: usize,
    pub seed: u64,
    /// Input size (rows, cols) at which FLOPs are reported.
    pub cost_input: (usize, usize),
    pub cost: CostOptions,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            samples_per_image: 128,
            seed: 0,
            cost_input: (400, 640),
            cost: CostOptions::default(),
        }
    }
}

/// `c' = max(1, floor(c / factor))`, and whether the clamp to 1 applied.
pub fn kept_channels(c: usize, factor: f64) -> (usize, bool) {
    // the epsilon keeps exact quotients such as 11 / 1.1 from rounding down
    let raw = (c as f64 / factor + 1e-9).floor() as usize;
    (raw.max(1).min(c), raw == 0)
}

/// One pruned convolution input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: String,
    pub c: usize,
    pub c_kept: usize,
    pub samples: usize,
    pub outputs: usize,
    /// Squared Frobenius reconstruction error over the calibration sample.
    pub residual: f64,
    /// `residual / ‖Y‖²_F`.
    pub relative_residual: f64,
    pub method: SelectionMethod,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub block: String,
    pub stage: StageTag,
    pub factor: f64,
    pub layers: Vec<LayerReport>,
    /// `sqrt(Σ residual / Σ N·n)` over the block's pruned layers: RMS
    /// reconstruction error per response element.
    pub residual_scale: f64,
    /// RMS difference between pruned and original block outputs on the
    /// calibration inputs.
    pub output_rms_deviation: f64,
    pub output_max_deviation: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl BlockReport {
    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.c_kept).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub blocks: Vec<BlockReport>,
    /// Blocks left untouched, with the reason.
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub before: CostReport,
    pub after: CostReport,
}

const BUDGET_RULE: &str = "kept channels c' = max(1, floor(c / factor))";

impl PruneReport {
    pub fn flops_ratio(&self) -> f64 {
        self.after.flops as f64 / self.before.flops as f64
    }

    pub fn params_ratio(&self) -> f64 {
        self.after.params as f64 / self.before.params as f64
    }

    /// Columns: block, layer, c, c_kept, residual, flops_before, flops_after.
    /// FLOP columns hold the enclosing block's cost.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,layer,c,c_kept,residual,flops_before,flops_after\n");
        for b in &self.blocks {
            for l in &b.layers {
                s.push_str(&format!(
                    "{},{},{},{},{:.9e},{},{}\n",
                    b.block, l.layer, l.c, l.c_kept, l.residual, b.flops_before, b.flops_after
                ));
            }
        }
        s.push_str(&format!(
            "total,,,,,{},{}\n",
            self.before.flops, self.after.flops
        ));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{BUDGET_RULE}\n");
        s.push_str(&format!(
            "{:<18} {:<8} {:>5} {:>6} {:>12} {:>12} {:>14} {:>14}\n",
            "block", "layer", "c", "kept", "residual", "rel", "flops_before", "flops_after"
        ));
        for b in &self.blocks {
            for l in &b.layers {
                s.push_str(&format!(
                    "{:<18} {:<8} {:>5} {:>6} {:>12.4e} {:>12.4e} {:>14} {:>14}\n",
                    b.block, l.layer, l.c, l.c_kept, l.residual, l.relative_residual, b.flops_before, b.flops_after
                ));
            }
        }
        for (name, why) in &self.skipped {
            s.push_str(&format!("skipped {name}: {why}\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!(
            "flops {} -> {} (ratio {:.4})\nparams {} -> {} (ratio {:.4})\n",
            self.before.flops,
            self.after.flops,
            self.flops_ratio(),
            self.before.params,
            self.after.params,
            self.params_ratio()
        ));
        s
    }
}

/// Input of branch conv `j` for one block input.
fn branch_input<S: Scalar>(b: &ResidualBlock<S>, x: &Tensor<S>, j: usize) -> Result<Tensor<S>> {
    let mut x = x.clone();
    for f in &b.chain()[..j] {
        x = conv_forward(&x, f)?;
        if b.inner_relu {
            relu_in_place(&mut x);
        }
    }
    Ok(x)
}

struct BlockOutcome<S> {
    block: ResidualBlock<S>,
    layers: Vec<LayerReport>,
    residual_scale: f64,
    rms: f64,
    max: f64,
}

/// Prunes the inputs of every branch conv after the first, front to back,
/// recollecting each layer's calibration from the partially pruned block.
fn prune_residual_block<S: Scalar>(
    name: &str,
    b: &ResidualBlock<S>,
    inputs: &[Tensor<S>],
    factor: f64,
    opts: &PruneOptions,
    warnings: &mut Vec<String>,
) -> Result<BlockOutcome<S>> {
    let mut nb = b.clone();
    let names = b.chain_names();
    let mut layers = Vec::new();
    for (j, conv_name) in names.iter().enumerate().skip(1) {
        let path = format!("{name}.{conv_name}");
        let c = nb.chain()[j].c_in();
        let (keep, clamped) = kept_channels(c, factor);
        if clamped {
            warnings.push(format!("{path}: factor {factor} leaves no channels of {c}; keeping 1"));
        }
        if keep >= c {
            continue;
        }
        let images: usize = inputs.iter().map(|t| t.n()).sum();
        let total = images * opts.samples_per_image;
        if total < 10 * c {
            return Err(Error::Calibration(format!(
                "{path}: {total} samples for {c} channels; at least {} required",
                10 * c
            )));
        }
        let mut r = rng::stream(opts.seed, rng::stream_id(&path));
        let mut parts = Vec::with_capacity(inputs.len());
        for x in inputs {
            let a = branch_input(&nb, x, j)?;
            parts.push(sample_patches(&a, nb.chain()[j], opts.samples_per_image, &mut r)?);
        }
        let problem = PruningProblem::from_patches(concat_batches(parts)?, nb.chain()[j].weights.cast(), keep)?;
        let sel = solve_selection(&problem)?;
        let stored: Tensor<S> = sel.weights.cast();
        // residual of the weights as installed, after rounding to S
        let residual = problem.residual_with(&sel.kept, &stored.cast())?;
        {
            let mut chain = nb.chain_mut();
            let prev = chain[j - 1].select_outputs(&sel.kept)?;
            *chain[j - 1] = prev;
            chain[j].weights = stored;
        }
        let y_norm = problem.y_norm_sq();
        layers.push(LayerReport {
            layer: conv_name.to_string(),
            c,
            c_kept: sel.kept.len(),
            samples: problem.samples(),
            outputs: problem.outputs(),
            residual,
            relative_residual: if y_norm > 0.0 { residual / y_norm } else { 0.0 },
            method: sel.method,
            clamped,
        });
    }
    nb.validate()?;

    let res_sum: f64 = layers.iter().map(|l| l.residual).sum();
    let elems: usize = layers.iter().map(|l| l.samples * l.outputs).sum();
    let residual_scale = if elems > 0 { (res_sum / elems as f64).sqrt() } else { 0.0 };
    let (mut sq, mut count, mut max) = (0.0, 0usize, 0.0f64);
    if !layers.is_empty() {
        let (b64, nb64) = (b.cast::<f64>(), nb.cast::<f64>());
        for x in inputs {
            let x: Tensor<f64> = x.cast();
            let before = block_forward(&x, &b64)?;
            let after = block_forward(&x, &nb64)?;
            for (p, q) in before.data().iter().zip(after.data()) {
                let d = (p.as_f64() - q.as_f64()).abs();
                sq += d * d;
                max = max.max(d);
            }
            count += before.len();
        }
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { 0.0 };
    Ok(BlockOutcome {
        block: nb,
        layers,
        residual_scale,
        rms,
        max,
    })
}

fn block_flops(report: &CostReport, name: &str) -> u64 {
    report
        .layers
        .iter()
        .find(|l| l.layer == name)
        .map(|l| l.flops)
        .unwrap_or(0)
}

/// Prunes one residual block with the given channel factor.
pub fn prune_block<S: Scalar>(
    g: &ModelGraph<S>,
    block: &str,
    factor: f64,
    calib: &[Tensor<S>],
    opts: &PruneOptions,
) -> Result<(ModelGraph<S>, BlockReport)> {
    check_factor("block", factor)?;
    let idx = g.node_index(block)?;
    let b = g.block(block)?;
    if b.no_prune {
        return Err(Error::config(format!("{block} is marked no_prune")));
    }
    let inputs = calib
        .iter()
        .map(|x| g.forward_range(x, 0, idx))
        .collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let out = prune_residual_block(block, b, &inputs, factor, opts, &mut warnings)?;
    let pruned = g.with_block(block, out.block)?;
    let (h, w) = opts.cost_input;
    let before = count_cost(g, h, w, opts.cost)?;
    let after = count_cost(&pruned, h, w, opts.cost)?;
    let report = BlockReport {
        block: block.to_string(),
        stage: b.stage,
        factor,
        layers: out.layers,
        residual_scale: out.residual_scale,
        output_rms_deviation: out.rms,
        output_max_deviation: out.max,
        flops_before: block_flops(&before, block),
        flops_after: block_flops(&after, block),
    };
    Ok((pruned, report))
}

/// Prunes every eligible block bottom-up.
///
/// Calibration activations are propagated through the already-pruned prefix
/// of the model, so each block is fitted to the inputs it will actually see.
pub fn prune_model<S: Scalar>(
    g: &ModelGraph<S>,
    spec: &PruningSpec,
    calib: &[Tensor<S>],
    opts: &PruneOptions,
) -> Result<(ModelGraph<S>, PruneReport)> {
    spec.validate(g)?;
    if calib.is_empty() {
        return Err(Error::Calibration("no calibration images".into()));
    }
    let (h, w) = opts.cost_input;
    let before = count_cost(g, h, w, opts.cost)?;
    let mut out = g.clone();
    let mut acts: Vec<Tensor<S>> = calib.to_vec();
    let mut blocks = Vec::new();
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    let head = g.nodes().len() - 1;
    for idx in 0..head {
        let name = g.nodes()[idx].name.clone();
        if let Layer::Block(b) = &g.nodes()[idx].layer {
            let factor = spec.factor_for(b.stage);
            if b.no_prune {
                skipped.push((name.clone(), "marked no_prune".into()));
            } else if spec.excluded_blocks.contains(&name) {
                skipped.push((name.clone(), "excluded".into()));
            } else if factor > 1.0 {
                let res = prune_residual_block(&name, b, &acts, factor, opts, &mut warnings)?;
                out = out.with_block(&name, res.block)?;
                blocks.push(BlockReport {
                    block: name.clone(),
                    stage: b.stage,
                    factor,
                    layers: res.layers,
                    residual_scale: res.residual_scale,
                    output_rms_deviation: res.rms,
                    output_max_deviation: res.max,
                    flops_before: 0,
                    flops_after: 0,
                });
            }
        }
        let layer = &out.nodes()[idx].layer;
        acts = acts
            .iter()
            .map(|x| layer.forward(x))
            .collect::<Result<Vec<_>>>()?;
    }
    let after = count_cost(&out, h, w, opts.cost)?;
    for b in &mut blocks {
        b.flops_before = block_flops(&before, &b.block);
        b.flops_after = block_flops(&after, &b.block);
    }
    Ok((
        out,
        PruneReport {
            blocks,
            skipped,
            warnings,
            before,
            after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_rule() {
        assert_eq!(kept_channels(128, 1.25), (102, false));
        assert_eq!(kept_channels(32, 1.25), (25, false));
        assert_eq!(kept_channels(16, 1.1), (14, false));
        assert_eq!(kept_channels(11, 1.1), (10, false));
        assert_eq!(kept_channels(10, 1.0), (10, false));
        assert_eq!(kept_channels(1, 4.0), (1, true));
    }
}
