//! LASSO channel selection, least-squares weight reconstruction, residual-block
//! surgery and fine-tuning.
//!
//! A convolution with weights `W` (n × c × k_h × k_w) applied to sampled input
//! patches `X` (N × c × k_h × k_w) yields responses `Y` (N × n). Pruning keeps at
//! most `c'` input channels: choose `β ∈ {0,1}^c` with `‖β‖₀ ≤ c'` and refit the
//! kept filters so that `‖Y − Σ β_i X_i W_iᵀ‖²_F` stays small.

mod calib;
mod finetune;
mod lasso;
mod lsq;
mod problem;
mod surgery;

pub use calib::{collect_calibration, layer_input, sample_patches};
pub use finetune::{fine_tune, FineTuneConfig, FineTuneOutcome, TrainScope};
pub use lasso::{lasso_path, solve_selection, LassoPath, Selection, SelectionMethod};
pub use lsq::{reconstruct_weights, Reconstruction};
pub use problem::PruningProblem;
pub use surgery::{
    kept_channels, prune_block, prune_model, BlockReport, LayerReport, PruneOptions, PruneReport, PruningSpec,
};
