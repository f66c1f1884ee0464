use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::nn::graph::{Layer, ModelGraph};
use crate::nn::train::{dataset_loss, loss_and_grads, ParamGrad};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which filters fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainScope {
    /// Branch and skip filters of prunable blocks, plus the classifier.
    #[default]
    PrunableAndClassifier,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Heavy-ball momentum coefficient in [0, 1); 0 gives plain SGD.
    pub momentum: f64,
    pub seed: u64,
    pub scope: TrainScope,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 5,
            lr: 0.05,
            batch: 4,
            momentum: 0.0,
            seed: 0,
            scope: TrainScope::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome<S> {
    pub model: ModelGraph<S>,
    pub start_loss: f64,
    pub end_loss: f64,
    /// False when training did not lower the loss; `model` is then the input.
    pub improved: bool,
}

fn trainable_mask<S: Scalar>(g: &ModelGraph<S>, scope: TrainScope) -> Vec<bool> {
    let names = g.conv_filters();
    if scope == TrainScope::All {
        return vec![true; names.len()];
    }
    let classifier = g
        .nodes()
        .iter()
        .rev()
        .find(|n| matches!(n.layer, Layer::Conv { .. }))
        .map(|n| n.name.clone());
    let prunable: Vec<String> = g
        .nodes()
        .iter()
        .filter(|n| matches!(&n.layer, Layer::Block(b) if !b.no_prune))
        .map(|n| format!("{}.", n.name))
        .collect();
    names
        .iter()
        .map(|(name, _)| Some(name) == classifier.as_ref() || prunable.iter().any(|p| name.starts_with(p)))
        .collect()
}

fn train<S: Scalar>(g: &ModelGraph<S>, data: &[(Tensor<S>, LabelMap)], cfg: &FineTuneConfig) -> Result<ModelGraph<S>> {
    let mask = trainable_mask(g, cfg.scope);
    let mut model = g.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::stream(cfg.seed, rng::stream_id("fine_tune"));
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; mask.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let mut sum: Vec<Option<ParamGrad<S>>> = vec![None; mask.len()];
            for &i in chunk {
                let (x, y) = &data[i];
                let (_, grads) = loss_and_grads(&model, x, y, &mask)?;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    *acc = Some(match acc.take() {
                        None => g,
                        Some(a) => ParamGrad {
                            weights: a.weights.add(&g.weights)?,
                            bias: a.bias.iter().zip(&g.bias).map(|(p, q)| *p + *q).collect(),
                        },
                    });
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            let filters = model.conv_filters_mut().into_iter().zip(&sum).zip(velocity.iter_mut());
            for (((_, f), g), v) in filters {
                let Some(g) = g else { continue };
                let (vw, vb) = v.get_or_insert_with(|| (vec![0.0; g.weights.len()], vec![0.0; g.bias.len()]));
                let params = f.weights.data_mut().iter_mut().chain(f.bias.iter_mut());
                let grads = g.weights.data().iter().chain(&g.bias);
                for ((p, d), vel) in params.zip(grads).zip(vw.iter_mut().chain(vb.iter_mut())) {
                    *vel = cfg.momentum * *vel + d.as_f64() * scale;
                    *p -= S::from_f64_lossy(cfg.lr * *vel);
                }
            }
        }
    }
    Ok(model)
}

/// Mini-batch SGD on per-pixel cross-entropy.
///
/// Each dataset item is one image with its labels. The sample order is
/// reshuffled every epoch from `seed`. If the final training loss is not below
/// the starting loss the input model is returned unchanged.
pub fn fine_tune<S: Scalar>(
    g: &ModelGraph<S>,
    data: &[(Tensor<S>, LabelMap)],
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome<S>> {
    if data.is_empty() {
        return Err(Error::config("fine-tuning needs a non-empty dataset"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::config(format!("momentum must lie in [0, 1), got {}", cfg.momentum)));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", cfg.lr)));
    }
    let start_loss = dataset_loss(g, data)?;
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok(FineTuneOutcome {
            model: g.clone(),
            start_loss,
            end_loss: start_loss,
            improved: false,
        });
    }
    let trained = match train(g, data, cfg) {
        Ok(m) => Some(m),
        Err(Error::Numeric(_)) => None,
        Err(e) => return Err(e),
    };
    let end = trained.and_then(|m| match dataset_loss(&m, data) {
        Ok(l) if l.is_finite() && l < start_loss => Some((m, l)),
        _ => None,
    });
    Ok(match end {
        Some((model, end_loss)) => FineTuneOutcome {
            model,
            start_loss,
            end_loss,
            improved: true,
        },
        None => FineTuneOutcome {
            model: g.clone(),
            start_loss,
            end_loss: start_loss,
            improved: false,
        },
    })
}
