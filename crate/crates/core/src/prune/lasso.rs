use std::cmp::Ordering;

use crate::error::Result;
use crate::prune::lsq::reconstruct_weights;
use crate::prune::problem::PruningProblem;
use crate::tensor::Tensor;

const LAMBDA_START: f64 = 1e-4;
const LAMBDA_GROWTH: f64 = 1.3;
const MAX_SWEEPS: usize = 2000;

/// How the kept channel set was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    /// Budget covers every channel; the original filter is kept as is.
    Full,
    /// LASSO path, topped up in drop order when it overshoots.
    Lasso,
    /// Channels ranked by contribution norm, used when it beat the LASSO set.
    Heuristic,
}

/// Outcome of channel selection plus reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// One entry per input channel, 1 if kept.
    pub beta: Vec<u8>,
    /// Kept channel indices, ascending.
    pub kept: Vec<usize>,
    /// Squared Frobenius reconstruction error of the refitted filters.
    pub residual: f64,
    /// Refitted filters, (n, |kept|, k_h, k_w).
    pub weights: Tensor<f64>,
    /// Penalty at which the LASSO support first fit the budget (0 for `Full`).
    pub lambda: f64,
    pub method: SelectionMethod,
}

impl Selection {
    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }
}

/// The sequence of penalties tried and the support size at each.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub support: Vec<usize>,
    /// Relaxed coefficients at the last penalty.
    pub beta: Vec<f64>,
    /// Drop order: channels ranked from last-surviving to first-dropped.
    pub rank: Vec<usize>,
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Coordinate descent on `½βᵀGβ − bᵀβ + λ‖β‖₁`, warm-started from `beta`.
fn coordinate_descent(gram: &[f64], b: &[f64], lambda: f64, beta: &mut [f64]) {
    let c = b.len();
    let scale = (0..c).map(|i| gram[i * c + i]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for i in 0..c {
            let gii = gram[i * c + i];
            if gii <= 0.0 {
                beta[i] = 0.0;
                continue;
            }
            let row = &gram[i * c..(i + 1) * c];
            let dot: f64 = row.iter().zip(beta.iter()).map(|(g, x)| g * x).sum();
            let partial = b[i] - (dot - gii * beta[i]);
            let next = soft(partial, lambda) / gii;
            delta = delta.max((next - beta[i]).abs() * gii.sqrt());
            beta[i] = next;
        }
        if delta <= 1e-12 * scale.sqrt() {
            break;
        }
    }
}

/// Runs the penalty schedule until the support fits the problem's budget.
///
/// The penalty starts at `1e-4 · ‖b‖∞` with `b_i = ⟨Z_i, Y⟩`, `Z_i = X_i W_iᵀ`,
/// and grows by 1.3 per step.
pub fn lasso_path(p: &PruningProblem) -> LassoPath {
    let z = p.contributions();
    let y = p.y.data();
    let c = z.len();
    let mut gram = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..=i {
            let v: f64 = z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum();
            gram[i * c + j] = v;
            gram[j * c + i] = v;
        }
    }
    let b: Vec<f64> = z.iter().map(|zi| zi.iter().zip(y).map(|(a, b)| a * b).sum()).collect();
    let b_max = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut beta = vec![0.0; c];
    let mut lambdas = Vec::new();
    let mut support = Vec::new();
    // last step each channel was nonzero, and its magnitude there
    let mut alive: Vec<Option<(usize, f64)>> = vec![None; c];
    let mut lambda = LAMBDA_START * b_max;
    loop {
        coordinate_descent(&gram, &b, lambda, &mut beta);
        let step = lambdas.len();
        let nnz = beta.iter().filter(|v| **v != 0.0).count();
        for (a, v) in alive.iter_mut().zip(&beta) {
            if *v != 0.0 {
                *a = Some((step, v.abs()));
            }
        }
        lambdas.push(lambda);
        support.push(nnz);
        if nnz <= p.budget || b_max == 0.0 {
            break;
        }
        lambda *= LAMBDA_GROWTH;
    }

    let mut rank: Vec<usize> = (0..c).collect();
    rank.sort_by(|&i, &j| {
        let key = |k: usize| alive[k];
        match (key(i), key(j)) {
            (Some((si, mi)), Some((sj, mj))) => sj.cmp(&si).then(mj.partial_cmp(&mi).unwrap_or(Ordering::Equal)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => gram[j * c + j].partial_cmp(&gram[i * c + i]).unwrap_or(Ordering::Equal),
        }
        .then(i.cmp(&j))
    });
    LassoPath {
        lambdas,
        support,
        beta,
        rank,
    }
}

fn norm_ranked(p: &PruningProblem) -> Vec<usize> {
    let z = p.contributions();
    let norms: Vec<f64> = z.iter().map(|v| v.iter().map(|a| a * a).sum()).collect();
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(p.budget);
    idx.sort_unstable();
    idx
}

fn beta_of(c: usize, kept: &[usize]) -> Vec<u8> {
    let mut beta = vec![0u8; c];
    for &i in kept {
        beta[i] = 1;
    }
    beta
}

/// Chooses at most `budget` channels and refits the filters on them.
///
/// The LASSO support is binarized and, if smaller than the budget, topped up
/// with the channels that survived longest. The result is compared with
/// keeping the channels of largest contribution norm; the lower residual wins.
pub fn solve_selection(p: &PruningProblem) -> Result<Selection> {
    let c = p.channels();
    if p.budget >= c {
        let kept: Vec<usize> = (0..c).collect();
        let residual = p.residual_with(&kept, &p.w)?;
        return Ok(Selection {
            beta: vec![1; c],
            kept,
            residual,
            weights: p.w.clone(),
            lambda: 0.0,
            method: SelectionMethod::Full,
        });
    }
    let path = lasso_path(p);
    let mut kept: Vec<usize> = (0..c).filter(|&i| path.beta[i] != 0.0).collect();
    for &i in &path.rank {
        if kept.len() >= p.budget {
            break;
        }
        if path.beta[i] == 0.0 {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let lasso = reconstruct_weights(p, &kept)?;
    let lambda = *path.lambdas.last().expect("at least one step");

    let heuristic_kept = norm_ranked(p);
    if heuristic_kept != kept {
        let h = reconstruct_weights(p, &heuristic_kept)?;
        if h.residual < lasso.residual {
            return Ok(Selection {
                beta: beta_of(c, &heuristic_kept),
                kept: heuristic_kept,
                residual: h.residual,
                weights: h.weights,
                lambda,
                method: SelectionMethod::Heuristic,
            });
        }
    }
    Ok(Selection {
        beta: beta_of(c, &kept),
        kept,
        residual: lasso.residual,
        weights: lasso.weights,
        lambda,
        method: SelectionMethod::Lasso,
    })
}
