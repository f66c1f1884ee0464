use crate::error::{Error, Result};
use crate::prune::problem::PruningProblem;
use crate::tensor::Tensor;

const RIDGE: f64 = 1e-8;

/// Refitted filters for a channel subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// (n, |kept|, k_h, k_w).
    pub weights: Tensor<f64>,
    /// `‖Y − Σ_{i ∈ kept} X_i W'_iᵀ‖²_F`.
    pub residual: f64,
}

/// In-place Cholesky factorization of a symmetric m×m matrix (lower triangle).
/// Returns false if a pivot is not positive.
fn cholesky(a: &mut [f64], m: usize) -> bool {
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * m + j] = d;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` for each of the `r` columns of `b` (m×r, row-major).
fn cholesky_solve(l: &[f64], m: usize, b: &mut [f64], r: usize) {
    for col in 0..r {
        for i in 0..m {
            let mut v = b[i * r + col];
            for k in 0..i {
                v -= l[i * m + k] * b[k * r + col];
            }
            b[i * r + col] = v / l[i * m + i];
        }
        for i in (0..m).rev() {
            let mut v = b[i * r + col];
            for k in i + 1..m {
                v -= l[k * m + i] * b[k * r + col];
            }
            b[i * r + col] = v / l[i * m + i];
        }
    }
}

/// Least-squares refit of the filters restricted to `kept` input channels.
///
/// Solves the normal equations `(AᵀA + εI) W' = AᵀY` with `A` the kept patch
/// columns and `ε = 1e-8`, scaled up tenfold until the factorization succeeds.
pub fn reconstruct_weights(p: &PruningProblem, kept: &[usize]) -> Result<Reconstruction> {
    if kept.is_empty() {
        return Err(Error::config("cannot reconstruct with no channels"));
    }
    let c = p.channels();
    if let Some(&bad) = kept.iter().find(|&&i| i >= c) {
        return Err(Error::Bounds {
            what: "channel",
            index: bad,
            len: c,
        });
    }
    let kk = p.kernel_len();
    let m = kept.len() * kk;
    let n = p.outputs();
    let samples = p.samples();
    let xd = p.x.data();
    let yd = p.y.data();

    let mut a = Vec::with_capacity(samples * m);
    for s in 0..samples {
        let row = &xd[s * c * kk..(s + 1) * c * kk];
        for &i in kept {
            a.extend_from_slice(&row[i * kk..(i + 1) * kk]);
        }
    }
    let mut ata = vec![0.0; m * m];
    let mut aty = vec![0.0; m * n];
    for s in 0..samples {
        let ar = &a[s * m..(s + 1) * m];
        let yr = &yd[s * n..(s + 1) * n];
        for i in 0..m {
            let ai = ar[i];
            if ai == 0.0 {
                continue;
            }
            let dst = &mut ata[i * m..i * m + i + 1];
            for (d, aj) in dst.iter_mut().zip(&ar[..=i]) {
                *d += ai * aj;
            }
            for (d, y) in aty[i * n..(i + 1) * n].iter_mut().zip(yr) {
                *d += ai * y;
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            ata[j * m + i] = ata[i * m + j];
        }
    }

    let mut ridge = RIDGE;
    let l = loop {
        let mut l = ata.clone();
        for i in 0..m {
            l[i * m + i] += ridge;
        }
        if cholesky(&mut l, m) {
            break l;
        }
        ridge *= 10.0;
        if !ridge.is_finite() {
            return Err(Error::Numeric("normal equations are not positive definite".into()));
        }
    };
    let mut sol = aty;
    cholesky_solve(&l, m, &mut sol, n);

    let mut w = Vec::with_capacity(n * m);
    for o in 0..n {
        for row in 0..m {
            w.push(sol[row * n + o]);
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("reconstruction produced non-finite weights".into()));
    }
    let weights = Tensor::from_vec((n, kept.len(), p.x.h(), p.x.w()), w)?;
    let residual = p.residual_with(kept, &weights)?;
    Ok(Reconstruction { weights, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_small_system() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        assert!(cholesky(&mut a, 2));
        let mut b = vec![2.0, 1.0];
        cholesky_solve(&a, 2, &mut b, 1);
        // [[4,2],[2,3]] x = [2,1] -> x = [0.5, 0]
        assert!((b[0] - 0.5).abs() < 1e-12);
        assert!(b[1].abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky(&mut a, 2));
    }
}
