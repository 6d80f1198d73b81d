//! Dense Cholesky routines used by the GP and the reward.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Relative jitter schedule: starts at `JITTER_START * scale`, grows by 10x
/// per retry up to `JITTER_MAX * scale`.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-4;

/// Plain lower Cholesky factor. `Err(pivot_index, pivot)` on the first
/// non-positive pivot.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, (usize, f64)> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky with diagonal jitter escalation. Returns the factor and the
/// jitter that was added (0 when none was needed).
pub fn cholesky_jittered(a: &Array2<f64>, scale: f64) -> Result<(Array2<f64>, f64)> {
    let mut last_pivot = match cholesky(a) {
        Ok(l) => return Ok((l, 0.0)),
        Err((_, p)) => p,
    };
    let scale = if scale > 0.0 && scale.is_finite() { scale } else { 1.0 };
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-12) {
        warn!("cholesky failed (pivot {last_pivot:e}); retrying with jitter {jitter:e}");
        let mut aj = a.clone();
        for i in 0..aj.nrows() {
            aj[[i, i]] += jitter;
        }
        match cholesky(&aj) {
            Ok(l) => return Ok((l, jitter)),
            Err((_, p)) => last_pivot = p,
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky {
        size: a.nrows(),
        max_jitter: JITTER_MAX * scale,
        min_pivot: last_pivot,
    })
}

/// Factor of a positive semi-definite matrix that tolerates (near-)zero
/// pivots: columns whose pivot falls below `tol * max_diag` are set to zero.
/// Used for sampling, where a rank-deficient covariance is legitimate.
pub fn cholesky_psd(a: &Array2<f64>, tol: f64) -> Array2<f64> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    let floor = tol * max_diag;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= floor || d <= 0.0 {
            continue;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    l
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[[i, k]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `L X = B` column by column.
pub fn solve_lower_matrix(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// `A⁻¹ b` given the Cholesky factor of `A`.
pub fn cho_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, y.view())
}

/// `A⁻¹` given the Cholesky factor of `A`.
pub fn cho_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for c in 0..n {
        e.fill(0.0);
        e[c] = 1.0;
        let col = cho_solve(l, e.view());
        inv.column_mut(c).assign(&col);
    }
    inv
}

pub fn log_det_from_cholesky(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>()
}

/// Cholesky factor of a matrix that grows one row/column at a time.
///
/// Appending row `a` (cross terms against the existing rows) with diagonal
/// `d` costs O(n²): solve `L l = a`, then the new pivot is `d - l·l`.
#[derive(Clone, Debug, Default)]
pub struct GrowingCholesky {
    rows: Vec<Vec<f64>>,
}

impl GrowingCholesky {
    pub fn new() -> Self {
        GrowingCholesky { rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Off-diagonal part of the new row and the squared pivot (Schur
    /// complement) for a candidate extension. Does not modify `self`.
    pub fn extension(&self, cross: &[f64], diag: f64) -> (Vec<f64>, f64) {
        debug_assert_eq!(cross.len(), self.rows.len());
        let mut l = Vec::with_capacity(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s = cross[i] - row[..i].iter().zip(&l).map(|(a, b)| a * b).sum::<f64>();
            l.push(s / row[i]);
        }
        let schur = diag - l.iter().map(|v| v * v).sum::<f64>();
        (l, schur)
    }

    /// Appends a row computed by [`extension`](Self::extension). `schur` must
    /// be positive.
    pub fn push(&mut self, mut off_diag: Vec<f64>, schur: f64) {
        debug_assert!(schur > 0.0);
        off_diag.push(schur.sqrt());
        self.rows.push(off_diag);
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.rows.iter().enumerate().map(|(i, r)| r[i].ln()).sum::<f64>()
    }
}

/// Dense symmetric product helper: `xᵀ A y`.
pub fn quad_form(a: &Array2<f64>, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    x.dot(&a.dot(&y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut a = g.dot(&g.t());
        for i in 0..n {
            a[[i, i]] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = random_spd(6, 1);
        let l = cholesky(&a).unwrap();
        let r = l.dot(&l.t());
        for (x, y) in r.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn solves_and_inverse() {
        let a = random_spd(5, 2);
        let l = cholesky(&a).unwrap();
        let b = array![1.0, -2.0, 0.5, 3.0, 0.0];
        let x = cho_solve(&l, b.view());
        let back = a.dot(&x);
        for (p, q) in back.iter().zip(b.iter()) {
            assert!((p - q).abs() < 1e-10);
        }
        let inv = cho_inverse(&l);
        let eye = a.dot(&inv);
        for i in 0..5 {
            for j in 0..5 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - t).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(cholesky(&a).is_err());
        let (_, jitter) = cholesky_jittered(&a, 1.0).unwrap();
        assert!(jitter > 0.0 && jitter <= 1e-4);
    }

    #[test]
    fn jitter_gives_up_on_indefinite() {
        let a = array![[1.0, 0.0], [0.0, -1.0]];
        assert!(matches!(cholesky_jittered(&a, 1.0), Err(Error::Cholesky { .. })));
    }

    #[test]
    fn psd_factor_of_zero_is_zero() {
        let l = cholesky_psd(&Array2::zeros((3, 3)), 1e-12);
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn growing_matches_full() {
        let a = random_spd(7, 3);
        let mut g = GrowingCholesky::new();
        for k in 0..7 {
            let cross: Vec<f64> = (0..k).map(|j| a[[k, j]]).collect();
            let (row, schur) = g.extension(&cross, a[[k, k]]);
            g.push(row, schur);
            let sub = a.slice(ndarray::s![..=k, ..=k]).to_owned();
            let full = log_det_from_cholesky(&cholesky(&sub).unwrap());
            assert!((g.log_det() - full).abs() < 1e-10);
        }
    }
}
