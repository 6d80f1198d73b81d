//! Reference acquisition strategies.

use rand::seq::index;
use rand::Rng as _;

use crate::env::BatchState;
use crate::error::{Error, Result};
use crate::reward::{joint_mi, IncrementalJmi, PoolCovariance};
use crate::rng::Rng;

fn check_size(b: usize, n: usize) -> Result<()> {
    if b > n {
        return Err(Error::invalid(format!("batch size {b} exceeds pool size {n}")));
    }
    Ok(())
}

/// Uniform without replacement.
pub fn random_batch(pool_size: usize, b: usize, rng: &mut Rng) -> Result<BatchState> {
    check_size(b, pool_size)?;
    BatchState::from_indices(index::sample(rng, pool_size, b).into_vec(), b)
}

/// The `b` highest scores; ties go to the smaller index.
pub fn bald_top_b(scores: &[f64], b: usize) -> Result<BatchState> {
    check_size(b, scores.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(b);
    BatchState::from_indices(order, b)
}

/// `b` draws without replacement, each proportional to `exp(score / temp)`
/// over the remaining indices.
pub fn stochastic_bald(scores: &[f64], b: usize, temp: f64, rng: &mut Rng) -> Result<BatchState> {
    check_size(b, scores.len())?;
    if !(temp > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temp}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("stochastic BALD needs finite scores"));
    }
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut chosen = Vec::with_capacity(b);
    for _ in 0..b {
        let max = remaining.iter().map(|&i| scores[i] / temp).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = remaining.iter().map(|&i| (scores[i] / temp - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                pick = k;
                break;
            }
        }
        chosen.push(remaining.remove(pick));
    }
    BatchState::from_indices(chosen, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreedyMode {
    /// Rank-one extensions of a growing Cholesky factor.
    Incremental,
    /// Full log-determinant recomputed for every candidate.
    Naive,
}

/// Greedy JMI maximisation: repeatedly adds the point with the largest
/// joint-MI gain (ties to the smaller index).
pub fn batchbald_greedy(cov: &PoolCovariance, b: usize, mode: GreedyMode) -> Result<BatchState> {
    let n = cov.pool_size();
    check_size(b, n)?;
    let mut inc = IncrementalJmi::new(cov);
    let mut chosen: Vec<usize> = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if chosen.contains(&i) {
                continue;
            }
            let g = match mode {
                GreedyMode::Incremental => inc.gain(i)?,
                GreedyMode::Naive => {
                    let mut idx = chosen.clone();
                    idx.push(i);
                    joint_mi(&cov.submatrix(&idx), cov.noise_var())?
                }
            };
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((i, g));
            }
        }
        let (i, _) = best.expect("b <= n leaves a candidate");
        inc.push(i)?;
        chosen.push(i);
    }
    BatchState::from_indices(chosen, b)
}
