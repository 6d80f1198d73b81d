//! Batch utilities under a GP: joint mutual information between batch labels
//! and the latent function, `½ log det(I + σ⁻² K)`, its temperature-scaled
//! log reward, stepwise gains, and single-point BALD scores.
//!
//! Everything stays in log space. `K` is the GP posterior covariance given
//! the current training set unless [`CovarianceMode::Prior`] is selected.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::env::BatchState;
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::linalg::GrowingCholesky;

/// Conditional pivots of `I + σ⁻²K` are at least 1 for PSD `K`; anything
/// below `1 - PSD_TOL` is treated as an indefinite covariance.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub temperature: f64,
}

impl RewardSpec {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(RewardSpec { temperature })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Posterior,
    Prior,
}

fn checked_gain(schur: f64, position: usize) -> Result<f64> {
    if !(schur >= 1.0 - PSD_TOL) {
        return Err(Error::IndefiniteCovariance { position, pivot: schur });
    }
    Ok(0.5 * schur.max(1.0).ln())
}

/// `½ log det(I + cov/σ²)` via a Cholesky factorisation of the scaled matrix.
pub fn joint_mi(cov: &Array2<f64>, noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(Error::invalid(format!("noise variance must be positive, got {noise_var}")));
    }
    let n = cov.nrows();
    let mut chol = GrowingCholesky::new();
    let mut total = 0.0;
    for k in 0..n {
        let cross: Vec<f64> = (0..k).map(|j| cov[[k, j]] / noise_var).collect();
        let (row, schur) = chol.extension(&cross, 1.0 + cov[[k, k]] / noise_var);
        total += checked_gain(schur, k)?;
        chol.push(row, schur.max(1.0));
    }
    Ok(total)
}

/// Posterior (or prior) covariance over a fixed pool, evaluated on demand.
///
/// With whitened cross-covariances `v_i = L⁻¹ k(X_train, x_i)` cached, the
/// entry for pool positions `i, j` is `k(x_i, x_j) - v_i·v_j`.
#[derive(Clone, Debug)]
pub struct PoolCovariance {
    gp: GpModel,
    pool_x: Vec<f64>,
    /// Row `i` holds `v_i`.
    whitened: Array2<f64>,
    mode: CovarianceMode,
}

impl PoolCovariance {
    pub fn new(gp: GpModel, pool_x: Vec<f64>, mode: CovarianceMode) -> Self {
        let whitened = match mode {
            CovarianceMode::Posterior if gp.train_size() > 0 => {
                gp.whitened_cross(&pool_x).t().as_standard_layout().to_owned()
            }
            _ => Array2::zeros((pool_x.len(), 0)),
        };
        PoolCovariance { gp, pool_x, whitened, mode }
    }

    pub fn pool_size(&self) -> usize {
        self.pool_x.len()
    }

    pub fn pool_x(&self) -> &[f64] {
        &self.pool_x
    }

    pub fn gp(&self) -> &GpModel {
        &self.gp
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    pub fn noise_var(&self) -> f64 {
        self.gp.noise_var()
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        let prior = self.gp.kernel.eval(self.pool_x[i], self.pool_x[j]);
        let vi = self.whitened.row(i);
        let vj = self.whitened.row(j);
        prior - vi.dot(&vj)
    }

    pub fn var(&self, i: usize) -> f64 {
        self.cov(i, i)
    }

    pub fn submatrix(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| self.cov(idx[a], idx[b]))
    }
}

/// Incrementally built JMI of a growing batch.
#[derive(Clone, Debug)]
pub struct IncrementalJmi<'a> {
    cov: &'a PoolCovariance,
    members: Vec<usize>,
    chol: GrowingCholesky,
    value: f64,
}

impl<'a> IncrementalJmi<'a> {
    pub fn new(cov: &'a PoolCovariance) -> Self {
        IncrementalJmi { cov, members: Vec::new(), chol: GrowingCholesky::new(), value: 0.0 }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// JMI increase from adding pool position `i`, without adding it.
    pub fn gain(&self, i: usize) -> Result<f64> {
        let (_, schur) = self.extension(i);
        checked_gain(schur, self.members.len())
    }

    fn extension(&self, i: usize) -> (Vec<f64>, f64) {
        let s2 = self.cov.noise_var();
        let cross: Vec<f64> = self.members.iter().map(|&j| self.cov.cov(i, j) / s2).collect();
        self.chol.extension(&cross, 1.0 + self.cov.var(i) / s2)
    }

    pub fn push(&mut self, i: usize) -> Result<f64> {
        if self.members.contains(&i) {
            return Err(Error::DuplicateIndex { index: i });
        }
        let (row, schur) = self.extension(i);
        let g = checked_gain(schur, self.members.len())?;
        self.chol.push(row, schur.max(1.0));
        self.members.push(i);
        self.value += g;
        Ok(g)
    }
}

/// Temperature-shaped log reward `ℓ(s) = JMI(s) / T` over a pool.
#[derive(Clone, Debug)]
pub struct BatchReward {
    pub cov: PoolCovariance,
    pub spec: RewardSpec,
}

impl BatchReward {
    pub fn new(cov: PoolCovariance, spec: RewardSpec) -> Self {
        BatchReward { cov, spec }
    }

    pub fn pool_size(&self) -> usize {
        self.cov.pool_size()
    }

    pub fn jmi_of(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        joint_mi(&self.cov.submatrix(indices), self.cov.noise_var())
    }

    pub fn jmi(&self, state: &BatchState) -> Result<f64> {
        self.jmi_of(state.indices())
    }

    pub fn state_log_reward(&self, state: &BatchState) -> Result<f64> {
        Ok(self.jmi(state)? / self.spec.temperature)
    }

    /// `ℓ(s ∪ {x}) − ℓ(s)`.
    pub fn fl_gain(&self, state: &BatchState, added: usize) -> Result<f64> {
        if state.contains(added) {
            return Err(Error::DuplicateIndex { index: added });
        }
        let mut inc = IncrementalJmi::new(&self.cov);
        for &i in state.indices() {
            inc.push(i)?;
        }
        Ok(inc.gain(added)? / self.spec.temperature)
    }

    /// `ℓ` of every prefix of an action sequence, starting with `ℓ(∅) = 0`.
    pub fn prefix_log_rewards(&self, actions: &[usize]) -> Result<Vec<f64>> {
        let mut inc = IncrementalJmi::new(&self.cov);
        let mut out = Vec::with_capacity(actions.len() + 1);
        out.push(0.0);
        for &a in actions {
            inc.push(a)?;
            out.push(inc.value() / self.spec.temperature);
        }
        Ok(out)
    }

    pub fn bald_scores(&self) -> Vec<f64> {
        bald_scores(&self.cov)
    }
}

/// Per-point mutual information `½ log(1 + σ⁻² var_i)`.
pub fn bald_scores(cov: &PoolCovariance) -> Vec<f64> {
    let s2 = cov.noise_var();
    (0..cov.pool_size())
        .map(|i| 0.5 * (cov.var(i).max(0.0) / s2).ln_1p())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabeledPoint, TrainSet};
    use crate::gp::{KernelParams, MaternNu};
    use crate::rng;
    use ndarray::array;
    use rand::Rng as _;

    fn reward(pool: &[f64], train: &[(f64, f64)], t: f64) -> BatchReward {
        let ts = TrainSet::new(train.iter().enumerate().map(|(id, &(x, y))| LabeledPoint { id, x, y }).collect());
        let gp = GpModel::new(&ts, MaternNu::FiveHalves, KernelParams { noise_var: 0.05, ..Default::default() }).unwrap();
        BatchReward::new(PoolCovariance::new(gp, pool.to_vec(), CovarianceMode::Posterior), RewardSpec::new(t).unwrap())
    }

    #[test]
    fn joint_mi_cases() {
        assert_eq!(joint_mi(&Array2::zeros((3, 3)), 0.1).unwrap(), 0.0);
        let s2 = 0.37;
        let one = joint_mi(&array![[s2]], s2).unwrap();
        assert!((one - 0.5 * 2f64.ln()).abs() < 1e-15);
        let d = joint_mi(&array![[0.4, 0.0], [0.0, 1.3]], 0.1).unwrap();
        let a = joint_mi(&array![[0.4]], 0.1).unwrap();
        let b = joint_mi(&array![[1.3]], 0.1).unwrap();
        assert!((d - (a + b)).abs() < 1e-14);
        // det([[11, 9], [9, 11]]) = 40
        let c = joint_mi(&array![[1.0, 0.9], [0.9, 1.0]], 0.1).unwrap();
        assert!((c - 0.5 * 40f64.ln()).abs() < 1e-12);
        assert!((c - 1.8444397270569681).abs() < 1e-12);
    }

    #[test]
    fn joint_mi_rejects_indefinite() {
        let bad = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(joint_mi(&bad, 0.1), Err(Error::IndefiniteCovariance { .. })));
        assert!(joint_mi(&array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn log_reward_temperature_scaling() {
        let r1 = reward(&[-1.0, 0.0, 0.5, 2.0], &[(0.1, 0.0)], 1.0);
        let r2 = reward(&[-1.0, 0.0, 0.5, 2.0], &[(0.1, 0.0)], 0.5);
        let empty = BatchState::empty(2);
        assert_eq!(r1.state_log_reward(&empty).unwrap(), 0.0);
        let s = BatchState::from_indices(vec![0, 3], 2).unwrap();
        let jmi = r1.jmi(&s).unwrap();
        assert_eq!(r1.state_log_reward(&s).unwrap(), jmi);
        assert!((r2.state_log_reward(&s).unwrap() - 2.0 * jmi).abs() < 1e-12);
    }

    #[test]
    fn fl_gain_cases() {
        let r = reward(&[-1.0, 0.0, 0.5, 2.0], &[(0.1, 0.0)], 0.3);
        let empty = BatchState::empty(3);
        let g = r.fl_gain(&empty, 2).unwrap();
        let single = BatchState::from_indices(vec![2], 3).unwrap();
        assert!((g - r.state_log_reward(&single).unwrap()).abs() < 1e-12);
        assert!(r.fl_gain(&single, 2).is_err());


        // a zero-variance point adds nothing on top of any batch
        let with_zero = array![[0.7, 0.0], [0.0, 0.0]];
        let gain = joint_mi(&with_zero, 0.1).unwrap() - joint_mi(&array![[0.7]], 0.1).unwrap();
        assert_eq!(gain, 0.0);
    }

    #[test]
    fn diminishing_returns_exhaustive() {
        let mut g = rng::stream(12, "test");
        for _ in 0..20 {
            let pool: Vec<f64> = (0..4).map(|_| g.gen_range(-2.0..2.0)).collect();
            let train: Vec<(f64, f64)> = (0..2).map(|_| (g.gen_range(-2.0..2.0), 0.0)).collect();
            let r = reward(&pool, &train, 1.0);
            for small in 0u32..16 {
                for big in 0u32..16 {
                    if small & !big != 0 {
                        continue;
                    }
                    for x in 0..4 {
                        if big & (1 << x) != 0 {
                            continue;
                        }
                        let set = |m: u32| BatchState::from_indices((0..4).filter(|i| m & (1 << i) != 0).collect(), 4).unwrap();
                        let gs = r.fl_gain(&set(small), x).unwrap();
                        let gb = r.fl_gain(&set(big), x).unwrap();
                        assert!(gs >= gb - 1e-9);
                        assert!(gb >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn bald_scores_are_singleton_jmi() {
        let r = reward(&[-2.0, -0.3, 0.0, 1.0, 3.0], &[(0.0, 0.5), (1.0, 0.2)], 1.0);
        let scores = r.bald_scores();
        for (i, s) in scores.iter().enumerate() {
            assert!(*s >= 0.0);
            let jmi = joint_mi(&array![[r.cov.var(i)]], r.cov.noise_var()).unwrap();
            assert!((s - jmi).abs() < 1e-12);
        }
    }

    #[test]
    fn bald_sum_bounds_jmi() {
        let mut g = rng::stream(13, "test");
        for _ in 0..50 {
            let pool: Vec<f64> = (0..5).map(|_| g.gen_range(-2.0..2.0)).collect();
            let r = reward(&pool, &[(g.gen_range(-1.0..1.0), 0.0)], 1.0);
            let s = r.bald_scores();
            let idx = [0, 2, 4];
            let jmi = r.jmi_of(&idx).unwrap();
            let sum: f64 = idx.iter().map(|&i| s[i]).sum();
            assert!(sum >= jmi - 1e-12);
        }
        // equality for zero cross-covariance
        let cov = array![[0.3, 0.0], [0.0, 0.9]];
        let sum = joint_mi(&array![[0.3]], 0.1).unwrap() + joint_mi(&array![[0.9]], 0.1).unwrap();
        assert!((joint_mi(&cov, 0.1).unwrap() - sum).abs() < 1e-14);
    }

    #[test]
    fn prefix_rewards_match_direct_and_are_monotone() {
        let r = reward(&[-2.0, -0.3, 0.0, 1.0, 3.0, 0.4], &[(0.0, 0.5)], 0.2);
        let actions = [4, 1, 5, 0];
        let prefix = r.prefix_log_rewards(&actions).unwrap();
        assert_eq!(prefix[0], 0.0);
        for k in 1..=actions.len() {
            let s = BatchState::from_indices(actions[..k].to_vec(), 4).unwrap();
            assert!((prefix[k] - r.state_log_reward(&s).unwrap()).abs() < 1e-12);
            assert!(prefix[k] >= prefix[k - 1]);
        }
    }

    #[test]
    fn prior_mode_ignores_training_data() {
        let ts = TrainSet::new(vec![LabeledPoint { id: 0, x: 0.0, y: 1.0 }]);
        let gp = GpModel::new(&ts, MaternNu::FiveHalves, KernelParams::default()).unwrap();
        let cov = PoolCovariance::new(gp, vec![0.0, 1.0], CovarianceMode::Prior);
        assert_eq!(cov.var(0), 1.0);
    }
}
