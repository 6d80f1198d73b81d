//! Ground truth for small instances: exhaustive reward enumeration, the exact
//! terminal marginal of a forward policy, empirical frequencies, and
//! Jensen-Shannon divergence.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use itertools::Itertools;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::TrainSet;
use crate::env::BatchState;
use crate::error::{Error, Result};
use crate::gp::{GpModel, KernelParams, MaternNu};
use crate::policy::ForwardPolicy;
use crate::reward::{joint_mi, BatchReward};
use crate::rng::Rng;

pub const DEFAULT_CAP: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

/// All size-`b` subsets of `0..n` in lexicographic order.
pub fn support(n: usize, b: usize, cap: u128) -> Result<Vec<BatchState>> {
    let count = binomial(n, b);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    Ok((0..n)
        .combinations(b)
        .map(|c| BatchState::from_indices(c, b).expect("combinations are distinct"))
        .collect())
}

/// The normalised reward distribution over every batch of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardDistribution {
    pub support: Vec<BatchState>,
    pub jmi: Vec<f64>,
    pub log_reward: Vec<f64>,
    pub probs: Vec<f64>,
}

impl RewardDistribution {
    /// Index and JMI of the best batch (first in canonical order on ties).
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, &v) in self.jmi.iter().enumerate() {
            if v > self.jmi[best] {
                best = i;
            }
        }
        (best, self.jmi[best])
    }
}

/// `p(s) = exp(ℓ(s) − logsumexp ℓ)` over all `C(N, B)` batches.
pub fn enumerate_rewards(reward: &BatchReward, batch_size: usize, cap: u128) -> Result<RewardDistribution> {
    let support = support(reward.pool_size(), batch_size, cap)?;
    let jmi = support.iter().map(|s| reward.jmi(s)).collect::<Result<Vec<_>>>()?;
    let log_reward: Vec<f64> = jmi.iter().map(|j| j / reward.spec.temperature).collect();
    let probs = normalise_log(&log_reward);
    Ok(RewardDistribution { support, jmi, log_reward, probs })
}

fn normalise_log(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Probability of each terminal batch under `policy`, by forward dynamic
/// programming over the subset lattice. Returned in the canonical order of
/// [`support`].
pub fn exact_policy_marginal<P: ForwardPolicy + ?Sized>(
    policy: &P,
    batch_size: usize,
    cap: u128,
) -> Result<Vec<f64>> {
    let n = policy.pool_size();
    if batch_size == 0 || batch_size > n {
        return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={n}")));
    }
    let states: u128 = (0..=batch_size).map(|k| binomial(n, k)).fold(0u128, |a, c| a.saturating_add(c));
    if states > cap {
        return Err(Error::CapExceeded { count: states, cap });
    }
    let mut level: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    level.insert(Vec::new(), 1.0);
    for _ in 0..batch_size {
        let mut next: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (idx, p) in &level {
            let s = BatchState::from_indices(idx.clone(), batch_size)?;
            let logp = policy.forward_log_probs(&s)?;
            for (a, lp) in logp.iter().enumerate() {
                if *lp == f64::NEG_INFINITY {
                    continue;
                }
                if s.contains(a) {
                    return Err(Error::DisallowedAction { action: a });
                }
                let mut child = idx.clone();
                let at = child.binary_search(&a).unwrap_err();
                child.insert(at, a);
                *next.entry(child).or_insert(0.0) += p * lp.exp();
            }
        }
        level = next;
    }
    Ok((0..n)
        .combinations(batch_size)
        .map(|c| level.get(&c).copied().unwrap_or(0.0))
        .collect())
}

/// Frequencies of `samples` over `support`.
pub fn empirical_distribution(samples: &[BatchState], support: &[BatchState]) -> Result<Vec<f64>> {
    let index: HashMap<&[usize], usize> =
        support.iter().enumerate().map(|(i, s)| (s.indices(), i)).collect();
    let mut counts = vec![0.0; support.len()];
    for s in samples {
        match index.get(s.indices()) {
            Some(&i) => counts[i] += 1.0,
            None => return Err(Error::OutOfSupport(s.indices().to_vec())),
        }
    }
    if !samples.is_empty() {
        let n = samples.len() as f64;
        for c in &mut counts {
            *c /= n;
        }
    }
    Ok(counts)
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p > 0.0 {
        p * (p / m).ln()
    } else {
        0.0
    }
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "jsd needs aligned supports");
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            kl_term(a, m) + kl_term(b, m)
        })
        .sum();
    (0.5 * total).clamp(0.0, std::f64::consts::LN_2)
}

/// Least-squares fit `p_model ≈ slope·p_true + intercept`.
pub fn density_parity(p_true: &[f64], p_model: &[f64]) -> (f64, f64) {
    let n = p_true.len() as f64;
    let mx = p_true.iter().sum::<f64>() / n;
    let my = p_model.iter().sum::<f64>() / n;
    let sxy: f64 = p_true.iter().zip(p_model).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = p_true.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// `½ log |det(I + K/σ²)|` by partial-pivot elimination, with no PSD check.
fn unchecked_jmi(cov: &Array2<f64>, noise_var: f64) -> f64 {
    let n = cov.nrows();
    let mut a = Array2::from_shape_fn((n, n), |(i, j)| (i == j) as u8 as f64 + cov[[i, j]] / noise_var);
    let mut logdet = 0.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&x, &y| a[[x, k]].abs().total_cmp(&a[[y, k]].abs())).unwrap();
        if piv != k {
            for j in 0..n {
                a.swap([k, j], [piv, j]);
            }
        }
        let d = a[[k, k]];
        logdet += d.abs().ln();
        for i in k + 1..n {
            let f = a[[i, k]] / d;
            for j in k..n {
                a[[i, j]] -= f * a[[k, j]];
            }
        }
    }
    0.5 * logdet
}

/// Largest diminishing-returns violation `f(T∪x) − f(T) − (f(S∪x) − f(S))`
/// over every `S ⊂ T` and `x ∉ T` of the points behind `cov`.
///
/// With `checked` the PSD-verifying [`joint_mi`] is used (and an indefinite
/// matrix is an error); otherwise a raw log-determinant is evaluated.
pub fn submodularity_violation(cov: &Array2<f64>, noise_var: f64, checked: bool) -> Result<f64> {
    let n = cov.nrows();
    if n > 16 {
        return Err(Error::invalid("submodularity check is exhaustive; use at most 16 points"));
    }
    let full = 1usize << n;
    let mut f = vec![0.0; full];
    for (mask, value) in f.iter_mut().enumerate().skip(1) {
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| cov[[idx[a], idx[b]]]);
        *value = if checked { joint_mi(&sub, noise_var)? } else { unchecked_jmi(&sub, noise_var) };
    }
    let mut worst = 0.0f64;
    for t in 0..full {
        // every subset s of t
        let mut s = t;
        loop {
            for x in 0..n {
                if t >> x & 1 == 0 {
                    let bit = 1 << x;
                    let gain_t = f[t | bit] - f[t];
                    let gain_s = f[s | bit] - f[s];
                    worst = worst.max(gain_t - gain_s);
                }
            }
            if s == 0 {
                break;
            }
            s = (s - 1) & t;
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubmodularityReport {
    pub trials: usize,
    pub pool_size: usize,
    pub worst_violation: f64,
}

impl SubmodularityReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_violation <= tol
    }
}

/// Random GP posteriors: a few random training points with random kernel
/// hyperparameters, then the posterior over `pool_size` random inputs.
pub fn submodularity_check(trials: usize, pool_size: usize, rng: &mut Rng) -> Result<SubmodularityReport> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = rng.gen_range(0..4);
        let train = TrainSet::new(
            (0..m)
                .map(|id| crate::data::LabeledPoint { id, x: rng.gen_range(-2.0..2.0), y: rng.gen_range(-1.0..1.0) })
                .collect(),
        );
        let params = KernelParams {
            lengthscale: rng.gen_range(0.2..2.0),
            outputscale: rng.gen_range(0.3..3.0),
            noise_var: rng.gen_range(0.01..0.5),
            mean_const: 0.0,
        };
        let nu = [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves][rng.gen_range(0..3)];
        let gp = GpModel::new(&train, nu, params)?;
        let xs: Vec<f64> = (0..pool_size).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let post = gp.posterior(&xs)?;
        worst = worst.max(submodularity_violation(&post.cov, params.noise_var, true)?);
    }
    Ok(SubmodularityReport { trials, pool_size, worst_violation: worst })
}

/// Header line of a distribution report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportHeader {
    pub format: String,
    pub n: usize,
    pub b: usize,
    pub temperature: f64,
    pub seed: u64,
    pub jsd_nats: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Always `"p_model ~ p_true"`.
    pub regression: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub indices: Vec<usize>,
    pub p_true: f64,
    pub p_model: f64,
}

pub const REPORT_FORMAT: &str = "batchgfn-distribution/1";

/// Exact (or empirical) model distribution against the true reward
/// distribution.
///
/// File layout: line-delimited JSON. Line 1 is a [`ReportHeader`]; every
/// following line is a [`ReportRow`], one per batch in canonical
/// (lexicographic) order. JSD is in nats and the density-parity line regresses
/// `p_model` on `p_true`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionReport {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
}

impl DistributionReport {
    pub fn new(
        dist: &RewardDistribution,
        p_model: &[f64],
        temperature: f64,
        seed: u64,
        n: usize,
    ) -> Result<Self> {
        if p_model.len() != dist.probs.len() {
            return Err(Error::invalid("model and true distributions have different supports"));
        }
        let (slope, intercept) = density_parity(&dist.probs, p_model);
        let header = ReportHeader {
            format: REPORT_FORMAT.into(),
            n,
            b: dist.support.first().map_or(0, |s| s.len()),
            temperature,
            seed,
            jsd_nats: jsd(&dist.probs, p_model),
            slope,
            intercept,
            regression: "p_model ~ p_true".into(),
        };
        let rows = dist
            .support
            .iter()
            .zip(&dist.probs)
            .zip(p_model)
            .map(|((s, &p_true), &p_model)| ReportRow { indices: s.indices().to_vec(), p_true, p_model })
            .collect();
        Ok(DistributionReport { header, rows })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Parse(format!("distribution report: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| bad("empty input".into()))?;
        let header: ReportHeader = serde_json::from_str(first).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != REPORT_FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row: ReportRow = serde_json::from_str(line).map_err(|e| bad(format!("row {}: {e}", k + 1)))?;
            if row.indices.len() != header.b || row.indices.iter().any(|&i| i >= header.n) {
                return Err(bad(format!("row {} does not fit N={} B={}", k + 1, header.n, header.b)));
            }
            if !(row.p_true >= 0.0 && row.p_model >= 0.0 && row.p_true <= 1.0 && row.p_model <= 1.0) {
                return Err(bad(format!("row {} has an invalid probability", k + 1)));
            }
            rows.push(row);
        }
        let expected = binomial(header.n, header.b);
        if rows.len() as u128 != expected {
            return Err(bad(format!("{} rows, expected {expected}", rows.len())));
        }
        Ok(DistributionReport { header, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::UniformPolicy;

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 2), 45);
        assert_eq!(binomial(12, 4), 495);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(2000, 10), 275_898_785_946_005_613_288_829_800);
    }

    #[test]
    fn support_is_lexicographic() {
        let s = support(4, 2, DEFAULT_CAP).unwrap();
        let got: Vec<Vec<usize>> = s.iter().map(|b| b.indices().to_vec()).collect();
        assert_eq!(got, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert!(matches!(support(2000, 10, DEFAULT_CAP), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn uniform_marginal_on_three() {
        let p = exact_policy_marginal(&UniformPolicy { pool_size: 3 }, 2, DEFAULT_CAP).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    struct Smallest(usize);

    impl ForwardPolicy for Smallest {
        fn pool_size(&self) -> usize {
            self.0
        }
        fn forward_log_probs(&self, s: &BatchState) -> Result<Vec<f64>> {
            let a = (0..self.0).find(|i| !s.contains(*i)).unwrap();
            Ok((0..self.0).map(|i| if i == a { 0.0 } else { f64::NEG_INFINITY }).collect())
        }
    }

    #[test]
    fn deterministic_policy_is_point_mass() {
        let p = exact_policy_marginal(&Smallest(5), 2, DEFAULT_CAP).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dp_cap() {
        assert!(matches!(
            exact_policy_marginal(&UniformPolicy { pool_size: 30 }, 5, 1000),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn empirical_cases() {
        let sup = support(3, 2, DEFAULT_CAP).unwrap();
        let (a, b) = (sup[0].clone(), sup[1].clone());
        assert_eq!(empirical_distribution(&vec![a.clone(); 4], &sup).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(
            empirical_distribution(&[a.clone(), a, b.clone(), b], &sup).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        let outside = BatchState::from_indices(vec![0, 7], 2).unwrap();
        assert!(matches!(empirical_distribution(&[outside], &sup), Err(Error::OutOfSupport(v)) if v == vec![0, 7]));
    }

    #[test]
    fn empirical_converges() {
        use rand::Rng as _;
        let truth = [0.1, 0.2, 0.3, 0.4];
        let sup = support(4, 3, DEFAULT_CAP).unwrap();
        let mut r = crate::rng::stream(4, "test");
        let samples: Vec<BatchState> = (0..100_000)
            .map(|_| {
                let u: f64 = r.gen();
                let mut acc = 0.0;
                let mut k = 3;
                for (i, t) in truth.iter().enumerate() {
                    acc += t;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                sup[k].clone()
            })
            .collect();
        let emp = empirical_distribution(&samples, &sup).unwrap();
        let tv: f64 = 0.5 * emp.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.01, "{tv}");
    }

    #[test]
    fn jsd_values() {
        assert_eq!(jsd(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        // ½[ln(4/3)] + ½[½ln(2/3) + ½ln 2], evaluated independently
        assert!((jsd(&[1.0, 0.0], &[0.5, 0.5]) - 0.21576155433883565).abs() < 1e-15);
        let p = [0.1, 0.6, 0.3];
        let q = [0.5, 0.25, 0.25];
        assert_eq!(jsd(&p, &q), jsd(&q, &p));
    }

    #[test]
    fn density_parity_of_identity() {
        let p = [0.1, 0.2, 0.7];
        let (s, i) = density_parity(&p, &p);
        assert!((s - 1.0).abs() < 1e-12 && i.abs() < 1e-12);
        let q = [0.2, 0.4, 1.4];
        assert!((density_parity(&p, &q).0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_has_no_violation() {
        let cov = Array2::from_diag(&ndarray::arr1(&[0.5, 1.0, 2.0, 0.1]));
        assert!(submodularity_violation(&cov, 0.1, true).unwrap() < 1e-15);
    }

    #[test]
    fn indefinite_control_is_flagged() {
        let cov = ndarray::array![[1.0, -3.0, 0.0], [-3.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(submodularity_violation(&cov, 1.0, false).unwrap() > 0.1);
        assert!(submodularity_violation(&cov, 1.0, true).is_err());
    }

    #[test]
    fn random_posteriors_are_submodular() {
        let mut r = crate::rng::stream(8, "test");
        let rep = submodularity_check(20, 4, &mut r).unwrap();
        assert!(rep.passes(1e-9), "{rep:?}");
    }

    #[test]
    fn report_roundtrip() {
        let dist = RewardDistribution {
            support: support(3, 2, DEFAULT_CAP).unwrap(),
            jmi: vec![0.1, 0.2, 0.3],
            log_reward: vec![0.1, 0.2, 0.3],
            probs: normalise_log(&[0.1, 0.2, 0.3]),
        };
        let rep = DistributionReport::new(&dist, &[0.3, 0.3, 0.4], 1.0, 7, 3).unwrap();
        let mut buf = Vec::new();
        rep.write(&mut buf).unwrap();
        let back = DistributionReport::parse(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, rep);
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(DistributionReport::parse(&truncated).is_err());
        assert!(DistributionReport::parse("").is_err());
    }
}
