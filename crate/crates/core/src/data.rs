//! Toy 1-D regression data: pool, test set, seed sets, and dataset snapshots.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};

const POLY: [f64; 7] = [-0.6667, -0.6012, -1.0172, -0.7687, 0.0, 1.4680, -0.1678];

/// Noiseless regression target: a degree-6 polynomial times `sin(πx)·exp(-x²/2)`.
pub fn target_mean(x: f64) -> f64 {
    let poly = POLY.iter().rev().fold(0.0, |acc, c| acc * x + c);
    poly * (std::f64::consts::PI * x).sin() * (-0.5 * x * x).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Identity of the point within its source set (pool id or test id).
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolPoint {
    pub id: usize,
    pub x: f64,
}

/// Unlabelled pool. Positions `0..len()` are the action indices for the
/// current acquisition step; `id`s are stable across steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoolSet {
    points: Vec<PoolPoint>,
}

impl PoolSet {
    pub fn new(points: Vec<PoolPoint>) -> Self {
        PoolSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[PoolPoint] {
        &self.points
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.id).collect()
    }

    pub fn get(&self, position: usize) -> Option<&PoolPoint> {
        self.points.get(position)
    }

    /// Removes the points at `positions` (any order, no duplicates), keeping
    /// the relative order of the rest. Returns the removed points in the
    /// order given.
    pub fn remove_positions(&mut self, positions: &[usize]) -> Result<Vec<PoolPoint>> {
        let mut mask = vec![false; self.points.len()];
        for &p in positions {
            if p >= self.points.len() {
                return Err(Error::invalid(format!(
                    "position {p} out of range for pool of size {}",
                    self.points.len()
                )));
            }
            if mask[p] {
                return Err(Error::DuplicateIndex { index: p });
            }
            mask[p] = true;
        }
        let removed = positions.iter().map(|&p| self.points[p]).collect();
        let mut i = 0;
        self.points.retain(|_| {
            let keep = !mask[i];
            i += 1;
            keep
        });
        Ok(removed)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSet {
    pub pairs: Vec<LabeledPoint>,
}

impl TrainSet {
    pub fn new(pairs: Vec<LabeledPoint>) -> Self {
        TrainSet { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.y).collect()
    }

    pub fn extend(&mut self, more: impl IntoIterator<Item = LabeledPoint>) {
        self.pairs.extend(more);
    }
}

/// Hidden labels for every pool point, indexed by pool id. Only the AL
/// harness reveals them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelOracle {
    labels: Vec<f64>,
}

impl LabelOracle {
    pub fn label(&self, id: usize) -> Option<f64> {
        self.labels.get(id).copied()
    }

    pub fn reveal(&self, points: &[PoolPoint]) -> Result<Vec<LabeledPoint>> {
        points
            .iter()
            .map(|p| {
                self.label(p.id)
                    .map(|y| LabeledPoint { id: p.id, x: p.x, y })
                    .ok_or_else(|| Error::invalid(format!("no hidden label for pool id {}", p.id)))
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConfig {
    /// Standard deviation of the additive label noise.
    pub noise_sd: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { noise_sd: 0.1 }
    }
}

fn draw_xs(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn noisy_labels(xs: &[f64], noise_sd: f64, rng: &mut Rng) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let eps: f64 = rng.sample(StandardNormal);
            target_mean(x) + noise_sd * eps
        })
        .collect()
}

/// Pool of `n` standard-normal inputs with eagerly generated hidden labels.
/// Inputs and noise come from separate streams of `rng_seed`.
pub fn sample_pool(n: usize, noise_sd: f64, rng_seed: u64) -> Result<(PoolSet, LabelOracle)> {
    if n == 0 {
        return Err(Error::invalid("pool size must be at least 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::invalid(format!("noise scale must be finite and >= 0, got {noise_sd}")));
    }
    let xs = draw_xs(n, &mut rng::stream(rng_seed, streams::POOL));
    let labels = noisy_labels(&xs, noise_sd, &mut rng::stream(rng_seed, streams::POOL_NOISE));
    let points = xs
        .into_iter()
        .enumerate()
        .map(|(id, x)| PoolPoint { id, x })
        .collect();
    Ok((PoolSet { points }, LabelOracle { labels }))
}

/// Labeled test set drawn from the same generative process. Callers pass a
/// seed different from the pool seed.
pub fn sample_test_set(n: usize, noise_sd: f64, rng_seed: u64) -> TrainSet {
    let xs = draw_xs(n, &mut rng::stream(rng_seed, streams::TEST));
    let ys = noisy_labels(&xs, noise_sd, &mut rng::stream(rng_seed, streams::TEST_NOISE));
    TrainSet {
        pairs: xs
            .into_iter()
            .zip(ys)
            .enumerate()
            .map(|(id, (x, y))| LabeledPoint { id, x, y })
            .collect(),
    }
}

/// Draws `b0` pool points uniformly without replacement, labels them from the
/// oracle and removes them from the pool.
pub fn draw_seed_set(
    pool: &PoolSet,
    oracle: &LabelOracle,
    b0: usize,
    rng: &mut Rng,
) -> Result<(TrainSet, PoolSet)> {
    if b0 > pool.len() {
        return Err(Error::invalid(format!(
            "seed size {b0} exceeds pool size {}",
            pool.len()
        )));
    }
    let mut positions = index::sample(rng, pool.len(), b0).into_vec();
    positions.sort_unstable();
    let mut rest = pool.clone();
    let removed = rest.remove_positions(&positions)?;
    Ok((TrainSet::new(oracle.reveal(&removed)?), rest))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Train,
    Test,
}

/// One line of a dataset snapshot.
///
/// Layout: UTF-8, one compact JSON object per line terminated by `\n`, keys in
/// the fixed order `index`, `x`, `y_hidden`, `split`. Reals are written in the
/// shortest decimal form that round-trips to the same `f64`, so reading a
/// snapshot back yields bit-identical values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRecord {
    pub index: usize,
    pub x: f64,
    pub y_hidden: f64,
    pub split: Split,
}

pub fn write_snapshot<W: Write>(mut w: W, records: &[SnapshotRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_snapshot(text: &str) -> Result<Vec<SnapshotRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SnapshotRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("snapshot line {}: {e}", lineno + 1)))?;
        if !rec.x.is_finite() || !rec.y_hidden.is_finite() {
            return Err(Error::Parse(format!("snapshot line {}: non-finite value", lineno + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_snapshot<R: BufRead>(mut r: R) -> Result<Vec<SnapshotRecord>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    parse_snapshot(&text)
}

pub fn save_snapshot(path: &Path, records: &[SnapshotRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_snapshot(&mut w, records)?;
    w.flush()?;
    Ok(())
}

/// Snapshot records for a pool (with its hidden labels), a train set and a
/// test set.
pub fn snapshot_records(
    pool: &PoolSet,
    oracle: &LabelOracle,
    train: &TrainSet,
    test: &TrainSet,
) -> Result<Vec<SnapshotRecord>> {
    let mut out = Vec::with_capacity(pool.len() + train.len() + test.len());
    for p in pool.points() {
        let y = oracle
            .label(p.id)
            .ok_or_else(|| Error::invalid(format!("no hidden label for pool id {}", p.id)))?;
        out.push(SnapshotRecord { index: p.id, x: p.x, y_hidden: y, split: Split::Pool });
    }
    for p in &train.pairs {
        out.push(SnapshotRecord { index: p.id, x: p.x, y_hidden: p.y, split: Split::Train });
    }
    for p in &test.pairs {
        out.push(SnapshotRecord { index: p.id, x: p.x, y_hidden: p.y, split: Split::Test });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the generator, evaluated term by term.
    fn reference_target(x: f64) -> f64 {
        let p = -0.6667 - 0.6012 * x - 1.0172 * x.powi(2) - 0.7687 * x.powi(3)
            + 1.4680 * x.powi(5)
            - 0.1678 * x.powi(6);
        p * (std::f64::consts::PI * x).sin() * (-0.5 * x * x).exp()
    }

    #[test]
    fn target_mean_known_values() {
        assert_eq!(target_mean(0.0), 0.0);
        assert!(target_mean(1.0).abs() < 1e-14);
        // frozen from an independent evaluator
        assert!((target_mean(0.5) - -1.124684388484835).abs() < 1e-12);
        assert!((target_mean(-0.3) - 0.4337504622735979).abs() < 1e-12);
        assert!((target_mean(2.2) - 2.1707696410766664).abs() < 1e-12);
        for i in 0..50 {
            let x = -4.0 + 0.17 * i as f64;
            assert!((target_mean(x) - reference_target(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn target_mean_vanishes_at_integers() {
        for k in -6..=6 {
            assert!(target_mean(k as f64).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn pool_is_deterministic() {
        let a = sample_pool(3, 0.1, 7).unwrap();
        let b = sample_pool(3, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = sample_pool(3, 0.1, 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_noise_labels_equal_target() {
        let (pool, oracle) = sample_pool(50, 0.0, 11).unwrap();
        for p in pool.points() {
            assert_eq!(oracle.label(p.id).unwrap(), target_mean(p.x));
        }
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(sample_pool(0, 0.1, 1).is_err());
        assert!(sample_pool(3, -1.0, 1).is_err());
    }

    #[test]
    fn large_pool_moments() {
        let (pool, _) = sample_pool(2000, 0.1, 1).unwrap();
        let xs = pool.xs();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_eq!(pool.len(), 2000);
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn test_set_shapes() {
        let t = sample_test_set(1000, 0.1, 99);
        assert_eq!(t.len(), 1000);
        assert_eq!(t, sample_test_set(1000, 0.1, 99));
        let one = sample_test_set(1, 0.1, 5);
        assert_eq!(one.len(), 1);
        assert!(one.pairs[0].y.is_finite());
    }

    #[test]
    fn seed_set_partitions_pool() {
        let (pool, oracle) = sample_pool(2000, 0.1, 3).unwrap();
        let mut rng = rng::stream(3, streams::SEED_SET);
        let (train, rest) = draw_seed_set(&pool, &oracle, 10, &mut rng).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(rest.len(), 1990);
        let mut ids: Vec<usize> = train.pairs.iter().map(|p| p.id).chain(rest.ids()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..2000).collect::<Vec<_>>());
        for p in &train.pairs {
            assert_eq!(oracle.label(p.id), Some(p.y));
        }
    }

    #[test]
    fn seed_set_edges() {
        let (pool, oracle) = sample_pool(5, 0.1, 3).unwrap();
        let mut rng = rng::stream(0, streams::SEED_SET);
        let (t, rest) = draw_seed_set(&pool, &oracle, 5, &mut rng).unwrap();
        assert_eq!((t.len(), rest.len()), (5, 0));
        let (t, rest) = draw_seed_set(&pool, &oracle, 0, &mut rng).unwrap();
        assert!(t.is_empty());
        assert_eq!(rest, pool);
        assert!(draw_seed_set(&pool, &oracle, 6, &mut rng).is_err());
    }

    #[test]
    fn snapshot_layout_is_fixed() {
        let rec = SnapshotRecord { index: 4, x: 0.1, y_hidden: -2.5, split: Split::Pool };
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"index\":4,\"x\":0.1,\"y_hidden\":-2.5,\"split\":\"pool\"}\n"
        );
    }

    #[test]
    fn snapshot_rejects_garbage() {
        assert!(parse_snapshot("{\"index\":1}").is_err());
        assert!(parse_snapshot("{\"index\":1,\"x\":0,\"y_hidden\":0,\"split\":\"pool\",\"z\":1}").is_err());
        assert!(parse_snapshot("not json").is_err());
        assert!(parse_snapshot("").unwrap().is_empty());
    }

    proptest::proptest! {
        #[test]
        fn snapshot_roundtrip_bit_exact(xs in proptest::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 0..20)) {
            let records: Vec<_> = xs.iter().enumerate().map(|(i, &(x, y))| SnapshotRecord {
                index: i, x, y_hidden: y, split: if i % 2 == 0 { Split::Pool } else { Split::Test },
            }).collect();
            let mut buf = Vec::new();
            write_snapshot(&mut buf, &records).unwrap();
            let back = parse_snapshot(std::str::from_utf8(&buf).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                proptest::prop_assert_eq!(a.x.to_bits(), b.x.to_bits());
                proptest::prop_assert_eq!(a.y_hidden.to_bits(), b.y_hidden.to_bits());
            }
        }
    }
}
