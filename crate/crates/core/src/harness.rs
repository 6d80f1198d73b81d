//! Active-learning driver, lookahead priming and the transfer and
//! temperature-sweep experiments.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{batchbald_greedy, bald_top_b, random_batch, stochastic_bald, GreedyMode};
use crate::data::{draw_seed_set, sample_pool, sample_test_set, LabelOracle, LabeledPoint, PoolSet, TrainSet};
use crate::env::BatchState;
use crate::error::{Error, Result};
use crate::gp::{fit_hyperparams, sample_labels, FitConfig, GpModel, KernelParams};
use crate::nn::Adam;
use crate::oracle::{enumerate_rewards, exact_policy_marginal, jsd};
use crate::policy::{sample_action, PolicyArch, PolicyParams};
use crate::reward::{bald_scores, BatchReward, CovarianceMode, PoolCovariance, RewardSpec};
use crate::rng::{self, streams, Rng};
use crate::subtb::{sample_batches, select_query, train, Task, TraceRecord, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Bald,
    StochasticBald,
    Batchbald,
    Gfn,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Random, Strategy::Bald, Strategy::StochasticBald, Strategy::Batchbald, Strategy::Gfn];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Bald => "bald",
            Strategy::StochasticBald => "stochastic-bald",
            Strategy::Batchbald => "batchbald",
            Strategy::Gfn => "gfn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected one of random, bald, stochastic-bald, batchbald, gfn"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Reinit,
    Continue,
    Lookahead,
}

impl TransferMode {
    pub const ALL: [TransferMode; 3] = [TransferMode::Reinit, TransferMode::Continue, TransferMode::Lookahead];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Reinit => "reinit",
            TransferMode::Continue => "continue",
            TransferMode::Lookahead => "lookahead",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferMode::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown transfer mode {s:?}; expected reinit, continue or lookahead"))
            })
    }
}

/// Sampler architecture and training budget.
#[derive(Clone, Debug, PartialEq)]
pub struct GfnSettings {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub train_context: bool,
    /// Multiply the policy heads by `1/T`.
    pub scale_heads: bool,
    pub trainer: TrainerConfig,
    /// Iterations per AL step when the policy is carried over
    /// (continue / lookahead). Fresh policies use `trainer.iterations`.
    pub warm_start_iterations: usize,
    /// Iterations after each hallucinated batch during lookahead.
    pub lookahead_iterations: usize,
    pub inference_samples: usize,
}

impl Default for GfnSettings {
    fn default() -> Self {
        GfnSettings {
            hidden: 256,
            encoder_layers: 2,
            train_context: false,
            scale_heads: true,
            trainer: TrainerConfig::default(),
            warm_start_iterations: 1000,
            lookahead_iterations: 100,
            inference_samples: 20,
        }
    }
}

impl GfnSettings {
    pub fn arch(&self, temperature: f64) -> PolicyArch {
        PolicyArch {
            hidden: self.hidden,
            encoder_layers: self.encoder_layers,
            train_context: self.train_context,
            output_scale: if self.scale_heads { 1.0 / temperature } else { 1.0 },
        }
    }

    fn with_iterations(&self, iterations: usize) -> TrainerConfig {
        TrainerConfig { iterations, ..self.trainer }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ALConfig {
    pub seed: u64,
    pub pool_size: usize,
    pub test_size: usize,
    pub noise_sd: f64,
    pub seed_size: usize,
    pub query_size: usize,
    pub al_steps: usize,
    pub strategy: Strategy,
    pub transfer_mode: TransferMode,
    pub lookahead_samples: usize,
    /// Refit GP hyperparameters on every hallucinated training set.
    pub lookahead_refit_gp: bool,
    pub temperature: f64,
    pub stochastic_bald_temperature: f64,
    pub covariance: CovarianceMode,
    pub gp: FitConfig,
    pub gfn: GfnSettings,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            seed: 0,
            pool_size: 2000,
            test_size: 500,
            noise_sd: 0.1,
            seed_size: 10,
            query_size: 10,
            al_steps: 5,
            strategy: Strategy::Gfn,
            transfer_mode: TransferMode::Reinit,
            lookahead_samples: 10,
            lookahead_refit_gp: true,
            temperature: 0.1,
            stochastic_bald_temperature: 0.1,
            covariance: CovarianceMode::Posterior,
            gp: FitConfig::default(),
            gfn: GfnSettings::default(),
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.query_size == 0 {
            return bad("query_size must be at least 1".into());
        }
        if self.query_size > self.pool_size {
            return bad(format!(
                "query_size {} exceeds pool_size {}",
                self.query_size, self.pool_size
            ));
        }
        let budget = self.seed_size + self.al_steps * self.query_size;
        if budget > self.pool_size {
            return bad(format!(
                "seed_size {} + al_steps {} x query_size {} = {budget} exceeds pool_size {}",
                self.seed_size, self.al_steps, self.query_size, self.pool_size
            ));
        }
        if self.seed_size == 0 {
            return bad("seed_size must be at least 1 (the GP is fitted on the seed set)".into());
        }
        if self.transfer_mode == TransferMode::Lookahead && self.strategy != Strategy::Gfn {
            return bad(format!(
                "transfer_mode lookahead needs strategy gfn, got {}",
                self.strategy
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.stochastic_bald_temperature > 0.0 && self.stochastic_bald_temperature.is_finite()) {
            return bad(format!(
                "stochastic_bald_temperature must be positive, got {}",
                self.stochastic_bald_temperature
            ));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be finite and >= 0, got {}", self.noise_sd));
        }
        if self.test_size == 0 {
            return bad("test_size must be at least 1".into());
        }
        if self.gfn.hidden == 0 || self.gfn.encoder_layers == 0 {
            return bad("hidden and encoder_layers must be at least 1".into());
        }
        if self.strategy == Strategy::Gfn && self.gfn.inference_samples == 0 {
            return bad("inference_samples must be at least 1".into());
        }
        self.gfn.trainer.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gp.init.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Pool, hidden labels and test set for one seed replica.
#[derive(Clone, Debug)]
pub struct ALData {
    pub pool: PoolSet,
    pub oracle: LabelOracle,
    pub test: TrainSet,
}

impl ALData {
    pub fn generate(cfg: &ALConfig) -> Result<Self> {
        let (pool, oracle) = sample_pool(cfg.pool_size, cfg.noise_sd, cfg.seed)?;
        let test = sample_test_set(cfg.test_size, cfg.noise_sd, cfg.seed);
        Ok(ALData { pool, oracle, test })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    /// Mean negative log predictive density of the noisy test labels.
    pub nlpd: f64,
}

pub fn evaluate(model: &GpModel, test: &TrainSet) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let xs = test.xs();
    let mean = model.posterior_mean(&xs);
    let var = model.posterior_var(&xs);
    let noise = model.noise_var();
    let n = test.len() as f64;
    let (mut se, mut nlpd) = (0.0, 0.0);
    for ((y, m), v) in test.ys().iter().zip(mean.iter()).zip(var) {
        let r = y - m;
        let v = v.max(0.0) + noise;
        se += r * r;
        nlpd += 0.5 * (2.0 * PI * v).ln() + 0.5 * r * r / v;
    }
    Ok(Evaluation { mse: se / n, nlpd: nlpd / n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_size: usize,
    pub test_loss: f64,
    pub test_nlpd: f64,
    /// Pool ids of the acquired points; empty for the seed-set record.
    pub selected_batch: Vec<usize>,
    pub batch_log_reward: Option<f64>,
    pub batch_jmi: Option<f64>,
    pub kernel: KernelParams,
    pub gfn_iterations: usize,
    /// Policy evaluations spent on inference sampling.
    pub policy_eval_count: u64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub phase: String,
    pub records: Vec<TraceRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub traces: Vec<StepTrace>,
    pub error: Option<String>,
}

impl RunLog {
    pub fn result(&self) -> Result<()> {
        match &self.error {
            Some(e) => Err(Error::invalid(format!("active-learning run failed: {e}"))),
            None => Ok(()),
        }
    }

    pub fn final_test_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.test_loss)
    }

    /// Copy with wall times zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunLog {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.wall_time = 0.0;
        }
        out
    }

    /// One JSON object per step.
    pub fn write_steps<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// One JSON object per trace record, tagged with its step and phase.
    pub fn write_traces<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            phase: &'a str,
            #[serde(flatten)]
            rec: &'a TraceRecord,
        }
        for t in &self.traces {
            for rec in &t.records {
                serde_json::to_writer(&mut w, &Line { step: t.step, phase: &t.phase, rec })?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

fn fit_model(train: &TrainSet, gp: &FitConfig) -> Result<GpModel> {
    let fit = fit_hyperparams(train, gp)?;
    GpModel::new(train, gp.nu, fit.params)
}

fn make_reward(model: GpModel, pool: &PoolSet, cfg: &ALConfig) -> Result<BatchReward> {
    Ok(BatchReward::new(
        PoolCovariance::new(model, pool.xs(), cfg.covariance),
        RewardSpec::new(cfg.temperature)?,
    ))
}

/// One forward trajectory from the ε-mixed policy.
fn sample_exploratory(params: &PolicyParams, task: &Task, epsilon: f64, rng: &mut Rng) -> Result<BatchState> {
    let env = task.env()?;
    let ctx = task.context(params)?;
    let mut s = env.initial_state();
    while !env.is_terminal(&s) {
        let out = ctx.evaluate(&s)?;
        s = env.apply(&s, sample_action(&out, epsilon, rng)?)?;
    }
    Ok(s)
}

/// Primes the policy on `L` hallucinated next-step reward distributions.
/// `train`, `pool` and `model` describe the current real step and are not
/// modified. Returns the training trace of every round.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_update(
    params: &mut PolicyParams,
    opt: &mut Adam,
    train_set: &TrainSet,
    pool: &PoolSet,
    reward: &BatchReward,
    cfg: &ALConfig,
    rng: &mut Rng,
) -> Result<Vec<Vec<TraceRecord>>> {
    let mut traces = Vec::with_capacity(cfg.lookahead_samples);
    let model = reward.cov.gp();
    let trainer = cfg.gfn.with_iterations(cfg.gfn.lookahead_iterations);
    for _ in 0..cfg.lookahead_samples {
        let task = Task {
            reward,
            train: cfg.gfn.train_context.then_some(train_set),
            batch_size: cfg.query_size,
        };
        let batch = sample_exploratory(params, &task, cfg.gfn.trainer.epsilon, rng)?;
        let positions = batch.indices();
        let xs: Vec<f64> = positions.iter().map(|&p| pool.points()[p].x).collect();
        let ys = sample_labels(&model.posterior(&xs)?, rng);

        let mut train_h = train_set.clone();
        train_h.extend(
            positions
                .iter()
                .zip(ys)
                .map(|(&p, y)| LabeledPoint { id: pool.points()[p].id, x: pool.points()[p].x, y }),
        );
        let mut pool_h = pool.clone();
        pool_h.remove_positions(positions)?;
        let model_h = if cfg.lookahead_refit_gp {
            fit_model(&train_h, &cfg.gp)?
        } else {
            GpModel::new(&train_h, model.kernel.nu, model.kernel.params)?
        };
        let reward_h = make_reward(model_h, &pool_h, cfg)?;
        let task_h = Task {
            reward: &reward_h,
            train: cfg.gfn.train_context.then_some(&train_h),
            batch_size: cfg.query_size,
        };
        traces.push(train(params, opt, &task_h, &trainer, rng, |_, _| Ok(()))?);
    }
    Ok(traces)
}

struct Selection {
    batch: BatchState,
    log_reward: Option<f64>,
    evals: u64,
    gfn_iterations: usize,
}

/// Runs the active-learning loop. Failures are recorded in `RunLog::error`
/// and the records written so far are kept.
pub fn run_al(cfg: &ALConfig, data: &ALData) -> RunLog {
    let mut log = RunLog::default();
    if let Err(e) = cfg.validate().and_then(|_| run_al_inner(cfg, data, &mut log)) {
        log.error = Some(e.to_string());
    }
    log
}

fn run_al_inner(cfg: &ALConfig, data: &ALData, log: &mut RunLog) -> Result<()> {
    let start = Instant::now();
    let (mut train_set, mut pool) =
        draw_seed_set(&data.pool, &data.oracle, cfg.seed_size, &mut rng::stream(cfg.seed, streams::SEED_SET))?;
    let mut model = fit_model(&train_set, &cfg.gp)?;
    let ev = evaluate(&model, &data.test)?;
    log.steps.push(StepRecord {
        step: 0,
        train_size: train_set.len(),
        test_loss: ev.mse,
        test_nlpd: ev.nlpd,
        selected_batch: vec![],
        batch_log_reward: None,
        batch_jmi: None,
        kernel: model.kernel.params,
        gfn_iterations: 0,
        policy_eval_count: 0,
        wall_time: start.elapsed().as_secs_f64(),
    });

    let mut carried: Option<(PolicyParams, Adam)> = None;
    for step in 1..=cfg.al_steps {
        let t0 = Instant::now();
        let idx = step as u64;
        let reward = make_reward(model, &pool, cfg)?;
        let b = cfg.query_size;
        let mut strategy_rng = rng::substream(cfg.seed, streams::STRATEGY, idx);
        let sel = match cfg.strategy {
            Strategy::Random => plain(random_batch(pool.len(), b, &mut strategy_rng)?),
            Strategy::Bald => plain(bald_top_b(&bald_scores(&reward.cov), b)?),
            Strategy::StochasticBald => plain(stochastic_bald(
                &bald_scores(&reward.cov),
                b,
                cfg.stochastic_bald_temperature,
                &mut strategy_rng,
            )?),
            Strategy::Batchbald => plain(batchbald_greedy(&reward.cov, b, GreedyMode::Incremental)?),
            Strategy::Gfn => {
                let (mut params, mut opt, iterations) = match carried.take() {
                    Some((p, o)) if cfg.transfer_mode != TransferMode::Reinit => {
                        (p, o, cfg.gfn.warm_start_iterations)
                    }
                    _ => {
                        let p = PolicyParams::init(
                            cfg.gfn.arch(cfg.temperature),
                            &mut rng::substream(cfg.seed, streams::GFN_INIT, idx),
                        )?;
                        let o = Adam::new(p.len());
                        (p, o, cfg.gfn.trainer.iterations)
                    }
                };
                let task = Task {
                    reward: &reward,
                    train: cfg.gfn.train_context.then_some(&train_set),
                    batch_size: b,
                };
                let trace = train(
                    &mut params,
                    &mut opt,
                    &task,
                    &cfg.gfn.with_iterations(iterations),
                    &mut rng::substream(cfg.seed, streams::GFN_TRAIN, idx),
                    |_, _| Ok(()),
                )?;
                log.traces.push(StepTrace { step, phase: "train".into(), records: trace });
                let (batch, log_reward, evals) = {
                    let ctx = task.context(&params)?;
                    ctx.reset_evaluations();
                    let samples = sample_batches(
                        &ctx,
                        &reward,
                        cfg.gfn.inference_samples,
                        &mut rng::substream(cfg.seed, streams::GFN_SAMPLE, idx),
                    )?;
                    let batch = select_query(&samples)?;
                    let lr = reward.state_log_reward(&batch)?;
                    (batch, lr, ctx.evaluations())
                };
                if cfg.transfer_mode == TransferMode::Lookahead && cfg.lookahead_samples > 0 {
                    let traces = lookahead_update(
                        &mut params,
                        &mut opt,
                        &train_set,
                        &pool,
                        &reward,
                        cfg,
                        &mut rng::substream(cfg.seed, streams::LOOKAHEAD, idx),
                    )?;
                    for (i, records) in traces.into_iter().enumerate() {
                        log.traces.push(StepTrace { step, phase: format!("lookahead-{}", i + 1), records });
                    }
                }
                carried = Some((params, opt));
                Selection { batch, log_reward: Some(log_reward), evals, gfn_iterations: iterations }
            }
        };
        let jmi = reward.jmi(&sel.batch)?;
        let log_reward = sel.log_reward;

        let removed = pool.remove_positions(sel.batch.indices())?;
        let ids: Vec<usize> = removed.iter().map(|p| p.id).collect();
        train_set.extend(data.oracle.reveal(&removed)?);
        model = fit_model(&train_set, &cfg.gp)?;
        let ev = evaluate(&model, &data.test)?;
        log::info!(
            "step {step}: {} train points, test mse {:.5}, batch jmi {jmi:.4}",
            train_set.len(),
            ev.mse
        );
        log.steps.push(StepRecord {
            step,
            train_size: train_set.len(),
            test_loss: ev.mse,
            test_nlpd: ev.nlpd,
            selected_batch: ids,
            batch_log_reward: log_reward,
            batch_jmi: Some(jmi),
            kernel: model.kernel.params,
            gfn_iterations: sel.gfn_iterations,
            policy_eval_count: sel.evals,
            wall_time: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

fn plain(batch: BatchState) -> Selection {
    Selection { batch, log_reward: None, evals: 0, gfn_iterations: 0 }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: String,
    pub labelled_count: usize,
    pub test_loss_mean: f64,
    pub test_loss_stderr: f64,
    pub runs: usize,
}

/// Test loss per (strategy, labelled count) across seed replicas.
pub fn aggregate_runs(runs: &[(Strategy, RunLog)]) -> Vec<CurveRow> {
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<f64>> = Default::default();
    let mut order: Vec<String> = Vec::new();
    for (s, log) in runs {
        if !order.contains(&s.name().to_string()) {
            order.push(s.name().to_string());
        }
        for rec in &log.steps {
            groups.entry((s.name().to_string(), rec.train_size)).or_default().push(rec.test_loss);
        }
    }
    let mut rows = Vec::new();
    for name in order {
        for ((s, count), losses) in groups.iter().filter(|((s, _), _)| *s == name) {
            let (m, se) = mean_stderr(losses);
            rows.push(CurveRow {
                strategy: s.clone(),
                labelled_count: *count,
                test_loss_mean: m,
                test_loss_stderr: se,
                runs: losses.len(),
            });
        }
    }
    rows
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub al: ALConfig,
    pub temperatures: Vec<f64>,
    /// Sampled batches per stochastic strategy and temperature.
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    /// Empty for temperature-free strategies.
    pub temperature: Option<f64>,
    pub mean_jmi: f64,
    pub stderr_jmi: f64,
    pub runs: usize,
}

/// JMI of batches chosen by every strategy on the first acquisition step.
/// The sampler is trained once per temperature; each run is one batch drawn
/// from the trained policy.
pub fn jmi_sweep(cfg: &SweepConfig, data: &ALData) -> Result<Vec<SweepRow>> {
    let al = &cfg.al;
    al.validate()?;
    if cfg.runs == 0 {
        return Err(Error::Config("sweep needs at least one run".into()));
    }
    let (train_set, pool) =
        draw_seed_set(&data.pool, &data.oracle, al.seed_size, &mut rng::stream(al.seed, streams::SEED_SET))?;
    let model = fit_model(&train_set, &al.gp)?;
    let cov = PoolCovariance::new(model, pool.xs(), al.covariance);
    let b = al.query_size;
    let scores = bald_scores(&cov);
    let jmi = |s: &BatchState| crate::reward::joint_mi(&cov.submatrix(s.indices()), cov.noise_var());
    let row = |name: &str, t: Option<f64>, vals: &[f64]| {
        let (m, se) = mean_stderr(vals);
        SweepRow { strategy: name.into(), temperature: t, mean_jmi: m, stderr_jmi: se, runs: vals.len() }
    };

    let mut rows = vec![
        row("batchbald", None, &[jmi(&batchbald_greedy(&cov, b, GreedyMode::Incremental)?)?]),
        row("bald", None, &[jmi(&bald_top_b(&scores, b)?)?]),
    ];
    let mut r = rng::substream(al.seed, streams::STRATEGY, 0);
    let vals = (0..cfg.runs).map(|_| jmi(&random_batch(pool.len(), b, &mut r)?)).collect::<Result<Vec<_>>>()?;
    rows.push(row("random", None, &vals));

    for (ti, &t) in cfg.temperatures.iter().enumerate() {
        let mut r = rng::substream(al.seed, streams::STRATEGY, ti as u64 + 1);
        let vals = (0..cfg.runs)
            .map(|_| jmi(&stochastic_bald(&scores, b, t, &mut r)?))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row("stochastic-bald", Some(t), &vals));

        let reward = BatchReward::new(cov.clone(), RewardSpec::new(t)?);
        let mut params =
            PolicyParams::init(al.gfn.arch(t), &mut rng::substream(al.seed, streams::GFN_INIT, ti as u64))?;
        let mut opt = Adam::new(params.len());
        let task = Task { reward: &reward, train: al.gfn.train_context.then_some(&train_set), batch_size: b };
        train(
            &mut params,
            &mut opt,
            &task,
            &al.gfn.trainer,
            &mut rng::substream(al.seed, streams::GFN_TRAIN, ti as u64),
            |rec, _| {
                if rec.iter % 100 == 0 {
                    log::debug!("T={t} iter {} loss {:.4}", rec.iter, rec.mean_loss);
                }
                Ok(())
            },
        )?;
        let ctx = task.context(&params)?;
        let samples =
            sample_batches(&ctx, &reward, cfg.runs, &mut rng::substream(al.seed, streams::GFN_SAMPLE, ti as u64))?;
        let vals: Vec<f64> = samples.iter().map(|s| s.log_reward * t).collect();
        log::info!("T={t}: gfn mean jmi {:.4}", mean_stderr(&vals).0);
        rows.push(row("gfn", Some(t), &vals));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    /// Pool, seed and query sizes, temperature, sampler settings. The first
    /// step trains for `gfn.trainer.iterations`.
    pub al: ALConfig,
    pub checkpoint_every: usize,
    pub max_iterations: usize,
    pub enumeration_cap: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsdPoint {
    pub mode: TransferMode,
    pub iteration: usize,
    pub jsd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferCurve {
    pub mode: TransferMode,
    /// `(iteration, jsd)`, starting at iteration 0.
    pub points: Vec<(usize, f64)>,
}

impl TransferCurve {
    pub fn initial_jsd(&self) -> f64 {
        self.points[0].1
    }

    /// First checkpoint with divergence below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.1 < threshold).map(|p| p.0)
    }

    pub fn rows(&self) -> Vec<JsdPoint> {
        self.points.iter().map(|&(iteration, jsd)| JsdPoint { mode: self.mode, iteration, jsd }).collect()
    }
}

/// Trains a sampler on the first acquisition step, acquires its best batch,
/// then continues training on the second step from each transfer mode and
/// tracks the exact divergence to the new reward distribution.
pub fn transfer_experiment(cfg: &TransferConfig, data: &ALData) -> Result<Vec<TransferCurve>> {
    let al = &cfg.al;
    let probe = ALConfig { strategy: Strategy::Gfn, transfer_mode: TransferMode::Lookahead, al_steps: 1, ..al.clone() };
    probe.validate()?;
    if cfg.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint_every must be at least 1".into()));
    }
    let b = al.query_size;
    let (mut train_set, mut pool) =
        draw_seed_set(&data.pool, &data.oracle, al.seed_size, &mut rng::stream(al.seed, streams::SEED_SET))?;
    let reward_a = make_reward(fit_model(&train_set, &al.gp)?, &pool, al)?;

    let mut params_a = PolicyParams::init(al.gfn.arch(al.temperature), &mut rng::substream(al.seed, streams::GFN_INIT, 1))?;
    let mut opt_a = Adam::new(params_a.len());
    let task_a = Task { reward: &reward_a, train: al.gfn.train_context.then_some(&train_set), batch_size: b };
    train(&mut params_a, &mut opt_a, &task_a, &al.gfn.trainer, &mut rng::substream(al.seed, streams::GFN_TRAIN, 1), |_, _| Ok(()))?;
    let batch = {
        let ctx = task_a.context(&params_a)?;
        let samples =
            sample_batches(&ctx, &reward_a, al.gfn.inference_samples, &mut rng::substream(al.seed, streams::GFN_SAMPLE, 1))?;
        select_query(&samples)?
    };
    let mut primed = (params_a.clone(), opt_a.clone());
    let lookahead_cfg = ALConfig { lookahead_samples: al.lookahead_samples.max(1), ..al.clone() };
    lookahead_update(
        &mut primed.0,
        &mut primed.1,
        &train_set,
        &pool,
        &reward_a,
        &lookahead_cfg,
        &mut rng::substream(al.seed, streams::LOOKAHEAD, 1),
    )?;

    let removed = pool.remove_positions(batch.indices())?;
    train_set.extend(data.oracle.reveal(&removed)?);
    let reward_b = make_reward(fit_model(&train_set, &al.gp)?, &pool, al)?;
    let target = enumerate_rewards(&reward_b, b, cfg.enumeration_cap)?.probs;
    let task_b = Task { reward: &reward_b, train: al.gfn.train_context.then_some(&train_set), batch_size: b };

    let mut curves = Vec::new();
    for mode in TransferMode::ALL {
        let (mut params, mut opt) = match mode {
            TransferMode::Reinit => {
                let p = PolicyParams::init(al.gfn.arch(al.temperature), &mut rng::substream(al.seed, streams::GFN_INIT, 2))?;
                let o = Adam::new(p.len());
                (p, o)
            }
            TransferMode::Continue => (params_a.clone(), opt_a.clone()),
            TransferMode::Lookahead => primed.clone(),
        };
        let divergence = |p: &PolicyParams| -> Result<f64> {
            let ctx = task_b.context(p)?;
            Ok(jsd(&target, &exact_policy_marginal(&ctx, b, cfg.enumeration_cap)?))
        };
        let mut points = vec![(0, divergence(&params)?)];
        let mut rng_b = rng::substream(al.seed, streams::GFN_TRAIN, 2);
        let mut done = 0;
        while done < cfg.max_iterations {
            let chunk = cfg.checkpoint_every.min(cfg.max_iterations - done);
            train(&mut params, &mut opt, &task_b, &al.gfn.with_iterations(chunk), &mut rng_b, |_, _| Ok(()))?;
            done += chunk;
            points.push((done, divergence(&params)?));
        }
        log::info!(
            "transfer {mode}: jsd {:.4} at 0, {:.4} at {done}",
            points[0].1,
            points.last().unwrap().1
        );
        curves.push(TransferCurve { mode, points });
    }
    Ok(curves)
}
