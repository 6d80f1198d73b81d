use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use batchgfn::config::Config;
use batchgfn::data::{draw_seed_set, save_snapshot, snapshot_records};
use batchgfn::gp::{fit_hyperparams, GpCheckpoint, GpModel, GP_CHECKPOINT_FORMAT};
use batchgfn::harness::{
    aggregate_runs, jmi_sweep, run_al, transfer_experiment, write_csv, ALData, Strategy,
};
use batchgfn::nn::Adam;
use batchgfn::oracle::{density_parity, enumerate_rewards, exact_policy_marginal, jsd, DistributionReport};
use batchgfn::policy::{PolicyCheckpoint, PolicyParams};
use batchgfn::reward::{BatchReward, PoolCovariance, RewardSpec};
use batchgfn::rng::{self, streams};
use batchgfn::subtb::{sample_batches, train, Task, TraceRecord};

#[derive(Parser)]
#[command(name = "batchgfn", version, about = "Batch active learning with a GFlowNet batch sampler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pool, seed set and test set and write a snapshot.
    SynthData(Common),
    /// Fit GP hyperparameters on the seed set.
    FitGp(Common),
    /// Train the sampler on the first acquisition step.
    TrainGfn(Common),
    /// Compare the trained sampler's exact marginal with the reward distribution.
    OracleCompare(Common),
    /// JMI of every strategy's batch at several temperatures.
    JmiSweep(Common),
    /// Full active-learning runs for every configured strategy and replica.
    AlRun(Common),
    /// Divergence curves when moving the sampler to the next acquisition step.
    TransferExp(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Must not exist or be empty.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategy names.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    query_size: Option<usize>,
    #[arg(long)]
    transfer_mode: Option<String>,
    #[arg(long)]
    lookahead_samples: Option<usize>,
    /// Any other key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

struct RunDir {
    path: PathBuf,
    log: BufWriter<File>,
}

impl RunDir {
    fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            let non_empty = fs::read_dir(path)
                .with_context(|| format!("cannot read {}", path.display()))?
                .next()
                .is_some();
            if non_empty {
                bail!("refusing to write into non-empty directory {}", path.display());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        let log = BufWriter::new(File::create(path.join("run.log"))?);
        Ok(RunDir { path: path.to_path_buf(), log })
    }

    fn note(&mut self, msg: impl AsRef<str>) -> Result<()> {
        log::info!("{}", msg.as_ref());
        writeln!(self.log, "{}", msg.as_ref())?;
        Ok(())
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("cannot create {}", p.display()))?))
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = self.file(name)?;
        write_csv(&mut w, rows)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SeedManifest<'a> {
    root_seed: u64,
    replica_seeds: Vec<u64>,
    rng: &'a str,
    streams: Vec<(String, String)>,
}

fn resolve(common: &Common, dir: &mut RunDir) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("seed", common.seed.map(|v| v.to_string()));
    push("strategies", common.strategy.clone());
    push("temperature", common.temperature.map(|v| format!("{v:?}")));
    push("pool_size", common.pool_size.map(|v| v.to_string()));
    push("query_size", common.query_size.map(|v| v.to_string()));
    push("transfer_mode", common.transfer_mode.clone());
    push("lookahead_samples", common.lookahead_samples.map(|v| v.to_string()));
    for kv in &common.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let (resolved, log) = cfg.with_overrides(&pairs).context("invalid overrides")?;
    cfg = resolved;
    for o in log {
        dir.note(format!("override {}: {} -> {}", o.key, o.old, o.new))?;
    }
    fs::write(dir.path.join("config.toml"), cfg.to_toml())?;
    let manifest = SeedManifest {
        root_seed: cfg.seed,
        replica_seeds: cfg.replica_seeds(),
        rng: "chacha8",
        streams: streams::ALL
            .iter()
            .map(|s| (s.to_string(), format!("{:016x}", rng::stream_id(s))))
            .collect(),
    };
    fs::write(dir.path.join("seeds.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(cfg)
}

/// First-step problem: seed set, fitted GP, reward over the remaining pool.
struct FirstStep {
    data: ALData,
    train: batchgfn::data::TrainSet,
    pool: batchgfn::data::PoolSet,
    fit: batchgfn::gp::FitReport,
    reward: BatchReward,
}

fn first_step(cfg: &Config, seed: u64) -> Result<FirstStep> {
    let al = cfg.al_config(Strategy::Gfn, seed)?;
    let data = ALData::generate(&al)?;
    let (train, pool) =
        draw_seed_set(&data.pool, &data.oracle, al.seed_size, &mut rng::stream(seed, streams::SEED_SET))?;
    let fit = fit_hyperparams(&train, &al.gp)?;
    let model = GpModel::new(&train, al.gp.nu, fit.params)?;
    let reward = BatchReward::new(PoolCovariance::new(model, pool.xs(), al.covariance), RewardSpec::new(al.temperature)?);
    Ok(FirstStep { data, train, pool, fit, reward })
}

fn write_trace(dir: &RunDir, name: &str, trace: &[TraceRecord]) -> Result<()> {
    let mut w = dir.file(name)?;
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a policy on the first step and writes its checkpoint and trace.
fn train_policy(cfg: &Config, step: &FirstStep, dir: &mut RunDir) -> Result<PolicyParams> {
    let al = cfg.al_config(Strategy::Gfn, cfg.seed)?;
    let mut params = PolicyParams::init(al.gfn.arch(al.temperature), &mut rng::substream(cfg.seed, streams::GFN_INIT, 1))?;
    let mut opt = Adam::new(params.len());
    let task = Task {
        reward: &step.reward,
        train: al.gfn.train_context.then_some(&step.train),
        batch_size: al.query_size,
    };
    let every = (al.gfn.trainer.iterations / 10).max(1);
    let t0 = Instant::now();
    let trace = train(
        &mut params,
        &mut opt,
        &task,
        &al.gfn.trainer,
        &mut rng::substream(cfg.seed, streams::GFN_TRAIN, 1),
        |r, _| {
            if r.iter % every == 0 {
                log::info!("iter {} loss {:.5} sampled log-reward {:.4}", r.iter, r.mean_loss, r.mean_sampled_log_reward);
            }
            Ok(())
        },
    )?;
    dir.note(format!("trained {} iterations in {:.1}s", trace.len(), t0.elapsed().as_secs_f64()))?;
    write_trace(dir, "trace.jsonl", &trace)?;
    let ck = PolicyCheckpoint { params: params.clone(), optimizer: Some(opt) };
    let mut w = dir.file("policy.bin")?;
    ck.write(&mut w)?;
    w.flush()?;
    Ok(params)
}

fn run(command: Command) -> Result<()> {
    let (common, name) = match &command {
        Command::SynthData(c) => (c, "synth-data"),
        Command::FitGp(c) => (c, "fit-gp"),
        Command::TrainGfn(c) => (c, "train-gfn"),
        Command::OracleCompare(c) => (c, "oracle-compare"),
        Command::JmiSweep(c) => (c, "jmi-sweep"),
        Command::AlRun(c) => (c, "al-run"),
        Command::TransferExp(c) => (c, "transfer-exp"),
    };
    let mut dir = RunDir::create(&common.out_dir)?;
    dir.note(format!("batchgfn {} {name}", env!("CARGO_PKG_VERSION")))?;
    let cfg = resolve(common, &mut dir)?;
    let result = match command {
        Command::SynthData(_) => synth_data(&cfg, &mut dir),
        Command::FitGp(_) => fit_gp(&cfg, &mut dir),
        Command::TrainGfn(_) => train_gfn(&cfg, &mut dir),
        Command::OracleCompare(_) => oracle_compare(&cfg, &mut dir),
        Command::JmiSweep(_) => sweep(&cfg, &mut dir),
        Command::AlRun(_) => al_run(&cfg, &mut dir),
        Command::TransferExp(_) => transfer(&cfg, &mut dir),
    };
    match &result {
        Ok(()) => dir.note("done")?,
        Err(e) => dir.note(format!("error: {e:#}"))?,
    }
    dir.log.flush()?;
    result
}

fn synth_data(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    let al = cfg.al_config(Strategy::Gfn, cfg.seed)?;
    let data = ALData::generate(&al)?;
    let (train, pool) =
        draw_seed_set(&data.pool, &data.oracle, al.seed_size, &mut rng::stream(cfg.seed, streams::SEED_SET))?;
    let records = snapshot_records(&pool, &data.oracle, &train, &data.test)?;
    save_snapshot(&dir.path.join("data.jsonl"), &records)?;
    dir.note(format!("{} pool, {} train, {} test records", pool.len(), train.len(), data.test.len()))
}

fn fit_gp(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    let step = first_step(cfg, cfg.seed)?;
    let ck = GpCheckpoint {
        format: GP_CHECKPOINT_FORMAT.to_string(),
        nu: cfg.gp_fit().nu,
        params: step.fit.params,
        train_ids: step.train.pairs.iter().map(|p| p.id).collect(),
    };
    fs::write(dir.path.join("gp.json"), ck.to_json()? + "\n")?;
    #[derive(Serialize)]
    struct Row {
        epoch: usize,
        log_marginal_likelihood: f64,
    }
    let rows: Vec<Row> = step
        .fit
        .trace
        .iter()
        .enumerate()
        .map(|(epoch, &l)| Row { epoch, log_marginal_likelihood: l })
        .collect();
    dir.csv("fit_trace.csv", &rows)?;
    let ev = batchgfn::harness::evaluate(step.reward.cov.gp(), &step.data.test)?;
    dir.note(format!(
        "log marginal likelihood {:.4} -> {:.4}; test mse {:.5}",
        step.fit.initial_lml, step.fit.final_lml, ev.mse
    ))
}

fn train_gfn(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    let step = first_step(cfg, cfg.seed)?;
    let params = train_policy(cfg, &step, dir)?;
    let ctx = params.context(step.reward.cov.pool_x(), cfg.train_context.then_some(&step.train), cfg.query_size)?;
    let samples = sample_batches(&ctx, &step.reward, cfg.inference_samples, &mut rng::substream(cfg.seed, streams::GFN_SAMPLE, 1))?;
    #[derive(Serialize)]
    struct Sample {
        pool_ids: Vec<usize>,
        jmi: f64,
        log_reward: f64,
    }
    let mut w = dir.file("samples.jsonl")?;
    for s in &samples {
        let ids = s.batch.indices().iter().map(|&p| step.pool.points()[p].id).collect();
        serde_json::to_writer(&mut w, &Sample { pool_ids: ids, jmi: s.log_reward * cfg.temperature, log_reward: s.log_reward })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let best = samples.iter().map(|s| s.log_reward).fold(f64::NEG_INFINITY, f64::max);
    dir.note(format!("{} samples, best JMI {:.4}", samples.len(), best * cfg.temperature))
}

fn oracle_compare(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    let cap = u128::from(cfg.enumeration_cap);
    let step = first_step(cfg, cfg.seed)?;
    let dist = enumerate_rewards(&step.reward, cfg.query_size, cap)?;
    let params = train_policy(cfg, &step, dir)?;
    let ctx = params.context(step.reward.cov.pool_x(), cfg.train_context.then_some(&step.train), cfg.query_size)?;
    let p_model = exact_policy_marginal(&ctx, cfg.query_size, cap)?;
    let d = jsd(&dist.probs, &p_model);
    let (slope, intercept) = density_parity(&dist.probs, &p_model);
    let report = DistributionReport::new(&dist, &p_model, cfg.temperature, cfg.seed, step.pool.len())?;
    let mut w = dir.file("distribution.jsonl")?;
    report.write(&mut w)?;
    w.flush()?;
    dir.note(format!("jsd {d:.6} nats, density-parity slope {slope:.4}, intercept {intercept:.3e}"))
}

fn sweep(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        strategy: String,
        temperature: Option<f64>,
        mean_jmi: f64,
        stderr_jmi: f64,
        runs: usize,
    }
    let mut rows = Vec::new();
    for seed in cfg.replica_seeds() {
        let sc = cfg.sweep_config(seed)?;
        let data = ALData::generate(&sc.al)?;
        for r in jmi_sweep(&sc, &data)? {
            dir.note(format!(
                "seed {seed} {} T={} jmi {:.4} +- {:.4}",
                r.strategy,
                r.temperature.map_or("-".to_string(), |t| t.to_string()),
                r.mean_jmi,
                r.stderr_jmi
            ))?;
            rows.push(Row {
                seed,
                strategy: r.strategy,
                temperature: r.temperature,
                mean_jmi: r.mean_jmi,
                stderr_jmi: r.stderr_jmi,
                runs: r.runs,
            });
        }
    }
    dir.csv("jmi_sweep.csv", &rows)
}

fn al_run(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    fs::create_dir(dir.path.join("runs"))?;
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for seed in cfg.replica_seeds() {
        let data = ALData::generate(&cfg.al_config(Strategy::Random, seed)?)?;
        for &s in &cfg.strategies {
            let log = run_al(&cfg.al_config(s, seed)?, &data);
            let stem = format!("runs/{s}-seed{seed}");
            let mut w = dir.file(&format!("{stem}.jsonl"))?;
            log.write_steps(&mut w)?;
            w.flush()?;
            if !log.traces.is_empty() {
                let mut w = dir.file(&format!("{stem}-traces.jsonl"))?;
                log.write_traces(&mut w)?;
                w.flush()?;
            }
            match &log.error {
                Some(e) => {
                    dir.note(format!("{s} seed {seed}: failed after {} records: {e}", log.steps.len()))?;
                    failures.push(format!("{s}/seed{seed}"));
                }
                None => dir.note(format!(
                    "{s} seed {seed}: final test mse {:.6}",
                    log.final_test_loss().unwrap_or(f64::NAN)
                ))?,
            }
            logs.push((s, log));
        }
    }
    dir.csv("test_loss.csv", &aggregate_runs(&logs))?;
    if !failures.is_empty() {
        bail!("{} run(s) failed: {}", failures.len(), failures.join(", "));
    }
    Ok(())
}

fn transfer(cfg: &Config, dir: &mut RunDir) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        seed: u64,
        mode: String,
        iteration: usize,
        jsd: f64,
    }
    let mut rows = Vec::new();
    for seed in cfg.replica_seeds() {
        let tc = cfg.transfer_config(seed)?;
        let data = ALData::generate(&tc.al)?;
        for c in transfer_experiment(&tc, &data)? {
            dir.note(format!(
                "seed {seed} {}: jsd at 0 = {:.4}, iterations to 0.1 = {}",
                c.mode,
                c.initial_jsd(),
                c.iterations_to(0.1).map_or("not reached".to_string(), |i| i.to_string())
            ))?;
            rows.extend(c.rows().into_iter().map(|p| Row { seed, mode: p.mode.to_string(), iteration: p.iteration, jsd: p.jsd }));
        }
    }
    dir.csv("transfer.csv", &rows)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
