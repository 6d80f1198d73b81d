//! Subtrajectory-balance training with forward-looking flows, plus
//! inference-time batch sampling and selection.

use serde::{Deserialize, Serialize};

use crate::data::TrainSet;
use crate::env::{BatchEnv, BatchState};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::policy::{log_pb, log_pf, log_softmax_grad, sample_action, GradAccumulator, PolicyContext, PolicyParams};
use crate::reward::BatchReward;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub traj_batch_size: usize,
    pub iterations: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig { lambda: 0.9, epsilon: 0.1, lr: 1e-3, traj_batch_size: 8, iterations: 5000 }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::invalid(format!("lambda {} must be in (0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} must be in [0, 1]", self.epsilon)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.traj_batch_size == 0 {
            return Err(Error::invalid("trajectory batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Loss value and its gradients with respect to the per-trajectory inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SubTbLoss {
    pub loss: f64,
    /// One entry per state `s_0 … s_B`.
    pub d_log_flow: Vec<f64>,
    /// One entry per transition.
    pub d_log_pf: Vec<f64>,
    pub d_log_pb: Vec<f64>,
}

/// Plain SubTB on total log-flows `log F(s_0) … log F(s_B)`.
pub fn subtb_loss(log_flow: &[f64], log_pf: &[f64], log_pb: &[f64], lambda: f64) -> Result<SubTbLoss> {
    let b = log_pf.len();
    if b == 0 || log_pb.len() != b || log_flow.len() != b + 1 {
        return Err(Error::invalid(format!(
            "trajectory of {b} steps needs {} flows and {b} backward terms",
            b + 1
        )));
    }
    if log_flow.iter().chain(log_pf).chain(log_pb).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { layer: "subtrajectory balance inputs".into() });
    }
    // prefix[k] = Σ_{m<k} (log P_F − log P_B)
    let mut prefix = vec![0.0; b + 1];
    for k in 0..b {
        prefix[k + 1] = prefix[k] + log_pf[k] - log_pb[k];
    }
    let mut total_w = 0.0;
    let mut loss = 0.0;
    let mut d_flow = vec![0.0; b + 1];
    let mut d_edge = vec![0.0; b];
    for i in 0..b {
        let mut w = 1.0;
        for j in i + 1..=b {
            w *= lambda;
            let a = log_flow[i] + prefix[j] - prefix[i] - log_flow[j];
            total_w += w;
            loss += w * a * a;
            let g = 2.0 * w * a;
            d_flow[i] += g;
            d_flow[j] -= g;
            for e in &mut d_edge[i..j] {
                *e += g;
            }
        }
    }
    let scale = 1.0 / total_w;
    Ok(SubTbLoss {
        loss: loss * scale,
        d_log_flow: d_flow.iter().map(|g| g * scale).collect(),
        d_log_pf: d_edge.iter().map(|g| g * scale).collect(),
        d_log_pb: d_edge.iter().map(|g| -g * scale).collect(),
    })
}

/// SubTB with forward-looking flows `log F(s) = log F̃(s) + ℓ(s)`.
///
/// `residual_flow` holds the network's `log F̃` for the non-terminal states
/// `s_0 … s_{B−1}`; the terminal residual is fixed at zero, so the terminal
/// flow is exactly the log-reward. `log_rewards` covers all `B + 1` states.
/// The returned `d_log_flow` has `B` entries (the terminal one is dropped).
pub fn subtb_fl_loss(
    residual_flow: &[f64],
    log_rewards: &[f64],
    log_pf: &[f64],
    log_pb: &[f64],
    lambda: f64,
) -> Result<SubTbLoss> {
    let b = log_pf.len();
    if residual_flow.len() != b || log_rewards.len() != b + 1 {
        return Err(Error::invalid(format!(
            "trajectory of {b} steps needs {b} residual flows and {} log-rewards",
            b + 1
        )));
    }
    let flows: Vec<f64> = residual_flow
        .iter()
        .chain(std::iter::once(&0.0))
        .zip(log_rewards)
        .map(|(f, l)| f + l)
        .collect();
    let mut out = subtb_loss(&flows, log_pf, log_pb, lambda)?;
    out.d_log_flow.truncate(b);
    Ok(out)
}

/// Everything the trainer needs to know about one acquisition step.
#[derive(Clone, Copy, Debug)]
pub struct Task<'a> {
    pub reward: &'a BatchReward,
    pub train: Option<&'a TrainSet>,
    pub batch_size: usize,
}

impl Task<'_> {
    pub fn env(&self) -> Result<BatchEnv> {
        BatchEnv::new(self.reward.pool_size(), self.batch_size)
    }

    pub fn context<'p>(&self, params: &'p PolicyParams) -> Result<PolicyContext<'p>> {
        params.context(self.reward.cov.pool_x(), self.train, self.batch_size)
    }
}

/// One line of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub mean_loss: f64,
    pub mean_sampled_log_reward: f64,
}

/// Runs one trajectory through the policy, adds `scale` times the gradient of
/// its loss to `acc` and returns `(loss, terminal log-reward)`. With
/// `sampler = Some((ε, rng))` the actions are drawn from the ε-mixed policy;
/// otherwise `actions` is replayed.
#[allow(clippy::too_many_arguments)]
fn accumulate_trajectory(
    ctx: &PolicyContext,
    task: &Task,
    env: &BatchEnv,
    actions: &mut Vec<usize>,
    mut sampler: Option<(f64, &mut Rng)>,
    lambda: f64,
    scale: f64,
    acc: &mut GradAccumulator,
) -> Result<(f64, f64)> {
    let b = task.batch_size;
    let mut s = env.initial_state();
    let mut outs = Vec::with_capacity(b + 1);
    let mut caches = Vec::with_capacity(b + 1);
    for k in 0..b {
        let (out, cache) = ctx.evaluate_cached(&s)?;
        let a = match sampler.as_mut() {
            Some((eps, rng)) => {
                let a = sample_action(&out, *eps, rng)?;
                actions.push(a);
                a
            }
            None => *actions
                .get(k)
                .ok_or_else(|| Error::invalid(format!("trajectory has {} actions, need {b}", actions.len())))?,
        };
        s = env.apply(&s, a)?;
        outs.push(out);
        caches.push(cache);
    }
    let (out, cache) = ctx.evaluate_cached(&s)?;
    outs.push(out);
    caches.push(cache);

    let ell = task.reward.prefix_log_rewards(actions)?;
    let flows: Vec<f64> = outs[..b].iter().map(|o| o.log_flow).collect();
    let lpf = (0..b).map(|k| log_pf(&outs[k], actions[k])).collect::<Result<Vec<_>>>()?;
    let lpb = (0..b).map(|k| log_pb(&outs[k + 1], actions[k])).collect::<Result<Vec<_>>>()?;
    let l = subtb_fl_loss(&flows, &ell, &lpf, &lpb, lambda)?;

    for k in 0..=b {
        let d_forward = if k < b {
            log_softmax_grad(&outs[k].forward_logits, actions[k], l.d_log_pf[k] * scale)
        } else {
            Vec::new()
        };
        let d_backward = if k > 0 {
            let pos = outs[k].state.binary_search(&actions[k - 1]).expect("action in state");
            log_softmax_grad(&outs[k].backward_logits, pos, l.d_log_pb[k - 1] * scale)
        } else {
            Vec::new()
        };
        let d_flow = if k < b { l.d_log_flow[k] * scale } else { 0.0 };
        ctx.backward(&caches[k], &d_forward, &d_backward, d_flow, acc);
    }
    Ok((l.loss, ell[b]))
}

/// Mean loss over fixed trajectories (action sequences) and its gradient
/// with respect to the flat parameter vector.
pub fn loss_and_grad(
    params: &PolicyParams,
    task: &Task,
    trajectories: &[Vec<usize>],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories"));
    }
    let env = task.env()?;
    let ctx = task.context(params)?;
    let mut acc = ctx.new_accumulator();
    let scale = 1.0 / trajectories.len() as f64;
    let mut loss = 0.0;
    for t in trajectories {
        if t.len() != task.batch_size {
            return Err(Error::invalid(format!(
                "trajectory has {} actions, need {}",
                t.len(),
                task.batch_size
            )));
        }
        let mut actions = t.clone();
        loss += accumulate_trajectory(&ctx, task, &env, &mut actions, None, lambda, scale, &mut acc)?.0;
    }
    Ok((loss * scale, ctx.finish(acc)?))
}

/// One optimisation step: samples `traj_batch_size` trajectories from the
/// ε-mixed policy, averages their losses, and applies Adam.
pub fn train_step(
    params: &mut PolicyParams,
    opt: &mut Adam,
    task: &Task,
    cfg: &TrainerConfig,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let env = task.env()?;
    let n_traj = cfg.traj_batch_size as f64;
    let (grad, loss_sum, reward_sum) = {
        let ctx = task.context(params)?;
        let mut acc = ctx.new_accumulator();
        let mut loss_sum = 0.0;
        let mut reward_sum = 0.0;
        let mut actions = Vec::with_capacity(task.batch_size);
        for _ in 0..cfg.traj_batch_size {
            actions.clear();
            let (l, r) = accumulate_trajectory(
                &ctx,
                task,
                &env,
                &mut actions,
                Some((cfg.epsilon, &mut *rng)),
                cfg.lambda,
                1.0 / n_traj,
                &mut acc,
            )?;
            loss_sum += l;
            reward_sum += r;
        }
        (ctx.finish(acc)?, loss_sum, reward_sum)
    };
    opt.step(params.values_mut(), &grad, cfg.lr);
    Ok((loss_sum / n_traj, reward_sum / n_traj))
}

/// Runs `cfg.iterations` steps. `on_step` sees every trace record together
/// with the updated parameters (for checkpoint diagnostics).
pub fn train(
    params: &mut PolicyParams,
    opt: &mut Adam,
    task: &Task,
    cfg: &TrainerConfig,
    rng: &mut Rng,
    mut on_step: impl FnMut(&TraceRecord, &PolicyParams) -> Result<()>,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let (mean_loss, mean_sampled_log_reward) = train_step(params, opt, task, cfg, rng)?;
        let rec = TraceRecord { iter, mean_loss, mean_sampled_log_reward };
        on_step(&rec, params)?;
        trace.push(rec);
    }
    Ok(trace)
}

/// A terminal batch with its log-reward.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredBatch {
    pub batch: BatchState,
    pub log_reward: f64,
}

/// Draws `k` batches from the unmixed forward policy. Costs exactly `k·B`
/// policy evaluations.
pub fn sample_batches(
    ctx: &PolicyContext,
    reward: &BatchReward,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<ScoredBatch>> {
    let env = BatchEnv::new(ctx.pool_size(), ctx.batch_size())?;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut s = env.initial_state();
        while !env.is_terminal(&s) {
            let o = ctx.evaluate(&s)?;
            let a = sample_action(&o, 0.0, rng)?;
            s = env.apply(&s, a)?;
        }
        let log_reward = reward.state_log_reward(&s)?;
        out.push(ScoredBatch { batch: s, log_reward });
    }
    Ok(out)
}

/// Highest log-reward batch; ties go to the lexicographically smallest.
pub fn select_query(samples: &[ScoredBatch]) -> Result<BatchState> {
    let mut best = samples.first().ok_or_else(|| Error::invalid("no batches to select from"))?;
    for s in &samples[1..] {
        if s.log_reward > best.log_reward
            || (s.log_reward == best.log_reward && s.batch.indices() < best.batch.indices())
        {
            best = s;
        }
    }
    Ok(best.batch.clone())
}
