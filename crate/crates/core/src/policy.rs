//! Set-invariant conditional policy.
//!
//! Each pool point `x_i` is embedded by the pool encoder (`e_i`). The points
//! already in the state are embedded by the state encoder and summed into a
//! context `c_s`; when amortising across training sets, the `(x, y)` pairs of
//! the training set are embedded and summed into `c_t`. The shared trunk
//! computes, for every pool point,
//!
//! ```text
//! h_i = act(W_pool e_i + W_state c_s + W_train c_t + b)
//! ```
//!
//! and three zero-initialised output layers read it:
//!
//! * forward logit `w_f·h_i + b_f` for every position not in the state,
//! * backward logit `w_b·h_j + b_b` for every position `j` in the state,
//! * log-flow `w_F·act(W_fs c_s + W_ft c_t + b) + b_F`.
//!
//! Gradients are accumulated by hand-written reverse-mode passes. The pool
//! and state encoders are run once per parameter snapshot over all pool
//! points ([`PolicyContext`]), so a state evaluation costs `O(N·H + H²)`.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;

use crate::data::TrainSet;
use crate::env::BatchState;
use crate::error::{Error, Result};
use crate::nn::{act, Adam, Encoder, EncoderCache, Linear};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyArch {
    pub hidden: usize,
    pub encoder_layers: usize,
    pub train_context: bool,
    /// Multiplies all three head outputs. Setting it to `1/T` lets the heads
    /// work in JMI units whatever the reward temperature.
    pub output_scale: f64,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch { hidden: 256, encoder_layers: 2, train_context: false, output_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    pool_enc: Encoder,
    state_enc: Encoder,
    train_enc: Option<Encoder>,
    trunk_pool: Linear,
    trunk_state: Linear,
    trunk_train: Option<Linear>,
    flow_state: Linear,
    flow_train: Option<Linear>,
    head_fwd: Linear,
    head_bwd: Linear,
    head_flow: Linear,
    size: usize,
}

impl Layout {
    fn new(arch: &PolicyArch) -> Self {
        let h = arch.hidden;
        let d = arch.encoder_layers;
        let mut c = 0;
        let pool_enc = Encoder::alloc(&mut c, 1, h, d);
        let state_enc = Encoder::alloc(&mut c, 1, h, d);
        let train_enc = arch.train_context.then(|| Encoder::alloc(&mut c, 2, h, d));
        let trunk_pool = Linear::alloc(&mut c, h, h, true);
        let trunk_state = Linear::alloc(&mut c, h, h, false);
        let trunk_train = arch.train_context.then(|| Linear::alloc(&mut c, h, h, false));
        let flow_state = Linear::alloc(&mut c, h, h, true);
        let flow_train = arch.train_context.then(|| Linear::alloc(&mut c, h, h, false));
        let head_fwd = Linear::alloc(&mut c, 1, h, true);
        let head_bwd = Linear::alloc(&mut c, 1, h, true);
        let head_flow = Linear::alloc(&mut c, 1, h, true);
        Layout {
            pool_enc,
            state_enc,
            train_enc,
            trunk_pool,
            trunk_state,
            trunk_train,
            flow_state,
            flow_train,
            head_fwd,
            head_bwd,
            head_flow,
            size: c,
        }
    }

    /// Named parameter blocks in storage order, for error attribution.
    fn blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let mut out = Vec::new();
        let mut enc = |name: &'static str, e: &Encoder| {
            for l in &e.layers {
                out.push((name, l.w, l.w + l.size()));
            }
        };
        enc("pool encoder", &self.pool_enc);
        enc("state encoder", &self.state_enc);
        if let Some(e) = &self.train_enc {
            enc("train encoder", e);
        }
        let mut lin = |name: &'static str, l: &Linear| out.push((name, l.w, l.w + l.size()));
        lin("trunk (pool)", &self.trunk_pool);
        lin("trunk (state)", &self.trunk_state);
        if let Some(l) = &self.trunk_train {
            lin("trunk (train)", l);
        }
        lin("flow trunk (state)", &self.flow_state);
        if let Some(l) = &self.flow_train {
            lin("flow trunk (train)", l);
        }
        lin("forward head", &self.head_fwd);
        lin("backward head", &self.head_bwd);
        lin("log-flow head", &self.head_flow);
        out
    }
}

/// All trainable parameters of the policy, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    arch: PolicyArch,
    layout: Layout,
    values: Vec<f64>,
}

impl PolicyParams {
    /// Fan-in scaled random hidden layers; all three output layers start at
    /// zero so the untrained policy is exactly uniform.
    pub fn init(arch: PolicyArch, rng: &mut Rng) -> Result<Self> {
        if arch.hidden == 0 || arch.encoder_layers == 0 {
            return Err(Error::invalid("policy needs hidden >= 1 and encoder_layers >= 1"));
        }
        if !(arch.output_scale > 0.0 && arch.output_scale.is_finite()) {
            return Err(Error::invalid(format!("output scale must be positive, got {}", arch.output_scale)));
        }
        let layout = Layout::new(&arch);
        let mut values = vec![0.0; layout.size];
        let mut hidden_layers: Vec<Linear> = Vec::new();
        hidden_layers.extend(&layout.pool_enc.layers);
        hidden_layers.extend(&layout.state_enc.layers);
        if let Some(e) = &layout.train_enc {
            hidden_layers.extend(&e.layers);
        }
        hidden_layers.push(layout.trunk_pool);
        hidden_layers.push(layout.trunk_state);
        hidden_layers.extend(layout.trunk_train);
        hidden_layers.push(layout.flow_state);
        hidden_layers.extend(layout.flow_train);
        for l in hidden_layers {
            l.init(&mut values, false, rng);
        }
        Ok(PolicyParams { arch, layout, values })
    }

    pub fn arch(&self) -> PolicyArch {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Name of the parameter block containing flat index `i`.
    pub fn block_name(&self, i: usize) -> &'static str {
        self.layout
            .blocks()
            .into_iter()
            .find(|(_, lo, hi)| (*lo..*hi).contains(&i))
            .map(|(n, _, _)| n)
            .unwrap_or("unknown")
    }

    /// Runs the state-independent encoders for one pool (and optional
    /// training set). The result evaluates any state of that pool.
    pub fn context<'a>(
        &'a self,
        pool_x: &[f64],
        train: Option<&TrainSet>,
        batch_size: usize,
    ) -> Result<PolicyContext<'a>> {
        if pool_x.is_empty() {
            return Err(Error::invalid("policy context needs a non-empty pool"));
        }
        if batch_size == 0 || batch_size > pool_x.len() {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={}",
                pool_x.len()
            )));
        }
        let p = &self.values;
        let ly = &self.layout;
        let h = self.arch.hidden;
        let x = Array2::from_shape_vec((pool_x.len(), 1), pool_x.to_vec()).expect("shape");
        let pool_cache = ly.pool_enc.forward(p, x.clone());
        let state_cache = ly.state_enc.forward(p, x);

        let (train_cache, c_t) = match &ly.train_enc {
            Some(enc) => {
                let pairs = train.map(|t| t.pairs.as_slice()).unwrap_or(&[]);
                let input = Array2::from_shape_fn((pairs.len(), 2), |(i, j)| {
                    if j == 0 {
                        pairs[i].x
                    } else {
                        pairs[i].y
                    }
                });
                let cache = enc.forward(p, input);
                let c_t = cache.output().sum_axis(Axis(0));
                (Some(cache), c_t)
            }
            None => (None, Array1::zeros(h)),
        };

        let mut proj = ly.trunk_pool.forward_rows(p, &pool_cache.output().view());
        let mut flow_bias = ly.flow_state.bias(p).expect("flow trunk has a bias").to_owned();
        if let (Some(tt), Some(ft)) = (&ly.trunk_train, &ly.flow_train) {
            proj += &tt.forward_vec(p, c_t.view());
            flow_bias += &ft.forward_vec(p, c_t.view());
        }
        let proj = proj.as_standard_layout().into_owned();
        Ok(PolicyContext {
            params: self,
            batch_size,
            pool_cache,
            state_cache,
            train_cache,
            c_t,
            proj,
            flow_bias,
            evaluations: AtomicU64::new(0),
        })
    }
}

/// Raw policy outputs at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    /// Sorted state indices; `backward_logits[k]` belongs to `state[k]`.
    pub state: Vec<usize>,
    /// One entry per pool position; positions in the state (and every
    /// position at a terminal state) hold `-inf`.
    pub forward_logits: Vec<f64>,
    pub backward_logits: Vec<f64>,
    pub log_flow: f64,
}

/// Activations of one state evaluation, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EvalCache {
    state: Vec<usize>,
    terminal: bool,
    c_s: Array1<f64>,
    /// Trunk outputs for every pool position (or just the state's positions
    /// at a terminal state, in state order).
    trunk: Array2<f64>,
    trunk_slope: Array2<f64>,
    flow_hidden: Array1<f64>,
    flow_slope: Array1<f64>,
}

impl EvalCache {
    fn row_of(&self, pool_index: usize, state_pos: usize) -> usize {
        if self.terminal {
            state_pos
        } else {
            pool_index
        }
    }
}

/// Gradient buffers for one parameter snapshot.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    grad: Vec<f64>,
    d_proj: Array2<f64>,
    d_state_emb: Array2<f64>,
    d_flow_bias: Array1<f64>,
}

/// A parameter snapshot bound to one pool / training set.
#[derive(Debug)]
pub struct PolicyContext<'a> {
    params: &'a PolicyParams,
    batch_size: usize,
    pool_cache: EncoderCache,
    state_cache: EncoderCache,
    train_cache: Option<EncoderCache>,
    c_t: Array1<f64>,
    proj: Array2<f64>,
    flow_bias: Array1<f64>,
    evaluations: AtomicU64,
}

impl<'a> PolicyContext<'a> {
    pub fn pool_size(&self) -> usize {
        self.proj.nrows()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn params(&self) -> &PolicyParams {
        self.params
    }

    /// Number of forward-policy evaluations (non-terminal states) so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    pub fn evaluate(&self, state: &BatchState) -> Result<PolicyOutput> {
        self.evaluate_cached(state).map(|(o, _)| o)
    }

    pub fn evaluate_cached(&self, state: &BatchState) -> Result<(PolicyOutput, EvalCache)> {
        let n = self.pool_size();
        let h = self.params.arch.hidden;
        let p = &self.params.values;
        let ly = &self.params.layout;
        let idx = state.indices();
        if idx.len() > self.batch_size || idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!("state {idx:?} is not valid for pool size {n}")));
        }
        let terminal = idx.len() == self.batch_size;

        let emb = self.state_cache.output();
        let mut c_s = Array1::<f64>::zeros(h);
        for &j in idx {
            c_s += &emb.row(j);
        }
        let q = ly.trunk_state.weight(p).dot(&c_s);

        let rows: Vec<usize> = if terminal { idx.to_vec() } else { (0..n).collect() };
        let mut tv = vec![0.0; rows.len() * h];
        let mut sv = vec![0.0; rows.len() * h];
        let qs = q.as_slice().expect("contiguous");
        let proj = self.proj.as_slice().expect("standard layout");
        for ((&i, tr), sr) in rows.iter().zip(tv.chunks_exact_mut(h)).zip(sv.chunks_exact_mut(h)) {
            let pr = &proj[i * h..(i + 1) * h];
            for (((t, s), &p), &q) in tr.iter_mut().zip(sr.iter_mut()).zip(pr).zip(qs) {
                let (a, d) = act(p + q);
                *t = a;
                *s = d;
            }
        }
        let trunk = Array2::from_shape_vec((rows.len(), h), tv).expect("shape");
        let slope = Array2::from_shape_vec((rows.len(), h), sv).expect("shape");

        let sc = self.params.arch.output_scale;
        let wf = ly.head_fwd.weight(p);
        let bf = p[ly.head_fwd.b.unwrap()];
        let mut forward_logits = vec![f64::NEG_INFINITY; n];
        if !terminal {
            let logits = trunk.dot(&wf.row(0));
            for i in 0..n {
                forward_logits[i] = sc * (logits[i] + bf);
            }
            for &j in idx {
                forward_logits[j] = f64::NEG_INFINITY;
            }
        }
        let wb = ly.head_bwd.weight(p);
        let bb = p[ly.head_bwd.b.unwrap()];
        let backward_logits: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(pos, &j)| {
                let r = if terminal { pos } else { j };
                sc * (trunk.row(r).dot(&wb.row(0)) + bb)
            })
            .collect();

        let mut y = ly.flow_state.weight(p).dot(&c_s);
        y += &self.flow_bias;
        let mut flow_hidden = Array1::<f64>::zeros(h);
        let mut flow_slope = Array1::<f64>::zeros(h);
        for k in 0..h {
            let (a, d) = act(y[k]);
            flow_hidden[k] = a;
            flow_slope[k] = d;
        }
        let log_flow = sc * (ly.head_flow.weight(p).row(0).dot(&flow_hidden) + p[ly.head_flow.b.unwrap()]);

        if forward_logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite { layer: "forward head".into() });
        }
        if backward_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: "backward head".into() });
        }
        if !log_flow.is_finite() {
            return Err(Error::NonFinite { layer: "log-flow head".into() });
        }
        if !terminal {
            self.evaluations.fetch_add(1, Ordering::Relaxed);
        }
        let out = PolicyOutput { state: idx.to_vec(), forward_logits, backward_logits, log_flow };
        let cache = EvalCache {
            state: idx.to_vec(),
            terminal,
            c_s,
            trunk,
            trunk_slope: slope,
            flow_hidden,
            flow_slope,
        };
        Ok((out, cache))
    }

    pub fn new_accumulator(&self) -> GradAccumulator {
        let h = self.params.arch.hidden;
        GradAccumulator {
            grad: vec![0.0; self.params.len()],
            d_proj: Array2::zeros((self.pool_size(), h)),
            d_state_emb: Array2::zeros((self.pool_size(), h)),
            d_flow_bias: Array1::zeros(h),
        }
    }

    /// Backpropagates output gradients of one evaluation into `acc`.
    ///
    /// `d_forward` has one entry per pool position (ignored at terminal
    /// states), `d_backward` one entry per state element.
    pub fn backward(
        &self,
        cache: &EvalCache,
        d_forward: &[f64],
        d_backward: &[f64],
        d_log_flow: f64,
        acc: &mut GradAccumulator,
    ) {
        let h = self.params.arch.hidden;
        let sc = self.params.arch.output_scale;
        let d_log_flow = sc * d_log_flow;
        let p = &self.params.values;
        let ly = &self.params.layout;
        let g = &mut acc.grad;
        let wf: Vec<f64> = ly.head_fwd.weight(p).row(0).to_vec();
        let wb: Vec<f64> = ly.head_bwd.weight(p).row(0).to_vec();

        let mut dq = Array1::<f64>::zeros(h);
        let mut d_head_f = Array1::<f64>::zeros(h);
        let mut d_head_b = Array1::<f64>::zeros(h);
        let mut sum_df = 0.0;
        let mut sum_db = 0.0;

        let mut coef_b = vec![0.0; cache.trunk.nrows()];
        let mut row_index = vec![0usize; cache.trunk.nrows()];
        if cache.terminal {
            for (pos, &j) in cache.state.iter().enumerate() {
                row_index[pos] = j;
            }
        } else {
            for (r, ri) in row_index.iter_mut().enumerate() {
                *ri = r;
            }
        }
        for (pos, &j) in cache.state.iter().enumerate() {
            coef_b[cache.row_of(j, pos)] = sc * d_backward[pos];
            sum_db += sc * d_backward[pos];
        }

        for r in 0..cache.trunk.nrows() {
            let cf = if cache.terminal { 0.0 } else { sc * d_forward[r] };
            let cb = coef_b[r];
            if cf == 0.0 && cb == 0.0 {
                continue;
            }
            sum_df += cf;
            let hr = cache.trunk.row(r);
            if cf != 0.0 {
                d_head_f.scaled_add(cf, &hr);
            }
            if cb != 0.0 {
                d_head_b.scaled_add(cb, &hr);
            }
            let sr = cache.trunk_slope.row(r);
            let sr = sr.as_slice().expect("contiguous");
            let mut dp = acc.d_proj.row_mut(row_index[r]);
            let dp = dp.as_slice_mut().expect("contiguous");
            let dqs = dq.as_slice_mut().expect("contiguous");
            for ((((d, q), &s), &f), &b) in dp.iter_mut().zip(dqs.iter_mut()).zip(sr).zip(&wf).zip(&wb) {
                let dz = (cf * f + cb * b) * s;
                *d += dz;
                *q += dz;
            }
        }
        {
            let mut gw = ly.head_fwd.weight_mut(g);
            gw.row_mut(0).scaled_add(1.0, &d_head_f);
        }
        g[ly.head_fwd.b.unwrap()] += sum_df;
        {
            let mut gw = ly.head_bwd.weight_mut(g);
            gw.row_mut(0).scaled_add(1.0, &d_head_b);
        }
        g[ly.head_bwd.b.unwrap()] += sum_db;

        // q = W_state c_s
        let mut dc_s = ly.trunk_state.backward_vec(p, g, cache.c_s.view(), dq.view());

        if d_log_flow != 0.0 {
            {
                let mut gw = ly.head_flow.weight_mut(g);
                gw.row_mut(0).scaled_add(d_log_flow, &cache.flow_hidden);
            }
            g[ly.head_flow.b.unwrap()] += d_log_flow;
            let wflow = ly.head_flow.weight(p);
            let dy = Array1::from_iter(
                (0..h).map(|k| d_log_flow * wflow[[0, k]] * cache.flow_slope[k]),
            );
            dc_s += &ly.flow_state.backward_vec(p, g, cache.c_s.view(), dy.view());
            acc.d_flow_bias += &dy;
        }

        for &j in &cache.state {
            let mut row = acc.d_state_emb.row_mut(j);
            row += &dc_s;
        }
    }

    /// Pushes the accumulated pool/state/train gradients through the
    /// encoders and returns the full parameter gradient.
    pub fn finish(&self, acc: GradAccumulator) -> Result<Vec<f64>> {
        let p = &self.params.values;
        let ly = &self.params.layout;
        let GradAccumulator { mut grad, d_proj, d_state_emb, d_flow_bias } = acc;

        let e = self.pool_cache.output();
        let d_e = ly.trunk_pool.backward_rows(p, &mut grad, &e.view(), &d_proj.view());
        ly.pool_enc.backward(p, &mut grad, &self.pool_cache, d_e);
        ly.state_enc.backward(p, &mut grad, &self.state_cache, d_state_emb);

        if let (Some(tt), Some(ft), Some(enc), Some(cache)) =
            (&ly.trunk_train, &ly.flow_train, &ly.train_enc, &self.train_cache)
        {
            let colsum = d_proj.sum_axis(Axis(0));
            let mut dc_t = tt.backward_vec(p, &mut grad, self.c_t.view(), colsum.view());
            dc_t += &ft.backward_vec(p, &mut grad, self.c_t.view(), d_flow_bias.view());
            let m = cache.output().nrows();
            if m > 0 {
                let d_rows = Array2::from_shape_fn((m, dc_t.len()), |(_, k)| dc_t[k]);
                enc.backward(p, &mut grad, cache, d_rows);
            }
        }
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: format!("gradient of {}", self.params.block_name(i)) });
        }
        Ok(grad)
    }
}

/// Log-softmax over the finite entries of `logits`; `-inf` entries stay
/// `-inf`.
pub fn masked_log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![f64::NEG_INFINITY; logits.len()];
    }
    let lse = max + logits.iter().filter(|v| v.is_finite()).map(|v| (v - max).exp()).sum::<f64>().ln();
    logits
        .iter()
        .map(|&v| if v.is_finite() { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

pub fn log_pf(out: &PolicyOutput, action: usize) -> Result<f64> {
    match out.forward_logits.get(action) {
        Some(v) if v.is_finite() => Ok(masked_log_softmax(&out.forward_logits)[action]),
        _ => Err(Error::DisallowedAction { action }),
    }
}

pub fn log_pb(out: &PolicyOutput, removed: usize) -> Result<f64> {
    let pos = out
        .state
        .binary_search(&removed)
        .map_err(|_| Error::invalid(format!("{removed} is not in the state")))?;
    Ok(masked_log_softmax(&out.backward_logits)[pos])
}

/// ε-mixture of the uniform distribution over allowed actions and the
/// forward softmax.
pub fn sample_action(out: &PolicyOutput, epsilon: f64, rng: &mut Rng) -> Result<usize> {
    let allowed: Vec<usize> = (0..out.forward_logits.len())
        .filter(|&i| out.forward_logits[i].is_finite())
        .collect();
    if allowed.is_empty() {
        return Err(Error::TerminalState);
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(allowed[rng.gen_range(0..allowed.len())]);
    }
    let logp = masked_log_softmax(&out.forward_logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &i in &allowed {
        acc += logp[i].exp();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(*allowed.last().unwrap())
}

/// Anything that assigns forward transition probabilities on the batch DAG.
pub trait ForwardPolicy {
    fn pool_size(&self) -> usize;
    /// Log-probabilities over pool positions (`-inf` where disallowed).
    fn forward_log_probs(&self, state: &BatchState) -> Result<Vec<f64>>;
}

impl ForwardPolicy for PolicyContext<'_> {
    fn pool_size(&self) -> usize {
        PolicyContext::pool_size(self)
    }

    fn forward_log_probs(&self, state: &BatchState) -> Result<Vec<f64>> {
        Ok(masked_log_softmax(&self.evaluate(state)?.forward_logits))
    }
}

/// Uniform over the positions not yet in the state.
#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy {
    pub pool_size: usize,
}

impl ForwardPolicy for UniformPolicy {
    fn pool_size(&self) -> usize {
        self.pool_size
    }

    fn forward_log_probs(&self, state: &BatchState) -> Result<Vec<f64>> {
        let free = self.pool_size - state.len();
        Ok((0..self.pool_size)
            .map(|i| if state.contains(i) { f64::NEG_INFINITY } else { -(free as f64).ln() })
            .collect())
    }
}

/// Gradient of `Σ_i c_i · log_softmax(logits)_a` pieces: returns the logit
/// gradient of `g · log p(a)` for a masked softmax.
pub fn log_softmax_grad(logits: &[f64], chosen: usize, g: f64) -> Vec<f64> {
    let logp = masked_log_softmax(logits);
    logp.iter()
        .enumerate()
        .map(|(i, &lp)| {
            let pi = if lp.is_finite() { lp.exp() } else { 0.0 };
            g * ((i == chosen) as u8 as f64 - pi)
        })
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BGFNPOL\0";
const CHECKPOINT_VERSION: u32 = 1;
const ACTIVATION_SQUAREPLUS: u8 = 1;
const MAX_HIDDEN: u32 = 1 << 14;
const MAX_LAYERS: u32 = 64;
const HEADER_LEN: usize = 48;

/// Policy checkpoint.
///
/// Binary layout, all integers and reals little-endian:
///
/// ```text
/// offset size  field
///      0    8  magic "BGFNPOL\0"
///      8    4  version (u32, currently 1)
///     12    4  hidden width (u32)
///     16    4  encoder hidden layers (u32)
///     20    1  train context flag (0/1)
///     21    1  activation code (1 = squareplus)
///     22    1  optimizer moments present (0/1)
///     23    1  reserved (0)
///     24    8  parameter count P (u64); must match the architecture
///     32    8  Adam step counter (u64)
///     40    8  head output scale (f64, finite and > 0)
///     48  8·P  parameters (f64)
///      …  8·P  Adam first moments (f64), only if moments present
///      …  8·P  Adam second moments (f64), only if moments present
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint {
    pub params: PolicyParams,
    pub optimizer: Option<Adam>,
}

impl PolicyCheckpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let a = self.params.arch;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(a.hidden as u32).to_le_bytes())?;
        w.write_all(&(a.encoder_layers as u32).to_le_bytes())?;
        w.write_all(&[a.train_context as u8, ACTIVATION_SQUAREPLUS, self.optimizer.is_some() as u8, 0])?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        w.write_all(&self.optimizer.as_ref().map_or(0, |o| o.t).to_le_bytes())?;
        w.write_all(&a.output_scale.to_le_bytes())?;
        for v in &self.params.values {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(o) = &self.optimizer {
            for v in o.m.iter().chain(&o.v) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("policy checkpoint: {m}"));
        if buf.len() < HEADER_LEN {
            return Err(bad("truncated header"));
        }
        if &buf[0..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u32_at(8) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let hidden = u32_at(12);
        let layers = u32_at(16);
        if hidden == 0 || hidden > MAX_HIDDEN || layers == 0 || layers > MAX_LAYERS {
            return Err(bad("architecture out of range"));
        }
        let train_context = match buf[20] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad train-context flag")),
        };
        if buf[21] != ACTIVATION_SQUAREPLUS {
            return Err(bad("unknown activation"));
        }
        let has_moments = match buf[22] {
            0 => false,
            1 => true,
            _ => return Err(bad("bad moments flag")),
        };
        if buf[23] != 0 {
            return Err(bad("reserved byte set"));
        }
        let output_scale = f64::from_le_bytes(buf[40..48].try_into().unwrap());
        if !(output_scale > 0.0 && output_scale.is_finite()) {
            return Err(bad("bad output scale"));
        }
        let arch = PolicyArch { hidden: hidden as usize, encoder_layers: layers as usize, train_context, output_scale };
        let layout = Layout::new(&arch);
        let count = u64_at(24);
        if count != layout.size as u64 {
            return Err(bad("parameter count does not match architecture"));
        }
        let blocks = if has_moments { 3 } else { 1 };
        let expected = HEADER_LEN + 8 * layout.size * blocks;
        if buf.len() != expected {
            return Err(bad("length does not match header"));
        }
        let t = u64_at(32);
        let read_block = |k: usize| -> Vec<f64> {
            let start = HEADER_LEN + 8 * layout.size * k;
            buf[start..start + 8 * layout.size]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let values = read_block(0);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        let optimizer = has_moments.then(|| {
            let mut adam = Adam::new(layout.size);
            adam.t = t;
            adam.m = read_block(1);
            adam.v = read_block(2);
            adam
        });
        Ok(PolicyCheckpoint { params: PolicyParams { arch, layout, values }, optimizer })
    }
}

/// Dot product helper used by tests and the trainer.
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledPoint;
    use crate::rng;

    fn small_arch(train_context: bool) -> PolicyArch {
        PolicyArch { hidden: 8, encoder_layers: 2, train_context, output_scale: 1.0 }
    }

    fn randomized(arch: PolicyArch, seed: u64) -> PolicyParams {
        let mut r = rng::stream(seed, "test");
        let mut p = PolicyParams::init(arch, &mut r).unwrap();
        for v in p.values_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
        p
    }

    fn st(ix: &[usize], cap: usize) -> BatchState {
        BatchState::from_indices(ix.to_vec(), cap).unwrap()
    }

    #[test]
    fn zero_heads_give_uniform_policy() {
        let mut r = rng::stream(1, "test");
        let p = PolicyParams::init(small_arch(false), &mut r).unwrap();
        let ctx = p.context(&[0.1, -0.4, 1.3, 2.0], None, 2).unwrap();
        let out = ctx.evaluate(&st(&[2], 2)).unwrap();
        let lp = masked_log_softmax(&out.forward_logits);
        for (i, v) in lp.iter().enumerate() {
            if i == 2 {
                assert_eq!(*v, f64::NEG_INFINITY);
            } else {
                assert!((v + 3f64.ln()).abs() < 1e-15);
            }
        }
        assert_eq!(out.log_flow, 0.0);
        assert_eq!(log_pb(&out, 2).unwrap(), 0.0);
    }

    #[test]
    fn uniform_backward_over_three() {
        let mut r = rng::stream(1, "test");
        let p = PolicyParams::init(small_arch(false), &mut r).unwrap();
        let ctx = p.context(&[0.1, -0.4, 1.3, 2.0, 0.0], None, 4).unwrap();
        let out = ctx.evaluate(&st(&[0, 3, 4], 4)).unwrap();
        for j in [0, 3, 4] {
            assert!((log_pb(&out, j).unwrap() + 3f64.ln()).abs() < 1e-15);
        }
        assert!(log_pb(&out, 1).is_err());
    }

    #[test]
    fn forward_probabilities_normalise() {
        let p = randomized(small_arch(true), 2);
        let train = TrainSet::new(vec![LabeledPoint { id: 0, x: 0.3, y: 1.0 }]);
        let ctx = p.context(&[0.1, -0.4, 1.3, 2.0, -1.1], Some(&train), 3).unwrap();
        let out = ctx.evaluate(&st(&[1, 4], 3)).unwrap();
        let total: f64 = (0..5).filter_map(|a| log_pf(&out, a).ok()).map(f64::exp).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(matches!(log_pf(&out, 1), Err(Error::DisallowedAction { action: 1 })));
    }

    #[test]
    fn output_is_invariant_to_insertion_and_train_order() {
        let p = randomized(small_arch(true), 3);
        let pairs = vec![
            LabeledPoint { id: 0, x: 0.3, y: 1.0 },
            LabeledPoint { id: 1, x: -0.7, y: 0.2 },
            LabeledPoint { id: 2, x: 1.9, y: -0.5 },
        ];
        let mut rev = pairs.clone();
        rev.reverse();
        let pool = [0.1, -0.4, 1.3, 2.0, -1.1];
        let ctx_a = p.context(&pool, Some(&TrainSet::new(pairs)), 3).unwrap();
        let a = ctx_a.evaluate(&BatchState::from_indices(vec![3, 0], 3).unwrap()).unwrap();
        let b = ctx_a.evaluate(&BatchState::from_indices(vec![0, 3], 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let ctx_b = p.context(&pool, Some(&TrainSet::new(rev)), 3).unwrap();
        let c = ctx_b.evaluate(&st(&[0, 3], 3)).unwrap();
        for (x, y) in a.forward_logits.iter().zip(&c.forward_logits) {
            assert!(x == y || (x - y).abs() < 1e-12);
        }
        assert!((a.log_flow - c.log_flow).abs() < 1e-12);
    }

    #[test]
    fn forward_logits_are_permutation_equivariant() {
        let p = randomized(small_arch(false), 4);
        let pool = [0.1, -0.4, 1.3, 2.0, -1.1];
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm.iter().map(|&i| pool[i]).collect();
        let a = p.context(&pool, None, 2).unwrap().evaluate(&st(&[1], 2)).unwrap();
        // position of original index 1 in the permuted pool
        let pos1 = perm.iter().position(|&i| i == 1).unwrap();
        let b = p.context(&permuted, None, 2).unwrap().evaluate(&st(&[pos1], 2)).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let (x, y) = (b.forward_logits[new], a.forward_logits[old]);
            assert!(x == y || (x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_action_is_never_sampled() {
        let p = randomized(small_arch(false), 5);
        let ctx = p.context(&[0.1, -0.4, 1.3], None, 2).unwrap();
        let out = ctx.evaluate(&st(&[1], 2)).unwrap();
        let mut r = rng::stream(5, "draws");
        for _ in 0..100_000 {
            assert_ne!(sample_action(&out, 0.1, &mut r).unwrap(), 1);
        }
    }

    fn fake_output(logits: Vec<f64>) -> PolicyOutput {
        PolicyOutput { state: vec![], forward_logits: logits, backward_logits: vec![], log_flow: 0.0 }
    }

    #[test]
    fn sampling_frequencies() {
        let mut r = rng::stream(6, "draws");
        let n = 100_000;
        // softmax of (0, ln 3) is (1/4, 3/4)
        let out = fake_output(vec![0.0, 3f64.ln(), f64::NEG_INFINITY]);
        let hits = (0..n).filter(|_| sample_action(&out, 0.0, &mut r).unwrap() == 1).count();
        let p = hits as f64 / n as f64;
        let sd = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((p - 0.75).abs() < 3.0 * sd, "{p}");

        // ε = 1 is uniform whatever the logits
        let out = fake_output(vec![10.0, -5.0, f64::NEG_INFINITY, 0.0]);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_action(&out, 1.0, &mut r).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        let sd = ((1.0 / 3.0) * (2.0 / 3.0) / n as f64).sqrt();
        for c in [counts[0], counts[1], counts[3]] {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 3.0 * sd);
        }

        let only = fake_output(vec![f64::NEG_INFINITY, 0.3]);
        for _ in 0..100 {
            assert_eq!(sample_action(&only, 0.0, &mut r).unwrap(), 1);
        }
        let none = fake_output(vec![f64::NEG_INFINITY; 3]);
        assert!(matches!(sample_action(&none, 0.0, &mut r), Err(Error::TerminalState)));
    }

    #[test]
    fn evaluation_counter_skips_terminal_states() {
        let p = randomized(small_arch(false), 7);
        let ctx = p.context(&[0.1, -0.4, 1.3], None, 2).unwrap();
        ctx.evaluate(&st(&[], 2)).unwrap();
        ctx.evaluate(&st(&[0], 2)).unwrap();
        ctx.evaluate(&st(&[0, 1], 2)).unwrap();
        assert_eq!(ctx.evaluations(), 2);
    }

    #[test]
    fn terminal_backward_logits_match_full_evaluation() {
        // the terminal fast path computes trunk rows only for the state
        let p = randomized(small_arch(false), 8);
        let pool = [0.1, -0.4, 1.3, 0.7];
        let full = p.context(&pool, None, 3).unwrap().evaluate(&st(&[0, 2], 3)).unwrap();
        let term = p.context(&pool, None, 2).unwrap().evaluate(&st(&[0, 2], 2)).unwrap();
        assert_eq!(full.backward_logits, term.backward_logits);
        assert!(term.forward_logits.iter().all(|v| *v == f64::NEG_INFINITY));
    }

    fn weighted_outputs(ctx: &PolicyContext, states: &[BatchState]) -> f64 {
        let mut total = 0.0;
        for (k, s) in states.iter().enumerate() {
            let out = ctx.evaluate(s).unwrap();
            for (i, v) in out.forward_logits.iter().enumerate() {
                if v.is_finite() {
                    total += ((i + 3 * k) as f64).sin() * v;
                }
            }
            for (pos, v) in out.backward_logits.iter().enumerate() {
                total += ((pos + 7 * k) as f64).cos() * v;
            }
            total += (k as f64 + 0.5) * out.log_flow;
        }
        total
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for train_context in [false, true] {
            let p = randomized(PolicyArch { hidden: 5, encoder_layers: 2, train_context, output_scale: 2.5 }, 11);
            let train = TrainSet::new(vec![
                LabeledPoint { id: 0, x: 0.3, y: 1.0 },
                LabeledPoint { id: 1, x: -0.9, y: -0.4 },
            ]);
            let pool = [0.1, -0.4, 1.3, 2.0, -1.1];
            let states = [st(&[], 3), st(&[1, 4], 3), st(&[0, 2, 3], 3)];
            let ctx = p.context(&pool, Some(&train), 3).unwrap();
            let mut acc = ctx.new_accumulator();
            for (k, s) in states.iter().enumerate() {
                let (out, cache) = ctx.evaluate_cached(s).unwrap();
                let df: Vec<f64> = out
                    .forward_logits
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if v.is_finite() { ((i + 3 * k) as f64).sin() } else { 0.0 })
                    .collect();
                let db: Vec<f64> = (0..out.backward_logits.len())
                    .map(|pos| ((pos + 7 * k) as f64).cos())
                    .collect();
                ctx.backward(&cache, &df, &db, k as f64 + 0.5, &mut acc);
            }
            let grad = ctx.finish(acc).unwrap();
            for (i, &g) in grad.iter().enumerate() {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi.values_mut()[i] += 1e-6;
                lo.values_mut()[i] -= 1e-6;
                let f_hi = weighted_outputs(&hi.context(&pool, Some(&train), 3).unwrap(), &states);
                let f_lo = weighted_outputs(&lo.context(&pool, Some(&train), 3).unwrap(), &states);
                let fd = (f_hi - f_lo) / 2e-6;
                assert!(
                    (fd - g).abs() < 1e-6 * (1.0 + fd.abs()),
                    "{} [{i}]: fd {fd} vs {}",
                    p.block_name(i),
                    g
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = randomized(small_arch(true), 9);
        let mut adam = Adam::new(p.len());
        let g: Vec<f64> = (0..p.len()).map(|i| (i as f64).sin()).collect();
        let mut v = p.values().to_vec();
        adam.step(&mut v, &g, 0.01);
        let ck = PolicyCheckpoint { params: p, optimizer: Some(adam) };
        let bytes = ck.to_bytes();
        assert_eq!(PolicyCheckpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(PolicyCheckpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PolicyCheckpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[12] = 9;
        assert!(PolicyCheckpoint::from_bytes(&bad).is_err());
    }
}
