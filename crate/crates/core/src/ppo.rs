//! Proximal policy optimization: rollouts, advantages, clipped updates and
//! the training loop.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abacus::{Action, ActionMask, NUM_ACTIONS};
use crate::env::{AbacusEnv, EpisodeConfig, TerminationCause};
use crate::error::{Error, Result};
use crate::net::{load_checkpoint, save_checkpoint, ArchConfig, Checkpoint, Inputs, MaskedCategorical, NetParams, Outputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PPOConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub n_envs: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub lr0: f64,
    pub cycles: u32,
    pub total_steps: u64,
    pub kl_threshold: f64,
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatch: 256,
            rollout_len: 512,
            n_envs: 8,
            vf_coef: 0.5,
            ent_coef: 0.01,
            lr0: 3e-4,
            cycles: 8,
            total_steps: 2_000_000,
            kl_threshold: 0.2,
            max_grad_norm: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-5,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("vf_coef", self.vf_coef),
            ("lr0", self.lr0),
            ("kl_threshold", self.kl_threshold),
            ("max_grad_norm", self.max_grad_norm),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.clip_eps.is_finite() && self.clip_eps >= 0.0) || !(self.ent_coef.is_finite() && self.ent_coef >= 0.0) {
            return Err(Error::Config("clip_eps and ent_coef must be non-negative".into()));
        }
        if self.gamma > 1.0 || self.lambda > 1.0 {
            return Err(Error::Config("gamma and lambda must not exceed 1".into()));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 || self.n_envs == 0 || self.cycles == 0 {
            return Err(Error::Config(
                "epochs, minibatch, rollout_len, n_envs and cycles must be positive".into(),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.rollout_len * self.n_envs) as u64
    }

    pub fn num_epochs(&self) -> u64 {
        self.total_steps.div_ceil(self.steps_per_epoch())
    }
}

/// Linearly decaying sinusoidal learning rate with `cycles` peaks.
pub fn lr_at(t: u64, cfg: &PPOConfig) -> f64 {
    let x = (t.min(cfg.total_steps) as f64) / cfg.total_steps as f64;
    let osc = 0.5 * (1.0 - (2.0 * PI * cfg.cycles as f64 * x).sin());
    cfg.lr0 * (1.0 - x) * (0.1 + 0.9 * osc)
}

/// Derives an independent seed for a named component.
pub fn substream(root: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then SplitMix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Advantages and returns for one environment's trajectory.
///
/// `values` holds one entry per step plus the bootstrap value of the state
/// after the last step.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::Shape(format!(
            "gae: {n} rewards need {} values and {n} dones, got {} and {}",
            n + 1,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Experience from `n_steps` steps of `n_envs` environments. Row
/// `t * n_envs + e` is step `t` of environment `e`.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub n_envs: usize,
    pub n_steps: usize,
    pub inputs: Inputs<f32>,
    pub actions: Vec<Action>,
    pub masks: Vec<ActionMask>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Critic value of each environment's state after the final step.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Fills `advantages` and `returns` environment by environment.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        let (ne, ns) = (self.n_envs, self.n_steps);
        self.advantages = vec![0.0; ne * ns];
        self.returns = vec![0.0; ne * ns];
        for e in 0..ne {
            let idx: Vec<usize> = (0..ns).map(|t| t * ne + e).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let mut v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            v.push(self.bootstrap[e]);
            let (a, ret) = compute_gae(&r, &v, &d, gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                self.advantages[i] = a[k];
                self.returns[i] = ret[k];
            }
        }
        if self.advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("advantage".into()));
        }
        Ok(())
    }
}

/// An environment plus the bookkeeping needed to act in it.
pub struct EnvWorker {
    pub env: AbacusEnv,
    pub prev: Option<Action>,
    ops_seen: u64,
}

impl EnvWorker {
    pub fn new(cfg: EpisodeConfig) -> Result<Self> {
        let mut env = AbacusEnv::new(cfg)?;
        env.reset();
        Ok(EnvWorker {
            env,
            prev: None,
            ops_seen: 0,
        })
    }
}

/// Outcome counts over one rollout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub steps: u64,
    pub ops_attempted: u64,
    pub ops_correct: u64,
    pub episodes: u64,
    pub reward_sum: f64,
    pub shaping_sum: f64,
    /// Most operations completed within a single episode seen so far.
    pub max_consec_ops: u64,
}

impl RolloutStats {
    pub fn accuracy(&self) -> f64 {
        if self.ops_attempted == 0 {
            0.0
        } else {
            self.ops_correct as f64 / self.ops_attempted as f64
        }
    }

    pub fn mean_reward(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.reward_sum / self.steps as f64
        }
    }
}

fn fill_inputs(workers: &[EnvWorker]) -> Inputs<f32> {
    let mut inp = Inputs::with_capacity(workers.len());
    for (i, w) in workers.iter().enumerate() {
        inp.set_row(i, w.env.observation(), &w.env.symbol_input(), w.prev);
    }
    inp
}

/// Samples actions from the masked policy for `n_steps` steps in every
/// environment. Finished episodes reset automatically.
pub fn collect_rollouts(
    net: &NetParams,
    workers: &mut [EnvWorker],
    n_steps: usize,
    rng: &mut ChaCha8Rng,
    stats: &mut RolloutStats,
) -> Result<TrajectoryBatch> {
    let ne = workers.len();
    let total = ne * n_steps;
    let mut batch = TrajectoryBatch {
        n_envs: ne,
        n_steps,
        inputs: Inputs::with_capacity(total),
        actions: Vec::with_capacity(total),
        masks: Vec::with_capacity(total),
        log_probs: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        bootstrap: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    for t in 0..n_steps {
        let inp = fill_inputs(workers);
        let out = net.forward(&inp);
        for (e, w) in workers.iter_mut().enumerate() {
            let row = t * ne + e;
            batch.inputs.obs.row_mut(row).assign(&inp.obs.row(e));
            batch.inputs.symbol.row_mut(row).assign(&inp.symbol.row(e));
            batch.inputs.prev_action.row_mut(row).assign(&inp.prev_action.row(e));

            let mask = w.env.mask();
            let logits: Vec<f64> = out.logits.row(e).iter().map(|&v| v as f64).collect();
            let dist = MaskedCategorical::new(&logits, &mask)?;
            let a = dist.sample(rng);
            assert!(mask.allows(a), "sampled a masked action");
            let logp = dist.log_prob(a)?;
            let res = w.env.step(a)?;

            stats.steps += 1;
            stats.reward_sum += res.reward;
            stats.shaping_sum += res.info.breakdown.shaping;
            let ops = res.info.operations_completed;
            stats.ops_correct += ops - w.ops_seen;
            stats.ops_attempted += ops - w.ops_seen;
            w.ops_seen = ops;
            stats.max_consec_ops = stats.max_consec_ops.max(ops);

            batch.actions.push(a);
            batch.masks.push(mask);
            batch.log_probs.push(logp);
            batch.values.push(out.values[e] as f64);
            batch.rewards.push(res.reward);
            batch.dones.push(res.done);

            if res.done {
                if res.info.cause.is_some_and(TerminationCause::is_failure) {
                    stats.ops_attempted += 1;
                }
                stats.episodes += 1;
                w.env.reset();
                w.prev = None;
                w.ops_seen = 0;
            } else {
                w.prev = Some(a);
            }
        }
    }
    let last = net.critic_values(&fill_inputs(workers));
    batch.bootstrap = last.iter().map(|&v| v as f64).collect();
    Ok(batch)
}

/// Adam state with one moment pair per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: NetParams,
    pub v: NetParams,
    pub t: u64,
}

impl Adam {
    pub fn new(net: &NetParams) -> Self {
        Adam {
            m: net.zeros_like(),
            v: net.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut NetParams, grads: &NetParams, lr: f64, cfg: &PPOConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let g = grads.named_params();
        for (((p, m), v), g) in net
            .params_mut()
            .into_iter()
            .zip(self.m.params_mut())
            .zip(self.v.params_mut())
            .zip(g)
        {
            for i in 0..p.len() {
                let gi = g.data[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
                p[i] = (p[i] as f64 - upd) as f32;
            }
        }
    }

    pub fn to_blocks(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (prefix, net) in [("adam.m", &self.m), ("adam.v", &self.v)] {
            for p in net.named_params() {
                out.push((format!("{prefix}.{}", p.name), p.data.to_vec()));
            }
        }
        out
    }

    pub fn from_blocks(net: &NetParams, blocks: &[(String, Vec<f32>)], t: u64) -> Result<Self> {
        let mut adam = Adam::new(net);
        adam.t = t;
        let names: Vec<String> = net.named_params().into_iter().map(|p| p.name).collect();
        for (prefix, target) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
            for (dst, name) in target.params_mut().into_iter().zip(&names) {
                let key = format!("{prefix}.{name}");
                let (_, data) = blocks
                    .iter()
                    .find(|(n, _)| *n == key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer block {key}")))?;
                if data.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimizer block {key} has the wrong length")));
                }
                dst.copy_from_slice(data);
            }
        }
        Ok(adam)
    }
}

/// Statistics from one call to [`ppo_update`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Approximate KL after the last applied epoch.
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub epochs_applied: usize,
    /// Approximate KL measured after each applied epoch.
    pub epoch_kls: Vec<f64>,
    pub early_stopped: bool,
}

/// Per-sample terms of the PPO objective for a minibatch.
struct MinibatchTerms {
    loss: f64,
    policy: f64,
    value: f64,
    entropy: f64,
    clipped: usize,
}

/// Loss and its gradient with respect to the network outputs for the rows
/// `idx` of `batch`. `scale` divides every per-sample term.
fn ppo_loss(
    out: &Outputs<f32>,
    batch: &TrajectoryBatch,
    adv: &[f64],
    idx: &[usize],
    cfg: &PPOConfig,
    scale: f64,
) -> Result<(MinibatchTerms, Outputs<f32>)> {
    let n = idx.len();
    let mut dlogits = Array2::<f32>::zeros((n, NUM_ACTIONS));
    let mut dvalues = Array1::<f32>::zeros(n);
    let mut terms = MinibatchTerms {
        loss: 0.0,
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
        clipped: 0,
    };
    for (k, &i) in idx.iter().enumerate() {
        let logits: Vec<f64> = out.logits.row(k).iter().map(|&v| v as f64).collect();
        let dist = MaskedCategorical::new(&logits, &batch.masks[i])?;
        let a = batch.actions[i];
        let logp = dist.log_prob(a)?;
        let ratio = (logp - batch.log_probs[i]).exp();
        let a_i = adv[i];
        let lo = 1.0 - cfg.clip_eps;
        let hi = 1.0 + cfg.clip_eps;
        let unclipped = ratio * a_i;
        let clipped = ratio.clamp(lo, hi) * a_i;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            terms.clipped += 1;
        }
        // The minimum picks the unclipped branch unless clipping strictly
        // lowers the objective, in which case the gradient vanishes.
        let (surr, dsurr_dlogp) = if unclipped <= clipped {
            (unclipped, unclipped)
        } else {
            (clipped, 0.0)
        };
        let h = dist.entropy();
        let v = out.values[k] as f64;
        let verr = v - batch.returns[i];

        terms.policy += -surr * scale;
        terms.value += verr * verr * scale;
        terms.entropy += h * scale;

        let gl = dist.grad_log_prob(a)?;
        let ge = dist.grad_entropy();
        for j in 0..NUM_ACTIONS {
            let g = -dsurr_dlogp * gl[j] - cfg.ent_coef * ge[j];
            dlogits[[k, j]] = (g * scale) as f32;
        }
        dvalues[k] = (2.0 * cfg.vf_coef * verr * scale) as f32;
    }
    terms.loss = terms.policy + cfg.vf_coef * terms.value - cfg.ent_coef * terms.entropy;
    Ok((
        terms,
        Outputs {
            logits: dlogits,
            values: dvalues,
        },
    ))
}

/// Rows processed per gradient task. Fixed so the summation order, and
/// therefore the result, does not depend on the thread count.
const GRAD_CHUNK: usize = 64;

fn minibatch_gradients(
    net: &NetParams,
    batch: &TrajectoryBatch,
    adv: &[f64],
    idx: &[usize],
    cfg: &PPOConfig,
) -> Result<(MinibatchTerms, NetParams)> {
    let scale = 1.0 / idx.len() as f64;
    let parts: Vec<Result<(MinibatchTerms, NetParams)>> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let inp = batch.inputs.select(chunk);
            let mut terms = None;
            let mut err = None;
            let (_, g) = net.gradients(&inp, |out| match ppo_loss(out, batch, adv, chunk, cfg, scale) {
                Ok((t, d)) => {
                    let l = t.loss as f32;
                    terms = Some(t);
                    (l, d)
                }
                Err(e) => {
                    err = Some(e);
                    (
                        0.0,
                        Outputs {
                            logits: Array2::zeros(out.logits.dim()),
                            values: Array1::zeros(out.values.len()),
                        },
                    )
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            Ok((terms.expect("loss evaluated"), g))
        })
        .collect();
    let mut total: Option<(MinibatchTerms, NetParams)> = None;
    for part in parts {
        let (t, g) = part?;
        match &mut total {
            None => total = Some((t, g)),
            Some((tt, gg)) => {
                tt.loss += t.loss;
                tt.policy += t.policy;
                tt.value += t.value;
                tt.entropy += t.entropy;
                tt.clipped += t.clipped;
                gg.add_scaled(&g, 1.0);
            }
        }
    }
    total.ok_or_else(|| Error::Shape("empty minibatch".into()))
}

fn clip_grad_norm(g: &mut NetParams, max_norm: f64) -> Result<f64> {
    let sq: f64 = g
        .named_params()
        .iter()
        .flat_map(|p| p.data.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for p in g.params_mut() {
            for v in p.iter_mut() {
                *v *= s;
            }
        }
    }
    Ok(norm)
}

/// Log-probabilities of the recorded actions under `net`.
pub fn batch_log_probs(net: &NetParams, batch: &TrajectoryBatch) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<Result<Vec<f64>>> = idx
        .par_chunks(GRAD_CHUNK * 4)
        .map(|chunk| {
            let logits = net.actor_logits(&batch.inputs.select(chunk));
            chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let l: Vec<f64> = logits.row(k).iter().map(|&v| v as f64).collect();
                    MaskedCategorical::new(&l, &batch.masks[i])?.log_prob(batch.actions[i])
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(batch.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Mean of (old − new) log-probability over the batch.
pub fn approx_kl(net: &NetParams, batch: &TrajectoryBatch) -> Result<f64> {
    let new = batch_log_probs(net, batch)?;
    let s: f64 = batch.log_probs.iter().zip(&new).map(|(o, n)| o - n).sum();
    Ok(s / batch.len().max(1) as f64)
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Clipped-surrogate update over `cfg.epochs` passes of shuffled
/// minibatches, stopping early once the approximate KL exceeds the
/// threshold.
pub fn ppo_update(
    net: &mut NetParams,
    adam: &mut Adam,
    batch: &TrajectoryBatch,
    cfg: &PPOConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if batch.is_empty() || batch.advantages.len() != batch.len() || batch.returns.len() != batch.len() {
        return Err(Error::Shape("batch needs advantages and returns for every step".into()));
    }
    let adv = normalized(&batch.advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let (mut pl, mut vl, mut ent, mut clipped, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
    let mut mbs = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch) {
            let (terms, mut g) = minibatch_gradients(net, batch, &adv, idx, cfg)?;
            if !terms.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} (policy {}, value {}, entropy {})",
                    terms.loss, terms.policy, terms.value, terms.entropy
                )));
            }
            clip_grad_norm(&mut g, cfg.max_grad_norm)?;
            adam.step(net, &g, lr, cfg);
            pl += terms.policy;
            vl += terms.value;
            ent += terms.entropy;
            clipped += terms.clipped;
            seen += idx.len();
            mbs += 1;
        }
        stats.epochs_applied += 1;
        let kl = approx_kl(net, batch)?;
        if !kl.is_finite() {
            return Err(Error::NonFinite("approximate KL".into()));
        }
        stats.epoch_kls.push(kl);
        stats.approx_kl = kl;
        if kl > cfg.kl_threshold {
            stats.early_stopped = stats.epochs_applied < cfg.epochs;
            break;
        }
    }
    let m = mbs.max(1) as f64;
    stats.policy_loss = pl / m;
    stats.value_loss = vl / m;
    stats.entropy = ent / m;
    stats.clip_fraction = clipped as f64 / seen.max(1) as f64;
    Ok(stats)
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episode: EpisodeConfig,
    pub arch: ArchConfig,
    pub ppo: PPOConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: u64,
}

/// One row of metrics.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub env_steps: u64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub max_consec_ops: u64,
    pub lr: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub update: UpdateStats,
}

pub const METRICS_HEADER: &str = "epoch,env_steps,accuracy,mean_reward,max_consec_ops,lr,approx_kl,clip_fraction";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.env_steps, self.accuracy, self.mean_reward, self.max_consec_ops, self.lr, self.approx_kl, self.clip_fraction
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: u64,
    pub env_steps: u64,
    pub max_consec_ops: u64,
    pub adam_t: u64,
}

pub struct TrainOutcome {
    pub net: NetParams,
    pub metrics: Vec<EpochMetrics>,
    pub state: TrainerState,
    pub interrupted: bool,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_metadata(cfg: &TrainConfig, state: &TrainerState) -> serde_json::Value {
    serde_json::json!({
        "config": cfg,
        "trainer": state,
        "seed": cfg.seed,
    })
}

/// Where a run writes its artifacts and whether it picks up from a
/// checkpoint.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn write_checkpoint_file(path: &Path, cfg: &TrainConfig, net: &NetParams, adam: &Adam, state: &TrainerState) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            params: net.clone(),
            metadata: checkpoint_metadata(cfg, state),
            extra: adam.to_blocks(),
        },
    )
}

fn open_metrics(path: &Path, keep_before: u64) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if keep_before > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let epoch: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if epoch < keep_before {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(w)
}

/// Runs collect → advantages → update until the step budget is spent or
/// `stop` is raised. `on_epoch` sees every metrics row as it is produced.
pub fn train(cfg: &TrainConfig, io: &TrainIo, stop: Option<&AtomicBool>, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.ppo.validate()?;
    cfg.episode.validate()?;
    let (mut net, mut adam, mut state) = match &io.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.params.arch != cfg.arch {
                return Err(Error::Checkpoint(
                    "checkpoint architecture differs from the run configuration".into(),
                ));
            }
            let state: TrainerState = serde_json::from_value(ck.metadata["trainer"].clone())?;
            let adam = Adam::from_blocks(&ck.params, &ck.extra, state.adam_t)?;
            (ck.params, adam, state)
        }
        None => {
            let net = NetParams::init(&cfg.arch, substream(cfg.seed, "init", 0))?;
            let adam = Adam::new(&net);
            (net, adam, TrainerState::default())
        }
    };

    // Environments and the action sampler are reseeded from the epoch so a
    // resumed run is itself reproducible.
    let start = state.epoch;
    let mut workers = (0..cfg.ppo.n_envs)
        .map(|i| {
            EnvWorker::new(EpisodeConfig {
                seed: substream(cfg.seed, "env", start * cfg.ppo.n_envs as u64 + i as u64),
                ..cfg.episode.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "rollout", start));

    let mut metrics_out = match &io.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(open_metrics(&dir.join(METRICS_FILE), start)?)
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut interrupted = false;
    let total_epochs = cfg.ppo.num_epochs();
    while state.epoch < total_epochs {
        if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let lr = lr_at(state.env_steps, &cfg.ppo);
        let mut rs = RolloutStats::default();
        let mut batch = collect_rollouts(&net, &mut workers, cfg.ppo.rollout_len, &mut rng, &mut rs)?;
        batch.compute_advantages(cfg.ppo.gamma, cfg.ppo.lambda)?;
        let upd = ppo_update(&mut net, &mut adam, &batch, &cfg.ppo, lr, &mut rng)?;
        state.env_steps += rs.steps;
        state.max_consec_ops = state.max_consec_ops.max(rs.max_consec_ops);
        state.adam_t = adam.t;
        let m = EpochMetrics {
            epoch: state.epoch,
            env_steps: state.env_steps,
            accuracy: rs.accuracy(),
            mean_reward: rs.mean_reward(),
            max_consec_ops: state.max_consec_ops,
            lr,
            approx_kl: upd.approx_kl,
            clip_fraction: upd.clip_fraction,
            update: upd,
        };
        state.epoch += 1;
        log::info!(
            "epoch {} steps {} acc {:.3} reward {:.4} kl {:.4} lr {:.2e}",
            m.epoch,
            m.env_steps,
            m.accuracy,
            m.mean_reward,
            m.approx_kl,
            m.lr
        );
        if let Some(w) = metrics_out.as_mut() {
            writeln!(w, "{}", m.csv_row())?;
            w.flush()?;
        }
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = &io.out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                write_checkpoint_file(&dir.join(format!("epoch-{:06}.ckpt", state.epoch)), cfg, &net, &adam, &state)?;
            }
        }
    }
    if let Some(dir) = &io.out_dir {
        let name = if interrupted { "interrupted.ckpt" } else { FINAL_CHECKPOINT };
        write_checkpoint_file(&dir.join(name), cfg, &net, &adam, &state)?;
    }
    Ok(TrainOutcome {
        net,
        metrics,
        state,
        interrupted,
    })
}

/// Number of strict local maxima of `lr_at` sampled at every environment
/// step boundary of width `stride`.
pub fn count_lr_maxima(cfg: &PPOConfig, stride: u64) -> usize {
    let lrs: Vec<f64> = (0..=cfg.total_steps / stride).map(|k| lr_at(k * stride, cfg)).collect();
    count_local_maxima(&lrs)
}

/// Strict interior local maxima of a sequence, treating plateaus as one.
pub fn count_local_maxima(xs: &[f64]) -> usize {
    let mut dedup: Vec<f64> = Vec::with_capacity(xs.len());
    for &x in xs {
        if dedup.last() != Some(&x) {
            dedup.push(x);
        }
    }
    dedup.windows(3).filter(|w| w[1] > w[0] && w[1] > w[2]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RewardConfig, Task};
    use proptest::prelude::*;

    pub(crate) fn tiny_arch() -> ArchConfig {
        ArchConfig {
            conv_channels: vec![2, 3],
            conv_kernels: vec![3, 2],
            conv_padding: 1,
            mlp_widths: vec![16],
        }
    }

    fn small_episode() -> EpisodeConfig {
        EpisodeConfig {
            columns: 3,
            min_len: 1,
            max_len: 2,
            task: Task::AddOnly,
            ..EpisodeConfig::default()
        }
    }

    fn gae_direct(r: &[f64], v: &[f64], d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    let live = if d[k] { 0.0 } else { 1.0 };
                    sum += w * (r[k] + g * v[k + 1] * live - v[k]);
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn lr_endpoints_and_peaks() {
        let cfg = PPOConfig {
            total_steps: 100_000,
            ..PPOConfig::default()
        };
        assert!((lr_at(0, &cfg) - 0.55 * cfg.lr0).abs() < 1e-18);
        assert_eq!(lr_at(cfg.total_steps, &cfg), 0.0);
        for n in 1..=10 {
            let c = PPOConfig { cycles: n, ..cfg.clone() };
            assert_eq!(count_lr_maxima(&c, 1), n as usize, "n = {n}");
        }
    }

    #[test]
    fn gae_small_cases() {
        let (a, r) = compute_gae(&[1.0], &[0.0, 5.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![1.0]);
        let (a, _) = compute_gae(&[0.0; 4], &[0.0; 5], &[false; 4], 0.99, 0.95).unwrap();
        assert!(a.iter().all(|x| *x == 0.0));
        assert!(matches!(
            compute_gae(&[0.0; 3], &[0.0; 3], &[false; 3], 0.9, 0.9),
            Err(Error::Shape(_))
        ));
    }

    proptest! {
        #[test]
        fn gae_matches_direct_sum(
            steps in prop::collection::vec((-2.0f64..2.0, -3.0f64..3.0, prop::bool::weighted(0.1)), 1..60),
            boot in -3.0f64..3.0,
            g in 0.5f64..1.0,
            l in 0.0f64..1.0,
        ) {
            let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
            let mut v: Vec<f64> = steps.iter().map(|s| s.1).collect();
            v.push(boot);
            let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
            let (a, ret) = compute_gae(&r, &v, &d, g, l).unwrap();
            let want = gae_direct(&r, &v, &d, g, l);
            for t in 0..r.len() {
                prop_assert!((a[t] - want[t]).abs() < 1e-10);
                prop_assert!((ret[t] - a[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn substreams_differ() {
        let a = substream(1, "env", 0);
        assert_ne!(a, substream(1, "env", 1));
        assert_ne!(a, substream(1, "init", 0));
        assert_ne!(a, substream(2, "env", 0));
        assert_eq!(a, substream(1, "env", 0));
    }

    fn rollout(seed: u64, n_envs: usize, steps: usize) -> (TrajectoryBatch, RolloutStats) {
        let net = NetParams::init(&tiny_arch(), seed).unwrap();
        let mut workers: Vec<EnvWorker> = (0..n_envs)
            .map(|i| {
                EnvWorker::new(EpisodeConfig {
                    seed: seed + i as u64,
                    ..small_episode()
                })
                .unwrap()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = RolloutStats::default();
        let mut b = collect_rollouts(&net, &mut workers, steps, &mut rng, &mut stats).unwrap();
        b.compute_advantages(0.99, 0.95).unwrap();
        (b, stats)
    }

    #[test]
    fn rollouts_are_deterministic_and_legal() {
        let (a, sa) = rollout(3, 2, 64);
        let (b, sb) = rollout(3, 2, 64);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.rewards, b.rewards);
        assert_eq!(sa, sb);
        assert_eq!(a.len(), 128);
        for (act, m) in a.actions.iter().zip(&a.masks) {
            assert!(m.allows(*act));
        }
        assert!((0.0..=1.0).contains(&sa.accuracy()));
    }

    #[test]
    fn random_policy_mean_episode_reward_is_negative() {
        let net = NetParams::init(&tiny_arch(), 0).unwrap();
        let mut w = EnvWorker::new(EpisodeConfig {
            columns: 10,
            reward: RewardConfig::default(),
            seed: 5,
            ..EpisodeConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut episodes = 0;
        let mut total = 0.0;
        while episodes < 100 {
            let mut stats = RolloutStats::default();
            let b = collect_rollouts(&net, std::slice::from_mut(&mut w), 256, &mut rng, &mut stats).unwrap();
            for (r, d) in b.rewards.iter().zip(&b.dones) {
                if episodes < 100 {
                    total += r;
                }
                if *d {
                    episodes += 1;
                }
            }
        }
        assert!(total / 100.0 < 0.0, "mean episode reward {}", total / 100.0);
    }

    #[test]
    fn no_kl_when_policy_unchanged() {
        let (b, _) = rollout(4, 2, 32);
        let net = NetParams::init(&tiny_arch(), 4).unwrap();
        assert!(approx_kl(&net, &b).unwrap().abs() < 1e-6);
    }

    /// With zero advantages and a zero clip range the surrogate is constant,
    /// so only the value and entropy terms move the actor.
    #[test]
    fn zero_advantage_gives_no_policy_gradient() {
        let (mut b, _) = rollout(6, 1, 32);
        b.advantages = vec![0.0; b.len()];
        let net = NetParams::init(&tiny_arch(), 6).unwrap();
        let cfg = PPOConfig {
            clip_eps: 0.0,
            ent_coef: 0.0,
            ..PPOConfig::default()
        };
        let idx: Vec<usize> = (0..b.len()).collect();
        let (_, g) = minibatch_gradients(&net, &b, &b.advantages, &idx, &cfg).unwrap();
        for l in &g.actor.layers {
            assert!(l.w.iter().chain(l.b.iter()).all(|v| *v == 0.0));
        }
        assert!(g.critic.layers.iter().any(|l| l.w.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn clipped_samples_have_no_policy_gradient() {
        let (mut b, _) = rollout(8, 1, 8);
        let net = NetParams::init(&tiny_arch(), 8).unwrap();
        let cfg = PPOConfig {
            ent_coef: 0.0,
            vf_coef: 1e-9,
            ..PPOConfig::default()
        };
        let now = batch_log_probs(&net, &b).unwrap();
        // ratio = 1.5 with positive advantage, ratio = 0.5 with negative.
        for i in 0..b.len() {
            if i % 2 == 0 {
                b.log_probs[i] = now[i] - 1.5f64.ln();
            } else {
                b.log_probs[i] = now[i] - 0.5f64.ln();
            }
        }
        let adv: Vec<f64> = (0..b.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let idx: Vec<usize> = (0..b.len()).collect();
        let (terms, g) = minibatch_gradients(&net, &b, &adv, &idx, &cfg).unwrap();
        assert_eq!(terms.clipped, b.len());
        for l in &g.actor.layers {
            assert!(l.w.iter().all(|v| *v == 0.0));
        }
        // Flip the advantage signs: the unclipped branch is now the minimum.
        let adv: Vec<f64> = adv.iter().map(|a| -a).collect();
        let (_, g) = minibatch_gradients(&net, &b, &adv, &idx, &cfg).unwrap();
        assert!(g.actor.layers.iter().any(|l| l.w.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn rewarded_action_becomes_more_likely() {
        let (mut b, _) = rollout(9, 2, 64);
        let target = Action::Submit;
        b.advantages = b.actions.iter().map(|a| if *a == target { 1.0 } else { -0.1 }).collect();
        b.returns = vec![0.0; b.len()];
        let mut net = NetParams::init(&tiny_arch(), 9).unwrap();
        let before = batch_log_probs(&net, &b).unwrap();
        let mut adam = Adam::new(&net);
        let cfg = PPOConfig {
            epochs: 1,
            minibatch: 1024,
            ..PPOConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ppo_update(&mut net, &mut adam, &b, &cfg, 1e-3, &mut rng).unwrap();
        let after = batch_log_probs(&net, &b).unwrap();
        let gain: f64 = b
            .actions
            .iter()
            .zip(before.iter().zip(&after))
            .filter(|(a, _)| **a == target)
            .map(|(_, (x, y))| y - x)
            .sum();
        assert!(gain > 0.0);
    }

    #[test]
    fn kl_early_stop_triggers_at_high_lr() {
        let (b, _) = rollout(10, 2, 64);
        let mut net = NetParams::init(&tiny_arch(), 10).unwrap();
        let mut adam = Adam::new(&net);
        let cfg = PPOConfig {
            epochs: 20,
            minibatch: 32,
            max_grad_norm: 100.0,
            ..PPOConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ppo_update(&mut net, &mut adam, &b, &cfg, 0.05, &mut rng).unwrap();
        assert!(s.early_stopped, "kls {:?}", s.epoch_kls);
        assert_eq!(s.epoch_kls.len(), s.epochs_applied);
        for kl in &s.epoch_kls[..s.epoch_kls.len() - 1] {
            assert!(*kl <= cfg.kl_threshold);
        }
        assert!(*s.epoch_kls.last().unwrap() > cfg.kl_threshold);
    }

    #[test]
    fn config_validation() {
        assert!(PPOConfig::default().validate().is_ok());
        assert!(PPOConfig {
            epochs: 0,
            ..PPOConfig::default()
        }
        .validate()
        .is_err());
        assert!(PPOConfig {
            lr0: -1.0,
            ..PPOConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn local_maxima_counting() {
        assert_eq!(count_local_maxima(&[0.0, 1.0, 0.0, 2.0, 2.0, 1.0]), 2);
        assert_eq!(count_local_maxima(&[1.0, 2.0, 3.0]), 0);
    }
}
