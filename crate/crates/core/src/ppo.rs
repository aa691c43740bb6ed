//! PPO with a diagonal-Gaussian policy: rollout collection over independent
//! environment workers, generalized advantage estimation, the clipped
//! surrogate objective, and mean-squared-error value regression, all updated
//! by Adam over the flat parameter vectors from [`crate::nn`].
//!
//! Rollouts fan out one worker per environment; each worker owns its random
//! streams, so the parallel and sequential builds collect identical batches.
//! Minibatch gradients are likewise computed over fixed-size sample chunks
//! and combined in chunk order, which keeps every update bit-reproducible
//! regardless of thread count.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::env::StarEnv;
use crate::nn::{Adam, Mlp, MlpGrad};
use crate::{derive_seed, stream_for, Error, RandomStream, Result};

use rand::Rng;

const LOG_2PI: f64 = 1.8378770664093453;

/// Seed-stream tags so the policy init, each worker, episode reseeds, and the
/// minibatch shuffle all draw from disjoint streams of the run seed.
const TAG_POLICY: u64 = 1;
const TAG_WORKER: u64 = 2;
const TAG_EPISODE: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PpoHyper {
    /// Environment steps per update batch.
    pub batch: usize,
    /// Samples per gradient step; must divide `batch`.
    pub minibatch: usize,
    pub gamma: f64,
    /// Surrogate clip width.
    pub clip: f64,
    /// Actor learning rate, decayed linearly to zero over training.
    pub lr: f64,
    /// Critic learning rate, held fixed.
    pub critic_lr: f64,
    /// Advantage estimation decay.
    pub lambda: f64,
    /// Update epochs per batch.
    pub epochs: usize,
    pub total_steps: usize,
    /// Parallel rollout workers; must divide `batch`.
    pub n_envs: usize,
    pub entropy_coef: f64,
    /// Initial log standard deviation of the Gaussian policy. Actions decode
    /// from [-1, 1], so a unit sigma drowns the means in clamped noise; the
    /// default starts narrower and lets the learned log-std widen if useful.
    pub init_log_std: f64,
    /// Internal multiplier on rewards before advantages and value targets.
    /// Raw sum rates are bits/s, order 1e8; the critic trains on returns of
    /// order 1e2 instead. Metrics always report unscaled values.
    pub reward_scale: f64,
    /// Rows per gradient chunk; chunks are reduced in fixed order.
    pub grad_chunk: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            batch: 8192,
            minibatch: 256,
            gamma: 0.99,
            clip: 0.2,
            lr: 1e-3,
            critic_lr: 1e-3,
            lambda: 0.95,
            epochs: 4,
            total_steps: 200_000,
            n_envs: 8,
            entropy_coef: 0.0,
            init_log_std: -1.0,
            reward_scale: 1e-6,
            grad_chunk: 64,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("clip must be in (0, 1)".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config("lambda must be in (0, 1]".into()));
        }
        if self.minibatch == 0 || self.batch % self.minibatch != 0 {
            return Err(Error::Config(format!(
                "minibatch {} must divide batch {}",
                self.minibatch, self.batch
            )));
        }
        if self.n_envs == 0 || self.batch % self.n_envs != 0 {
            return Err(Error::Config(format!(
                "worker count {} must divide batch {}",
                self.n_envs, self.batch
            )));
        }
        if self.total_steps < self.batch {
            return Err(Error::Config(
                "total_steps must cover at least one batch".into(),
            ));
        }
        if self.epochs == 0 || self.grad_chunk == 0 {
            return Err(Error::Config("epochs and grad_chunk must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.critic_lr >= 0.0 && self.reward_scale > 0.0) {
            return Err(Error::Config(
                "learning rates must be nonnegative and reward_scale positive".into(),
            ));
        }
        if !(self.entropy_coef >= 0.0) || !self.init_log_std.is_finite() {
            return Err(Error::Config(
                "entropy_coef must be nonnegative and init_log_std finite".into(),
            ));
        }
        Ok(())
    }

    /// Update batches over the whole run.
    pub fn num_batches(&self) -> usize {
        self.total_steps / self.batch
    }
}

/// Stochastic policy: tanh-bounded mean network plus one learned log
/// standard deviation per action dimension, shared across states.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
}

/// One draw from the policy.
#[derive(Debug, Clone)]
pub struct PolicySample {
    /// Clamped to [-1,1] for execution.
    pub action: Vec<f64>,
    /// The pre-clamp Gaussian sample; this is what importance ratios use.
    pub raw: Vec<f64>,
    /// Log-density of `raw` under the policy.
    pub logp: f64,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, act_dim: usize, init_log_std: f64, rng: &mut RandomStream) -> Self {
        Self {
            actor: Mlp::new(obs_dim, act_dim, true, rng),
            log_std: vec![init_log_std; act_dim],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn stds(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Draws action = clamp(mean + sigma * z). The log-probability is that of
    /// the pre-clamp sample; clamping belongs to the action decoder.
    pub fn sample(&self, obs: &[f64], rng: &mut RandomStream) -> Result<PolicySample> {
        let mean = self.actor.forward(obs)?;
        let mut raw = Vec::with_capacity(mean.len());
        let mut logp = 0.0;
        for (d, &mu) in mean.iter().enumerate() {
            let sigma = self.log_std[d].exp();
            let z: f64 = rng.sample(StandardNormal);
            let x = mu + sigma * z;
            logp += -self.log_std[d] - 0.5 * LOG_2PI - (x - mu).powi(2) / (2.0 * sigma * sigma);
            raw.push(x);
        }
        let action = raw.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(PolicySample { action, raw, logp })
    }

    /// Deterministic action: the tanh mean, which already lies in (-1,1).
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.actor.forward(obs)
    }

    /// Log-density of each stored raw action under the current parameters,
    /// plus the means and the forward cache for the gradient pass.
    pub fn log_prob_batch(
        &self,
        obs: &Array2<f64>,
        raw: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>, crate::nn::ForwardCache)> {
        let (means, cache) = self.actor.forward_batch(obs)?;
        if raw.dim() != means.dim() {
            return Err(Error::Shape(format!(
                "raw actions are {:?}, means are {:?}",
                raw.dim(),
                means.dim()
            )));
        }
        let logp = (0..raw.nrows())
            .map(|i| {
                let mut lp = 0.0;
                for d in 0..raw.ncols() {
                    let sigma = self.log_std[d].exp();
                    lp += -self.log_std[d]
                        - 0.5 * LOG_2PI
                        - (raw[(i, d)] - means[(i, d)]).powi(2) / (2.0 * sigma * sigma);
                }
                lp
            })
            .collect();
        Ok((logp, means, cache))
    }

    /// Differential entropy of the Gaussian; independent of the state.
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|l| l + 0.5 * (LOG_2PI + 1.0))
            .sum()
    }
}

/// Advantage clip bound: the most a positive advantage may be amplified or a
/// negative one relaxed.
pub fn clip_bound(eps: f64, adv: f64) -> f64 {
    if adv >= 0.0 {
        (1.0 + eps) * adv
    } else {
        (1.0 - eps) * adv
    }
}

/// Per-sample surrogate term and whether the clipped arm was the binding one.
fn surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = clip_bound(eps, adv);
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

/// Mean clipped surrogate, negated so minimizing it ascends the objective.
pub fn clipped_loss(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps: f64) -> f64 {
    assert_eq!(logp_new.len(), logp_old.len());
    assert_eq!(logp_new.len(), adv.len());
    let mut total = 0.0;
    for i in 0..adv.len() {
        let ratio = (logp_new[i] - logp_old[i]).exp();
        total += surrogate(ratio, adv[i], eps).0;
    }
    -total / adv.len() as f64
}

/// Mean squared error between value predictions and return targets.
pub fn value_loss(v_pred: &[f64], returns: &[f64]) -> f64 {
    assert_eq!(v_pred.len(), returns.len());
    let n = v_pred.len() as f64;
    v_pred
        .iter()
        .zip(returns)
        .map(|(v, r)| (v - r) * (v - r))
        .sum::<f64>()
        / n
}

/// Generalized advantage estimation over one rollout segment.
///
/// `values` carries one entry per step plus the bootstrap value of the state
/// after the last step. A set done flag ends the episode at that step: the
/// recursion restarts and the bootstrap never leaks across it. Returns are
/// advantages plus values, the critic's regression targets.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if dones.len() != t || values.len() != t + 1 {
        return Err(Error::Shape(format!(
            "gae: {} rewards, {} dones, {} values (want rewards+1)",
            t,
            dones.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let nonterminal = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * nonterminal - values[i];
        acc = delta + gamma * lambda * nonterminal * acc;
        adv[i] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

fn chunk_ranges(total: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    (0..total.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(total))
        .collect()
}

/// Gradient of the actor loss for one minibatch.
pub struct ActorGrad {
    pub net: MlpGrad,
    pub log_std: Vec<f64>,
    pub loss: f64,
    /// Samples where the clip bound was binding.
    pub clipped: usize,
}

struct ActorPart {
    net: MlpGrad,
    log_std: Vec<f64>,
    surrogate_sum: f64,
    clipped: usize,
}

/// Clipped-surrogate loss and its exact gradient over one minibatch,
/// computed in fixed-order row chunks. Advantages are used as given; the
/// caller normalizes them. The entropy bonus (if any) only touches the
/// log-std entries.
pub fn actor_loss_and_grad(
    policy: &GaussianPolicy,
    obs: &Array2<f64>,
    raw: &Array2<f64>,
    logp_old: &[f64],
    adv: &[f64],
    eps: f64,
    entropy_coef: f64,
    chunk: usize,
) -> Result<ActorGrad> {
    let rows = obs.nrows();
    if raw.nrows() != rows || logp_old.len() != rows || adv.len() != rows {
        return Err(Error::Shape("actor minibatch arrays disagree on length".into()));
    }
    let d = policy.action_dim();
    let sigma2: Vec<f64> = policy.log_std.iter().map(|l| (2.0 * l).exp()).collect();
    let inv_n = 1.0 / rows as f64;
    let ranges = chunk_ranges(rows, chunk);

    let eval = |range: std::ops::Range<usize>| -> Result<ActorPart> {
        let obs_c = obs.slice(ndarray::s![range.clone(), ..]).to_owned();
        let raw_c = raw.slice(ndarray::s![range.clone(), ..]).to_owned();
        let (logp_new, means, cache) = policy.log_prob_batch(&obs_c, &raw_c)?;
        let mut upstream = Array2::zeros((range.len(), d));
        let mut log_std_grad = vec![0.0; d];
        let mut surrogate_sum = 0.0;
        let mut clipped = 0;
        for (row, i) in range.clone().enumerate() {
            let ratio = (logp_new[row] - logp_old[i]).exp();
            let (term, was_clipped) = surrogate(ratio, adv[i], eps);
            surrogate_sum += term;
            if was_clipped {
                clipped += 1;
                continue;
            }
            // d(-term)/d(logp_new) = -ratio * adv, averaged over the
            // minibatch; push through the Gaussian density.
            let coeff = -ratio * adv[i] * inv_n;
            for dd in 0..d {
                let diff = raw_c[(row, dd)] - means[(row, dd)];
                upstream[(row, dd)] = coeff * diff / sigma2[dd];
                log_std_grad[dd] += coeff * (diff * diff / sigma2[dd] - 1.0);
            }
        }
        let net = policy.actor.backward(&cache, &upstream);
        Ok(ActorPart {
            net,
            log_std: log_std_grad,
            surrogate_sum,
            clipped,
        })
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<Result<ActorPart>> = ranges.into_par_iter().map(eval).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<ActorPart>> = ranges.into_iter().map(eval).collect();

    let mut net = MlpGrad::zeros_like(&policy.actor);
    let mut log_std = vec![0.0; d];
    let mut surrogate_sum = 0.0;
    let mut clipped = 0;
    for part in parts {
        let part = part?;
        net.add_assign(&part.net);
        for (g, p) in log_std.iter_mut().zip(&part.log_std) {
            *g += p;
        }
        surrogate_sum += part.surrogate_sum;
        clipped += part.clipped;
    }
    // Entropy regularization: loss -= coef * H, and H depends only on the
    // log-stds with dH/dlog_std = 1.
    for g in log_std.iter_mut() {
        *g -= entropy_coef;
    }
    let loss = -surrogate_sum * inv_n - entropy_coef * policy.entropy();
    Ok(ActorGrad {
        net,
        log_std,
        loss,
        clipped,
    })
}

/// Value regression loss and gradient over one minibatch, chunked like the
/// actor pass.
pub fn critic_loss_and_grad(
    critic: &Mlp,
    obs: &Array2<f64>,
    returns: &[f64],
    chunk: usize,
) -> Result<(f64, MlpGrad)> {
    let rows = obs.nrows();
    if returns.len() != rows {
        return Err(Error::Shape("critic minibatch arrays disagree on length".into()));
    }
    let inv_n = 1.0 / rows as f64;
    let ranges = chunk_ranges(rows, chunk);

    let eval = |range: std::ops::Range<usize>| -> Result<(f64, MlpGrad)> {
        let obs_c = obs.slice(ndarray::s![range.clone(), ..]).to_owned();
        let (pred, cache) = critic.forward_batch(&obs_c)?;
        let mut upstream = Array2::zeros((range.len(), 1));
        let mut sq_sum = 0.0;
        for (row, i) in range.clone().enumerate() {
            let err = pred[(row, 0)] - returns[i];
            sq_sum += err * err;
            upstream[(row, 0)] = 2.0 * err * inv_n;
        }
        Ok((sq_sum, critic.backward(&cache, &upstream)))
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(f64, MlpGrad)>> = ranges.into_par_iter().map(eval).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(f64, MlpGrad)>> = ranges.into_iter().map(eval).collect();

    let mut grad = MlpGrad::zeros_like(critic);
    let mut sq_sum = 0.0;
    for part in parts {
        let (s, g) = part?;
        sq_sum += s;
        grad.add_assign(&g);
    }
    Ok((sq_sum * inv_n, grad))
}

/// One rollout worker: an environment, its action-sampling stream, and the
/// chain of episode seeds it reseeds with.
struct Worker {
    env: StarEnv,
    obs: Vec<f64>,
    sample_rng: RandomStream,
    run_seed: u64,
    index: u64,
    episodes_started: u64,
    episode_return: f64,
}

impl Worker {
    fn new(mut env: StarEnv, run_seed: u64, index: usize) -> Result<Self> {
        let obs = env.reset(derive_seed(run_seed, &[TAG_EPISODE, index as u64, 0]))?;
        Ok(Self {
            env,
            obs,
            sample_rng: stream_for(run_seed, &[TAG_WORKER, index as u64]),
            run_seed,
            index: index as u64,
            episodes_started: 1,
            episode_return: 0.0,
        })
    }
}

/// One worker's slice of a rollout batch.
struct Segment {
    obs: Array2<f64>,
    raw: Array2<f64>,
    logp: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    bootstrap_obs: Vec<f64>,
    completed_returns: Vec<f64>,
}

fn collect_segment<M>(
    worker: &mut Worker,
    policy: &GaussianPolicy,
    mask: &M,
    steps: usize,
    reward_scale: f64,
) -> Result<Segment>
where
    M: Fn(&mut [f64]) + Sync,
{
    let obs_dim = worker.obs.len();
    let act_dim = policy.action_dim();
    let mut obs_buf = Vec::with_capacity(steps * obs_dim);
    let mut raw_buf = Vec::with_capacity(steps * act_dim);
    let mut logp = Vec::with_capacity(steps);
    let mut rewards = Vec::with_capacity(steps);
    let mut dones = Vec::with_capacity(steps);
    let mut completed_returns = Vec::new();

    for _ in 0..steps {
        let sample = policy.sample(&worker.obs, &mut worker.sample_rng)?;
        let mut action = sample.action.clone();
        mask(&mut action);
        let step = worker.env.step(&action)?;
        if !step.reward.is_finite() {
            return Err(Error::NonFinite {
                batch: 0,
                what: "environment reward".into(),
            });
        }
        obs_buf.extend_from_slice(&worker.obs);
        raw_buf.extend_from_slice(&sample.raw);
        logp.push(sample.logp);
        rewards.push(step.reward * reward_scale);
        dones.push(step.done);
        worker.episode_return += step.reward;
        if step.done {
            completed_returns.push(worker.episode_return);
            worker.episode_return = 0.0;
            let seed = derive_seed(
                worker.run_seed,
                &[TAG_EPISODE, worker.index, worker.episodes_started],
            );
            worker.episodes_started += 1;
            worker.obs = worker.env.reset(seed)?;
        } else {
            worker.obs = step.obs;
        }
    }

    Ok(Segment {
        obs: Array2::from_shape_vec((steps, obs_dim), obs_buf)
            .map_err(|e| Error::Shape(e.to_string()))?,
        raw: Array2::from_shape_vec((steps, act_dim), raw_buf)
            .map_err(|e| Error::Shape(e.to_string()))?,
        logp,
        rewards,
        dones,
        bootstrap_obs: worker.obs.clone(),
        completed_returns,
    })
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub batch: usize,
    pub env_steps: usize,
    /// Mean sum of raw rewards over episodes finished in this batch, bits/s.
    pub mean_episode_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub mean_std: f64,
}

/// Snapshot handed to the per-batch observer.
pub struct BatchEvent<'a> {
    pub row: &'a MetricsRow,
    pub policy: &'a GaussianPolicy,
    pub critic: &'a Mlp,
    pub actor_opt: &'a Adam,
    pub critic_opt: &'a Adam,
    /// Minibatch shuffle stream as of the end of this batch.
    pub shuffle_rng: &'a RandomStream,
}

pub struct TrainResult {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub metrics: Vec<MetricsRow>,
}

/// Runs the full training loop: collect a batch under the current policy,
/// estimate advantages, then several epochs of shuffled minibatch updates.
/// The observer runs after every batch; training aborts on the first
/// non-finite loss.
///
/// `make_env` builds worker `i`'s environment (its seed is irrelevant; the
/// worker immediately reseeds from the run seed). `mask` edits each executed
/// action in place, e.g. pinning movement entries; the stored sample and its
/// log-probability stay untouched so importance ratios remain exact.
pub fn train<F, M, O>(
    make_env: F,
    mask: M,
    hyper: &PpoHyper,
    seed: u64,
    mut on_batch: O,
) -> Result<TrainResult>
where
    F: Fn(usize) -> Result<StarEnv>,
    M: Fn(&mut [f64]) + Sync,
    O: FnMut(&BatchEvent) -> Result<()>,
{
    hyper.validate()?;
    let mut workers = Vec::with_capacity(hyper.n_envs);
    for i in 0..hyper.n_envs {
        workers.push(Worker::new(make_env(i)?, seed, i)?);
    }
    let obs_dim = workers[0].env.config().obs_dim();
    let act_dim = workers[0].env.config().action_dim();

    let mut init_rng = stream_for(seed, &[TAG_POLICY]);
    let mut policy = GaussianPolicy::new(obs_dim, act_dim, hyper.init_log_std, &mut init_rng);
    let mut critic = Mlp::new(obs_dim, 1, false, &mut init_rng);
    let mut actor_opt = Adam::new(policy.actor.n_params() + act_dim);
    let mut critic_opt = Adam::new(critic.n_params());
    let mut shuffle_rng = stream_for(seed, &[TAG_SHUFFLE]);

    let num_batches = hyper.num_batches();
    let steps_per_worker = hyper.batch / hyper.n_envs;
    let mut metrics = Vec::with_capacity(num_batches);

    for batch_idx in 0..num_batches {
        // Rollout phase: workers are independent, so order-preserving
        // parallel collection matches the sequential build exactly.
        let policy_ref = &policy;
        let mask_ref = &mask;
        #[cfg(feature = "parallel")]
        let segments: Vec<Result<Segment>> = workers
            .par_iter_mut()
            .map(|w| collect_segment(w, policy_ref, mask_ref, steps_per_worker, hyper.reward_scale))
            .collect();
        #[cfg(not(feature = "parallel"))]
        let segments: Vec<Result<Segment>> = workers
            .iter_mut()
            .map(|w| collect_segment(w, policy_ref, mask_ref, steps_per_worker, hyper.reward_scale))
            .collect();

        let mut obs = Array2::zeros((hyper.batch, obs_dim));
        let mut raw = Array2::zeros((hyper.batch, act_dim));
        let mut logp_old = Vec::with_capacity(hyper.batch);
        let mut advantages = Vec::with_capacity(hyper.batch);
        let mut returns = Vec::with_capacity(hyper.batch);
        let mut episode_returns = Vec::new();

        for (w, segment) in segments.into_iter().enumerate() {
            let segment = segment?;
            // Critic values for the segment plus the bootstrap state.
            let mut with_boot = Array2::zeros((steps_per_worker + 1, obs_dim));
            with_boot
                .slice_mut(ndarray::s![..steps_per_worker, ..])
                .assign(&segment.obs);
            for (j, v) in segment.bootstrap_obs.iter().enumerate() {
                with_boot[(steps_per_worker, j)] = *v;
            }
            let (pred, _) = critic.forward_batch(&with_boot)?;
            let values: Vec<f64> = pred.column(0).to_vec();
            let (adv, ret) = gae(
                &segment.rewards,
                &values,
                &segment.dones,
                hyper.gamma,
                hyper.lambda,
            )?;
            let base = w * steps_per_worker;
            obs.slice_mut(ndarray::s![base..base + steps_per_worker, ..])
                .assign(&segment.obs);
            raw.slice_mut(ndarray::s![base..base + steps_per_worker, ..])
                .assign(&segment.raw);
            logp_old.extend(segment.logp);
            advantages.extend(adv);
            returns.extend(ret);
            episode_returns.extend(segment.completed_returns);
        }

        // Update phase, serial over minibatches.
        let lr_actor = hyper.lr * (1.0 - batch_idx as f64 / num_batches as f64);
        let mut indices: Vec<usize> = (0..hyper.batch).collect();
        let updates_per_batch = hyper.epochs * (hyper.batch / hyper.minibatch);
        let mut actor_loss_sum = 0.0;
        let mut critic_loss_sum = 0.0;
        let mut clipped_total = 0usize;

        for _epoch in 0..hyper.epochs {
            indices.shuffle(&mut shuffle_rng);
            for mb in indices.chunks(hyper.minibatch) {
                let mb_obs = gather_rows(&obs, mb);
                let mb_raw = gather_rows(&raw, mb);
                let mb_logp: Vec<f64> = mb.iter().map(|&i| logp_old[i]).collect();
                let mb_ret: Vec<f64> = mb.iter().map(|&i| returns[i]).collect();
                let mb_adv = normalize(&mb.iter().map(|&i| advantages[i]).collect::<Vec<_>>());

                let actor_grad = actor_loss_and_grad(
                    &policy,
                    &mb_obs,
                    &mb_raw,
                    &mb_logp,
                    &mb_adv,
                    hyper.clip,
                    hyper.entropy_coef,
                    hyper.grad_chunk,
                )?;
                let (c_loss, c_grad) =
                    critic_loss_and_grad(&critic, &mb_obs, &mb_ret, hyper.grad_chunk)?;
                if !actor_grad.loss.is_finite() || !c_loss.is_finite() {
                    return Err(Error::NonFinite {
                        batch: batch_idx,
                        what: "update loss".into(),
                    });
                }

                let mut actor_params = policy.actor.flat();
                actor_params.extend_from_slice(&policy.log_std);
                let mut actor_gradient = actor_grad.net.flat();
                actor_gradient.extend_from_slice(&actor_grad.log_std);
                actor_opt.update(&mut actor_params, &actor_gradient, lr_actor);
                let n_net = policy.actor.n_params();
                policy.actor.assign_flat(&actor_params[..n_net])?;
                policy.log_std.copy_from_slice(&actor_params[n_net..]);

                let mut critic_params = critic.flat();
                critic_opt.update(&mut critic_params, &c_grad.flat(), hyper.critic_lr);
                critic.assign_flat(&critic_params)?;

                actor_loss_sum += actor_grad.loss;
                critic_loss_sum += c_loss;
                clipped_total += actor_grad.clipped;
            }
        }

        let mean_episode_reward = if episode_returns.is_empty() {
            0.0
        } else {
            episode_returns.iter().sum::<f64>() / episode_returns.len() as f64
        };
        let row = MetricsRow {
            batch: batch_idx,
            env_steps: (batch_idx + 1) * hyper.batch,
            mean_episode_reward,
            actor_loss: actor_loss_sum / updates_per_batch as f64,
            critic_loss: critic_loss_sum / updates_per_batch as f64,
            clip_fraction: clipped_total as f64
                / (updates_per_batch * hyper.minibatch) as f64,
            mean_std: policy.stds().iter().sum::<f64>() / act_dim as f64,
        };
        on_batch(&BatchEvent {
            row: &row,
            policy: &policy,
            critic: &critic,
            actor_opt: &actor_opt,
            critic_opt: &critic_opt,
            shuffle_rng: &shuffle_rng,
        })?;
        metrics.push(row);
    }

    Ok(TrainResult {
        policy,
        critic,
        actor_opt,
        critic_opt,
        metrics,
    })
}

fn gather_rows(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), src.ncols()));
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).assign(&src.row(i));
    }
    out
}

/// Zero-mean unit-variance rescaling used on each minibatch's advantages.
fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    v.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}
