//! Group-relative policy optimization for blockwise diffusion rollouts:
//! single-pass trace replay gives per-token log-probs, the behavior policy
//! is the detached current policy (ratio value 1, clip inactive at the
//! first update), and updates flow back to the rollout service in place.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blockmask::{self, StepSpec};
use crate::decoder::{DecodePolicy, Trajectory};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::service::ServiceHandle;
use crate::tasks::{self, TaskSample};
use crate::tensor::{AdamConfig, AdamW, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Clipped surrogate plus a KL penalty to the frozen reference policy.
    Eq7WithKl,
    /// Token-level normalization by total decoded tokens, no KL.
    Eq8TokenLevel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DipoConfig {
    /// Rollouts per prompt.
    pub group_size: usize,
    pub clip_eps: f32,
    /// KL coefficient; only used by [`Objective::Eq7WithKl`].
    pub kl_beta: f32,
    pub objective: Objective,
    pub lr: f32,
    /// Adam second-moment decay for the RL optimizer. Short RL runs are
    /// sensitive to this: with few steps the second-moment estimate is
    /// dominated by fresh minibatch noise.
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    /// Adam denominator epsilon. Large values (|grad|-scale) make the
    /// update behave like momentum SGD with effective rate lr/eps.
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f32,
    pub steps: usize,
    /// Optimizer passes per rollout batch.
    pub epochs: usize,
    /// Prompts per RL step.
    pub batch_prompts: usize,
    pub rollout: DecodePolicy,
    pub seed: u64,
}

fn default_beta2() -> f32 {
    0.999
}

fn default_adam_eps() -> f32 {
    1e-8
}

impl Default for DipoConfig {
    fn default() -> Self {
        DipoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.0,
            objective: Objective::Eq8TokenLevel,
            lr: 1e-4,
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            steps: 40,
            epochs: 1,
            batch_prompts: 16,
            rollout: DecodePolicy { temperature: 0.5, ..DecodePolicy::default() },
            seed: 0,
        }
    }
}

impl DipoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0, 1)".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("kl_beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// G rollouts of one prompt with rewards and mean-subtracted advantages.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sample: TaskSample,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f32>,
    pub advantages: Vec<f32>,
}

/// Frozen reference policy for the optional KL term. Never updated during
/// a run.
pub struct PolicyRefs {
    pub reference: Option<ModelParams>,
}

/// A_i = r_i - mean(r); always sums to zero.
pub fn compute_advantages(rewards: &[f32]) -> Vec<f32> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f32>() / rewards.len() as f32;
    rewards.iter().map(|r| r - mean).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DipoDiagnostics {
    pub loss: f32,
    pub clip_frac: f32,
    pub kl: f32,
    pub token_count: usize,
    pub grad_norm: f32,
}

/// Per-token replay log-probs of a trajectory under `params`, as a tape
/// variable so gradients flow. Token order is step order.
fn replay_logp_var(
    params: &ModelParams,
    pv: &model::ParamVars,
    tape: &Tape,
    traj: &Trajectory,
) -> Result<crate::tensor::Var> {
    let cfg = &params.config;
    let layout = traj.layout()?;
    let seq = traj.sequence();
    let steps: Vec<StepSpec> = traj
        .steps
        .iter()
        .map(|s| StepSpec { block: s.block, positions: s.positions.clone() })
        .collect();
    if steps.is_empty() {
        return Err(Error::Trace("trajectory has no decoding steps".into()));
    }
    let exp = blockmask::trace_replay_expansion(&layout, &seq, &steps, cfg.mask_token_id)?;
    let loss_rows: Vec<usize> = exp
        .loss_indices()
        .into_iter()
        .filter(|&r| traj.credits_position(exp.positions[r]))
        .collect();
    if loss_rows.is_empty() {
        return Err(Error::Trace("trajectory has no credited tokens".into()));
    }
    let hidden = model::forward_hidden(cfg, pv, tape, &exp.tokens, &exp.positions, &exp.mask)?;
    let logits = model::logits_at(pv, tape, &hidden, Some(&loss_rows))?;
    // rows come out in expansion order, not step order; fine, because every
    // downstream term is elementwise with a per-trajectory advantage and
    // then summed
    let targets: Vec<u32> = loss_rows.iter().map(|&r| seq[exp.positions[r]]).collect();
    tape.log_softmax_gather(&logits, &targets)
}

/// Accumulated DiPO loss and parameter gradients over a batch of groups.
/// One tape per trajectory keeps peak memory proportional to a single
/// expanded forward.
pub fn dipo_loss_grads(
    params: &ModelParams,
    groups: &[RolloutGroup],
    refs: &PolicyRefs,
    cfg: &DipoConfig,
) -> Result<(BTreeMap<String, Tensor>, DipoDiagnostics)> {
    cfg.validate()?;
    // trace filler after the first EOS carries no reward credit and is
    // excluded from both the loss and its normalizer
    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(|t| t.credited_tokens())
        .sum();
    if total_tokens == 0 {
        return Err(Error::Trace("no decoded tokens in batch".into()));
    }
    let norm = 1.0 / total_tokens as f32;

    let mut grad_acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut diag = DipoDiagnostics { token_count: total_tokens, ..Default::default() };
    for group in groups {
        if group.advantages.len() != group.trajectories.len() {
            return Err(Error::Config("advantages do not match trajectories".into()));
        }
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let tape = Tape::new();
            let pv = params.leaves(&tape);
            let logp = replay_logp_var(params, &pv, &tape, traj)?;
            let n = logp.value.numel();
            // behavior policy = detached current policy: value 1, grad = d logp
            let ratio = tape.exp(&tape.sub(&logp, &tape.stop_gradient(&logp))?);
            if !ratio.value.is_finite() {
                return Err(Error::NonFinite("importance ratio".into()));
            }
            for &r in ratio.data().iter() {
                if r < 1.0 - cfg.clip_eps || r > 1.0 + cfg.clip_eps {
                    diag.clip_frac += 1.0;
                }
            }
            let adv_vec = vec![adv; n];
            let surrogate = tape.clipped_surrogate(&ratio, &adv_vec, cfg.clip_eps)?;
            // maximize the surrogate: minimize its negation
            let mut loss = tape.scale(&tape.sum(&surrogate), -norm);
            if cfg.objective == Objective::Eq7WithKl && cfg.kl_beta > 0.0 {
                let reference = refs
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::Config("Eq7WithKl needs reference params".into()))?;
                let ref_tape = Tape::no_grad();
                let ref_pv = reference.leaves(&ref_tape);
                let ref_logp = replay_logp_var(reference, &ref_pv, &ref_tape, traj)?;
                // exp(delta) - delta - 1 with delta = log pi_ref - log pi_theta
                let delta = tape.sub(&crate::tensor::Var::constant(ref_logp.value.clone()), &logp)?;
                let ones = crate::tensor::Var::constant(Tensor::new(vec![n], vec![1.0; n])?);
                let kl = tape.sub(&tape.sub(&tape.exp(&delta), &delta)?, &ones)?;
                let kl_sum = tape.sum(&kl);
                diag.kl += kl_sum.item();
                loss = tape.add(&loss, &tape.scale(&kl_sum, cfg.kl_beta * norm))?;
            }
            diag.loss += loss.item();
            let grads = tape.backward(&loss)?;
            for (name, g) in params.leaf_grads(&pv, &grads) {
                let slot = grad_acc
                    .entry(name)
                    .or_insert_with(|| vec![0.0; g.numel()]);
                for (a, b) in slot.iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
    diag.clip_frac /= total_tokens as f32;
    diag.kl *= norm;

    let mut grad_map = BTreeMap::new();
    let mut norm_sq = 0.0f64;
    for (name, data) in grad_acc {
        norm_sq += data.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        let shape = params.tensors[&name].shape().to_vec();
        grad_map.insert(name, Tensor::new(shape, data)?);
    }
    diag.grad_norm = norm_sq.sqrt() as f32;
    if !diag.grad_norm.is_finite() {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    Ok((grad_map, diag))
}

/// Everything measured in one RL step, one CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub mean_reward: f32,
    pub pass_rate: f32,
    pub mean_tokens_per_step: f32,
    pub clip_frac: f32,
    pub kl: f32,
    pub grad_norm: f32,
    pub rollout_ms: f64,
    pub train_ms: f64,
    pub update_ms: f64,
}

fn rollout_batch(
    service: &mut ServiceHandle,
    samples: &[TaskSample],
    cfg: &DipoConfig,
    step_seed: u64,
) -> Result<Vec<RolloutGroup>> {
    let mut prompts = Vec::with_capacity(samples.len() * cfg.group_size);
    for s in samples {
        for _ in 0..cfg.group_size {
            prompts.push(s.prompt_tokens());
        }
    }
    let policy = DecodePolicy { seed: step_seed, ..cfg.rollout.clone() };
    // service failure is retriable once before the step aborts
    let reply = match service.generate(&prompts, &policy) {
        Ok(r) => r,
        Err(_) => service.generate(&prompts, &policy)?,
    };
    let mut groups = Vec::with_capacity(samples.len());
    let mut items = reply.results.into_iter();
    for s in samples {
        let mut trajectories = Vec::with_capacity(cfg.group_size);
        for _ in 0..cfg.group_size {
            let item = items.next().ok_or_else(|| Error::Service("short generate reply".into()))?;
            match item.trajectory {
                Some(t) => trajectories.push(t),
                None => {
                    return Err(Error::Service(
                        item.error.unwrap_or_else(|| "generation failed".into()),
                    ))
                }
            }
        }
        let rewards: Vec<f32> = trajectories.iter().map(|t| tasks::verify(&t.output, s)).collect();
        let advantages = compute_advantages(&rewards);
        groups.push(RolloutGroup { sample: s.clone(), trajectories, rewards, advantages });
    }
    Ok(groups)
}

/// One online RL step: rollout through the service, verify, group
/// advantages, DiPO gradients, optimizer step, weight push.
pub fn rl_train_step(
    service: &mut ServiceHandle,
    params: &mut ModelParams,
    opt: &mut AdamW,
    refs: &PolicyRefs,
    cfg: &DipoConfig,
    samples: &[TaskSample],
    step: usize,
) -> Result<TrainStepReport> {
    let t0 = Instant::now();
    let step_seed = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(step as u64 * 1_000_003);
    let groups = rollout_batch(service, samples, cfg, step_seed)?;
    let rollout_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    // first pass has ratio exactly 1; later passes re-derive the gradient
    // at the updated parameters from the same rollout batch
    let (grad_map, diag) = dipo_loss_grads(params, &groups, refs, cfg)?;
    opt.cfg.lr = cfg.lr;
    opt.step(&mut params.tensors, &grad_map)?;
    for _ in 1..cfg.epochs.max(1) {
        let (grad_map, _) = dipo_loss_grads(params, &groups, refs, cfg)?;
        opt.step(&mut params.tensors, &grad_map)?;
    }
    let train_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    match service.update_weights_params(params) {
        Ok(_) => {}
        Err(_) => {
            service.update_weights_params(params)?;
        }
    }
    let update_ms = t2.elapsed().as_secs_f64() * 1e3;

    let rewards: Vec<f32> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
    let tps: Vec<f32> = groups
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(|t| t.stats.tokens_per_step)
        .collect();
    Ok(TrainStepReport {
        step,
        mean_reward: rewards.iter().sum::<f32>() / rewards.len().max(1) as f32,
        pass_rate: rewards.iter().filter(|&&r| r > 0.5).count() as f32 / rewards.len().max(1) as f32,
        mean_tokens_per_step: tps.iter().sum::<f32>() / tps.len().max(1) as f32,
        clip_frac: diag.clip_frac,
        kl: diag.kl,
        grad_norm: diag.grad_norm,
        rollout_ms,
        train_ms,
        update_ms,
    })
}

/// Full RL run against an in-process service; returns the trained params
/// and one report per step. Prompts are drawn from `samples` round-robin.
pub fn rl_train(
    cfg: &DipoConfig,
    samples: &[TaskSample],
    params: ModelParams,
) -> Result<(ModelParams, Vec<TrainStepReport>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty RL dataset".into()));
    }
    let state = std::sync::Arc::new(crate::service::ServiceState::from_params(params.clone()));
    let mut service = ServiceHandle::InProcess(state);
    let mut params = params;
    let refs = PolicyRefs {
        reference: (cfg.objective == Objective::Eq7WithKl).then(|| params.clone()),
    };
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.lr,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        ..Default::default()
    });
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let start = (step * cfg.batch_prompts) % samples.len();
        let batch: Vec<TaskSample> = (0..cfg.batch_prompts)
            .map(|i| samples[(start + i) % samples.len()].clone())
            .collect();
        reports.push(rl_train_step(&mut service, &mut params, &mut opt, &refs, cfg, &batch, step)?);
    }
    Ok((params, reports))
}

/// Verifier-scored evaluation under a decoding policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f32,
    pub avg_tokens_per_step: f32,
    pub avg_output_len: f32,
}

pub fn evaluate(params: &ModelParams, samples: &[TaskSample], policy: &DecodePolicy) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty eval set".into()));
    }
    let mut correct = 0.0f32;
    let mut tps = 0.0f32;
    let mut len = 0.0f32;
    for (i, s) in samples.iter().enumerate() {
        let p = DecodePolicy { seed: policy.seed.wrapping_add(i as u64), ..policy.clone() };
        let traj = crate::decoder::generate_seeded(params, &s.prompt_tokens(), &p)?;
        correct += tasks::verify(&traj.output, s);
        tps += traj.stats.tokens_per_step;
        len += traj.output.len() as f32;
    }
    let n = samples.len() as f32;
    Ok(EvalReport { accuracy: correct / n, avg_tokens_per_step: tps / n, avg_output_len: len / n })
}
