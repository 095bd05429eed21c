//! Group-level training step and the epoch loop.

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{group_advantages, kl_token_correction, GroupAdvantages, ShapingParams};
use crate::envs::{render_tokens, Environment};
use crate::error::{Error, Result};
use crate::metrics::{EnsembleRecord, RolloutRecord, RunLog};
use crate::policy::{
    accumulate_logprob_grads, init_ensemble, save_checkpoint, sample_rollout, score_all_adapters,
    AdapterEnsemble, AdapterInit, AdapterParams, Limits, PolicyArchitecture, Rollout, Token,
};
use crate::regularizer::{layer_nuclear_norms, mean_pairwise_block_cosine, nnm_gradients, nnm_loss};
use crate::seed;
use crate::uncertainty::{
    mi_per_token, rollout_mi_summary, GateConfig, MiTrace, StreamingGate, StreamingGateState,
};

/// How the next group's parent state is drawn from the buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParentStrategy {
    GreedyBest,
    #[default]
    RewardProportional,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub seed: u64,
    pub policy: PolicyArchitecture,
    pub adapter_init: AdapterInit,
    pub limits: Limits,
    pub group_size: usize,
    pub groups_per_batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_epsilon: f64,
    pub lambda_kl: f64,
    pub lambda_nnm: f64,
    pub alpha: f64,
    pub beta_ref: f64,
    pub gamma_max: f64,
    pub mi_clip: f64,
    pub mi_top_fraction: f64,
    pub kl_target: f64,
    pub remove_constant_reward_groups: bool,
    pub parent_strategy: ParentStrategy,
    pub parent_capacity: usize,
    pub scoring_chunk: usize,
    pub streaming_enabled: bool,
    pub streaming: GateConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            policy: PolicyArchitecture::default(),
            adapter_init: AdapterInit::Independent,
            limits: Limits::default(),
            group_size: 10,
            groups_per_batch: 8,
            epochs: 6,
            learning_rate: 3e-2,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_epsilon: 0.2,
            lambda_kl: 0.01,
            lambda_nnm: 0.075,
            alpha: 0.1,
            beta_ref: 2.0,
            gamma_max: 10.0,
            mi_clip: 3.0,
            mi_top_fraction: crate::uncertainty::DEFAULT_TOP_FRACTION,
            kl_target: crate::advantage::DEFAULT_KL_TARGET,
            remove_constant_reward_groups: true,
            parent_strategy: ParentStrategy::RewardProportional,
            parent_capacity: 32,
            scoring_chunk: 256,
            streaming_enabled: false,
            streaming: GateConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate().map_err(|e| Error::config("policy", e.to_string()))?;
        self.streaming.validate()?;
        let k = self.policy.ensemble_size;
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.group_size % k != 0 {
            return Err(Error::config(
                "group_size",
                format!("ensemble size {k} must divide group size {}", self.group_size),
            ));
        }
        let non_negative = [
            ("lambda_kl", self.lambda_kl),
            ("lambda_nnm", self.lambda_nnm),
            ("alpha", self.alpha),
            ("weight_decay", self.weight_decay),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("beta_ref", self.beta_ref),
            ("gamma_max", self.gamma_max),
            ("mi_clip", self.mi_clip),
            ("kl_target", self.kl_target),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::config("clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.mi_top_fraction > 0.0 && self.mi_top_fraction <= 1.0) {
            return Err(Error::config("mi_top_fraction", "must lie in (0, 1]"));
        }
        for (field, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if self.limits.max_tokens == 0 {
            return Err(Error::config("limits.max_tokens", "must be positive"));
        }
        if self.limits.phase2_budget == 0 {
            return Err(Error::config("limits.phase2_budget", "must be positive"));
        }
        if self.scoring_chunk == 0 {
            return Err(Error::config("scoring_chunk", "must be positive"));
        }
        if self.parent_capacity == 0 {
            return Err(Error::config("parent_capacity", "must be positive"));
        }
        Ok(())
    }

    pub fn shaping(&self) -> ShapingParams {
        ShapingParams {
            alpha: self.alpha,
            beta_ref: self.beta_ref,
            gamma_max: self.gamma_max,
            mi_clip: self.mi_clip,
            kl_target: self.kl_target,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Training variants compared in the experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Method,
    #[serde(rename = "baseline-k1")]
    BaselineK1,
    AblateNoNnm,
    AblateNoMi,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::Method,
        RunMode::BaselineK1,
        RunMode::AblateNoNnm,
        RunMode::AblateNoMi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Method => "method",
            RunMode::BaselineK1 => "baseline-k1",
            RunMode::AblateNoNnm => "ablate-no-nnm",
            RunMode::AblateNoMi => "ablate-no-mi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
    }

    /// Applies the mode's forced settings.
    pub fn apply(self, config: &mut TrainerConfig) {
        match self {
            RunMode::Method => {}
            RunMode::BaselineK1 => {
                config.policy.ensemble_size = 1;
                config.alpha = 0.0;
                config.lambda_nnm = 0.0;
                config.streaming_enabled = false;
            }
            RunMode::AblateNoNnm => config.lambda_nnm = 0.0,
            RunMode::AblateNoMi => config.alpha = 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentEntry {
    pub state: Vec<Token>,
    pub best_reward: f64,
    pub visits: u64,
}

/// Simplified search tree: a bounded list of states worth expanding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentBuffer {
    entries: Vec<ParentEntry>,
    capacity: usize,
}

/// Longest prompt carried by a buffer state.
pub const MAX_STATE_TOKENS: usize = 8;

impl ParentBuffer {
    pub fn new(initial_state: Vec<Token>, capacity: usize) -> Self {
        Self {
            entries: vec![ParentEntry {
                state: initial_state,
                best_reward: 0.0,
                visits: 0,
            }],
            capacity: capacity.max(1),
        }
    }

    pub fn from_entries(entries: Vec<ParentEntry>, capacity: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("parent buffer cannot be empty".into()));
        }
        Ok(Self {
            entries,
            capacity: capacity.max(1),
        })
    }

    pub fn entries(&self) -> &[ParentEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn visit(&mut self, index: usize) {
        self.entries[index].visits += 1;
    }

    /// Records a child that beat its parent's best reward.
    pub fn offer(&mut self, parent: usize, state: &[Token], reward: f64) -> bool {
        if reward <= self.entries[parent].best_reward {
            return false;
        }
        self.entries[parent].best_reward = reward;
        let start = state.len().saturating_sub(MAX_STATE_TOKENS);
        self.entries.push(ParentEntry {
            state: state[start..].to_vec(),
            best_reward: reward,
            visits: 0,
        });
        if self.entries.len() > self.capacity {
            // Drop the weakest non-root entry; the earliest wins ties.
            let weakest = (1..self.entries.len())
                .min_by(|&a, &b| {
                    self.entries[a]
                        .best_reward
                        .total_cmp(&self.entries[b].best_reward)
                        .then(a.cmp(&b))
                })
                .expect("buffer holds more than the root");
            self.entries.remove(weakest);
        }
        true
    }
}

/// Picks a parent index. Reward-proportional selection falls back to uniform
/// while every recorded reward is zero.
pub fn select_parent(buffer: &ParentBuffer, rng: &mut impl Rng, strategy: ParentStrategy) -> usize {
    let entries = buffer.entries();
    if entries.len() == 1 {
        return 0;
    }
    match strategy {
        ParentStrategy::GreedyBest => entries
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| a.best_reward.total_cmp(&b.best_reward).then(j.cmp(i)))
            .map(|(i, _)| i)
            .unwrap_or(0),
        ParentStrategy::Uniform => rng.random_range(0..entries.len()),
        ParentStrategy::RewardProportional => {
            let total: f64 = entries.iter().map(|e| e.best_reward.max(0.0)).sum();
            if total <= 0.0 {
                return rng.random_range(0..entries.len());
            }
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            for (i, e) in entries.iter().enumerate() {
                acc += e.best_reward.max(0.0);
                if u < acc {
                    return i;
                }
            }
            entries
                .iter()
                .rposition(|e| e.best_reward > 0.0)
                .unwrap_or(entries.len() - 1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment accumulators for one flattened parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    let next = state.step + 1;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: format!("parameter[{i}]"),
            step: next,
        });
    }
    state.step = next;
    let t = next as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        *p -= config.lr * config.weight_decay * *p;
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

fn step_adapter(
    params: &mut AdapterParams,
    grads: &AdapterParams,
    state: &mut OptimizerState,
    config: &AdamWConfig,
    adapter: usize,
) -> Result<()> {
    for (name, m) in grads.named() {
        if let Some(i) = m.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: format!("adapter{adapter}.{name}[{i}]"),
                step: state.step + 1,
            });
        }
    }
    let mut flat = params.flatten();
    adamw_step(&mut flat, &grads.flatten(), state, config)?;
    params.unflatten_into(&flat);
    Ok(())
}

/// Clipped importance-sampling loss of adapter `k` over a group and its
/// gradient.
///
/// `advantages[i]` and `old_logprobs[i]` are per-token arrays for rollout `i`.
/// When the unclipped term is the minimum (ties included) the token
/// contributes `−ρ_t Â_t ∇log π`; otherwise its gradient is zero.
pub fn pg_loss_and_grads(
    ens: &AdapterEnsemble,
    k: usize,
    rollouts: &[Rollout],
    advantages: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    clip_epsilon: f64,
) -> Result<(f64, AdapterParams)> {
    if advantages.len() != rollouts.len() || old_logprobs.len() != rollouts.len() {
        return Err(Error::Shape(format!(
            "{} rollouts, {} advantage rows, {} old-logprob rows",
            rollouts.len(),
            advantages.len(),
            old_logprobs.len()
        )));
    }
    let mut grads = AdapterParams::zeros(ens.arch());
    let mut loss = 0.0;
    for ((rollout, adv), old) in rollouts.iter().zip(advantages).zip(old_logprobs) {
        let n = rollout.generated_tokens.len();
        if adv.len() != n || old.len() != n {
            return Err(Error::Shape(format!(
                "rollout of {n} tokens has {} advantages and {} old logprobs",
                adv.len(),
                old.len()
            )));
        }
        let features = ens.rollout_features(rollout)?;
        let mut coeffs = vec![0.0; n];
        // First pass only reads the current log-probabilities.
        let current = accumulate_logprob_grads(ens, k, rollout, &features, &coeffs, &mut grads)?;
        for t in 0..n {
            let ratio = (current[t] - old[t]).exp();
            let unclipped = ratio * adv[t];
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv[t];
            if unclipped <= clipped {
                loss -= unclipped;
                coeffs[t] = -unclipped;
            } else {
                loss -= clipped;
            }
        }
        accumulate_logprob_grads(ens, k, rollout, &features, &coeffs, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Where in the run a group sits; keys every random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: usize,
    pub group: usize,
}

/// Diagnostics of one group step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub rollouts: Vec<Rollout>,
    /// Mean per-token MI of each rollout.
    pub mean_mi: Vec<f64>,
    pub total_mi: f64,
    pub total_tokens: usize,
    pub advantages: GroupAdvantages,
    pub constant_group: bool,
    /// The gradient pass and optimizer step were skipped.
    pub skipped: bool,
    pub pg_loss: f64,
    pub nnm_loss: f64,
    pub nnm_nonunique: bool,
}

/// Generates the group's rollouts and scores them with the verifier.
pub fn generate_group(
    ens: &AdapterEnsemble,
    prompt: &[Token],
    env: &dyn Environment,
    config: &TrainerConfig,
    gate: Option<&mut StreamingGateState>,
    ctx: StepContext,
) -> Result<Vec<Rollout>> {
    let k = ens.ensemble_size();
    let snapshot = gate.as_ref().map(|g| g.snapshot());
    let generated: Vec<(Rollout, Option<f64>)> = (0..config.group_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(
                ctx.seed,
                &[3, ctx.epoch as u64, ctx.group as u64, i as u64],
            );
            let mut snap = snapshot.clone();
            let mut rollout = sample_rollout(
                ens,
                i % k,
                prompt,
                &config.limits,
                snap.as_mut().map(|s| s as &mut dyn StreamingGate),
                &mut rng,
            )?;
            rollout.reward = env.reward(&rollout.generated_tokens);
            Ok((rollout, snap.and_then(|s| s.consulted)))
        })
        .collect::<Result<_>>()?;
    let mut rollouts = Vec::with_capacity(generated.len());
    if let Some(g) = gate {
        for (_, consulted) in &generated {
            if let Some(v) = consulted {
                g.record(*v);
            }
        }
    }
    for (r, _) in generated {
        rollouts.push(r);
    }
    Ok(rollouts)
}

/// Per-adapter gradients for one group (stages 2 to 5 up to the optimizer).
pub struct GroupGradients {
    pub per_adapter: Vec<AdapterParams>,
    pub report: StepReport,
}

/// Scores, shapes and differentiates a generated group without touching the
/// ensemble.
pub fn group_gradients(
    ens: &AdapterEnsemble,
    rollouts: Vec<Rollout>,
    config: &TrainerConfig,
) -> Result<GroupGradients> {
    let k = ens.ensemble_size();
    let scores = score_all_adapters(ens, &rollouts, config.scoring_chunk)?;

    let mut summaries = Vec::with_capacity(rollouts.len());
    let mut mean_mi = Vec::with_capacity(rollouts.len());
    let mut total_mi = 0.0;
    let mut total_tokens = 0;
    for s in &scores {
        let trace = MiTrace::new(
            s.member_dists
                .iter()
                .map(|m| mi_per_token(m))
                .collect::<Result<Vec<_>>>()?,
        );
        total_mi += trace.per_token_mi.iter().sum::<f64>();
        total_tokens += trace.len();
        mean_mi.push(trace.mean());
        summaries.push(if trace.is_empty() {
            0.0
        } else {
            rollout_mi_summary(&trace, config.mi_top_fraction)?
        });
    }

    let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
    let advantages = group_advantages(&rewards, &summaries, &config.shaping())?;
    let first = rewards[0];
    let constant_group = rewards.iter().all(|r| *r == first);

    let mut report = StepReport {
        rollouts,
        mean_mi,
        total_mi,
        total_tokens,
        advantages,
        constant_group,
        skipped: constant_group && config.remove_constant_reward_groups,
        pg_loss: 0.0,
        nnm_loss: nnm_loss(ens),
        nnm_nonunique: false,
    };
    let mut per_adapter = vec![AdapterParams::zeros(ens.arch()); k];
    if report.skipped {
        return Ok(GroupGradients {
            per_adapter,
            report,
        });
    }

    let token_advantages: Vec<Vec<f64>> = report
        .rollouts
        .iter()
        .zip(&scores)
        .zip(&report.advantages.shaped)
        .map(|((r, s), &shaped)| {
            kl_token_correction(shaped, &r.logprob_old, &s.base_logprobs, config.lambda_kl)
        })
        .collect::<Result<_>>()?;

    for (adapter, grads) in per_adapter.iter_mut().enumerate() {
        let old: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| s.member_logprobs[adapter].clone())
            .collect();
        let (loss, g) = pg_loss_and_grads(
            ens,
            adapter,
            &report.rollouts,
            &token_advantages,
            &old,
            config.clip_epsilon,
        )?;
        report.pg_loss += loss;
        *grads = g;
    }

    // Each adapter receives the gradient of K times the ensemble objective,
    // so K tied adapters see exactly the single-adapter gradient.
    let nnm = nnm_gradients(ens, config.lambda_nnm)?;
    report.nnm_nonunique = nnm.nonunique;
    if config.lambda_nnm > 0.0 {
        for (grads, extra) in per_adapter.iter_mut().zip(&nnm.per_adapter) {
            grads.add_scaled(extra, k as f64);
        }
    }
    Ok(GroupGradients {
        per_adapter,
        report,
    })
}

/// One full group step: generate, score, shape, differentiate, update.
pub fn train_step(
    ens: &mut AdapterEnsemble,
    optimizers: &mut [OptimizerState],
    prompt: &[Token],
    env: &dyn Environment,
    config: &TrainerConfig,
    gate: Option<&mut StreamingGateState>,
    ctx: StepContext,
) -> Result<StepReport> {
    if optimizers.len() != ens.ensemble_size() {
        return Err(Error::Shape(format!(
            "{} optimizer states for {} adapters",
            optimizers.len(),
            ens.ensemble_size()
        )));
    }
    let rollouts = generate_group(ens, prompt, env, config, gate, ctx)?;
    let GroupGradients {
        per_adapter,
        report,
    } = group_gradients(ens, rollouts, config)?;
    if !report.skipped {
        let adamw = config.adamw();
        for (k, (grads, state)) in per_adapter.iter().zip(optimizers.iter_mut()).enumerate() {
            step_adapter(ens.adapter_mut(k), grads, state, &adamw, k)?;
        }
    }
    Ok(report)
}

pub fn new_optimizers(ens: &AdapterEnsemble) -> Vec<OptimizerState> {
    ens.adapters()
        .iter()
        .map(|a| OptimizerState::new(a.flatten().len()))
        .collect()
}

/// Seed of the ensemble initialization for a run seed.
pub fn init_seed(run_seed: u64) -> u64 {
    seed::derive(run_seed, &[1])
}

/// Options that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for generation and scoring; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Directory for per-epoch checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct TrainingOutcome {
    pub log: RunLog,
    pub ensemble: AdapterEnsemble,
    pub buffer: ParentBuffer,
}

/// Runs the epoch loop.
pub fn run_training(
    env: &dyn Environment,
    config: &TrainerConfig,
    options: &RunOptions,
) -> Result<TrainingOutcome> {
    config.validate()?;
    let ens = init_ensemble(&config.policy, init_seed(config.seed), config.adapter_init)?;
    match options.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            pool.install(|| run_from(ens, env, config, options))
        }
        None => run_from(ens, env, config, options),
    }
}

/// Runs the epoch loop from a given ensemble.
pub fn run_from(
    mut ens: AdapterEnsemble,
    env: &dyn Environment,
    config: &TrainerConfig,
    options: &RunOptions,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if ens.ensemble_size() != config.policy.ensemble_size {
        return Err(Error::config(
            "policy.ensemble_size",
            "does not match the supplied ensemble",
        ));
    }
    let mut optimizers = new_optimizers(&ens);
    let mut buffer = ParentBuffer::new(env.initial_state(), config.parent_capacity);
    let mut gate = config
        .streaming_enabled
        .then(|| StreamingGateState::new(config.streaming.clone()));
    let mut log = RunLog::default();
    let mut running_best = 0.0_f64;

    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..config.epochs {
        let mut epoch_mi = 0.0;
        let mut epoch_tokens = 0usize;
        let mut epoch_pg = 0.0;
        let mut skipped_groups = 0usize;
        let mut nonunique = false;
        for group in 0..config.groups_per_batch {
            let mut parent_rng =
                seed::stream(config.seed, &[4, epoch as u64, group as u64]);
            let parent = select_parent(&buffer, &mut parent_rng, config.parent_strategy);
            buffer.visit(parent);
            let prompt = buffer.entries()[parent].state.clone();
            let ctx = StepContext {
                seed: config.seed,
                epoch,
                group,
            };
            let report = train_step(
                &mut ens,
                &mut optimizers,
                &prompt,
                env,
                config,
                gate.as_mut(),
                ctx,
            )?;
            epoch_mi += report.total_mi;
            epoch_tokens += report.total_tokens;
            epoch_pg += report.pg_loss;
            skipped_groups += report.skipped as usize;
            nonunique |= report.nnm_nonunique;

            let adv = &report.advantages;
            for (i, rollout) in report.rollouts.iter().enumerate() {
                let candidate = env.decode(&rollout.generated_tokens);
                let new_best = rollout.reward > running_best;
                if new_best {
                    running_best = rollout.reward;
                }
                buffer.offer(parent, &candidate, rollout.reward);
                let family = (rollout.reward > 0.0).then(|| env.family(&rollout.generated_tokens));
                log.rollouts.push(RolloutRecord {
                    epoch,
                    group,
                    rollout: i,
                    adapter: rollout.generator,
                    parent,
                    reward: rollout.reward,
                    num_tokens: rollout.len(),
                    phase1_tokens: rollout.phase1_tokens,
                    phase2_tokens: rollout.phase2_tokens,
                    u_i: adv.mi_summaries[i],
                    u_mean: adv.u_mean,
                    u_std: adv.u_std,
                    beta: adv.beta.value(),
                    gamma_eff: adv.gamma_eff,
                    shaped_advantage: adv.shaped[i],
                    streaming_mi_stopped: rollout.streaming_mi_stopped,
                    streaming_mi_stop_step: rollout.streaming_mi_stop_step,
                    gate_window_mi: rollout.gate_window_mi,
                    family,
                    mean_mi: report.mean_mi[i],
                    candidate: render_tokens(&candidate),
                    constant_group: report.constant_group,
                    new_best,
                });
            }
        }
        if let Some(g) = gate.as_mut() {
            g.advance_epoch();
        }
        log.ensemble.push(EnsembleRecord {
            epoch,
            mean_block_cosine: mean_pairwise_block_cosine(&ens),
            nuclear_norms: layer_nuclear_norms(&ens),
            nnm_loss: nnm_loss(&ens),
            mean_token_mi: if epoch_tokens == 0 {
                0.0
            } else {
                epoch_mi / epoch_tokens as f64
            },
            pg_loss: epoch_pg,
            skipped_groups,
            nnm_nonunique: nonunique,
            gate_threshold: gate.as_ref().and_then(|g| g.threshold()),
        });
        if let Some(dir) = &options.checkpoint_dir {
            save_checkpoint(&ens, &dir.join(format!("epoch-{epoch:03}.json")))?;
        }
    }
    Ok(TrainingOutcome {
        log,
        ensemble: ens,
        buffer,
    })
}
