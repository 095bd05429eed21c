//! Frozen-base policy with `K` low-rank adapters.
//!
//! A fixed, seeded encoder maps a token prefix to `L` feature blocks. Layer
//! `ℓ` is a linear head `Θ_ℓ + s·B_ℓA_ℓ` over block `ℓ`, and the heads' logits
//! are summed. Only the adapter matrices `A`, `B` are trainable.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax_unchecked, Distribution, Matrix};
use crate::seed;
use crate::uncertainty::{mi_per_token, windowed_mi, GateDecision, StreamingGate};

pub type Token = usize;

/// Terminates a rollout.
pub const END_TOKEN: Token = 0;
/// Separates the thinking phase from the solution phase.
pub const SEPARATOR_TOKEN: Token = 1;
pub const FIRST_CONTENT_TOKEN: Token = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyArchitecture {
    pub vocab_size: usize,
    /// Input width `d_in` of every tracked head.
    pub feature_dim: usize,
    pub tracked_layers: usize,
    pub adapter_rank: usize,
    pub ensemble_size: usize,
    pub encoder_seed: u64,
    /// Width of the hashed n-gram vector fed to the fixed encoder.
    pub hash_dim: usize,
    /// LoRA alpha; the adapter scale is `lora_alpha / adapter_rank`.
    pub lora_alpha: f64,
    /// Base head entries are `N(0, base_scale² / d_in)`.
    pub base_scale: f64,
    /// Down-projection entries are `N(0, adapter_init_std² / d_in)`.
    pub adapter_init_std: f64,
}

impl Default for PolicyArchitecture {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feature_dim: 32,
            tracked_layers: 2,
            adapter_rank: 4,
            ensemble_size: 5,
            encoder_seed: 0,
            hash_dim: 64,
            lora_alpha: 8.0,
            base_scale: 1.5,
            adapter_init_std: 1.0 / 3f64.sqrt(),
        }
    }
}

impl PolicyArchitecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.tracked_layers == 0 {
            return bad("tracked_layers must be at least 1".into());
        }
        if self.adapter_rank == 0 || self.ensemble_size == 0 || self.feature_dim == 0 {
            return bad("adapter_rank, ensemble_size and feature_dim must be positive".into());
        }
        if self.hash_dim == 0 {
            return bad("hash_dim must be positive".into());
        }
        if self.ensemble_size * self.adapter_rank > self.feature_dim {
            return bad(format!(
                "K·r = {} exceeds d_in = {}",
                self.ensemble_size * self.adapter_rank,
                self.feature_dim
            ));
        }
        if !(self.lora_alpha.is_finite() && self.base_scale.is_finite())
            || !self.adapter_init_std.is_finite()
        {
            return bad("scales must be finite".into());
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.adapter_rank as f64
    }
}

/// Per-layer feature blocks for one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub blocks: Vec<Vec<f64>>,
}

impl Features {
    pub fn scaled(&self, s: f64) -> Features {
        Features {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|v| v * s).collect())
                .collect(),
        }
    }
}

/// Hashed n-gram features pushed through a fixed random `tanh` layer.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    vocab_size: usize,
    hash_dim: usize,
    seed: u64,
    projections: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

const NGRAM_WEIGHTS: [f64; 3] = [1.0, 1.0, 0.7];
const BAG_WEIGHT: f64 = 0.5;
const LENGTH_WEIGHT: f64 = 0.5;
const PROJECTION_STD: f64 = 0.6;
const BIAS_STD: f64 = 0.1;

impl FeatureEncoder {
    pub fn new(arch: &PolicyArchitecture) -> Self {
        let mut rng = seed::stream(arch.encoder_seed, &[0xE4C0]);
        let proj = Normal::new(0.0, PROJECTION_STD).expect("valid std");
        let bias = Normal::new(0.0, BIAS_STD).expect("valid std");
        let projections = (0..arch.tracked_layers)
            .map(|_| Matrix::from_fn(arch.feature_dim, arch.hash_dim, |_, _| proj.sample(&mut rng)))
            .collect();
        let biases = (0..arch.tracked_layers)
            .map(|_| (0..arch.feature_dim).map(|_| bias.sample(&mut rng)).collect())
            .collect();
        Self {
            vocab_size: arch.vocab_size,
            hash_dim: arch.hash_dim,
            seed: arch.encoder_seed,
            projections,
            biases,
        }
    }

    fn bump(&self, h: &mut [f64], kind: u64, gram: &[Token], weight: f64) {
        let mut path = Vec::with_capacity(gram.len() + 1);
        path.push(kind);
        path.extend(gram.iter().map(|&t| t as u64));
        let x = seed::derive(self.seed, &path);
        let idx = (x % self.hash_dim as u64) as usize;
        let sign = if x >> 63 == 1 { 1.0 } else { -1.0 };
        h[idx] += sign * weight;
    }

    fn hashed(&self, tokens: &[Token]) -> Vec<f64> {
        let mut h = vec![0.0; self.hash_dim];
        if tokens.is_empty() {
            self.bump(&mut h, 0, &[], 1.0);
            return h;
        }
        let len = tokens.len();
        for (n, &w) in (1..=3).zip(NGRAM_WEIGHTS.iter()) {
            if len >= n {
                self.bump(&mut h, n as u64, &tokens[len - n..], w);
            }
        }
        let bag = BAG_WEIGHT / len as f64;
        for &t in tokens {
            self.bump(&mut h, 4, &[t], bag);
        }
        self.bump(&mut h, 5, &[len.min(31)], LENGTH_WEIGHT);
        h
    }

    /// Features of a token prefix; every entry lies in `(-1, 1)`.
    pub fn encode(&self, tokens: &[Token]) -> Result<Features> {
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::OutOfVocab {
                token,
                vocab: self.vocab_size,
            });
        }
        let h = self.hashed(tokens);
        let blocks = self
            .projections
            .iter()
            .zip(&self.biases)
            .map(|(m, b)| {
                m.matvec(&h)
                    .into_iter()
                    .zip(b)
                    .map(|(z, bias)| (z + bias).tanh())
                    .collect()
            })
            .collect();
        Ok(Features { blocks })
    }
}

/// Standalone helper: builds the encoder for `arch` and encodes `tokens`.
pub fn encode_context(arch: &PolicyArchitecture, tokens: &[Token]) -> Result<Features> {
    FeatureEncoder::new(arch).encode(tokens)
}

/// One layer's adapter pair: `a` is `r × d_in`, `b` is `V × r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub a: Matrix,
    pub b: Matrix,
}

/// The trainable parameters of one adapter (or a gradient of the same shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub layers: Vec<LayerParams>,
}

impl AdapterParams {
    pub fn zeros(arch: &PolicyArchitecture) -> Self {
        Self {
            layers: (0..arch.tracked_layers)
                .map(|_| LayerParams {
                    a: Matrix::zeros(arch.adapter_rank, arch.feature_dim),
                    b: Matrix::zeros(arch.vocab_size, arch.adapter_rank),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &AdapterParams, scale: f64) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.a.add_scaled(&o.a, scale);
            l.b.add_scaled(&o.b, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.a.scale(s);
            l.b.scale(s);
        }
    }

    pub fn set_zero(&mut self) {
        for l in &mut self.layers {
            l.a.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn max_abs_diff(&self, other: &AdapterParams) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(l, o)| l.a.max_abs_diff(&o.a).max(l.b.max_abs_diff(&o.b)))
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.a.is_zero() && l.b.is_zero())
    }

    /// Parameter matrices in a fixed order (`a₀, b₀, a₁, b₁, …`) with names.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("layer{i}.a"), &l.a), (format!("layer{i}.b"), &l.b)])
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.a, &mut l.b])
            .collect()
    }

    /// Flattens every entry in `named()` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named()
            .into_iter()
            .flat_map(|(_, m)| m.as_slice().to_vec())
            .collect()
    }

    /// Inverse of [`AdapterParams::flatten`].
    pub fn unflatten_into(&mut self, values: &[f64]) {
        let mut offset = 0;
        for m in self.matrices_mut() {
            let n = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }
}

/// How the `K` down-projections are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInit {
    /// Every adapter gets the same `A` draw.
    Shared,
    /// Each adapter gets its own `A` draw.
    #[default]
    Independent,
}

/// Frozen base heads plus `K` adapters.
#[derive(Clone, Debug)]
pub struct AdapterEnsemble {
    arch: PolicyArchitecture,
    init_seed: u64,
    base: Vec<Matrix>,
    adapters: Vec<AdapterParams>,
    lora_scale: f64,
    encoder: FeatureEncoder,
}

/// Builds a fresh ensemble: Gaussian base, Gaussian `A`, zero `B`.
///
/// Because `B = 0`, every member initially equals the base policy.
pub fn init_ensemble(
    arch: &PolicyArchitecture,
    seed: u64,
    init: AdapterInit,
) -> Result<AdapterEnsemble> {
    arch.validate()?;
    let d_in = arch.feature_dim as f64;
    let base_dist = Normal::new(0.0, arch.base_scale / d_in.sqrt())
        .map_err(|e| Error::Architecture(e.to_string()))?;
    let a_dist = Normal::new(0.0, arch.adapter_init_std / d_in.sqrt())
        .map_err(|e| Error::Architecture(e.to_string()))?;

    let base = (0..arch.tracked_layers)
        .map(|l| {
            let mut rng = seed::stream(seed, &[1, l as u64]);
            Matrix::from_fn(arch.vocab_size, arch.feature_dim, |_, _| base_dist.sample(&mut rng))
        })
        .collect();

    let adapters = (0..arch.ensemble_size)
        .map(|k| {
            let stream_id = match init {
                AdapterInit::Shared => 0,
                AdapterInit::Independent => k as u64 + 1,
            };
            AdapterParams {
                layers: (0..arch.tracked_layers)
                    .map(|l| {
                        let mut rng = seed::stream(seed, &[2, l as u64, stream_id]);
                        LayerParams {
                            a: Matrix::from_fn(arch.adapter_rank, arch.feature_dim, |_, _| {
                                a_dist.sample(&mut rng)
                            }),
                            b: Matrix::zeros(arch.vocab_size, arch.adapter_rank),
                        }
                    })
                    .collect(),
            }
        })
        .collect();

    Ok(AdapterEnsemble {
        arch: arch.clone(),
        init_seed: seed,
        base,
        adapters,
        lora_scale: arch.lora_scale(),
        encoder: FeatureEncoder::new(arch),
    })
}

impl AdapterEnsemble {
    pub fn arch(&self) -> &PolicyArchitecture {
        &self.arch
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn ensemble_size(&self) -> usize {
        self.adapters.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.arch.vocab_size
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_scale
    }

    pub fn base(&self) -> &[Matrix] {
        &self.base
    }

    pub fn adapter(&self, k: usize) -> &AdapterParams {
        &self.adapters[k]
    }

    pub fn adapter_mut(&mut self, k: usize) -> &mut AdapterParams {
        &mut self.adapters[k]
    }

    pub fn adapters(&self) -> &[AdapterParams] {
        &self.adapters
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    /// Builds an ensemble from explicit parts (used by tests and checkpoints).
    pub fn from_parts(
        arch: PolicyArchitecture,
        init_seed: u64,
        base: Vec<Matrix>,
        adapters: Vec<AdapterParams>,
    ) -> Result<Self> {
        arch.validate()?;
        let expect_base = (arch.vocab_size, arch.feature_dim);
        if base.len() != arch.tracked_layers || base.iter().any(|m| m.shape() != expect_base) {
            return Err(Error::Shape("base heads do not match architecture".into()));
        }
        if adapters.len() != arch.ensemble_size {
            return Err(Error::Shape(format!(
                "expected {} adapters, got {}",
                arch.ensemble_size,
                adapters.len()
            )));
        }
        let zero = AdapterParams::zeros(&arch);
        for a in &adapters {
            let ok = a.layers.len() == zero.layers.len()
                && a.layers.iter().zip(&zero.layers).all(|(l, z)| {
                    l.a.shape() == z.a.shape() && l.b.shape() == z.b.shape()
                });
            if !ok {
                return Err(Error::Shape("adapter shapes do not match architecture".into()));
            }
        }
        Ok(Self {
            encoder: FeatureEncoder::new(&arch),
            lora_scale: arch.lora_scale(),
            arch,
            init_seed,
            base,
            adapters,
        })
    }

    /// Returns a copy with a different ensemble size, every member a clone of
    /// adapter `k`. Used to build tied ensembles and single-adapter baselines.
    pub fn with_members_cloned_from(&self, k: usize, count: usize) -> Result<Self> {
        let mut arch = self.arch.clone();
        arch.ensemble_size = count;
        Self::from_parts(
            arch,
            self.init_seed,
            self.base.clone(),
            vec![self.adapters[k].clone(); count],
        )
    }

    pub fn encode(&self, tokens: &[Token]) -> Result<Features> {
        self.encoder.encode(tokens)
    }

    /// Logits of the frozen base alone.
    pub fn base_logits(&self, features: &Features) -> Vec<f64> {
        let mut logits = vec![0.0; self.arch.vocab_size];
        for (theta, phi) in self.base.iter().zip(&features.blocks) {
            for (o, v) in logits.iter_mut().zip(theta.matvec(phi)) {
                *o += v;
            }
        }
        logits
    }

    /// `s · Σ_ℓ B_ℓ A_ℓ φ_ℓ` for adapter `k`.
    pub fn adapter_delta(&self, k: usize, features: &Features) -> Vec<f64> {
        let mut delta = vec![0.0; self.arch.vocab_size];
        for (layer, phi) in self.adapters[k].layers.iter().zip(&features.blocks) {
            let z = layer.a.matvec(phi);
            for (o, v) in delta.iter_mut().zip(layer.b.matvec(&z)) {
                *o += v;
            }
        }
        delta.iter_mut().for_each(|v| *v *= self.lora_scale);
        delta
    }

    fn logits_from_base(&self, k: usize, base: &[f64], features: &Features) -> Vec<f64> {
        base.iter()
            .zip(self.adapter_delta(k, features))
            .map(|(b, d)| b + d)
            .collect()
    }

    /// Next-token logits of member `k`.
    pub fn adapter_logits(&self, k: usize, features: &Features) -> Vec<f64> {
        let base = self.base_logits(features);
        self.logits_from_base(k, &base, features)
    }

    /// Features for every generated position of a rollout.
    pub fn rollout_features(&self, rollout: &Rollout) -> Result<Vec<Features>> {
        let mut context = rollout.prompt_tokens.clone();
        let mut out = Vec::with_capacity(rollout.generated_tokens.len());
        for &tok in &rollout.generated_tokens {
            out.push(self.encode(&context)?);
            context.push(tok);
        }
        Ok(out)
    }

    /// Total number of trainable scalars across all members.
    pub fn num_trainable(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.named().iter().map(|(_, m)| m.as_slice().len()).sum::<usize>())
            .sum()
    }
}

/// Generation limits for one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub max_tokens: usize,
    /// Phase-1 length at which the streaming gate is queried.
    pub phase1_cap: usize,
    /// Tokens allowed after a gate-forced separator (the separator included).
    pub phase2_budget: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_tokens: 24,
            phase1_cap: 8,
            phase2_budget: 8,
        }
    }
}

/// One sampled completion and its bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub prompt_tokens: Vec<Token>,
    pub generated_tokens: Vec<Token>,
    /// Index of the generating adapter (0-based).
    pub generator: usize,
    pub phase1_tokens: usize,
    pub phase2_tokens: usize,
    /// `log π_generator(o_t | ·)` at sampling time.
    pub logprob_old: Vec<f64>,
    pub reward: f64,
    pub streaming_mi_stopped: bool,
    pub streaming_mi_stop_step: Option<usize>,
    /// Windowed MI seen by the gate, if it was consulted.
    pub gate_window_mi: Option<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.generated_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated_tokens.is_empty()
    }

    /// Checks the phase and per-token array invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.generated_tokens.len();
        if self.phase1_tokens + self.phase2_tokens != n || self.logprob_old.len() != n {
            return Err(Error::Shape(format!(
                "rollout of {n} tokens has phases {}+{} and {} logprobs",
                self.phase1_tokens,
                self.phase2_tokens,
                self.logprob_old.len()
            )));
        }
        Ok(())
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off left `u` above the cumulative sum; take the last nonzero entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples one rollout from member `k` at temperature 1.
///
/// With a gate, per-token ensemble MI is tracked through phase 1; when the
/// phase-1 length reaches `limits.phase1_cap` the gate is queried once. On
/// truncation the separator is forced and at most `phase2_budget` tokens
/// (separator included) follow.
pub fn sample_rollout(
    ens: &AdapterEnsemble,
    k: usize,
    prompt: &[Token],
    limits: &Limits,
    mut gate: Option<&mut dyn StreamingGate>,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    if k >= ens.ensemble_size() {
        return Err(Error::InvalidArgument(format!(
            "adapter {k} out of range for ensemble of {}",
            ens.ensemble_size()
        )));
    }
    let mut context = prompt.to_vec();
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    let mut mi_trace = Vec::new();
    let mut separator_at: Option<usize> = None;
    let mut stop_step = None;
    let mut gate_value = None;
    let mut phase2_end: Option<usize> = None;
    let mut queried = false;

    while tokens.len() < limits.max_tokens {
        if let Some(end) = phase2_end {
            if tokens.len() >= end {
                break;
            }
        }
        let features = ens.encode(&context)?;
        let base = ens.base_logits(&features);
        let logits = ens.logits_from_base(k, &base, &features);
        let lp = log_softmax_unchecked(&logits);

        let mut forced = None;
        if separator_at.is_none() {
            if let Some(g) = gate.as_deref_mut() {
                if !queried && tokens.len() == limits.phase1_cap {
                    queried = true;
                    let window = windowed_mi(&mi_trace, g.window());
                    let decision = g.query(window, tokens.len());
                    if decision != GateDecision::Inactive {
                        gate_value = Some(window);
                    }
                    if decision == GateDecision::Truncate {
                        stop_step = Some(tokens.len());
                        forced = Some(SEPARATOR_TOKEN);
                        phase2_end = Some(tokens.len() + limits.phase2_budget.max(1));
                    }
                }
                if forced.is_none() {
                    let members: Vec<Distribution> = (0..ens.ensemble_size())
                        .map(|j| {
                            let l = if j == k {
                                lp.clone()
                            } else {
                                log_softmax_unchecked(&ens.logits_from_base(j, &base, &features))
                            };
                            Distribution::from_log_probs_unchecked(&l)
                        })
                        .collect();
                    mi_trace.push(mi_per_token(&members)?);
                }
            }
        }

        let token = match forced {
            Some(t) => t,
            None => {
                let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                sample_index(&probs, rng)
            }
        };
        tokens.push(token);
        logprobs.push(lp[token]);
        context.push(token);
        if token == SEPARATOR_TOKEN && separator_at.is_none() {
            separator_at = Some(tokens.len() - 1);
        }
        if token == END_TOKEN {
            break;
        }
    }

    let phase1 = separator_at.unwrap_or(tokens.len());
    let rollout = Rollout {
        prompt_tokens: prompt.to_vec(),
        phase1_tokens: phase1,
        phase2_tokens: tokens.len() - phase1,
        generated_tokens: tokens,
        generator: k,
        logprob_old: logprobs,
        reward: 0.0,
        streaming_mi_stopped: stop_step.is_some(),
        streaming_mi_stop_step: stop_step,
        gate_window_mi: gate_value,
    };
    Ok(rollout)
}

/// Every member's predictive distribution at every position of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutScores {
    /// `[position][member]`.
    pub member_dists: Vec<Vec<Distribution>>,
    /// `[member][position]`: `log π_k(o_t | ·)`.
    pub member_logprobs: Vec<Vec<f64>>,
    /// `[position]`: `log π_base(o_t | ·)`.
    pub base_logprobs: Vec<f64>,
}

struct PositionScore {
    dists: Vec<Distribution>,
    logprobs: Vec<f64>,
    base_logprob: f64,
}

fn score_position(ens: &AdapterEnsemble, context: &[Token], token: Token) -> Result<PositionScore> {
    let features = ens.encode(context)?;
    let base = ens.base_logits(&features);
    let base_lp = log_softmax_unchecked(&base);
    let mut dists = Vec::with_capacity(ens.ensemble_size());
    let mut logprobs = Vec::with_capacity(ens.ensemble_size());
    for k in 0..ens.ensemble_size() {
        let lp = log_softmax_unchecked(&ens.logits_from_base(k, &base, &features));
        logprobs.push(lp[token]);
        dists.push(Distribution::from_log_probs_unchecked(&lp));
    }
    Ok(PositionScore {
        dists,
        logprobs,
        base_logprob: base_lp[token],
    })
}

/// Scores every rollout under every member, `chunk_size` positions at a time.
///
/// Each position is computed independently, so the output does not depend on
/// `chunk_size`.
pub fn score_all_adapters(
    ens: &AdapterEnsemble,
    rollouts: &[Rollout],
    chunk_size: usize,
) -> Result<Vec<RolloutScores>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be at least 1".into()));
    }
    let positions: Vec<(usize, usize)> = rollouts
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.generated_tokens.len()).map(move |t| (i, t)))
        .collect();
    let chunks: Vec<Vec<PositionScore>> = positions
        .par_chunks(chunk_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(i, t)| {
                    let r = &rollouts[i];
                    let mut context = r.prompt_tokens.clone();
                    context.extend_from_slice(&r.generated_tokens[..t]);
                    score_position(ens, &context, r.generated_tokens[t])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let k = ens.ensemble_size();
    let mut out: Vec<RolloutScores> = rollouts
        .iter()
        .map(|r| RolloutScores {
            member_dists: Vec::with_capacity(r.generated_tokens.len()),
            member_logprobs: vec![Vec::with_capacity(r.generated_tokens.len()); k],
            base_logprobs: Vec::with_capacity(r.generated_tokens.len()),
        })
        .collect();
    for (&(i, _), score) in positions.iter().zip(chunks.into_iter().flatten()) {
        let slot = &mut out[i];
        for (member, lp) in slot.member_logprobs.iter_mut().zip(&score.logprobs) {
            member.push(*lp);
        }
        slot.member_dists.push(score.dists);
        slot.base_logprobs.push(score.base_logprob);
    }
    Ok(out)
}

/// Per-token log-probabilities of member `k` on a rollout, and the gradient of
/// `Σ_t coeff_t · log π_k(o_t | ·)` with respect to that member's adapter.
pub fn logprob_and_grads(
    ens: &AdapterEnsemble,
    k: usize,
    rollout: &Rollout,
    coeffs: &[f64],
) -> Result<(Vec<f64>, AdapterParams)> {
    let features = ens.rollout_features(rollout)?;
    let mut grads = AdapterParams::zeros(ens.arch());
    let lps = accumulate_logprob_grads(ens, k, rollout, &features, coeffs, &mut grads)?;
    Ok((lps, grads))
}

/// Like [`logprob_and_grads`] with precomputed features, accumulating into
/// `grads`.
pub fn accumulate_logprob_grads(
    ens: &AdapterEnsemble,
    k: usize,
    rollout: &Rollout,
    features: &[Features],
    coeffs: &[f64],
    grads: &mut AdapterParams,
) -> Result<Vec<f64>> {
    let n = rollout.generated_tokens.len();
    if coeffs.len() != n || features.len() != n {
        return Err(Error::Shape(format!(
            "{n} tokens but {} coefficients and {} feature rows",
            coeffs.len(),
            features.len()
        )));
    }
    if let Some(index) = coeffs.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let s = ens.lora_scale();
    let adapter = ens.adapter(k);
    let mut logprobs = Vec::with_capacity(n);
    for ((phi, &token), &coeff) in features.iter().zip(&rollout.generated_tokens).zip(coeffs) {
        let logits = ens.adapter_logits(k, phi);
        let lp = log_softmax_unchecked(&logits);
        logprobs.push(lp[token]);
        if coeff == 0.0 {
            continue;
        }
        // d/dlogits of coeff · log p(token) = coeff · (onehot − p)
        let mut g: Vec<f64> = lp.iter().map(|v| -coeff * v.exp()).collect();
        g[token] += coeff;
        for ((layer, grad), block) in adapter.layers.iter().zip(&mut grads.layers).zip(&phi.blocks) {
            let z = layer.a.matvec(block);
            grad.b.add_outer(&g, &z, s);
            let bt_g = layer.b.transpose_matvec(&g);
            grad.a.add_outer(&bt_g, block, s);
        }
    }
    Ok(logprobs)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arch: PolicyArchitecture,
    init_seed: u64,
    base: Vec<Matrix>,
    adapters: Vec<AdapterParams>,
}

const CHECKPOINT_FORMAT: &str = "divtt-ensemble";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes the full ensemble to JSON; floats round-trip bit-exactly.
pub fn checkpoint_to_string(ens: &AdapterEnsemble) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        arch: ens.arch.clone(),
        init_seed: ens.init_seed,
        base: ens.base.clone(),
        adapters: ens.adapters.clone(),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_str(text: &str) -> Result<AdapterEnsemble> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            file.version
        )));
    }
    for m in file.base.iter().chain(file.adapters.iter().flat_map(|a| {
        a.layers.iter().flat_map(|l| [&l.a, &l.b])
    })) {
        Matrix::new(m.rows(), m.cols(), m.as_slice().to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    AdapterEnsemble::from_parts(file.arch, file.init_seed, file.base, file.adapters)
}

pub fn save_checkpoint(ens: &AdapterEnsemble, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(ens)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AdapterEnsemble> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}
