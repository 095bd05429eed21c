//! Ensemble disagreement: per-token BALD mutual information, the per-rollout
//! top-fraction summary, and the streaming early-stop gate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{entropy, Distribution, LogBase};

/// Fraction of most-uncertain positions averaged into a rollout summary.
pub const DEFAULT_TOP_FRACTION: f64 = 0.07;

/// Mutual information between the next token and the ensemble member,
/// `H(mixture) − mean_k H(member_k)`, in nats.
///
/// Exactly zero when every member is bitwise identical; tiny negative
/// round-off is clamped to zero.
pub fn mi_per_token(members: &[Distribution]) -> Result<f64> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidArgument("mutual information of zero members".into()))?;
    if let Some(bad) = members.iter().find(|m| m.len() != first.len()) {
        return Err(Error::Shape(format!(
            "member alphabet sizes differ: {} vs {}",
            first.len(),
            bad.len()
        )));
    }
    if members.iter().all(|m| m.probs() == first.probs()) {
        return Ok(0.0);
    }
    let mixture = Distribution::mixture(members)?;
    let member_mean = members
        .iter()
        .map(|m| entropy(m, LogBase::Natural))
        .sum::<f64>()
        / members.len() as f64;
    Ok((entropy(&mixture, LogBase::Natural) - member_mean).max(0.0))
}

/// Per-token MI along one rollout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiTrace {
    pub per_token_mi: Vec<f64>,
}

impl MiTrace {
    pub fn new(per_token_mi: Vec<f64>) -> Self {
        Self { per_token_mi }
    }

    /// Computes the trace from `[position][member]` distributions.
    pub fn from_members(positions: &[Vec<Distribution>]) -> Result<Self> {
        positions
            .iter()
            .map(|members| mi_per_token(members))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn len(&self) -> usize {
        self.per_token_mi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token_mi.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.per_token_mi.is_empty() {
            0.0
        } else {
            self.per_token_mi.iter().sum::<f64>() / self.per_token_mi.len() as f64
        }
    }
}

/// Number of positions kept by the top-fraction rule: `⌈q·n⌉`, at least one.
pub fn top_count(n: usize, fraction: f64) -> usize {
    // Guard against `0.07 * 100 = 7.000000000000001` rounding up to 8.
    let raw = fraction * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    count.clamp(1, n.max(1))
}

/// Mean of the `⌈q·n⌉` largest per-token MI values.
pub fn rollout_mi_summary(trace: &MiTrace, fraction: f64) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty MI trace".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "top fraction {fraction} outside (0, 1]"
        )));
    }
    let n = trace.len();
    let count = top_count(n, fraction);
    let mut values = trace.per_token_mi.clone();
    if count < n {
        values.select_nth_unstable_by(count - 1, |a, b| b.total_cmp(a));
    }
    let top = &mut values[..count];
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(top.iter().sum::<f64>() / count as f64)
}

/// Mean MI over the trailing `window` positions of a trace prefix.
pub fn windowed_mi(trace: &[f64], window: usize) -> f64 {
    if trace.is_empty() || window == 0 {
        return 0.0;
    }
    let tail = &trace[trace.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Continue,
    Truncate,
    Inactive,
}

/// Settings of the streaming early-stop gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Trailing tokens averaged into the windowed MI.
    pub window: usize,
    /// Kept for configuration compatibility; the gate is queried once, at the cap.
    pub check_interval: usize,
    pub min_tokens_before_check: usize,
    pub percentile: f64,
    pub warmup_epochs: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            window: 4,
            check_interval: 2,
            min_tokens_before_check: 4,
            percentile: 25.0,
            warmup_epochs: 3,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("streaming.window", "must be positive"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::config("streaming.percentile", "must lie in (0, 100)"));
        }
        Ok(())
    }
}

/// Something the sampler can consult at the phase-1 cap.
pub trait StreamingGate {
    fn window(&self) -> usize;
    fn query(&mut self, windowed_mi: f64, tokens_generated: usize) -> GateDecision;
}

/// Running gate with a history of every consulted window value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamingGateState {
    pub config: GateConfig,
    pub history: Vec<f64>,
    pub current_epoch: usize,
}

impl StreamingGateState {
    pub fn new(config: GateConfig) -> Self {
        Self {
            config,
            history: Vec::new(),
            current_epoch: 0,
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.current_epoch < self.config.warmup_epochs
    }

    pub fn threshold(&self) -> Option<f64> {
        percentile(&self.history, self.config.percentile)
    }

    /// The decision for a window value without touching the history.
    pub fn decide(&self, windowed_mi: f64, tokens_generated: usize) -> GateDecision {
        if tokens_generated < self.config.min_tokens_before_check || self.in_warmup() {
            return GateDecision::Inactive;
        }
        match self.threshold() {
            Some(th) if windowed_mi < th => GateDecision::Truncate,
            _ => GateDecision::Continue,
        }
    }

    /// Whether a query at this length counts as a consultation (and so
    /// enters the history).
    pub fn consults(&self, tokens_generated: usize) -> bool {
        tokens_generated >= self.config.min_tokens_before_check
    }

    pub fn record(&mut self, windowed_mi: f64) {
        self.history.push(windowed_mi);
    }

    /// Decide, then append the consulted value to the history.
    ///
    /// Values seen during warmup are recorded so a threshold exists once the
    /// gate becomes active.
    pub fn gate_update_and_decide(
        &mut self,
        windowed_mi: f64,
        tokens_generated: usize,
    ) -> GateDecision {
        let decision = self.decide(windowed_mi, tokens_generated);
        if self.consults(tokens_generated) {
            self.record(windowed_mi);
        }
        decision
    }

    pub fn advance_epoch(&mut self) {
        self.current_epoch += 1;
    }

    /// A read-only view for one group of rollouts; history updates are
    /// deferred so generation order cannot affect decisions.
    pub fn snapshot(&self) -> GateSnapshot {
        GateSnapshot {
            window: self.config.window,
            min_tokens: self.config.min_tokens_before_check,
            active: !self.in_warmup(),
            threshold: self.threshold(),
            consulted: None,
        }
    }
}

impl StreamingGate for StreamingGateState {
    fn window(&self) -> usize {
        self.config.window
    }

    fn query(&mut self, windowed_mi: f64, tokens_generated: usize) -> GateDecision {
        self.gate_update_and_decide(windowed_mi, tokens_generated)
    }
}

/// Frozen gate state handed to a single rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSnapshot {
    window: usize,
    min_tokens: usize,
    active: bool,
    threshold: Option<f64>,
    /// Window value seen by this rollout, to be folded into the history.
    pub consulted: Option<f64>,
}

impl StreamingGate for GateSnapshot {
    fn window(&self) -> usize {
        self.window
    }

    fn query(&mut self, windowed_mi: f64, tokens_generated: usize) -> GateDecision {
        if tokens_generated < self.min_tokens {
            return GateDecision::Inactive;
        }
        self.consulted = Some(windowed_mi);
        if !self.active {
            return GateDecision::Inactive;
        }
        match self.threshold {
            Some(th) if windowed_mi < th => GateDecision::Truncate,
            _ => GateDecision::Continue,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut impl Rng, n: usize) -> Distribution {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        Distribution::from_logits(&logits).unwrap()
    }

    #[test]
    fn identical_members_have_zero_mi() {
        let d = dist(&[0.3, 0.3, 0.4]);
        assert_eq!(mi_per_token(&[d.clone(), d.clone(), d]).unwrap(), 0.0);
    }

    #[test]
    fn maximal_disagreement_is_ln2() {
        let mi = mi_per_token(&[dist(&[1.0, 0.0]), dist(&[0.0, 1.0])]).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn partial_disagreement_value() {
        // ln 2 − H(0.8, 0.2) computed by hand.
        let mi = mi_per_token(&[dist(&[0.8, 0.2]), dist(&[0.2, 0.8])]).unwrap();
        let expected = std::f64::consts::LN_2 - (-(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()));
        assert!((mi - expected).abs() < 1e-15);
        assert!((mi - 0.1927).abs() < 1e-4);
    }

    #[test]
    fn mismatched_alphabets_error() {
        assert!(mi_per_token(&[dist(&[1.0]), dist(&[0.5, 0.5])]).is_err());
        assert!(mi_per_token(&[]).is_err());
    }

    #[test]
    fn replacing_member_by_mixture_never_increases_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let mut members: Vec<Distribution> = (0..4).map(|_| random_dist(&mut rng, 5)).collect();
            let before = mi_per_token(&members).unwrap();
            members[0] = Distribution::mixture(&members).unwrap();
            let after = mi_per_token(&members).unwrap();
            assert!(after <= before + 1e-12, "{after} > {before}");
        }
    }

    #[test]
    fn top_count_rounding() {
        assert_eq!(top_count(10, 0.07), 1);
        assert_eq!(top_count(100, 0.07), 7);
        assert_eq!(top_count(101, 0.07), 8);
        assert_eq!(top_count(1, 0.07), 1);
    }

    #[test]
    fn summary_examples() {
        let constant = MiTrace::new(vec![0.25; 10]);
        assert_eq!(rollout_mi_summary(&constant, 0.07).unwrap(), 0.25);
        let mut spike = vec![0.0; 10];
        spike[6] = 3.5;
        assert_eq!(rollout_mi_summary(&MiTrace::new(spike), 0.07).unwrap(), 3.5);
        assert!(rollout_mi_summary(&MiTrace::default(), 0.07).is_err());
    }

    #[test]
    fn summary_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let values: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oracle = sorted[..7].iter().sum::<f64>() / 7.0;
            let u = rollout_mi_summary(&MiTrace::new(values.clone()), 0.07).unwrap();
            assert_eq!(u, oracle);
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= u && u <= hi);
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 25.0), Some(1.75));
        assert_eq!(percentile(&[], 25.0), None);
        assert_eq!(percentile(&[2.0], 25.0), Some(2.0));
    }

    #[test]
    fn gate_inactive_during_warmup() {
        let mut gate = StreamingGateState::new(GateConfig::default());
        for v in [0.0, 5.0, 0.1] {
            assert_eq!(gate.gate_update_and_decide(v, 100), GateDecision::Inactive);
        }
        assert_eq!(gate.history.len(), 3);
    }

    #[test]
    fn gate_threshold_decision() {
        let mut gate = StreamingGateState::new(GateConfig {
            warmup_epochs: 0,
            ..GateConfig::default()
        });
        // Empty history: no threshold, continue.
        assert_eq!(gate.gate_update_and_decide(1.0, 4), GateDecision::Continue);
        gate.history = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(gate.gate_update_and_decide(1.0, 4), GateDecision::Truncate);
        assert_eq!(gate.history.len(), 5);
        // At-or-above threshold continues.
        gate.history = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(gate.gate_update_and_decide(1.75, 4), GateDecision::Continue);
        // Before the minimum generation length the gate is not consulted.
        assert_eq!(gate.gate_update_and_decide(0.0, 3), GateDecision::Inactive);
        assert_eq!(gate.history.len(), 5);
    }

    #[test]
    fn snapshot_agrees_with_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = StreamingGateState::new(GateConfig {
            warmup_epochs: 1,
            ..GateConfig::default()
        });
        for _ in 0..20 {
            state.record(rng.random_range(0.0..1.0));
        }
        for epoch in 0..2 {
            state.current_epoch = epoch;
            for _ in 0..100 {
                let v = rng.random_range(0.0..1.0);
                let mut snap = state.snapshot();
                assert_eq!(snap.query(v, 8), state.decide(v, 8));
                assert_eq!(snap.consulted, Some(v));
            }
        }
    }

    #[test]
    fn firing_rate_tracks_percentile_on_iid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut gate = StreamingGateState::new(GateConfig {
            warmup_epochs: 0,
            ..GateConfig::default()
        });
        let n = 10_000;
        let fired = (0..n)
            .filter(|_| gate.gate_update_and_decide(rng.random::<f64>(), 4) == GateDecision::Truncate)
            .count();
        let rate = fired as f64 / n as f64;
        assert!((rate - 0.25).abs() < 0.02, "rate {rate}");
    }
}
