//! Group advantages: entropic temperature, leave-one-out weights, MI shaping
//! and the per-token KL-to-base correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_BRACKET_MAX: f64 = 1e6;
pub const BETA_ITERATIONS: usize = 60;
pub const DEFAULT_KL_TARGET: f64 = std::f64::consts::LN_2;
/// Relative distance to the bracket top below which bisection is considered
/// saturated.
const SATURATION_REL: f64 = 1e-3;

/// Outcome of the temperature solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSolution {
    Solved(f64),
    /// Constant rewards or an unreachable target; advantages fall back to 0.
    Degenerate,
}

impl BetaSolution {
    pub fn value(self) -> Option<f64> {
        match self {
            BetaSolution::Solved(b) => Some(b),
            BetaSolution::Degenerate => None,
        }
    }
}

fn check_rewards(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if let Some(index) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// `KL(softmax(β·R) ‖ Uniform) = ln G − H(softmax(β·R))`.
pub fn kl_to_uniform(rewards: &[f64], beta: f64) -> f64 {
    let g = rewards.len() as f64;
    let max = rewards.iter().map(|r| beta * r).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = rewards.iter().map(|r| beta * r - max).collect();
    let z: f64 = shifted.iter().map(|s| s.exp()).sum();
    let log_z = z.ln();
    // H = log Z − Σ q·s
    let mean_shift: f64 = shifted.iter().map(|s| s.exp() / z * s).sum();
    let entropy = log_z - mean_shift;
    (g.ln() - entropy).max(0.0)
}

/// Solves `KL(q_β ‖ Uniform) = kl_target` for `β` by bisection on
/// `[0, BETA_BRACKET_MAX]`.
pub fn solve_beta(rewards: &[f64], kl_target: f64) -> Result<BetaSolution> {
    check_rewards(rewards)?;
    if !(kl_target.is_finite() && kl_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "KL target must be positive, got {kl_target}"
        )));
    }
    let first = rewards[0];
    if rewards.iter().all(|r| *r == first) {
        return Ok(BetaSolution::Degenerate);
    }
    // KL is bounded by ln(G/m), m = number of tied maxima, reached only as
    // β → ∞; rounding would otherwise let bisection settle on a finite β.
    let top = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties = rewards.iter().filter(|r| **r == top).count();
    if kl_target >= (rewards.len() as f64 / ties as f64).ln() {
        return Ok(BetaSolution::Degenerate);
    }
    let (mut lo, mut hi) = (0.0_f64, BETA_BRACKET_MAX);
    for _ in 0..BETA_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if kl_to_uniform(rewards, mid) < kl_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta = 0.5 * (lo + hi);
    let saturated = (BETA_BRACKET_MAX - beta) <= SATURATION_REL * BETA_BRACKET_MAX
        && kl_to_uniform(rewards, beta) < kl_target;
    if saturated {
        return Ok(BetaSolution::Degenerate);
    }
    Ok(BetaSolution::Solved(beta))
}

/// Leave-one-out entropic weights `w_i` and advantages `A_i = w_i − 1`.
pub fn loo_advantages(rewards: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_rewards(rewards)?;
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and non-negative, got {beta}"
        )));
    }
    let g = rewards.len();
    let log_others = ((g - 1) as f64).ln();
    let scaled: Vec<f64> = rewards.iter().map(|r| beta * r).collect();
    let weights: Vec<f64> = (0..g)
        .map(|i| {
            let m = scaled
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = scaled
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| (v - m).exp())
                .sum();
            (scaled[i] - m - sum.ln() + log_others).exp()
        })
        .collect();
    let advantages = weights.iter().map(|w| w - 1.0).collect();
    Ok((weights, advantages))
}

/// Mean, unbiased standard deviation, and the clipped z-scores.
///
/// A zero (or undefined, `G < 2`) standard deviation yields all zeros.
pub fn standardize_clip(values: &[f64], clip: f64) -> (f64, f64, Vec<f64>) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0, Vec::new());
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0, vec![0.0; n]);
    }
    let var = values.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return (mean, 0.0, vec![0.0; n]);
    }
    let z = values
        .iter()
        .map(|u| ((u - mean) / std).clamp(-clip, clip))
        .collect();
    (mean, std, z)
}

/// Exploration gain `α · min(β / β_ref, γ_max)`.
pub fn gamma_eff(alpha: f64, beta: f64, beta_ref: f64, gamma_max: f64) -> f64 {
    alpha * (beta / beta_ref).min(gamma_max)
}

pub fn mean_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// `A_i + γ_eff · mean|A| · Ũ_i`.
pub fn shape_advantages(advantages: &[f64], u_tilde: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if advantages.len() != u_tilde.len() {
        return Err(Error::Shape(format!(
            "{} advantages but {} MI scores",
            advantages.len(),
            u_tilde.len()
        )));
    }
    let scale = gamma * mean_abs(advantages);
    Ok(advantages
        .iter()
        .zip(u_tilde)
        .map(|(a, u)| a + scale * u)
        .collect())
}

/// Broadcasts a rollout's scalar advantage over its tokens, subtracting
/// `λ_KL · (log π − log π_base)` at each position.
pub fn kl_token_correction(
    shaped: f64,
    logp_policy: &[f64],
    logp_base: &[f64],
    lambda_kl: f64,
) -> Result<Vec<f64>> {
    if logp_policy.len() != logp_base.len() {
        return Err(Error::Shape(format!(
            "{} policy logprobs but {} base logprobs",
            logp_policy.len(),
            logp_base.len()
        )));
    }
    if lambda_kl == 0.0 {
        return Ok(vec![shaped; logp_policy.len()]);
    }
    Ok(logp_policy
        .iter()
        .zip(logp_base)
        .map(|(p, b)| shaped - lambda_kl * (p - b))
        .collect())
}

/// Knobs of the shaping stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingParams {
    pub alpha: f64,
    pub beta_ref: f64,
    pub gamma_max: f64,
    pub mi_clip: f64,
    pub kl_target: f64,
}

impl Default for ShapingParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_ref: 2.0,
            gamma_max: 10.0,
            mi_clip: 3.0,
            kl_target: DEFAULT_KL_TARGET,
        }
    }
}

/// Everything computed for one group before the policy-gradient pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub rewards: Vec<f64>,
    pub beta: BetaSolution,
    pub loo_weights: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mi_summaries: Vec<f64>,
    pub u_mean: f64,
    pub u_std: f64,
    pub u_tilde: Vec<f64>,
    /// Rollouts whose MI z-score hit the clip.
    pub clipped: usize,
    pub gamma_eff: f64,
    pub mean_abs_adv: f64,
    pub shaped: Vec<f64>,
}

pub fn group_advantages(
    rewards: &[f64],
    mi_summaries: &[f64],
    params: &ShapingParams,
) -> Result<GroupAdvantages> {
    check_rewards(rewards)?;
    if mi_summaries.len() != rewards.len() {
        return Err(Error::Shape(format!(
            "{} rewards but {} MI summaries",
            rewards.len(),
            mi_summaries.len()
        )));
    }
    let g = rewards.len();
    let beta = solve_beta(rewards, params.kl_target)?;
    let (u_mean, u_std, u_tilde) = standardize_clip(mi_summaries, params.mi_clip);
    let clipped = u_tilde.iter().filter(|z| z.abs() >= params.mi_clip).count();
    let (loo_weights, advantages, gamma, shaped) = match beta {
        BetaSolution::Solved(b) => {
            let (w, a) = loo_advantages(rewards, b)?;
            let gamma = gamma_eff(params.alpha, b, params.beta_ref, params.gamma_max);
            let shaped = shape_advantages(&a, &u_tilde, gamma)?;
            (w, a, gamma, shaped)
        }
        BetaSolution::Degenerate => (vec![1.0; g], vec![0.0; g], 0.0, vec![0.0; g]),
    };
    Ok(GroupAdvantages {
        rewards: rewards.to_vec(),
        beta,
        loo_weights,
        mean_abs_adv: mean_abs(&advantages),
        advantages,
        mi_summaries: mi_summaries.to_vec(),
        u_mean,
        u_std,
        u_tilde,
        clipped,
        gamma_eff: gamma,
        shaped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, LN_2};

    #[test]
    fn constant_rewards_are_degenerate() {
        assert_eq!(solve_beta(&[5.0; 4], LN_2).unwrap(), BetaSolution::Degenerate);
    }

    #[test]
    fn one_hot_of_four() {
        let beta = solve_beta(&[0.0, 0.0, 0.0, 1.0], LN_2).unwrap().value().unwrap();
        assert!((beta - 2.55).abs() < 0.01, "{beta}");
        assert!((kl_to_uniform(&[0.0, 0.0, 0.0, 1.0], beta) - LN_2).abs() < 1e-9);
    }

    #[test]
    fn two_rollouts_saturate() {
        assert_eq!(solve_beta(&[0.0, 1.0], LN_2).unwrap(), BetaSolution::Degenerate);
    }

    #[test]
    fn too_small_groups_error() {
        assert!(solve_beta(&[1.0], LN_2).is_err());
        assert!(loo_advantages(&[1.0], 1.0).is_err());
    }

    #[test]
    fn equal_rewards_give_unit_weights() {
        let (w, a) = loo_advantages(&[0.3; 6], 7.5).unwrap();
        assert!(w.iter().all(|v| *v == 1.0));
        assert!(a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_rollout_closed_form() {
        let (w, a) = loo_advantages(&[0.0, 1.0], 1.0).unwrap();
        assert!((w[0] - E.recip()).abs() < 1e-15);
        assert!((w[1] - E).abs() < 1e-15);
        assert!((a[0] - (E.recip() - 1.0)).abs() < 1e-15);
        assert!((a[1] - (E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn loo_matches_direct_formula_and_is_not_centered() {
        let r = [0.1, 0.7, 0.2, 0.9, 0.0];
        let beta = 1.3;
        let (w, a) = loo_advantages(&r, beta).unwrap();
        for i in 0..r.len() {
            let others: f64 = (0..r.len())
                .filter(|j| *j != i)
                .map(|j| (beta * r[j]).exp())
                .sum::<f64>()
                / 4.0;
            let direct = (beta * r[i]).exp() / others;
            assert!((w[i] - direct).abs() < 1e-13);
        }
        assert!(a.iter().sum::<f64>().abs() > 1e-3);
    }

    #[test]
    fn standardize_conventions() {
        let (_, s, z) = standardize_clip(&[2.0; 5], 3.0);
        assert_eq!(s, 0.0);
        assert!(z.iter().all(|v| *v == 0.0));
        let mut outlier = vec![0.0; 16];
        outlier[3] = 1.0;
        let (_, _, z) = standardize_clip(&outlier, 3.0);
        assert_eq!(z[3], 3.0);
        let (_, _, z) = standardize_clip(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 3.0);
        assert!(z.iter().all(|v| v.abs() < 7f64.sqrt() + 1e-12));
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma_eff(0.1, 0.0, 2.0, 10.0), 0.0);
        assert!((gamma_eff(0.1, 4.0, 2.0, 10.0) - 0.2).abs() < 1e-15);
        assert!((gamma_eff(0.1, 1e6, 2.0, 10.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn shaping_edge_cases() {
        let a = [0.5, -0.2, 0.1];
        assert_eq!(shape_advantages(&a, &[0.0; 3], 3.0).unwrap(), a.to_vec());
        assert_eq!(
            shape_advantages(&[0.0; 3], &[1.0, -2.0, 1.0], 3.0).unwrap(),
            vec![0.0; 3]
        );
        assert!(shape_advantages(&a, &[0.0; 2], 1.0).is_err());
    }

    #[test]
    fn kl_correction_examples() {
        assert_eq!(
            kl_token_correction(0.4, &[-1.0, -2.0], &[-1.0, -2.0], 0.01).unwrap(),
            vec![0.4, 0.4]
        );
        assert_eq!(
            kl_token_correction(0.4, &[-1.0, -5.0], &[-3.0, -2.0], 0.0).unwrap(),
            vec![0.4, 0.4]
        );
        let v = kl_token_correction(0.4, &[-1.0, -2.0], &[-2.0, -3.0], 0.01).unwrap();
        for x in v {
            assert!((x - 0.39).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_group_has_zero_shaped_advantages() {
        let g = group_advantages(&[1.0; 4], &[0.1, 0.5, 0.2, 0.3], &ShapingParams::default()).unwrap();
        assert_eq!(g.beta, BetaSolution::Degenerate);
        assert!(g.shaped.iter().all(|v| *v == 0.0));
        assert_eq!(g.gamma_eff, 0.0);
    }
}
