//! Slow, independent reference implementations used to certify the fast paths.
//!
//! Nothing here calls into the code it checks.

use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::policy::Token;

/// Largest number of sequences [`exhaustive_env_argmax`] will enumerate.
pub const SEARCH_LIMIT: u128 = 10_000_000;

/// Central differences with step `h_rel · max(1, |x_i|)` per coordinate.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> f64,
    point: &[f64],
    h_rel: f64,
) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let h = h_rel * point[i].abs().max(1.0);
        x[i] = point[i] + h;
        let up = f(&x);
        x[i] = point[i] - h;
        let down = f(&x);
        x[i] = point[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Best candidate over every sequence of length `0..=max_len` drawn from
/// `alphabet`, scored with the environment's verifier. Ties keep the first
/// sequence found (shorter first, then alphabet order).
pub fn exhaustive_env_argmax(
    env: &dyn Environment,
    alphabet: &[Token],
    max_len: usize,
) -> Result<(Vec<Token>, f64)> {
    if alphabet.is_empty() {
        return Err(Error::InvalidArgument("empty alphabet".into()));
    }
    let a = alphabet.len() as u128;
    let mut count: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        count = count.saturating_add(layer);
        layer = layer.saturating_mul(a);
    }
    if count > SEARCH_LIMIT {
        return Err(Error::SearchSpaceTooLarge {
            count,
            limit: SEARCH_LIMIT,
        });
    }
    let mut best = (Vec::new(), env.verify(&[]));
    let mut candidate = Vec::with_capacity(max_len);
    for len in 1..=max_len {
        let total = alphabet.len().pow(len as u32);
        for code in 0..total {
            // base-|alphabet| digits of `code`, most significant first
            candidate.clear();
            let mut rest = code;
            for _ in 0..len {
                candidate.push(alphabet[rest % alphabet.len()]);
                rest /= alphabet.len();
            }
            candidate.reverse();
            let r = env.verify(&candidate);
            if r > best.1 {
                best = (candidate.clone(), r);
            }
        }
    }
    Ok(best)
}

/// Double-double number `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }

    pub fn mul_f64(self, b: f64) -> Dd {
        self.mul(Dd::from_f64(b))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul_f64(q1));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul_f64(q2));
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo }.add(Dd::from_f64(q3))
    }

    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }
}

/// `e^x` in double-double precision.
pub fn exp_dd(x: Dd) -> Dd {
    if x.hi < -745.0 {
        return Dd::ZERO;
    }
    if x.hi > 709.0 {
        return Dd::from_f64(f64::INFINITY);
    }
    let k = (x.hi / LN2.hi).round();
    let r = x.sub(LN2.mul_f64(k));
    // e^r = (e^{r/1024})^1024
    let r = r.ldexp(-10);
    let mut term = Dd::ONE;
    let mut sum = Dd::ONE;
    for n in 1..=24 {
        term = term.mul(r).div(Dd::from_f64(n as f64));
        sum = sum.add(term);
        if term.hi.abs() < 1e-34 {
            break;
        }
    }
    for _ in 0..10 {
        sum = sum.mul(sum);
    }
    let k = k as i32;
    // split the power to avoid overflow of 2^k alone near the range ends
    sum.ldexp(k / 2).ldexp(k - k / 2)
}

/// Natural log in double-double precision (Newton refinement of `ln(hi)`).
pub fn ln_dd(x: Dd) -> Dd {
    let mut y = Dd::from_f64(x.hi.ln());
    for _ in 0..2 {
        // y ← y + x·e^{−y} − 1
        y = y.add(x.mul(exp_dd(y.neg()))).sub(Dd::ONE);
    }
    y
}

/// `KL(softmax(β·R) ‖ Uniform)` evaluated in double-double arithmetic.
pub fn kl_vs_uniform(rewards: &[f64], beta: f64) -> f64 {
    let g = rewards.len();
    if g == 0 {
        return 0.0;
    }
    let scaled: Vec<Dd> = rewards
        .iter()
        .map(|&r| {
            let (hi, lo) = two_prod(beta, r);
            Dd { hi, lo }
        })
        .collect();
    let m = scaled
        .iter()
        .copied()
        .fold(Dd::from_f64(f64::NEG_INFINITY), |a, b| if b.hi > a.hi || (b.hi == a.hi && b.lo > a.lo) { b } else { a });
    let shifted: Vec<Dd> = scaled.iter().map(|s| s.sub(m)).collect();
    let weights: Vec<Dd> = shifted.iter().map(|&s| exp_dd(s)).collect();
    let z = weights.iter().fold(Dd::ZERO, |a, &w| a.add(w));
    // KL = ln G + Σ q_i s_i − ln Z
    let mean_shift = weights
        .iter()
        .zip(&shifted)
        .fold(Dd::ZERO, |a, (&w, &s)| a.add(w.mul(s)))
        .div(z);
    ln_dd(Dd::from_f64(g as f64))
        .add(mean_shift)
        .sub(ln_dd(z))
        .to_f64()
}

/// Log-softmax in double-double arithmetic.
pub fn log_softmax_reference(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = logits
        .iter()
        .fold(Dd::ZERO, |a, &v| a.add(exp_dd(Dd::from_f64(v).sub(Dd::from_f64(m)))));
    let lz = ln_dd(z);
    logits
        .iter()
        .map(|&v| Dd::from_f64(v).sub(Dd::from_f64(m)).sub(lz).to_f64())
        .collect()
}

fn entropy_reference(p: &[f64]) -> Dd {
    p.iter()
        .filter(|&&x| x > 0.0)
        .fold(Dd::ZERO, |a, &x| a.sub(Dd::from_f64(x).mul(ln_dd(Dd::from_f64(x)))))
}

/// Ensemble mutual information `H(mean) − mean H` in double-double arithmetic.
pub fn mutual_information_reference(members: &[Vec<f64>]) -> f64 {
    let k = members.len();
    if k == 0 {
        return 0.0;
    }
    let n = members[0].len();
    let kd = Dd::from_f64(k as f64);
    let mixture: Vec<f64> = (0..n)
        .map(|i| {
            members
                .iter()
                .fold(Dd::ZERO, |a, m| a.add(Dd::from_f64(m[i])))
                .div(kd)
                .to_f64()
        })
        .collect();
    let member_mean = members
        .iter()
        .fold(Dd::ZERO, |a, m| a.add(entropy_reference(m)))
        .div(kd);
    entropy_reference(&mixture).sub(member_mean).to_f64()
}

/// Rank by counting: `1 + #smaller + (#equal − 1)/2`.
pub fn counting_ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let smaller = values.iter().filter(|&&w| w < v).count() as f64;
            let equal = values.iter().filter(|&&w| w == v).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman's ρ as the Pearson correlation of counting ranks, accumulated in
/// double-double.
pub fn rank_then_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = counting_ranks(x);
    let ry = counting_ranks(y);
    let n = Dd::from_f64(x.len() as f64);
    let mean = |v: &[f64]| v.iter().fold(Dd::ZERO, |a, &b| a.add(Dd::from_f64(b))).div(n);
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = Dd::ZERO;
    let mut sxx = Dd::ZERO;
    let mut syy = Dd::ZERO;
    for (a, b) in rx.iter().zip(&ry) {
        let dx = Dd::from_f64(*a).sub(mx);
        let dy = Dd::from_f64(*b).sub(my);
        sxy = sxy.add(dx.mul(dy));
        sxx = sxx.add(dx.mul(dx));
        syy = syy.add(dy.mul(dy));
    }
    if sxx.hi == 0.0 || syy.hi == 0.0 {
        return None;
    }
    let r = sxy.to_f64() / (sxx.to_f64() * syy.to_f64()).sqrt();
    Some(r.clamp(-1.0, 1.0))
}

/// Linear-interpolation percentile by sorting a copy.
pub fn percentile_reference(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{parse_tokens, AutocorrEnv, FamilyRules, Motif, MotifEnv};
    use std::f64::consts::LN_2;

    #[test]
    fn finite_difference_of_square() {
        let g = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let err = finite_difference_gradient(|x| if x[1] > 0.0 { f64::NAN } else { 0.0 }, &[0.0, 0.0], 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1 }));
    }

    #[test]
    fn dd_exp_and_ln() {
        for x in [-20.0, -1.0, -1e-3, 0.0, 0.5, 1.0, 7.25, 100.0] {
            let e = exp_dd(Dd::from_f64(x)).to_f64();
            assert!((e - x.exp()).abs() <= 2.0 * f64::EPSILON * x.exp(), "{x}");
            let back = ln_dd(exp_dd(Dd::from_f64(x))).to_f64();
            assert!((back - x).abs() < 1e-14 * x.abs().max(1.0), "{x}");
        }
        assert_eq!(exp_dd(Dd::from_f64(-1e4)), Dd::ZERO);
    }

    #[test]
    fn kl_limits() {
        assert!(kl_vs_uniform(&[0.3, 1.0, 2.0], 0.0).abs() < 1e-15);
        let r = [0.0, 1.0, 1.0, 0.5, 0.2];
        let limit = (5f64).ln() - (2f64).ln();
        assert!((kl_vs_uniform(&r, 1e6) - limit).abs() < 1e-12);
        assert!((kl_vs_uniform(&[0.0, 1.0], 1e6) - LN_2).abs() < 1e-12);
    }

    #[test]
    fn mi_reference_example() {
        let mi = mutual_information_reference(&[vec![0.8, 0.2], vec![0.2, 0.8]]);
        assert!((mi - 0.19274475702175753).abs() < 1e-15, "{mi}");
    }

    #[test]
    fn counting_rank_ties() {
        assert_eq!(counting_ranks(&[2.0, 2.0, 1.0]), vec![2.5, 2.5, 1.0]);
        assert_eq!(rank_then_pearson(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]), Some(1.0));
    }

    #[test]
    fn planted_motif_is_found() {
        let alphabet = parse_tokens("0123").unwrap();
        let env = MotifEnv::with_motifs(
            vec![Motif {
                tokens: parse_tokens("3102").unwrap(),
                weight: 1.0,
            }],
            4,
            0.5,
            FamilyRules::default(),
        )
        .unwrap();
        let (best, reward) = exhaustive_env_argmax(&env, &alphabet, 4).unwrap();
        assert_eq!(best, parse_tokens("3102").unwrap());
        assert_eq!(reward, 1.0);
        assert!(exhaustive_env_argmax(&env, &[], 3).is_err());
        assert!(matches!(
            exhaustive_env_argmax(&env, &alphabet, 12),
            Err(Error::SearchSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn tiny_autocorr_optimum() {
        let env = AutocorrEnv::tiny();
        let (best, reward) = exhaustive_env_argmax(&env, &env.level_tokens(), 4).unwrap();
        assert!(reward >= 1.0);
        assert_eq!(env.verify(&best), reward);
    }
}
