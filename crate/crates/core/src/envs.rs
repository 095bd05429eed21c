//! Toy discovery environments with deterministic verifiers, plus the ordered
//! regex family labeler.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::policy::{Token, END_TOKEN, FIRST_CONTENT_TOKEN, SEPARATOR_TOKEN};
use crate::seed;

const SYMBOLS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";

/// Text form of one token: `$` for end, `|` for the separator, otherwise a
/// base-36 digit.
pub fn token_char(token: Token) -> char {
    match token {
        END_TOKEN => '$',
        SEPARATOR_TOKEN => '|',
        t => SYMBOLS
            .get(t - FIRST_CONTENT_TOKEN)
            .map(|&b| b as char)
            .unwrap_or('?'),
    }
}

pub fn render_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| token_char(t)).collect()
}

/// Inverse of [`token_char`] for content symbols.
pub fn char_token(c: char) -> Option<Token> {
    match c {
        '$' => Some(END_TOKEN),
        '|' => Some(SEPARATOR_TOKEN),
        c => SYMBOLS
            .iter()
            .position(|&b| b as char == c)
            .map(|i| i + FIRST_CONTENT_TOKEN),
    }
}

pub fn parse_tokens(text: &str) -> Option<Vec<Token>> {
    text.chars().map(char_token).collect()
}

/// Candidate of a generation: the tokens after the first separator, up to the
/// first end marker. Without a separator the whole prefix before the end
/// marker is the candidate.
pub fn decode_solution(generated: &[Token]) -> Vec<Token> {
    let end = generated
        .iter()
        .position(|&t| t == END_TOKEN)
        .unwrap_or(generated.len());
    let body = &generated[..end];
    match body.iter().position(|&t| t == SEPARATOR_TOKEN) {
        Some(sep) => body[sep + 1..].to_vec(),
        None => body.to_vec(),
    }
}

#[derive(Clone, Debug)]
pub struct FamilyRule {
    pub rule_id: usize,
    pub label: String,
    pub pattern: Regex,
}

pub const OTHER_FAMILY: &str = "other";

/// Ordered rule list; the first matching pattern labels the text.
#[derive(Clone, Debug, Default)]
pub struct FamilyRules {
    rules: Vec<FamilyRule>,
}

impl FamilyRules {
    /// Parses `<label> <pattern>` lines; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, pattern) = line
                .split_once(char::is_whitespace)
                .map(|(l, p)| (l, p.trim()))
                .filter(|(_, p)| !p.is_empty())
                .ok_or_else(|| Error::FamilyRule {
                    line: i + 1,
                    message: "expected `<label> <pattern>`".into(),
                })?;
            let pattern = Regex::new(pattern).map_err(|e| Error::FamilyRule {
                line: i + 1,
                message: e.to_string(),
            })?;
            rules.push(FamilyRule {
                rule_id: rules.len(),
                label: label.to_string(),
                pattern,
            });
        }
        Ok(Self { rules })
    }

    pub fn from_rules(rules: Vec<FamilyRule>) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &[FamilyRule] {
        &self.rules
    }

    pub fn label(&self, text: &str) -> &str {
        self.rules
            .iter()
            .find(|r| r.pattern.is_match(text))
            .map(|r| r.label.as_str())
            .unwrap_or(OTHER_FAMILY)
    }

    /// Every label a text can receive, in rule order, followed by `other`.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rules {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out.push(OTHER_FAMILY.to_string());
        out
    }
}

/// A verifiable discovery task.
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    /// Prompt tokens of the root state.
    fn initial_state(&self) -> Vec<Token> {
        Vec::new()
    }
    fn decode(&self, generated: &[Token]) -> Vec<Token> {
        decode_solution(generated)
    }
    /// Deterministic, total, non-negative reward of a decoded candidate.
    fn verify(&self, candidate: &[Token]) -> f64;
    fn family_rules(&self) -> &FamilyRules;

    fn reward(&self, generated: &[Token]) -> f64 {
        self.verify(&self.decode(generated))
    }

    fn family(&self, generated: &[Token]) -> String {
        self.family_rules()
            .label(&render_tokens(&self.decode(generated)))
            .to_string()
    }
}

/// `(Σh)² / (n · max_k (h ⋆ h)(k))` with `h ⋆ h` the self-convolution.
///
/// Non-negative heights only; all-zero, empty or non-finite input gives 0.
pub fn verify_step_autocorr(heights: &[f64]) -> f64 {
    let n = heights.len();
    if n == 0 || heights.iter().any(|h| !h.is_finite() || *h < 0.0) {
        return 0.0;
    }
    let sum: f64 = heights.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    let mut peak = 0.0_f64;
    for k in 0..2 * n - 1 {
        let lo = k.saturating_sub(n - 1);
        let hi = k.min(n - 1);
        let c: f64 = (lo..=hi).map(|i| heights[i] * heights[k - i]).sum();
        peak = peak.max(c);
    }
    sum * sum / (n as f64 * peak)
}

/// Step-function autoconvolution task over single-digit heights.
#[derive(Clone, Debug)]
pub struct AutocorrEnv {
    name: String,
    levels: usize,
    max_len: usize,
    rules: FamilyRules,
}

impl AutocorrEnv {
    pub fn new(levels: usize, max_len: usize) -> Result<Self> {
        if !(1..=10).contains(&levels) || max_len == 0 {
            return Err(Error::InvalidArgument(format!(
                "autocorr needs 1..=10 levels and a positive length, got {levels} and {max_len}"
            )));
        }
        Ok(Self {
            name: "autocorr".into(),
            levels,
            max_len,
            rules: FamilyRules::parse(include_str!("../rules/autocorr.rules"))?,
        })
    }

    /// Three height levels, at most four steps: small enough to enumerate.
    pub fn tiny() -> Self {
        let mut env = Self::new(3, 4).expect("valid tiny instance");
        env.name = "autocorr-tiny".into();
        env
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Heights of a candidate, or `None` if any group is not a valid level.
    pub fn heights(&self, candidate: &[Token]) -> Option<Vec<f64>> {
        if candidate.len() > self.max_len {
            return None;
        }
        candidate
            .iter()
            .map(|&t| {
                let level = t.checked_sub(FIRST_CONTENT_TOKEN)?;
                (level < self.levels).then_some(level as f64)
            })
            .collect()
    }

    /// Tokens that encode valid levels.
    pub fn level_tokens(&self) -> Vec<Token> {
        (0..self.levels).map(|l| l + FIRST_CONTENT_TOKEN).collect()
    }
}

impl Default for AutocorrEnv {
    fn default() -> Self {
        Self::new(10, 12).expect("valid default instance")
    }
}

impl Environment for AutocorrEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn description(&self) -> &str {
        "Write a step function as digits 0-9; reward is (sum h)^2 / (n * max autoconvolution)."
    }

    fn verify(&self, candidate: &[Token]) -> f64 {
        self.heights(candidate)
            .map(|h| verify_step_autocorr(&h))
            .unwrap_or(0.0)
    }

    fn family_rules(&self) -> &FamilyRules {
        &self.rules
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Motif {
    pub tokens: Vec<Token>,
    pub weight: f64,
}

/// Counts overlapping occurrences of hidden motifs, minus a length penalty.
#[derive(Clone, Debug)]
pub struct MotifEnv {
    motifs: Vec<Motif>,
    free_len: usize,
    penalty: f64,
    rules: FamilyRules,
}

impl MotifEnv {
    pub fn with_motifs(
        motifs: Vec<Motif>,
        free_len: usize,
        penalty: f64,
        rules: FamilyRules,
    ) -> Result<Self> {
        if motifs.iter().any(|m| m.tokens.is_empty() || !(m.weight >= 0.0)) {
            return Err(Error::InvalidArgument(
                "motifs must be non-empty with non-negative weights".into(),
            ));
        }
        if !(penalty.is_finite() && penalty >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid length penalty {penalty}")));
        }
        Ok(Self {
            motifs,
            free_len,
            penalty,
            rules,
        })
    }

    /// Random two-symbol motifs over the content tokens of a `vocab`-sized
    /// vocabulary, with one `pure-*` family per motif.
    pub fn from_seed(env_seed: u64, count: usize, vocab: usize) -> Result<Self> {
        let content: Vec<Token> = (FIRST_CONTENT_TOKEN..vocab).collect();
        if content.len() < 2 * count {
            return Err(Error::InvalidArgument(format!(
                "{count} disjoint motifs need {} content tokens",
                2 * count
            )));
        }
        let mut rng = seed::stream(env_seed, &[0x307F]);
        let mut pool = content;
        pool.shuffle(&mut rng);
        let motifs: Vec<Motif> = pool
            .chunks(2)
            .take(count)
            .map(|c| Motif {
                tokens: c.to_vec(),
                weight: rng.random_range(0.8..1.0),
            })
            .collect();
        let text: String = motifs
            .iter()
            .map(|m| {
                let t = render_tokens(&m.tokens);
                format!("pure-{t} ^(?:{t})+$\n")
            })
            .collect();
        Self::with_motifs(motifs, 8, 0.1, FamilyRules::parse(&text)?)
    }

    pub fn motifs(&self) -> &[Motif] {
        &self.motifs
    }

    pub fn free_len(&self) -> usize {
        self.free_len
    }
}

impl Default for MotifEnv {
    fn default() -> Self {
        let motif = |s: &str, weight| Motif {
            tokens: parse_tokens(s).expect("content symbols"),
            weight,
        };
        Self::with_motifs(
            vec![
                motif("37", 1.0),
                motif("a1", 0.95),
                motif("5c", 0.9),
                motif("82", 0.85),
            ],
            8,
            0.1,
            FamilyRules::parse(include_str!("../rules/motif.rules")).expect("bundled rules parse"),
        )
        .expect("valid default motifs")
    }
}

fn count_overlapping(haystack: &[Token], needle: &[Token]) -> usize {
    if needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

impl Environment for MotifEnv {
    fn name(&self) -> &str {
        "motif"
    }

    fn description(&self) -> &str {
        "Emit a string that packs in as many hidden motifs as possible without running long."
    }

    fn verify(&self, candidate: &[Token]) -> f64 {
        let score: f64 = self
            .motifs
            .iter()
            .map(|m| m.weight * count_overlapping(candidate, &m.tokens) as f64)
            .sum();
        let over = candidate.len().saturating_sub(self.free_len) as f64;
        (score - self.penalty * over).max(0.0)
    }

    fn family_rules(&self) -> &FamilyRules {
        &self.rules
    }
}

pub const ENVIRONMENT_NAMES: &[&str] = &["motif", "autocorr", "autocorr-tiny"];

/// Looks an environment up by its registered name.
pub fn environment_by_name(name: &str) -> Result<Arc<dyn Environment>> {
    match name {
        "motif" => Ok(Arc::new(MotifEnv::default())),
        "autocorr" => Ok(Arc::new(AutocorrEnv::default())),
        "autocorr-tiny" => Ok(Arc::new(AutocorrEnv::tiny())),
        other => Err(Error::UnknownEnvironment(other.to_string())),
    }
}

/// An environment whose family labels come from a different rule list.
pub struct Relabeled {
    inner: Arc<dyn Environment>,
    rules: FamilyRules,
}

impl Relabeled {
    pub fn new(inner: Arc<dyn Environment>, rules: FamilyRules) -> Self {
        Self { inner, rules }
    }
}

impl Environment for Relabeled {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn description(&self) -> &str {
        self.inner.description()
    }

    fn initial_state(&self) -> Vec<Token> {
        self.inner.initial_state()
    }

    fn decode(&self, generated: &[Token]) -> Vec<Token> {
        self.inner.decode(generated)
    }

    fn verify(&self, candidate: &[Token]) -> f64 {
        self.inner.verify(candidate)
    }

    fn family_rules(&self) -> &FamilyRules {
        &self.rules
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s).unwrap()
    }

    #[test]
    fn rendering_round_trips() {
        let t = vec![0, 1, 2, 11, 12, 15];
        assert_eq!(render_tokens(&t), "$|09ad");
        assert_eq!(parse_tokens("$|09ad").unwrap(), t);
    }

    #[test]
    fn decoding_rules() {
        assert_eq!(decode_solution(&toks("12|34$56")), toks("34"));
        assert_eq!(decode_solution(&toks("12$|34")), toks("12"));
        assert_eq!(decode_solution(&toks("12|3|4")), toks("3|4"));
        assert_eq!(decode_solution(&[]), Vec::<Token>::new());
    }

    #[test]
    fn autocorr_examples() {
        assert_eq!(verify_step_autocorr(&[0.0; 5]), 0.0);
        assert_eq!(verify_step_autocorr(&[]), 0.0);
        for n in 1..8 {
            let mut h = vec![0.0; n];
            h[n / 2] = 2.5;
            assert!((verify_step_autocorr(&h) - 1.0 / n as f64).abs() < 1e-15);
        }
        assert!((verify_step_autocorr(&[3.0; 6]) - 1.0).abs() < 1e-15);
        assert!(verify_step_autocorr(&[1.0, 2.0, 2.0, 1.0]) > 0.0);
    }

    #[test]
    fn autocorr_malformed_candidates_score_zero() {
        let env = AutocorrEnv::tiny();
        assert_eq!(env.verify(&toks("13")), 0.0);
        assert_eq!(env.verify(&toks("11111")), 0.0);
        assert_eq!(env.verify(&toks("1|1")), 0.0);
        assert!((env.verify(&toks("11")) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn motif_examples() {
        let env = MotifEnv::default();
        assert_eq!(env.verify(&[]), 0.0);
        assert_eq!(env.verify(&toks("a1")), 0.95);
        assert_eq!(env.verify(&toks("0a10")), 0.95);
        let a = env.reward(&toks("37$"));
        let b = env.reward(&toks("37$a1a1a1"));
        assert_eq!(a, b);
        assert_eq!(a, 1.0);
        // 12 tokens, 6 motifs, 4 over the free length
        assert!((env.verify(&toks("373737373737")) - (6.0 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn seeded_motifs_are_reproducible_and_disjoint() {
        let a = MotifEnv::from_seed(3, 4, 16).unwrap();
        let b = MotifEnv::from_seed(3, 4, 16).unwrap();
        assert_eq!(a.motifs(), b.motifs());
        let mut all: Vec<Token> = a.motifs().iter().flat_map(|m| m.tokens.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
        let m = &a.motifs()[2];
        assert_eq!(a.verify(&m.tokens), m.weight);
        let text = render_tokens(&m.tokens).repeat(2);
        assert_eq!(a.family_rules().label(&text), format!("pure-{}", render_tokens(&m.tokens)));
        assert!(MotifEnv::from_seed(0, 8, 16).is_err());
    }

    #[test]
    fn family_rules_first_match_wins() {
        let rules = FamilyRules::parse("# c\none ^x\ntwo y\n\nthree z\nfour y\nfive q").unwrap();
        assert_eq!(rules.label("yq"), "two");
        assert_eq!(rules.label("abc"), OTHER_FAMILY);
        assert_eq!(FamilyRules::default().label("anything"), OTHER_FAMILY);
        assert_eq!(rules.labels().last().unwrap(), OTHER_FAMILY);
        assert!(matches!(
            FamilyRules::parse("ok a\nbad (unclosed"),
            Err(Error::FamilyRule { line: 2, .. })
        ));
        assert!(matches!(
            FamilyRules::parse("lonely"),
            Err(Error::FamilyRule { line: 1, .. })
        ));
    }

    #[test]
    fn relabeling_keeps_rewards() {
        let base = environment_by_name("motif").unwrap();
        let env = Relabeled::new(base.clone(), FamilyRules::parse("sevens 7+").unwrap());
        let t = toks("a1377");
        assert_eq!(env.reward(&t).to_bits(), base.reward(&t).to_bits());
        assert_eq!(env.family(&t), "sevens");
        assert_eq!(env.family(&toks("a1")), OTHER_FAMILY);
    }

    #[test]
    fn bundled_rules_label_expected_shapes() {
        let motif = MotifEnv::default();
        assert_eq!(motif.family(&toks("|373737$")), "uses-37");
        assert_eq!(motif.family(&toks("a1370")), "uses-37");
        assert_eq!(motif.family(&toks("00821")), "uses-82");
        assert_eq!(motif.family(&toks("0000")), "other");
        let ac = AutocorrEnv::default();
        assert_eq!(ac.family(&toks("4444")), "constant");
        assert_eq!(ac.family(&toks("0120")), "plateau");
    }

    #[test]
    fn registry() {
        for name in ENVIRONMENT_NAMES {
            assert_eq!(environment_by_name(name).unwrap().name(), *name);
        }
        assert!(matches!(
            environment_by_name("nope"),
            Err(Error::UnknownEnvironment(_))
        ));
    }
}
