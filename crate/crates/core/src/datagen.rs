//! Global bigram statistics and bigram-with-trigger sequence sampling.
//!
//! Each sequence follows a global Markov chain except after trigger tokens:
//! within one sequence every occurrence of trigger `q_k` is followed by the
//! same output token `o_k`. Triggers are either a fixed set or drawn per
//! sequence from `pi_q` without replacement; outputs are drawn per sequence,
//! uniformly or from the trigger's bigram row.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;

const SUM_TOL: f64 = 1e-12;
const IMPORT_TOL: f64 = 1e-9;

/// Vocabulary with unigram and row-stochastic bigram tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chars: Option<Vec<u8>>,
    pub pi_u: Vec<f64>,
    pub pi_b: Vec<Vec<f64>>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn check_distribution(v: &[f64], n: usize, tol: f64, what: &str) -> Result<()> {
    if v.len() != n {
        return invalid(format!("{what} has length {} but N = {n}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return invalid(format!("{what} has negative or non-finite entries"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return invalid(format!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

impl MarkovSpec {
    pub fn new(pi_u: Vec<f64>, pi_b: Vec<Vec<f64>>) -> Result<Self> {
        let spec = Self {
            n: pi_u.len(),
            chars: None,
            pi_u,
            pi_b,
        };
        spec.validate(SUM_TOL)?;
        Ok(spec)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.n == 0 {
            return invalid("MarkovSpec needs N >= 1");
        }
        check_distribution(&self.pi_u, self.n, tol, "pi_u")?;
        if self.pi_b.len() != self.n {
            return invalid(format!("pi_b has {} rows but N = {}", self.pi_b.len(), self.n));
        }
        for (i, row) in self.pi_b.iter().enumerate() {
            check_distribution(row, self.n, tol, &format!("pi_b row {i}"))?;
        }
        if let Some(c) = &self.chars {
            if c.len() != self.n {
                return invalid(format!("chars has {} entries but N = {}", c.len(), self.n));
            }
        }
        Ok(())
    }

    /// Uniform unigram and uniform bigram rows over `n` tokens.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return invalid("uniform_markov needs N >= 1");
        }
        let row = vec![1.0 / n as f64; n];
        Self::new(row.clone(), vec![row; n])
    }

    /// Built-in character-like fallback when no corpus is supplied.
    ///
    /// Unigram weights decay like `1/(i + 5)`; bigram row `i` mixes the
    /// unigram with a sparse component on four successors drawn from `seed`,
    /// so every transition has probability at least half its unigram mass.
    pub fn synthetic(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return invalid("synthetic Markov spec needs N >= 1");
        }
        let pi_u = normalized(&(0..n).map(|i| 1.0 / (i as f64 + 5.0)).collect::<Vec<_>>());
        let stream = RngStream::new(seed).named("synthetic-markov");
        let pi_b = (0..n)
            .map(|i| {
                let mut rng = stream.child(i as u64).rng();
                let mut sparse = vec![0.0; n];
                for _ in 0..4 {
                    let j = rng.gen_range(0..n);
                    sparse[j] += -(1.0 - rng.gen::<f64>()).ln();
                }
                let sparse = normalized(&sparse);
                normalized(
                    &sparse
                        .iter()
                        .zip(&pi_u)
                        .map(|(s, u)| 0.5 * s + 0.5 * u)
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        Self::new(pi_u, pi_b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates; rows within `1e-9` of stochastic are renormalized.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: Self = serde_json::from_str(text)?;
        spec.validate(IMPORT_TOL)?;
        spec.pi_u = normalized(&spec.pi_u);
        for row in spec.pi_b.iter_mut() {
            *row = normalized(row);
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rowwise `(pi_b + eps)` renormalized.
    pub fn smoothed_bigram(&self, eps: f64) -> Vec<Vec<f64>> {
        self.pi_b
            .iter()
            .map(|row| normalized(&row.iter().map(|p| p + eps).collect::<Vec<_>>()))
            .collect()
    }

    /// Stationary distribution of `pi_b` by power iteration from `pi_u`.
    pub fn stationary(&self) -> Vec<f64> {
        let mut nu = self.pi_u.clone();
        for _ in 0..10_000 {
            let mut next = vec![0.0; self.n];
            for (i, row) in self.pi_b.iter().enumerate() {
                for (j, p) in row.iter().enumerate() {
                    next[j] += nu[i] * p;
                }
            }
            let next = normalized(&next);
            let delta: f64 = next.iter().zip(&nu).map(|(a, b)| (a - b).abs()).sum();
            nu = next;
            if delta < 1e-15 {
                break;
            }
        }
        nu
    }

    /// Expected next-token cross-entropy of predicting with the smoothed
    /// bigram under the stationary chain.
    pub fn bigram_cross_entropy(&self, eps: f64) -> f64 {
        let nu = self.stationary();
        let smooth = self.smoothed_bigram(eps);
        self.pi_b
            .iter()
            .zip(&smooth)
            .zip(&nu)
            .map(|((row, srow), w)| {
                w * row
                    .iter()
                    .zip(srow)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, q)| -p * q.ln())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Estimates byte-level unigram and bigram statistics from `text`.
pub fn estimate_markov(text: &[u8]) -> Result<MarkovSpec> {
    if text.len() < 2 {
        return invalid(format!("corpus needs at least 2 characters (got {})", text.len()));
    }
    let mut vocab: BTreeMap<u8, usize> = BTreeMap::new();
    for &b in text {
        vocab.entry(b).or_insert(0);
    }
    for (i, v) in vocab.values_mut().enumerate() {
        *v = i;
    }
    let n = vocab.len();
    let mut counts = vec![0.0; n];
    let mut trans = vec![vec![0.0; n]; n];
    for &b in text {
        counts[vocab[&b]] += 1.0;
    }
    for w in text.windows(2) {
        trans[vocab[&w[0]]][vocab[&w[1]]] += 1.0;
    }
    let pi_u = normalized(&counts);
    let pi_b = trans
        .iter()
        .map(|row| {
            if row.iter().sum::<f64>() == 0.0 {
                pi_u.clone()
            } else {
                normalized(row)
            }
        })
        .collect();
    let mut spec = MarkovSpec::new(pi_u, pi_b)?;
    spec.chars = Some(vocab.keys().copied().collect());
    Ok(spec)
}

pub fn uniform_markov(n: usize) -> Result<MarkovSpec> {
    MarkovSpec::uniform(n)
}

/// Tokens ranked `[rank_offset, rank_offset + k)` by descending unigram
/// probability, ties broken by lower token index.
pub fn fixed_triggers(spec: &MarkovSpec, k: usize, rank_offset: usize) -> Result<Vec<usize>> {
    if rank_offset + k > spec.n {
        return invalid(format!(
            "trigger ranks [{rank_offset}, {}) exceed vocabulary size {}",
            rank_offset + k,
            spec.n
        ));
    }
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.sort_by(|&a, &b| {
        spec.pi_u[b]
            .partial_cmp(&spec.pi_u[a])
            .expect("probabilities are finite")
            .then(a.cmp(&b))
    });
    Ok(order[rank_offset..rank_offset + k].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TriggerMode {
    Fixed { tokens: Vec<usize> },
    Random { pi_q: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    Uniform,
    Bigram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerConfig {
    pub k: usize,
    pub mode: TriggerMode,
    pub output_mode: OutputMode,
}

impl TriggerConfig {
    pub fn fixed(tokens: Vec<usize>, output_mode: OutputMode) -> Self {
        Self {
            k: tokens.len(),
            mode: TriggerMode::Fixed { tokens },
            output_mode,
        }
    }

    pub fn random(k: usize, pi_q: Vec<f64>, output_mode: OutputMode) -> Self {
        Self {
            k,
            mode: TriggerMode::Random { pi_q },
            output_mode,
        }
    }

    pub fn validate(&self, spec: &MarkovSpec) -> Result<()> {
        if self.k == 0 {
            return invalid("need K >= 1 triggers");
        }
        match &self.mode {
            TriggerMode::Fixed { tokens } => {
                if tokens.len() != self.k {
                    return invalid(format!("fixed trigger set has {} tokens, K = {}", tokens.len(), self.k));
                }
                let mut sorted = tokens.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != tokens.len() {
                    return invalid("fixed trigger tokens must be distinct");
                }
                if let Some(&t) = tokens.iter().find(|&&t| t >= spec.n) {
                    return invalid(format!("trigger token {t} outside vocabulary of size {}", spec.n));
                }
            }
            TriggerMode::Random { pi_q } => {
                check_distribution(pi_q, spec.n, IMPORT_TOL, "pi_q")?;
                let support = pi_q.iter().filter(|p| **p > 0.0).count();
                if support < self.k {
                    return Err(LabError::DistributionSupport(format!(
                        "pi_q has support {support} < K = {}",
                        self.k
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tokens that can act as triggers: the fixed set, or the support of `pi_q`.
    pub fn candidate_triggers(&self) -> Vec<usize> {
        match &self.mode {
            TriggerMode::Fixed { tokens } => tokens.clone(),
            TriggerMode::Random { pi_q } => (0..pi_q.len()).filter(|&i| pi_q[i] > 0.0).collect(),
        }
    }
}

/// A sampled sequence with per-position annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub tokens: Vec<usize>,
    pub triggers: Vec<usize>,
    pub outputs: Vec<usize>,
    pub is_trigger: Vec<bool>,
    /// 1-based occurrence count of the trigger token at this position, 0 elsewhere.
    pub occurrence_index: Vec<usize>,
    /// Position right after the first occurrence of the first trigger, if any.
    pub first_output_position: Option<usize>,
}

impl TaggedSequence {
    /// Annotates `tokens` against a given trigger/output assignment.
    pub fn annotate(tokens: Vec<usize>, triggers: Vec<usize>, outputs: Vec<usize>) -> Self {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let mut is_trigger = Vec::with_capacity(tokens.len());
        let mut occurrence_index = Vec::with_capacity(tokens.len());
        for &z in &tokens {
            if triggers.contains(&z) {
                let c = seen.entry(z).or_insert(0);
                *c += 1;
                is_trigger.push(true);
                occurrence_index.push(*c);
            } else {
                is_trigger.push(false);
                occurrence_index.push(0);
            }
        }
        let first_output_position = triggers.first().and_then(|&q| {
            tokens
                .iter()
                .position(|&z| z == q)
                .map(|t| t + 1)
                .filter(|&t| t < tokens.len())
        });
        Self {
            tokens,
            triggers,
            outputs,
            is_trigger,
            occurrence_index,
            first_output_position,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions `t` whose next token is predictable from context: trigger at
    /// its second or later occurrence, with a successor inside the sequence.
    pub fn in_context_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len().saturating_sub(1))
            .filter(move |&t| self.is_trigger[t] && self.occurrence_index[t] >= 2)
    }
}

/// Cumulative table whose entries from the last positive weight onward are
/// infinite, so zero-probability tokens are never drawn.
fn cdf(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = p
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = p.iter().rposition(|&x| x > 0.0) {
        for c in &mut out[last..] {
            *c = f64::INFINITY;
        }
    }
    out
}

#[inline]
fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c <= u)
}

/// Precomputed sampling tables for one `(spec, triggers)` pair.
#[derive(Debug, Clone)]
pub struct SequenceSampler {
    n: usize,
    unigram: Vec<f64>,
    bigram: Vec<Vec<f64>>,
    pi_b: Vec<Vec<f64>>,
    cfg: TriggerConfig,
}

impl SequenceSampler {
    pub fn new(spec: &MarkovSpec, cfg: &TriggerConfig) -> Result<Self> {
        cfg.validate(spec)?;
        Ok(Self {
            n: spec.n,
            unigram: cdf(&spec.pi_u),
            bigram: spec.pi_b.iter().map(|r| cdf(r)).collect(),
            pi_b: spec.pi_b.clone(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &TriggerConfig {
        &self.cfg
    }

    fn draw_triggers(&self, rng: &mut impl Rng) -> Vec<usize> {
        match &self.cfg.mode {
            TriggerMode::Fixed { tokens } => tokens.clone(),
            TriggerMode::Random { pi_q } => {
                // Sequential draws with previously chosen tokens removed, i.e.
                // the distribution of draw-until-new from pi_q.
                let mut w = pi_q.clone();
                let mut out = Vec::with_capacity(self.cfg.k);
                for _ in 0..self.cfg.k {
                    let q = draw(&cdf(&normalized(&w)), rng);
                    w[q] = 0.0;
                    out.push(q);
                }
                out
            }
        }
    }

    fn draw_output(&self, q: usize, rng: &mut impl Rng) -> usize {
        match self.cfg.output_mode {
            OutputMode::Uniform => rng.gen_range(0..self.n),
            OutputMode::Bigram => draw(&cdf(&self.pi_b[q]), rng),
        }
    }

    /// Draws triggers and outputs for one sequence.
    pub fn draw_assignment(&self, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let triggers = self.draw_triggers(rng);
        let outputs = triggers.iter().map(|&q| self.draw_output(q, rng)).collect();
        (triggers, outputs)
    }

    /// Next token after `prev` under the per-sequence transition rule.
    #[inline]
    pub fn step(&self, prev: usize, triggers: &[usize], outputs: &[usize], rng: &mut impl Rng) -> usize {
        match triggers.iter().position(|&q| q == prev) {
            Some(k) => outputs[k],
            None => draw(&self.bigram[prev], rng),
        }
    }

    #[inline]
    pub fn first(&self, rng: &mut impl Rng) -> usize {
        draw(&self.unigram, rng)
    }

    pub fn sample(&self, t: usize, stream: &RngStream) -> Result<TaggedSequence> {
        if t < 2 {
            return invalid(format!("sequence length must be >= 2 (got {t})"));
        }
        let mut rng = stream.rng();
        let (triggers, outputs) = self.draw_assignment(&mut rng);
        let mut tokens = Vec::with_capacity(t);
        tokens.push(self.first(&mut rng));
        for i in 1..t {
            let next = self.step(tokens[i - 1], &triggers, &outputs, &mut rng);
            tokens.push(next);
        }
        Ok(TaggedSequence::annotate(tokens, triggers, outputs))
    }

    /// `batch` sequences, sequence `i` drawn from `stream.child(i)`.
    pub fn sample_batch(&self, t: usize, batch: usize, stream: &RngStream) -> Result<Vec<TaggedSequence>> {
        (0..batch)
            .into_par_iter()
            .map(|i| self.sample(t, &stream.child(i as u64)))
            .collect()
    }
}

pub fn sample_tagged_sequence(
    spec: &MarkovSpec,
    cfg: &TriggerConfig,
    t: usize,
    stream: &RngStream,
) -> Result<TaggedSequence> {
    SequenceSampler::new(spec, cfg)?.sample(t, stream)
}

pub fn sample_batch(
    spec: &MarkovSpec,
    cfg: &TriggerConfig,
    t: usize,
    batch: usize,
    stream: &RngStream,
) -> Result<Vec<TaggedSequence>> {
    SequenceSampler::new(spec, cfg)?.sample_batch(t, batch, stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peaked() -> MarkovSpec {
        MarkovSpec::new(
            vec![0.1, 0.7, 0.2],
            vec![vec![1.0 / 3.0; 3], vec![0.5, 0.25, 0.25], vec![0.0, 0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn ababab() {
        let s = estimate_markov(b"ababab").unwrap();
        assert_eq!(s.n, 2);
        assert_eq!(s.pi_b[0], vec![0.0, 1.0]);
        assert_eq!(s.pi_b[1], vec![1.0, 0.0]);
        assert_eq!(s.chars.as_deref(), Some(&b"ab"[..]));
    }

    #[test]
    fn single_symbol_corpus() {
        let s = estimate_markov(b"aa").unwrap();
        assert_eq!(s.n, 1);
        assert_eq!(s.pi_u, vec![1.0]);
        assert_eq!(s.pi_b, vec![vec![1.0]]);
    }

    #[test]
    fn short_corpus_rejected() {
        assert!(estimate_markov(b"").is_err());
        assert!(estimate_markov(b"x").is_err());
    }

    #[test]
    fn unseen_successor_row_falls_back_to_unigram() {
        // 'c' only appears last, so it has no observed successor.
        let s = estimate_markov(b"abac").unwrap();
        assert_eq!(s.pi_b[2], s.pi_u);
        assert!(s.validate(SUM_TOL).is_ok());
    }

    #[test]
    fn vocabulary_in_byte_order() {
        let s = estimate_markov(b"zyx zyx").unwrap();
        assert_eq!(s.chars.as_deref(), Some(&b" xyz"[..]));
    }

    #[test]
    fn trigger_ranking() {
        let u = MarkovSpec::uniform(5).unwrap();
        assert_eq!(fixed_triggers(&u, 3, 0).unwrap(), vec![0, 1, 2]);
        let p = peaked();
        assert_eq!(fixed_triggers(&p, 1, 0).unwrap(), vec![1]);
        assert_eq!(fixed_triggers(&p, 2, 1).unwrap(), vec![2, 0]);
        assert!(fixed_triggers(&p, 2, 2).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = MarkovSpec::synthetic(7, 3).unwrap();
        let back = MarkovSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.n, s.n);
        for (a, b) in back.pi_b.iter().flatten().zip(s.pi_b.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(MarkovSpec::from_json(r#"{"N":2,"pi_u":[0.5,0.5],"pi_b":[[1,0],[0,1]],"extra":1}"#).is_err());
        assert!(MarkovSpec::from_json(r#"{"N":2,"pi_u":[0.6,0.5],"pi_b":[[1,0],[0,1]]}"#).is_err());
    }

    #[test]
    fn synthetic_spec_is_dense_and_stochastic() {
        let s = MarkovSpec::synthetic(65, 0).unwrap();
        assert_eq!(s.n, 65);
        assert!(s.pi_b.iter().flatten().all(|p| *p > 1e-3));
        s.validate(SUM_TOL).unwrap();
    }

    #[test]
    fn fixed_trigger_is_always_followed_by_its_output() {
        let spec = MarkovSpec::synthetic(10, 1).unwrap();
        let cfg = TriggerConfig::fixed(vec![0], OutputMode::Uniform);
        let sampler = SequenceSampler::new(&spec, &cfg).unwrap();
        for i in 0..50 {
            let s = sampler.sample(64, &RngStream::new(11).child(i)).unwrap();
            for t in 0..63 {
                if s.tokens[t] == 0 {
                    assert_eq!(s.tokens[t + 1], s.outputs[0]);
                }
            }
        }
    }

    #[test]
    fn length_two_base_case() {
        let spec = peaked();
        let cfg = TriggerConfig::fixed(vec![1], OutputMode::Uniform);
        let sampler = SequenceSampler::new(&spec, &cfg).unwrap();
        let mut hit = false;
        for i in 0..200 {
            let s = sampler.sample(2, &RngStream::new(4).child(i)).unwrap();
            assert_eq!(s.len(), 2);
            if s.tokens[0] == 1 {
                hit = true;
                assert_eq!(s.tokens[1], s.outputs[0]);
                assert_eq!(s.first_output_position, Some(1));
            }
            if s.tokens[0] == 2 {
                assert_eq!(s.tokens[1], 2);
            }
        }
        assert!(hit);
        assert!(sampler.sample(1, &RngStream::new(0)).is_err());
    }

    #[test]
    fn random_trigger_support_error() {
        let spec = MarkovSpec::uniform(4).unwrap();
        let cfg = TriggerConfig::random(3, vec![0.5, 0.5, 0.0, 0.0], OutputMode::Uniform);
        assert!(matches!(
            sample_tagged_sequence(&spec, &cfg, 8, &RngStream::new(0)),
            Err(LabError::DistributionSupport(_))
        ));
    }

    #[test]
    fn fixed_trigger_validation() {
        let spec = MarkovSpec::uniform(4).unwrap();
        assert!(TriggerConfig::fixed(vec![1, 1], OutputMode::Uniform).validate(&spec).is_err());
        assert!(TriggerConfig::fixed(vec![7], OutputMode::Uniform).validate(&spec).is_err());
    }

    #[test]
    fn occurrence_index_counts_per_token() {
        let s = TaggedSequence::annotate(vec![0, 5, 1, 0, 5, 1, 0, 2], vec![0, 1], vec![5, 0]);
        assert_eq!(s.occurrence_index, vec![1, 0, 1, 2, 0, 2, 3, 0]);
        assert_eq!(s.in_context_positions().collect::<Vec<_>>(), vec![3, 5, 6]);
        assert_eq!(s.first_output_position, Some(1));
        // a trigger in the last slot has no successor to supervise
        let s = TaggedSequence::annotate(vec![0, 5, 0], vec![0], vec![5]);
        assert_eq!(s.in_context_positions().count(), 0);
    }

    #[test]
    fn batch_is_independent_of_thread_count() {
        let spec = MarkovSpec::synthetic(20, 2).unwrap();
        let cfg = TriggerConfig::random(3, spec.pi_u.clone(), OutputMode::Uniform);
        let s = RngStream::new(99);
        let a = sample_batch(&spec, &cfg, 32, 16, &s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_batch(&spec, &cfg, 32, 16, &s).unwrap());
        assert_eq!(a, b);
    }
}
