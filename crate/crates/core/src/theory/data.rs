//! Sequences for the single-trigger analysis: uniform tokens, one trigger,
//! and the supervised query placed at the trigger's second occurrence.

use rayon::prelude::*;

use crate::datagen::{MarkovSpec, OutputMode, SequenceSampler, TaggedSequence, TriggerConfig};
use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;

/// Cap on rejection-sampling attempts per accepted sequence.
pub const MAX_TRIES: usize = 10_000;

/// Source of sequences, batch `b` drawn from `stream.child(b)`.
pub trait BatchSource: Sync {
    fn batch(&self, size: usize, stream: &RngStream) -> Result<Vec<TaggedSequence>>;
    fn vocab(&self) -> usize;
}

/// Unconditioned sequences of a fixed length.
pub struct StandardSource {
    pub sampler: SequenceSampler,
    pub n: usize,
    pub t: usize,
}

impl StandardSource {
    /// Uniform chain with `k` random triggers drawn uniformly, uniform outputs.
    pub fn uniform(n: usize, k: usize, t: usize) -> Result<Self> {
        let spec = MarkovSpec::uniform(n)?;
        let trig = TriggerConfig::random(k, vec![1.0 / n as f64; n], OutputMode::Uniform);
        Ok(Self {
            sampler: SequenceSampler::new(&spec, &trig)?,
            n,
            t,
        })
    }
}

impl BatchSource for StandardSource {
    fn batch(&self, size: usize, stream: &RngStream) -> Result<Vec<TaggedSequence>> {
        self.sampler.sample_batch(self.t, size, stream)
    }

    fn vocab(&self) -> usize {
        self.n
    }
}

/// Sequences `z_1..z_{T+1}` whose token at position `T` is the second
/// occurrence of the (single, uniform) trigger, so `z_{T+1}` is its output
/// and position `T` is the only in-context query.
pub struct ConditionedSource {
    inner: StandardSource,
}

impl ConditionedSource {
    pub fn new(n: usize, t: usize) -> Result<Self> {
        if t < 2 {
            return invalid(format!("conditioned sequences need T >= 2 (got {t})"));
        }
        Ok(Self {
            inner: StandardSource::uniform(n, 1, t + 1)?,
        })
    }

    pub fn t(&self) -> usize {
        self.inner.t - 1
    }

    fn accepts(&self, seq: &TaggedSequence) -> bool {
        let last = self.t() - 1;
        seq.is_trigger[last] && seq.occurrence_index[last] == 2
    }

    /// Rejection-samples one sequence, attempt `i` from `stream.child(i)`.
    pub fn sample(&self, stream: &RngStream) -> Result<TaggedSequence> {
        for i in 0..MAX_TRIES {
            let seq = self.inner.sampler.sample(self.inner.t, &stream.child(i as u64))?;
            if self.accepts(&seq) {
                return Ok(seq);
            }
        }
        Err(LabError::RejectionExhausted {
            tries: MAX_TRIES,
            what: format!("second trigger occurrence at position {}", self.t()),
        })
    }
}

impl BatchSource for ConditionedSource {
    fn batch(&self, size: usize, stream: &RngStream) -> Result<Vec<TaggedSequence>> {
        (0..size)
            .into_par_iter()
            .map(|i| self.sample(&stream.child(i as u64)))
            .collect()
    }

    fn vocab(&self) -> usize {
        self.inner.n
    }
}

/// `n_batches` batches of `batch_size`, concatenated in batch order.
pub fn draw_batches(src: &dyn BatchSource, n_batches: usize, batch_size: usize, stream: &RngStream) -> Result<Vec<TaggedSequence>> {
    let mut out = Vec::with_capacity(n_batches * batch_size);
    for b in 0..n_batches {
        out.extend(src.batch(batch_size, &stream.child(b as u64))?);
    }
    Ok(out)
}

/// `Σ_{t=t_o}^{t_q} 1/t` (1-based) for each in-context query, where `t_o` is
/// the position of the first output occurrence.
pub fn tau_terms(seq: &TaggedSequence) -> Vec<f64> {
    let Some(t_o) = seq.first_output_position else {
        return Vec::new();
    };
    seq.in_context_positions()
        .map(|tq| (t_o + 1..=tq + 1).map(|u| 1.0 / u as f64).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioned_sequences_end_in_a_second_occurrence() {
        let src = ConditionedSource::new(6, 10).unwrap();
        let batch = src.batch(20, &RngStream::new(3)).unwrap();
        for seq in &batch {
            assert_eq!(seq.len(), 11);
            let q = seq.triggers[0];
            assert_eq!(seq.tokens[9], q);
            assert_eq!(seq.tokens[..10].iter().filter(|&&z| z == q).count(), 2);
            assert_eq!(seq.tokens[10], seq.outputs[0]);
            assert_eq!(seq.in_context_positions().collect::<Vec<_>>(), vec![9]);
        }
    }

    #[test]
    fn tau_counts_from_the_first_output() {
        let seq = TaggedSequence::annotate(vec![1, 2, 0, 1, 2], vec![1], vec![2]);
        // t_o = 2 (1-based), query at t = 4
        let want = 1.0 / 2.0 + 1.0 / 3.0 + 1.0 / 4.0;
        assert!((tau_terms(&seq)[0] - want).abs() < 1e-15);
    }
}
