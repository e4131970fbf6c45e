//! Recall of stored associations, the feed-forward KL probe, and attention
//! heatmap export.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::{MarkovSpec, TriggerConfig};
use crate::error::{invalid, Result};
use crate::model::{argmax, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPair<S: Scalar> {
    pub u: Array1<S>,
    pub v: Array1<S>,
    pub key_id: usize,
    pub value_id: usize,
}

/// Stored associations `u -> v` plus the set of values they compete against.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMemory<S: Scalar> {
    pub pairs: Vec<MemoryPair<S>>,
    pub candidate_ids: Vec<usize>,
    /// d×C, column per candidate, aligned with `candidate_ids`.
    pub candidates: Array2<S>,
}

impl<S: Scalar> TargetMemory<S> {
    /// Pairs are `(u_i, v_i)` for `i` in `keys`, reading `u` and `v` as
    /// columns of the given matrices; candidates are `v` columns of `cands`.
    pub fn from_columns(u: &Array2<S>, v: &Array2<S>, pairs: &[(usize, usize)], cands: &[usize]) -> Self {
        let mut candidates = Array2::zeros((v.nrows(), cands.len()));
        for (c, &j) in cands.iter().enumerate() {
            candidates.column_mut(c).assign(&v.column(j));
        }
        Self {
            pairs: pairs
                .iter()
                .map(|&(i, j)| MemoryPair {
                    u: u.column(i).to_owned(),
                    v: v.column(j).to_owned(),
                    key_id: i,
                    value_id: j,
                })
                .collect(),
            candidate_ids: cands.to_vec(),
            candidates,
        }
    }

    pub fn dim(&self) -> usize {
        self.candidates.nrows()
    }

    /// `Σ v u^T` over the stored pairs.
    pub fn outer_sum(&self) -> Array2<S> {
        let d = self.dim();
        let mut w = Array2::zeros((d, d));
        for p in &self.pairs {
            let v = p.v.view().insert_axis(Axis(1));
            let u = p.u.view().insert_axis(Axis(0));
            w += &v.dot(&u);
        }
        w
    }

    /// Score table `v_c^T W u_p`, candidates × pairs.
    pub fn scores(&self, w: &Array2<S>) -> Array2<S> {
        let mut u = Array2::zeros((self.dim(), self.pairs.len()));
        for (i, p) in self.pairs.iter().enumerate() {
            u.column_mut(i).assign(&p.u);
        }
        self.candidates.t().dot(&w.dot(&u))
    }
}

/// Fraction of pairs whose highest-scoring candidate is their own value,
/// ties going to the candidate listed first (lowest id).
pub fn recall<S: Scalar>(w: &Array2<S>, mem: &TargetMemory<S>) -> Result<f64> {
    if mem.pairs.is_empty() {
        return invalid("recall of an empty memory");
    }
    if w.nrows() != mem.dim() || w.ncols() != mem.pairs[0].u.len() {
        return invalid(format!(
            "matrix {:?} does not match memory dimension {}",
            w.dim(),
            mem.dim()
        ));
    }
    let sc = mem.scores(w);
    let hits = mem
        .pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| mem.candidate_ids[argmax(sc.column(*i).iter().copied())] == p.value_id)
        .count();
    Ok(hits as f64 / mem.pairs.len() as f64)
}

/// Whether the induction-head key memory competes over the trigger
/// candidates (fixed set or support of `pi_q`) or the whole vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyCandidates {
    #[default]
    Triggers,
    FullVocab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet<S: Scalar> {
    pub wk1: TargetMemory<S>,
    pub wk2: TargetMemory<S>,
    pub wo2: TargetMemory<S>,
}

/// Previous-token memory `p_{t-1} -> p_t` for 1-based `t` in `[lo, hi]`,
/// competing over all positions.
pub fn wk1_memory<S: Scalar>(params: &ModelParams<S>, window: (usize, usize)) -> Result<TargetMemory<S>> {
    let t = params.t_max();
    let (lo, hi) = window;
    if lo < 2 || hi > t || lo > hi {
        return invalid(format!("position window [{lo}, {hi}] outside [2, {t}]"));
    }
    // 1-based t maps to column t-1
    let pairs: Vec<(usize, usize)> = (lo - 1..hi).map(|c| (c - 1, c)).collect();
    let cands: Vec<usize> = (0..t).collect();
    Ok(TargetMemory::from_columns(&params.pos, &params.pos, &pairs, &cands))
}

/// Trigger memory `Phi1 w_E(k) -> w_E(k)` over the trigger candidates.
pub fn wk2_memory<S: Scalar>(params: &ModelParams<S>, keys: &[usize], cands: KeyCandidates) -> TargetMemory<S> {
    let phi_e = params.phi1().dot(&params.w_e);
    let pairs: Vec<(usize, usize)> = keys.iter().map(|&k| (k, k)).collect();
    let cand_ids: Vec<usize> = match cands {
        KeyCandidates::Triggers => keys.to_vec(),
        KeyCandidates::FullVocab => (0..params.n()).collect(),
    };
    TargetMemory::from_columns(&phi_e, &params.w_e, &pairs, &cand_ids)
}

/// Output memory `W_V2 w_E(k) -> w_U(k)` for every token.
pub fn wo2_memory<S: Scalar>(params: &ModelParams<S>) -> TargetMemory<S> {
    let ve = params.w_v2.dot(&params.w_e);
    let wu_cols = params.w_u.t().to_owned();
    let all: Vec<usize> = (0..params.n()).collect();
    let pairs: Vec<(usize, usize)> = all.iter().map(|&k| (k, k)).collect();
    TargetMemory::from_columns(&ve, &wu_cols, &pairs, &all)
}

pub fn target_memory_specs<S: Scalar>(
    params: &ModelParams<S>,
    trig: &TriggerConfig,
    window: Option<(usize, usize)>,
    cands: KeyCandidates,
) -> Result<ProbeSet<S>> {
    let mut keys = trig.candidate_triggers();
    keys.sort_unstable();
    Ok(ProbeSet {
        wk1: wk1_memory(params, window.unwrap_or((2, params.t_max())))?,
        wk2: wk2_memory(params, &keys, cands),
        wo2: wo2_memory(params),
    })
}

/// Mean over tokens `k` of `KL(softmax(W_U W_F w_E(k)) || pi_b~(.|k))`
/// with `pi_b~` the `eps`-smoothed bigram. Infinite when the smoothed
/// bigram has a zero where the prediction does not.
pub fn kl_probe<S: Scalar>(w_f: &Array2<S>, params: &ModelParams<S>, spec: &MarkovSpec, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return invalid(format!("smoothing must be nonnegative (got {eps})"));
    }
    if spec.n != params.n() {
        return invalid(format!("spec has N = {} but model has N = {}", spec.n, params.n()));
    }
    let logits = params.w_u.dot(&w_f.dot(&params.w_e));
    let target = spec.smoothed_bigram(eps);
    let mut total = 0.0;
    for k in 0..spec.n {
        let col = logits.column(k).mapv(|x| x.as_f64());
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = col.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        let mut kl = 0.0;
        for j in 0..spec.n {
            let lp = col[j] - lse;
            let p = lp.exp();
            if p > 0.0 {
                kl += p * (lp - target[k][j].ln());
            }
        }
        total += kl;
    }
    Ok(total / spec.n as f64)
}

/// Binary PGM of an attention matrix: row = query, column = key,
/// pixel = round(255 · weight).
pub fn attention_pgm<S: Scalar>(attn: &Array2<S>) -> Vec<u8> {
    let (h, w) = attn.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(attn.iter().map(|a| (255.0 * a.as_f64()).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn attention_heatmap_export<S: Scalar>(attn: &Array2<S>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&attention_pgm(attn))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AttnScale, TrainableInit};
    use crate::rng::RngStream;

    fn params(d: usize) -> ModelParams<f64> {
        ModelParams::init(d, 10, 16, TrainableInit::Zeros, true, AttnScale::One, &RngStream::new(3)).unwrap()
    }

    #[test]
    fn zero_matrix_recall_is_one_over_candidates() {
        let p = params(64);
        let m = wo2_memory(&p);
        assert_eq!(recall(&Array2::zeros((64, 64)), &m).unwrap(), 0.1);
    }

    #[test]
    fn memory_recalls_itself_and_is_scale_invariant() {
        let p = params(1024);
        let m = wo2_memory(&p);
        let w = m.outer_sum();
        assert_eq!(recall(&w, &m).unwrap(), 1.0);
        assert_eq!(recall(&w.mapv(|x| 7.5 * x), &m).unwrap(), 1.0);
        assert!(recall(&w.mapv(|x| -x), &m).unwrap() <= 0.2);
    }

    #[test]
    fn memory_sizes() {
        let p = params(32);
        let set = target_memory_specs(
            &p,
            &TriggerConfig::fixed(vec![1, 4, 6], crate::datagen::OutputMode::Uniform),
            None,
            KeyCandidates::Triggers,
        )
        .unwrap();
        assert_eq!(set.wk2.pairs.len(), 3);
        assert_eq!(set.wo2.pairs.len(), 10);
        assert_eq!(set.wk1.pairs.len(), 15);
        assert_eq!(wk1_memory(&p, (2, 8)).unwrap().pairs.len(), 7);
        assert!(wk1_memory(&p, (1, 8)).is_err());
        assert!(wk1_memory(&p, (2, 17)).is_err());
    }

    #[test]
    fn empty_memory_is_an_error() {
        let p = params(8);
        let m = wk2_memory(&p, &[], KeyCandidates::FullVocab);
        assert!(recall(&Array2::zeros((8, 8)), &m).is_err());
    }

    #[test]
    fn kl_zero_wf_is_kl_of_uniform() {
        let p = params(16);
        let spec = MarkovSpec::synthetic(10, 4).unwrap();
        let eps = 1e-6;
        let got = kl_probe(&Array2::zeros((16, 16)), &p, &spec, eps).unwrap();
        let sm = spec.smoothed_bigram(eps);
        let want = sm
            .iter()
            .map(|row| row.iter().map(|q| 0.1 * (0.1f64.ln() - q.ln())).sum::<f64>())
            .sum::<f64>()
            / 10.0;
        assert!((got - want).abs() < 1e-12);
        let uni = MarkovSpec::uniform(10).unwrap();
        assert!(kl_probe(&Array2::zeros((16, 16)), &p, &uni, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_is_infinite_on_unsmoothed_zeros() {
        let p = params(16);
        let mut pi_b = vec![vec![0.1; 10]; 10];
        pi_b[0] = vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let spec = MarkovSpec::new(vec![0.1; 10], pi_b).unwrap();
        assert_eq!(kl_probe(&Array2::zeros((16, 16)), &p, &spec, 0.0).unwrap(), f64::INFINITY);
        assert!(kl_probe(&Array2::zeros((16, 16)), &p, &spec, 1e-6).unwrap().is_finite());
    }

    #[test]
    fn pgm_layout() {
        let mut a = Array2::<f64>::zeros((3, 3));
        for t in 0..3 {
            for s in 0..=t {
                a[[t, s]] = 1.0 / (t + 1) as f64;
            }
        }
        let img = attention_pgm(&a);
        let header = b"P5\n3 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(&img[header.len()..], &[255, 0, 0, 128, 128, 0, 85, 85, 85]);
    }
}
