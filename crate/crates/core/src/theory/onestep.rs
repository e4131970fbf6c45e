//! Class-conditional feature means and the matrices one gradient step from
//! zero produces from them.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{tau_terms, BatchSource, StandardSource};
use super::Compensated;
use crate::datagen::TaggedSequence;
use crate::embeddings::gaussian_matrix;
use crate::error::{invalid, Result};
use crate::model::{argmax, AttnScale, ModelParams, TrainableInit};
use crate::probes::{recall, wo2_memory, TargetMemory};
use crate::rng::RngStream;

/// One `(x, y)` pair extracted at query position `pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample {
    pub pos: usize,
    pub x: Array1<f64>,
    pub y: usize,
}

/// Maps a sequence to the inputs of the matrix being estimated, one sample
/// per in-context query.
pub trait Featurize: Sync {
    fn dim(&self) -> usize;
    fn features(&self, seq: &TaggedSequence) -> Vec<FeatureSample>;
}

/// `x = (1/t) Σ_{s<=t} W_V2 w_E(z_s)`: the value input of a uniform
/// second-layer attention, token part only.
pub struct AvgValueAttention {
    /// Row `z` is `W_V2 w_E(z)`.
    vals: Array2<f64>,
}

impl AvgValueAttention {
    pub fn new(params: &ModelParams<f64>) -> Self {
        Self {
            vals: params.w_v2.dot(&params.w_e).reversed_axes().as_standard_layout().to_owned(),
        }
    }
}

impl Featurize for AvgValueAttention {
    fn dim(&self) -> usize {
        self.vals.ncols()
    }

    fn features(&self, seq: &TaggedSequence) -> Vec<FeatureSample> {
        let mut out = Vec::new();
        let mut acc = Array1::zeros(self.dim());
        let mut queries = seq.in_context_positions().peekable();
        for (t, &z) in seq.tokens.iter().enumerate() {
            if queries.peek().is_none() {
                break;
            }
            acc += &self.vals.row(z);
            if queries.peek() == Some(&t) {
                queries.next();
                out.push(FeatureSample {
                    pos: t,
                    x: acc.mapv(|a| a / (t + 1) as f64),
                    y: seq.tokens[t + 1],
                });
            }
        }
        out
    }
}

/// Full residual stream under uniform attention in both layers:
/// `x = (1/t) Σ_{u<=t} W_V2 (w_E(z_u) + eps_u)` with
/// `eps_u = p_u + (1/u) Σ_{s<=u} Phi1 (w_E(z_s) + p_s)`.
pub struct ResidualStream {
    n: usize,
    /// Rows are `W_V2 b_j` and `W_V2 Phi1 b_j` over `b_j` in `[W_E | P]`.
    direct: Array2<f64>,
    through: Array2<f64>,
}

impl ResidualStream {
    pub fn new(params: &ModelParams<f64>) -> Self {
        let n = params.n();
        let mut b = Array2::zeros((params.d(), n + params.t_max()));
        b.slice_mut(ndarray::s![.., ..n]).assign(&params.w_e);
        b.slice_mut(ndarray::s![.., n..]).assign(&params.pos);
        let rows = |m: Array2<f64>| m.reversed_axes().as_standard_layout().to_owned();
        let direct = rows(params.w_v2.dot(&b));
        let through = rows(params.w_v2.dot(&params.phi1()).dot(&b));
        Self { n, direct, through }
    }
}

impl Featurize for ResidualStream {
    fn dim(&self) -> usize {
        self.direct.ncols()
    }

    fn features(&self, seq: &TaggedSequence) -> Vec<FeatureSample> {
        seq.in_context_positions()
            .map(|tq| {
                let l = tq + 1;
                let mut x = Array1::zeros(self.dim());
                // weight of position s in the averaged first-layer outputs
                let mut tail: f64 = (1..=l).map(|u| 1.0 / u as f64).sum();
                for s in 0..l {
                    let (z, p) = (seq.tokens[s], self.n + s);
                    let w0 = 1.0 / l as f64;
                    let w1 = tail / l as f64;
                    x.scaled_add(w0, &self.direct.row(z));
                    x.scaled_add(w0, &self.direct.row(p));
                    x.scaled_add(w1, &self.through.row(z));
                    x.scaled_add(w1, &self.through.row(p));
                    tail -= 1.0 / (s + 1) as f64;
                }
                FeatureSample {
                    pos: tq,
                    x,
                    y: seq.tokens[tq + 1],
                }
            })
            .collect()
    }
}

/// Empirical class-conditional means `mu_k = E[x | y = k]` and `mu_bar = E[x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationEstimate {
    /// `None` for classes never observed.
    pub mu_k: Vec<Option<Array1<f64>>>,
    pub mu_bar: Array1<f64>,
    pub counts: Vec<usize>,
    pub n_batches: usize,
    pub batch_size: usize,
    /// Mean of `Σ_{t=t_o}^{t_q} 1/t` over the samples.
    pub tau_hat: Option<f64>,
}

impl PopulationEstimate {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn observed(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&k| self.counts[k] > 0).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&k| self.counts[k] == 0).collect()
    }
}

struct Partial {
    sums: Array2<f64>,
    counts: Vec<usize>,
    tau: f64,
    tau_n: usize,
}

fn partial(seqs: &[TaggedSequence], feat: &dyn Featurize, n: usize) -> Partial {
    let mut p = Partial {
        sums: Array2::zeros((n, feat.dim())),
        counts: vec![0; n],
        tau: 0.0,
        tau_n: 0,
    };
    for seq in seqs {
        for s in feat.features(seq) {
            p.sums.row_mut(s.y).scaled_add(1.0, &s.x);
            p.counts[s.y] += 1;
        }
        for t in tau_terms(seq) {
            p.tau += t;
            p.tau_n += 1;
        }
    }
    p
}

/// Folds partials in order with compensated sums.
struct Folder {
    n: usize,
    d: usize,
    sums: Compensated,
    counts: Vec<usize>,
    tau: Compensated,
    tau_n: usize,
}

impl Folder {
    fn new(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            sums: Compensated::new(n * d),
            counts: vec![0; n],
            tau: Compensated::new(1),
            tau_n: 0,
        }
    }

    fn push(&mut self, p: Partial) {
        self.sums.add(p.sums.as_slice().expect("standard layout"));
        for (c, pc) in self.counts.iter_mut().zip(&p.counts) {
            *c += pc;
        }
        self.tau.add(&[p.tau]);
        self.tau_n += p.tau_n;
    }

    fn finish(self, n_batches: usize, batch_size: usize) -> PopulationEstimate {
        let (n, d) = (self.n, self.d);
        let sums = Array2::from_shape_vec((n, d), self.sums.value()).expect("shape");
        let counts = self.counts;
        let total: usize = counts.iter().sum();
        let mu_bar = if total > 0 {
            sums.sum_axis(Axis(0)) / total as f64
        } else {
            Array1::zeros(d)
        };
        let mu_k = (0..n)
            .map(|k| (counts[k] > 0).then(|| sums.row(k).to_owned() / counts[k] as f64))
            .collect();
        PopulationEstimate {
            mu_k,
            mu_bar,
            counts,
            n_batches,
            batch_size,
            tau_hat: (self.tau_n > 0).then(|| self.tau.value()[0] / self.tau_n as f64),
        }
    }
}

const WAVE: usize = 32;

/// Batches are drawn and featurized in parallel and folded in batch order
/// with compensated sums, so the result does not depend on the thread count.
pub fn estimate_moments(
    src: &dyn BatchSource,
    feat: &dyn Featurize,
    n_batches: usize,
    batch_size: usize,
    stream: &RngStream,
) -> Result<PopulationEstimate> {
    let n = src.vocab();
    let mut folder = Folder::new(n, feat.dim());
    for start in (0..n_batches).step_by(WAVE) {
        let parts: Vec<Partial> = (start..(start + WAVE).min(n_batches))
            .into_par_iter()
            .map(|b| Ok(partial(&src.batch(batch_size, &stream.child(b as u64))?, feat, n)))
            .collect::<Result<_>>()?;
        parts.into_iter().for_each(|p| folder.push(p));
    }
    Ok(folder.finish(n_batches, batch_size))
}

/// Moments of already drawn sequences, folded in chunks of `batch_size`.
pub fn estimate_from_sequences(feat: &dyn Featurize, seqs: &[TaggedSequence], n: usize, batch_size: usize) -> PopulationEstimate {
    let bs = batch_size.max(1);
    let mut folder = Folder::new(n, feat.dim());
    for wave in seqs.chunks(bs * WAVE) {
        let parts: Vec<Partial> = wave.par_chunks(bs).map(|c| partial(c, feat, n)).collect();
        parts.into_iter().for_each(|p| folder.push(p));
    }
    folder.finish(seqs.len().div_ceil(bs), bs)
}

/// Diagonal against off-diagonal entries of a square score table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagStats {
    pub diag_mean: f64,
    /// Mean absolute off-diagonal entry.
    pub offdiag_mean: f64,
    pub offdiag_max: f64,
}

impl DiagStats {
    /// Restricted to the rows and columns in `idx`.
    pub fn of(sc: &Array2<f64>, idx: &[usize]) -> Self {
        let mut diag = 0.0;
        let mut off = 0.0;
        let mut off_max: f64 = 0.0;
        for &i in idx {
            for &j in idx {
                if i == j {
                    diag += sc[[i, j]];
                } else {
                    off += sc[[i, j]].abs();
                    off_max = off_max.max(sc[[i, j]].abs());
                }
            }
        }
        let m = idx.len() as f64;
        Self {
            diag_mean: if m > 0.0 { diag / m } else { 0.0 },
            offdiag_mean: if m > 1.0 { off / (m * (m - 1.0)) } else { 0.0 },
            offdiag_max: off_max,
        }
    }

    pub fn all(sc: &Array2<f64>) -> Self {
        Self::of(sc, &(0..sc.nrows()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    #[serde(skip)]
    pub w: Array2<f64>,
    /// `w_U(k)^T W W_V2 w_E(j)` over observed classes.
    pub primary: DiagStats,
    /// `w_U(k)^T W W_V2 Phi1 w_E(j)` over observed classes.
    pub secondary: DiagStats,
    pub recall: f64,
    pub observed_classes: usize,
    pub missing_classes: usize,
    pub tau_hat: Option<f64>,
    /// `eta / (N T)` and `tau_hat · eta / (N T)`.
    pub predicted_primary: f64,
    pub predicted_secondary: Option<f64>,
}

/// `(eta/N) Σ_k w_U(k) (mu_k - mu_bar)^T` over observed classes.
pub fn one_step_matrix(eta: f64, w_u: &Array2<f64>, est: &PopulationEstimate) -> Array2<f64> {
    let n = w_u.nrows();
    let d = est.mu_bar.len();
    let mut diff = Array2::zeros((n, d));
    for (k, m) in est.mu_k.iter().enumerate() {
        if let Some(m) = m {
            diff.row_mut(k).assign(&(m - &est.mu_bar));
        }
    }
    w_u.t().dot(&diff).mapv(|a| a * eta / n as f64)
}

/// The wo2 target memory restricted to `classes` (all of them when empty).
fn restricted_wo2_memory(params: &ModelParams<f64>, classes: &[usize]) -> TargetMemory<f64> {
    let mut mem = wo2_memory(params);
    if !classes.is_empty() {
        mem.pairs.retain(|p| classes.contains(&p.key_id));
    }
    mem
}

/// One step on `W_O2` from moments estimated at query length `t`.
pub fn one_step_wo2(eta: f64, t: usize, params: &ModelParams<f64>, est: &PopulationEstimate) -> Result<OneStepReport> {
    if !(eta > 0.0) {
        return invalid(format!("eta must be > 0 (got {eta})"));
    }
    if est.mu_bar.len() != params.d() || est.counts.len() != params.n() {
        return invalid("moment estimate does not match the model geometry");
    }
    let w = one_step_matrix(eta, &params.w_u, est);
    let obs = est.observed();
    let vals = params.w_v2.dot(&params.w_e);
    let primary = DiagStats::of(&params.w_u.dot(&w).dot(&vals), &obs);
    let through = params.w_v2.dot(&params.phi1()).dot(&params.w_e);
    let secondary = DiagStats::of(&params.w_u.dot(&w).dot(&through), &obs);
    let scale = eta / (params.n() * t) as f64;
    Ok(OneStepReport {
        recall: recall(&w, &restricted_wo2_memory(params, &obs))?,
        primary,
        secondary,
        observed_classes: obs.len(),
        missing_classes: params.n() - obs.len(),
        tau_hat: est.tau_hat,
        predicted_primary: scale,
        predicted_secondary: est.tau_hat.map(|t| t * scale),
        w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct R1Report {
    pub r1: f64,
    pub observed: usize,
    pub missing: usize,
}

/// `R1` over the classes with a defined mean: the fraction of `k` whose
/// direction `mu_k - mu_bar` is closest, in the `W_V2 w_E` inner product, to
/// its own token.
pub fn r1_from_means(params: &ModelParams<f64>, diffs: &[Option<Array1<f64>>]) -> R1Report {
    let vals = params.w_v2.dot(&params.w_e);
    let mut hits = 0;
    let mut observed = 0;
    for (k, diff) in diffs.iter().enumerate() {
        if let Some(diff) = diff {
            observed += 1;
            let sc = vals.t().dot(diff);
            if argmax(sc.iter().copied()) == k {
                hits += 1;
            }
        }
    }
    R1Report {
        r1: if observed > 0 { hits as f64 / observed as f64 } else { 0.0 },
        observed,
        missing: diffs.len() - observed,
    }
}

pub fn r1_from_estimate(params: &ModelParams<f64>, est: &PopulationEstimate) -> R1Report {
    let diffs: Vec<_> = est.mu_k.iter().map(|m| m.as_ref().map(|m| m - &est.mu_bar)).collect();
    r1_from_means(params, &diffs)
}

/// `R1` with exact population means. Under a uniform chain with uniformly
/// drawn triggers, label symmetry makes `mu_k - mu_bar` a positive multiple
/// of `W_V2 (w_E(k) - w_E_bar)`, and `R1` is invariant to that multiple.
pub fn r1_population(params: &ModelParams<f64>) -> R1Report {
    let vals = params.w_v2.dot(&params.w_e);
    let mean = vals.mean_axis(Axis(1)).expect("N >= 1");
    let diffs: Vec<_> = vals.columns().into_iter().map(|c| Some(&c - &mean)).collect();
    r1_from_means(params, &diffs)
}

/// Geometry and data budget of one `R1` measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R1Config {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Number of random triggers per sequence.
    #[serde(rename = "K")]
    pub k: usize,
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for R1Config {
    fn default() -> Self {
        Self {
            d: 256,
            n: 65,
            t: 256,
            k: 1,
            n_batches: 64,
            batch_size: 32,
        }
    }
}

/// Frozen matrices from `stream.named("model")`, moments of the averaged
/// value input from `stream.named("moments")`.
pub fn r1_recall(cfg: &R1Config, stream: &RngStream) -> Result<R1Report> {
    let params = ModelParams::<f64>::init(
        cfg.d,
        cfg.n,
        cfg.t,
        TrainableInit::Zeros,
        false,
        AttnScale::One,
        &stream.named("model"),
    )?;
    let src = StandardSource::uniform(cfg.n, cfg.k, cfg.t)?;
    let est = estimate_moments(
        &src,
        &AvgValueAttention::new(&params),
        cfg.n_batches,
        cfg.batch_size,
        &stream.named("moments"),
    )?;
    Ok(r1_from_estimate(&params, &est))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrativeReport {
    /// Accuracy of `argmax_k w_U(k)^T W1 (w_E(y) + p_t)` over all `(y, t)`.
    pub accuracy: f64,
    /// `w_U(y)^T W1 w_E(y)`, averaged over `y`.
    pub true_score_mean: f64,
    /// Largest `|w_U(y)^T W1 w_E(y) - eta/N|`.
    pub true_score_max_dev: f64,
    /// Largest `|w_U(k)^T W1 p_t|`.
    pub positional_max: f64,
    /// Largest `|w_U(k)^T W1 w_E(y)|`, `k != y`.
    pub offdiag_max: f64,
}

/// Predicting `y` from `w_E(y) + p_t` with uniform `y` and `t`: the step
/// from zero is `W1 = (eta/N) Σ_k w_U(k) (w_E(k) - w_E_bar)^T`, positions
/// cancelling exactly in the population means.
pub fn illustrative_one_step_w1(eta: f64, n: usize, t: usize, d: usize, stream: &RngStream) -> Result<IllustrativeReport> {
    if !(eta > 0.0) || n == 0 || t == 0 || d == 0 {
        return invalid("illustrative step needs eta > 0 and positive N, T, d");
    }
    let var = 1.0 / d as f64;
    let w_e: Array2<f64> = gaussian_matrix(d, n, var, &stream.named("W_E"))?;
    let w_u: Array2<f64> = gaussian_matrix(n, d, var, &stream.named("W_U"))?;
    let pos: Array2<f64> = gaussian_matrix(d, t, var, &stream.named("P"))?;
    let mean = w_e.mean_axis(Axis(1)).expect("N >= 1");
    let centered = &w_e - &mean.insert_axis(Axis(1));
    let w1 = w_u.t().dot(&centered.t()).mapv(|a| a * eta / n as f64);
    let tok = w_u.dot(&w1).dot(&w_e);
    let posc = w_u.dot(&w1).dot(&pos);
    let mut hits = 0;
    for y in 0..n {
        for s in 0..t {
            let col = &tok.column(y) + &posc.column(s);
            if argmax(col.iter().copied()) == y {
                hits += 1;
            }
        }
    }
    let target = eta / n as f64;
    let diag: Vec<f64> = (0..n).map(|y| tok[[y, y]]).collect();
    Ok(IllustrativeReport {
        accuracy: hits as f64 / (n * t) as f64,
        true_score_mean: diag.iter().sum::<f64>() / n as f64,
        true_score_max_dev: diag.iter().map(|s| (s - target).abs()).fold(0.0, f64::max),
        positional_max: posc.iter().map(|a| a.abs()).fold(0.0, f64::max),
        offdiag_max: tok
            .indexed_iter()
            .filter(|((k, y), _)| k != y)
            .map(|(_, a)| a.abs())
            .fold(0.0, f64::max),
    })
}
