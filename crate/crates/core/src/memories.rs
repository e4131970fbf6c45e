//! Ideal associative memories for the four trainable matrices, the oracle
//! model assembled from them, and the factored `W = (d/2d')·U V` memory.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::datagen::{MarkovSpec, SequenceSampler, TriggerConfig, TriggerMode};
use crate::embeddings::gaussian_matrix;
use crate::error::{invalid, Result};
use crate::grad::evaluate;
use crate::model::{LossStats, Metrics, ModelParams};
use crate::probes::kl_probe;
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::train::Geometry;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrices<S: Scalar> {
    pub wk1: Array2<S>,
    pub wk2: Array2<S>,
    pub wo2: Array2<S>,
    pub wf: Array2<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub beta: f64,
    /// Drop the fixed trigger tokens' columns from the feed-forward memory.
    pub exclude_triggers_from_wf: bool,
    pub use_ff: bool,
    pub smoothing: f64,
    /// Subtract each input's mean log-probability before storing. Softmax
    /// ignores the shift; the common component otherwise leaks into every
    /// logit through embedding overlaps.
    pub center_wf: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            beta: 20.0,
            exclude_triggers_from_wf: true,
            use_ff: true,
            smoothing: 1e-6,
            center_wf: false,
        }
    }
}

/// `Σ_{t=2..T} p_t p_{t-1}^T` (1-based positions).
pub fn previous_token_memory<S: Scalar>(params: &ModelParams<S>) -> Array2<S> {
    let t = params.t_max();
    params.pos.slice(s![.., 1..]).dot(&params.pos.slice(s![.., ..t - 1]).t())
}

/// `Σ_{k in keys} w_E(k) (Phi1 w_E(k))^T`.
pub fn induction_key_memory<S: Scalar>(params: &ModelParams<S>, keys: &[usize]) -> Array2<S> {
    let phi1 = params.phi1();
    let d = params.d();
    let mut e = Array2::zeros((d, keys.len()));
    for (c, &k) in keys.iter().enumerate() {
        e.column_mut(c).assign(&params.w_e.column(k));
    }
    e.dot(&phi1.dot(&e).t())
}

/// `Σ_k w_U(k) (W_V2 w_E(k))^T` over the whole vocabulary.
pub fn output_memory<S: Scalar>(params: &ModelParams<S>) -> Array2<S> {
    params.w_u.t().dot(&params.w_v2.dot(&params.w_e).t())
}

/// `Σ_{i,j} log pi_b~(j|i) w_U(j) w_E(i)^T`, skipping inputs in `exclude`;
/// with `center` each input's log-probabilities have their mean removed.
pub fn bigram_memory<S: Scalar>(
    params: &ModelParams<S>,
    spec: &MarkovSpec,
    eps: f64,
    exclude: &[usize],
    center: bool,
) -> Array2<S> {
    let n = spec.n;
    let sm = spec.smoothed_bigram(eps);
    let shift: Vec<f64> = sm
        .iter()
        .map(|row| if center { row.iter().map(|p| p.ln()).sum::<f64>() / n as f64 } else { 0.0 })
        .collect();
    let logp = Array2::from_shape_fn((n, n), |(j, i)| {
        if exclude.contains(&i) {
            S::zero()
        } else {
            S::cast(sm[i][j].ln() - shift[i])
        }
    });
    params.w_u.t().dot(&logp).dot(&params.w_e.t())
}

pub fn build_target_memories<S: Scalar>(
    params: &ModelParams<S>,
    trig: &TriggerConfig,
    spec: &MarkovSpec,
    cfg: &OracleConfig,
) -> Result<TargetMatrices<S>> {
    if spec.n != params.n() {
        return invalid(format!("spec has N = {} but model has N = {}", spec.n, params.n()));
    }
    trig.validate(spec)?;
    let keys = trig.candidate_triggers();
    let exclude = match (&trig.mode, cfg.exclude_triggers_from_wf) {
        (TriggerMode::Fixed { tokens }, true) => tokens.clone(),
        _ => Vec::new(),
    };
    Ok(TargetMatrices {
        wk1: previous_token_memory(params),
        wk2: induction_key_memory(params, &keys),
        wo2: output_memory(params),
        wf: bigram_memory(params, spec, cfg.smoothing, &exclude, cfg.center_wf),
    })
}

/// Puts `beta·W_K1*`, `beta·W_K2*`, `W_O2*` (and `W_F*` when the model
/// has a feed-forward layer) into `params`.
pub fn install_oracle<S: Scalar>(params: &mut ModelParams<S>, mem: &TargetMatrices<S>, beta: f64) {
    let b = S::cast(beta);
    params.w_k1 = mem.wk1.mapv(|x| x * b);
    params.w_k2 = mem.wk2.mapv(|x| x * b);
    params.w_o2 = mem.wo2.clone();
    if let Some(f) = params.w_f.as_mut() {
        f.assign(&mem.wf);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub metrics: Metrics,
    pub positions_icl: usize,
    pub kl_wf: Option<f64>,
    /// Cross-entropy of the smoothed bigram under the stationary chain.
    pub bigram_cross_entropy: f64,
}

/// Builds the oracle model from `geom` (frozen matrices from `stream`) and
/// evaluates it on `n_batches` fresh batches.
#[allow(clippy::too_many_arguments)]
pub fn oracle_model_eval<S: Scalar>(
    spec: &MarkovSpec,
    trig: &TriggerConfig,
    geom: &Geometry,
    cfg: &OracleConfig,
    n_batches: usize,
    batch_size: usize,
    stream: &RngStream,
) -> Result<(ModelParams<S>, OracleReport)> {
    if !(cfg.beta >= 0.0) {
        return invalid(format!("beta must be >= 0 (got {})", cfg.beta));
    }
    let mut g = geom.clone();
    g.use_ff = cfg.use_ff;
    let mut params: ModelParams<S> = g.init(spec.n, &stream.named("model"))?;
    let mem = build_target_memories(&params, trig, spec, cfg)?;
    install_oracle(&mut params, &mem, cfg.beta);
    let sampler = SequenceSampler::new(spec, trig)?;
    let mut stats = LossStats::default();
    for b in 0..n_batches {
        let batch = sampler.sample_batch(geom.t, batch_size, &stream.named("eval").child(b as u64))?;
        stats.merge(&evaluate(&params, &batch)?);
    }
    let kl_wf = match &params.w_f {
        Some(f) => Some(kl_probe(f, &params, spec, cfg.smoothing)?),
        None => None,
    };
    Ok((
        params,
        OracleReport {
            metrics: stats.metrics(),
            positions_icl: stats.n_icl,
            kl_wf,
            bigram_cross_entropy: spec.bigram_cross_entropy(cfg.smoothing),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredReport {
    /// `y_k^T W x_l`, row k, column l.
    pub scores: Vec<Vec<f64>>,
    pub diag_mean: f64,
    pub diag_min: f64,
    pub diag_max: f64,
    pub offdiag_mean_abs: f64,
    pub offdiag_max_abs: f64,
}

/// Stores `x_i -> y_i` (columns of `x`, `y`) in `W = (d/2d') U V` with
/// `U = U0 + Σ y_i (V0 x_i)^T`, `V = V0 + Σ (U0^T y_i) x_i^T` and reports
/// `y_k^T W x_l` for all stored pairs.
pub fn factored_memory_report(x: &Array2<f64>, y: &Array2<f64>, d_prime: usize, stream: &RngStream) -> Result<FactoredReport> {
    let d = x.nrows();
    if y.nrows() != d || x.ncols() != y.ncols() {
        return invalid("pair matrices must both be d×n");
    }
    if d_prime == 0 || d_prime > d {
        return invalid(format!("d' must be in [1, d] (got {d_prime}, d = {d})"));
    }
    let var = 1.0 / d as f64;
    let u0: Array2<f64> = gaussian_matrix(d, d_prime, var, &stream.named("U0"))?;
    let v0: Array2<f64> = gaussian_matrix(d_prime, d, var, &stream.named("V0"))?;
    let u = &u0 + &y.dot(&v0.dot(x).t());
    let v = &v0 + &u0.t().dot(y).dot(&x.t());
    let w = u.dot(&v).mapv(|a| a * d as f64 / (2 * d_prime) as f64);
    let sc = y.t().dot(&w.dot(x));
    Ok(score_stats(&sc))
}

pub fn score_stats(sc: &Array2<f64>) -> FactoredReport {
    let n = sc.nrows();
    let diag: Vec<f64> = (0..n.min(sc.ncols())).map(|i| sc[[i, i]]).collect();
    let off: Vec<f64> = sc
        .indexed_iter()
        .filter(|((i, j), _)| i != j)
        .map(|(_, v)| v.abs())
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    FactoredReport {
        scores: sc.outer_iter().map(|r| r.to_vec()).collect(),
        diag_mean: mean(&diag),
        diag_min: diag.iter().copied().fold(f64::INFINITY, f64::min),
        diag_max: diag.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        offdiag_mean_abs: mean(&off),
        offdiag_max_abs: off.iter().copied().fold(0.0, f64::max),
    }
}
