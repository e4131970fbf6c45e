//! Fresh-batch SGD with momentum and coupled weight decay, per-matrix
//! freeze schedules, and a metrics log evaluated before every update.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{MarkovSpec, SequenceSampler, TriggerConfig};
use crate::error::{invalid, LabError, Result};
use crate::grad::{backward, evaluate, Grads};
use crate::model::{AttnScale, LossStats, MaskMode, ModelParams, Trainable, TrainableInit};
use crate::probes::{kl_probe, recall, target_memory_specs, KeyCandidates, ProbeSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub mask_mode: MaskMode,
    /// Matrix → first iteration at which it receives updates.
    pub freeze: BTreeMap<Trainable, usize>,
    /// Probe cadence in iterations; 0 probes only the final row.
    pub probe_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            iters: 2000,
            mask_mode: MaskMode::All,
            freeze: BTreeMap::new(),
            probe_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return invalid(format!("eta must be > 0 (got {})", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must be in [0, 1) (got {})", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return invalid(format!("weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        Ok(())
    }

    pub fn is_frozen(&self, m: Trainable, iter: usize) -> bool {
        self.freeze.get(&m).is_some_and(|&until| iter < until)
    }
}

/// Model shape and initialization; the vocabulary size comes from the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub use_ff: bool,
    pub attn_scale: AttnScale,
    pub trainable_init: TrainableInit,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            d: 128,
            t: 128,
            use_ff: true,
            attn_scale: AttnScale::One,
            trainable_init: TrainableInit::Gaussian,
        }
    }
}

impl Geometry {
    pub fn init<S: Scalar>(&self, n: usize, stream: &RngStream) -> Result<ModelParams<S>> {
        ModelParams::init(self.d, n, self.t, self.trainable_init, self.use_ff, self.attn_scale, stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// 1-based inclusive position window of the early previous-token probe.
    pub early_window: (usize, usize),
    pub key_candidates: KeyCandidates,
    pub kl_eps: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            early_window: (2, 64),
            key_candidates: KeyCandidates::Triggers,
            kl_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeValues {
    pub recall_wk1_full: Option<f64>,
    pub recall_wk1_early: Option<f64>,
    pub recall_wk2: Option<f64>,
    pub recall_wo2: Option<f64>,
    pub kl_wf: Option<f64>,
}

/// Probe targets built once from the frozen embeddings.
pub struct Probes<S: Scalar> {
    full: ProbeSet<S>,
    early: crate::probes::TargetMemory<S>,
    spec: MarkovSpec,
    eps: f64,
}

impl<S: Scalar> Probes<S> {
    pub fn new(params: &ModelParams<S>, trig: &TriggerConfig, spec: &MarkovSpec, cfg: &ProbeConfig) -> Result<Self> {
        let t = params.t_max();
        let (lo, hi) = cfg.early_window;
        let early = crate::probes::wk1_memory(params, (lo, hi.min(t)))?;
        Ok(Self {
            full: target_memory_specs(params, trig, None, cfg.key_candidates)?,
            early,
            spec: spec.clone(),
            eps: cfg.kl_eps,
        })
    }

    pub fn evaluate(&self, params: &ModelParams<S>) -> Result<ProbeValues> {
        let wk2 = if self.full.wk2.pairs.is_empty() {
            None
        } else {
            Some(recall(&params.w_k2, &self.full.wk2)?)
        };
        Ok(ProbeValues {
            recall_wk1_full: Some(recall(&params.w_k1, &self.full.wk1)?),
            recall_wk1_early: Some(recall(&params.w_k1, &self.early)?),
            recall_wk2: wk2,
            recall_wo2: Some(recall(&params.w_o2, &self.full.wo2)?),
            kl_wf: match &params.w_f {
                Some(f) => Some(kl_probe(f, params, &self.spec, self.eps)?),
                None => None,
            },
        })
    }
}

/// One log line. `None` fields are undefined (empty mask or not probed).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub loss_all: Option<f64>,
    pub loss_global: Option<f64>,
    pub loss_icl: Option<f64>,
    pub acc_icl: Option<f64>,
    pub recall_wk1_full: Option<f64>,
    pub recall_wk1_early: Option<f64>,
    pub recall_wk2: Option<f64>,
    pub recall_wo2: Option<f64>,
    pub kl_wf: Option<f64>,
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str =
    "iter,loss_all,loss_global,loss_icl,acc_icl,recall_wk1_full,recall_wk1_early,recall_wk2,recall_wo2,kl_wf,wall_seconds";

fn field(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(x) = v {
        write!(out, "{x}").expect("writing to a String");
    }
}

impl MetricsRow {
    pub fn new(iter: usize, stats: &LossStats, probes: Option<ProbeValues>, wall_seconds: f64) -> Self {
        let m = stats.metrics();
        let p = probes.unwrap_or_default();
        Self {
            iter,
            loss_all: m.loss_all,
            loss_global: m.loss_global,
            loss_icl: m.loss_icl,
            acc_icl: m.acc_icl,
            recall_wk1_full: p.recall_wk1_full,
            recall_wk1_early: p.recall_wk1_early,
            recall_wk2: p.recall_wk2,
            recall_wo2: p.recall_wo2,
            kl_wf: p.kl_wf,
            wall_seconds,
        }
    }

    pub fn csv_line(&self) -> String {
        let mut s = self.iter.to_string();
        for v in [
            self.loss_all,
            self.loss_global,
            self.loss_icl,
            self.acc_icl,
            self.recall_wk1_full,
            self.recall_wk1_early,
            self.recall_wk2,
            self.recall_wo2,
            self.kl_wf,
        ] {
            field(&mut s, v);
        }
        write!(s, ",{:.3}", self.wall_seconds).expect("writing to a String");
        s
    }
}

pub fn write_csv(rows: &[MetricsRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

pub fn save_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Momentum buffers, one per trainable matrix.
pub type Velocity<S> = Grads<S>;

pub fn zero_velocity<S: Scalar>(params: &ModelParams<S>) -> Velocity<S> {
    let d = params.d();
    Grads {
        wk1: Array2::zeros((d, d)),
        wk2: Array2::zeros((d, d)),
        wo2: Array2::zeros((d, d)),
        wf: params.use_ff().then(|| Array2::zeros((d, d))),
    }
}

/// `v <- momentum·v + (g + wd·w)`, `w <- w − eta·v` for every matrix not
/// frozen at `iter`. Frozen matrices and their buffers are left untouched.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &Grads<S>,
    velocity: &mut Velocity<S>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(LabError::Numerical(format!("non-finite gradient at iteration {iter}")));
    }
    let (mu, wd, eta) = (S::cast(cfg.momentum), S::cast(cfg.weight_decay), S::cast(cfg.eta));
    for m in params.active_trainables() {
        if cfg.is_frozen(m, iter) {
            continue;
        }
        let g = grads.get(m).ok_or_else(|| LabError::InvalidArgument(format!("missing gradient for {m}")))?;
        let v = velocity
            .get_mut(m)
            .ok_or_else(|| LabError::InvalidArgument(format!("missing velocity for {m}")))?;
        let w = params.trainable_mut(m).expect("active trainable");
        if g.dim() != w.dim() || v.dim() != w.dim() {
            return invalid(format!("shape mismatch updating {m}"));
        }
        ndarray::Zip::from(&mut *v).and(g).and(&*w).for_each(|v, &g, &w| {
            *v = mu * *v + g + wd * w;
        });
        w.scaled_add(-eta, v);
    }
    Ok(())
}

pub struct TrainOutcome<S: Scalar> {
    pub rows: Vec<MetricsRow>,
    pub params: ModelParams<S>,
}

/// Substream of the training batch at iteration `i`.
pub fn batch_stream(seed: u64, i: usize) -> RngStream {
    RngStream::new(seed).named("batch").child(i as u64)
}

/// Trains from freshly initialized parameters; see [`train_from`].
pub fn train_loop<S: Scalar>(
    spec: &MarkovSpec,
    trig: &TriggerConfig,
    geom: &Geometry,
    cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome<S>> {
    let params = geom.init(spec.n, &RngStream::new(cfg.seed).named("model"))?;
    train_from(params, spec, trig, cfg, probe_cfg, on_row)
}

/// Rows `0..=iters`: row `i` is evaluated on fresh batch `i` with the
/// parameters before update `i`; the last row has no update after it.
pub fn train_from<S: Scalar>(
    mut params: ModelParams<S>,
    spec: &MarkovSpec,
    trig: &TriggerConfig,
    cfg: &TrainConfig,
    probe_cfg: &ProbeConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if spec.n != params.n() {
        return invalid(format!("spec has N = {} but model has N = {}", spec.n, params.n()));
    }
    let sampler = SequenceSampler::new(spec, trig)?;
    let probes = Probes::new(&params, trig, spec, probe_cfg)?;
    let mut velocity = zero_velocity(&params);
    let start = Instant::now();
    let mut rows = Vec::with_capacity(cfg.iters + 1);
    for i in 0..=cfg.iters {
        let batch = sampler.sample_batch(params.t_max(), cfg.batch_size, &batch_stream(cfg.seed, i))?;
        let probe_now = i == cfg.iters || (cfg.probe_every > 0 && i % cfg.probe_every == 0);
        let pv = if probe_now { Some(probes.evaluate(&params)?) } else { None };
        let (stats, step) = if i < cfg.iters {
            let b = backward(&params, &batch, cfg.mask_mode)?;
            if !b.loss.is_finite() {
                return Err(LabError::Numerical(format!("non-finite loss at iteration {i}")));
            }
            (b.stats, Some(b.grads))
        } else {
            (evaluate(&params, &batch)?, None)
        };
        let row = MetricsRow::new(i, &stats, pv, start.elapsed().as_secs_f64());
        on_row(&row);
        rows.push(row);
        if let Some(g) = step {
            sgd_step(&mut params, &g, &mut velocity, cfg, i)?;
        }
    }
    Ok(TrainOutcome { rows, params })
}
