//! Experiment dispatch and artifact writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use bilab_core::datagen::{MarkovSpec, SequenceSampler};
use bilab_core::grad::{evaluate, gradcheck, GradcheckReport};
use bilab_core::memories::oracle_model_eval;
use bilab_core::model::{LossStats, MaskMode, Metrics, ModelParams};
use bilab_core::probes::attention_heatmap_export;
use bilab_core::theory::onestep::{illustrative_one_step_w1, r1_recall};
use bilab_core::theory::{three_step_curriculum, BatchSource, StandardSource};
use bilab_core::train::{save_csv, train_loop, MetricsRow};
use bilab_core::{RngStream, Scalar};
use serde::Serialize;
use serde_json::Value;

use crate::config::{set_path, sweep_path, Experiment, ExperimentConfig, OneStepMode, Precision, SweepAxis};
use crate::error::CliError;

/// Headline numbers of one run; `None` is written as `null` / an empty CSV field.
pub type Summary = BTreeMap<String, Option<f64>>;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const SUMMARY: &str = "summary.json";

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn metrics_summary(prefix: &str, m: &Metrics, out: &mut Summary) {
    out.insert(format!("{prefix}loss_all"), m.loss_all);
    out.insert(format!("{prefix}loss_global"), m.loss_global);
    out.insert(format!("{prefix}loss_icl"), m.loss_icl);
    out.insert(format!("{prefix}acc_icl"), m.acc_icl);
}

/// Layer-1 and layer-2 attention maps of one fresh sequence.
fn export_heatmaps<S: Scalar>(params: &ModelParams<S>, tokens: &[usize], out: &Path) -> Result<(), CliError> {
    let tr = params.forward(tokens)?;
    attention_heatmap_export(&tr.a1, &out.join("attn_layer1.pgm"))?;
    attention_heatmap_export(&tr.a2, &out.join("attn_layer2.pgm"))?;
    Ok(())
}

/// Runs `cfg` (already validated) and writes every artifact under its
/// `output_dir`, starting with `resolved_config.json`.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_json(&out.join(RESOLVED_CONFIG), cfg)?;
    let summary = match (cfg.experiment, cfg.precision) {
        (Experiment::Train, Precision::F64) => run_train::<f64>(cfg, &out)?,
        (Experiment::Train, Precision::F32) => run_train::<f32>(cfg, &out)?,
        (Experiment::Oracle, Precision::F64) => run_oracle::<f64>(cfg, &out)?,
        (Experiment::Oracle, Precision::F32) => run_oracle::<f32>(cfg, &out)?,
        (Experiment::TheoryOnestep, _) => run_onestep(cfg, &out)?,
        (Experiment::TheoryThreestep, _) => run_threestep(cfg, &out)?,
        (Experiment::Gradcheck, _) => run_gradcheck(cfg, &out)?,
        (Experiment::DataStats, _) => run_data_stats(cfg, &out)?,
        (Experiment::Sweep, _) => run_sweep(cfg, &out)?,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

fn first_iter_at_least(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>, level: f64) -> Option<f64> {
    rows.iter().find(|r| f(r).is_some_and(|v| v >= level)).map(|r| r.iter as f64)
}

fn run_train<S: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let spec = cfg.markov.load()?;
    let trig = cfg.triggers.build(&spec)?;
    let res = train_loop::<S>(&spec, &trig, &cfg.geometry, &cfg.train, &cfg.probes, |_| {})?;
    save_csv(&res.rows, &out.join("metrics.csv"))?;
    res.params.save_checkpoint(&out.join("checkpoint.bin"))?;
    let root = RngStream::new(cfg.seed);
    let sampler = SequenceSampler::new(&spec, &trig)?;
    let seq = sampler.sample(cfg.geometry.t, &root.named("heatmap"))?;
    export_heatmaps(&res.params, &seq.tokens, out)?;

    let last = res.rows.last().expect("rows 0..=iters");
    let mut s = Summary::new();
    s.insert("iters".into(), Some(last.iter as f64));
    s.insert("loss_all".into(), last.loss_all);
    s.insert("loss_global".into(), last.loss_global);
    s.insert("loss_icl".into(), last.loss_icl);
    s.insert("acc_icl".into(), last.acc_icl);
    s.insert("recall_wk1_full".into(), last.recall_wk1_full);
    s.insert("recall_wk1_early".into(), last.recall_wk1_early);
    s.insert("recall_wk2".into(), last.recall_wk2);
    s.insert("recall_wo2".into(), last.recall_wo2);
    s.insert("kl_wf".into(), last.kl_wf);
    s.insert(
        "first_iter_recall_wo2_ge_0.9".into(),
        first_iter_at_least(&res.rows, |r| r.recall_wo2, 0.9),
    );
    s.insert(
        "first_iter_recall_wk2_ge_0.9".into(),
        first_iter_at_least(&res.rows, |r| r.recall_wk2, 0.9),
    );

    if cfg.eval.n_batches > 0 {
        let mode = cfg.eval.output_mode.unwrap_or(cfg.triggers.output_mode);
        let etrig = cfg.triggers.build_with(&spec, mode)?;
        let es = SequenceSampler::new(&spec, &etrig)?;
        let mut stats = LossStats::default();
        for b in 0..cfg.eval.n_batches {
            let batch = es.sample_batch(cfg.geometry.t, cfg.train.batch_size, &root.named("eval").child(b as u64))?;
            stats.merge(&evaluate(&res.params, &batch)?);
        }
        let m = stats.metrics();
        #[derive(Serialize)]
        struct EvalReport {
            output_mode: bilab_core::datagen::OutputMode,
            n_batches: usize,
            positions_icl: usize,
            metrics: Metrics,
        }
        write_json(
            &out.join("eval.json"),
            &EvalReport {
                output_mode: mode,
                n_batches: cfg.eval.n_batches,
                positions_icl: stats.n_icl,
                metrics: m,
            },
        )?;
        metrics_summary("eval_", &m, &mut s);
    }
    Ok(s)
}

fn run_oracle<S: Scalar>(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let spec = cfg.markov.load()?;
    let trig = cfg.triggers.build(&spec)?;
    let o = &cfg.oracle;
    let root = RngStream::new(cfg.seed);
    let (params, report) = oracle_model_eval::<S>(&spec, &trig, &cfg.geometry, &o.core(), o.n_batches, o.batch_size, &root)?;
    write_json(&out.join("oracle.json"), &report)?;
    let seq = SequenceSampler::new(&spec, &trig)?.sample(cfg.geometry.t, &root.named("heatmap"))?;
    export_heatmaps(&params, &seq.tokens, out)?;
    let mut s = Summary::new();
    metrics_summary("", &report.metrics, &mut s);
    s.insert("positions_icl".into(), Some(report.positions_icl as f64));
    s.insert("kl_wf".into(), report.kl_wf);
    s.insert("bigram_cross_entropy".into(), Some(report.bigram_cross_entropy));
    Ok(s)
}

fn run_onestep(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let root = RngStream::new(cfg.seed);
    let o = &cfg.onestep;
    let mut s = Summary::new();
    match o.mode {
        OneStepMode::R1 => {
            let rep = r1_recall(&o.r1, &root)?;
            write_json(&out.join("onestep.json"), &rep)?;
            s.insert("r1".into(), Some(rep.r1));
            s.insert("observed_classes".into(), Some(rep.observed as f64));
            s.insert("missing_classes".into(), Some(rep.missing as f64));
        }
        OneStepMode::Illustrative => {
            let rep = illustrative_one_step_w1(o.eta, o.n, o.t, o.d, &root)?;
            write_json(&out.join("onestep.json"), &rep)?;
            s.insert("accuracy".into(), Some(rep.accuracy));
            s.insert("true_score_mean".into(), Some(rep.true_score_mean));
            s.insert("true_score_max_dev".into(), Some(rep.true_score_max_dev));
            s.insert("positional_max".into(), Some(rep.positional_max));
            s.insert("offdiag_max".into(), Some(rep.offdiag_max));
        }
    }
    Ok(s)
}

fn run_threestep(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let root = RngStream::new(cfg.seed);
    let c = &cfg.threestep;
    let (params, rep) = three_step_curriculum(c, &root)?;
    write_json(&out.join("curriculum.json"), &rep)?;
    let src = StandardSource::uniform(c.n, 1, c.t + 1)?;
    let seq = src.batch(1, &root.named("heatmap"))?.remove(0);
    export_heatmaps(&params, &seq.tokens, out)?;
    let mut s = Summary::new();
    s.insert("recall_wo2".into(), Some(rep.recall_wo2));
    s.insert("recall_wk2".into(), Some(rep.recall_wk2));
    s.insert("recall_wk1".into(), Some(rep.recall_wk1));
    metrics_summary("", &rep.metrics, &mut s);
    s.insert("positions_icl".into(), Some(rep.positions_icl as f64));
    Ok(s)
}

/// Always in `f64`: central differences in single precision are noise.
fn run_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let spec = cfg.markov.load()?;
    let trig = cfg.triggers.build(&spec)?;
    let root = RngStream::new(cfg.seed);
    let g = &cfg.gradcheck;
    let params: ModelParams<f64> = cfg.geometry.init(spec.n, &root.named("model"))?;
    let batch = SequenceSampler::new(&spec, &trig)?.sample_batch(cfg.geometry.t, g.batch_size, &root.named("batch"))?;
    let mut reports: BTreeMap<String, GradcheckReport> = BTreeMap::new();
    for &mode in &g.mask_modes {
        let name = match mode {
            MaskMode::All => "all",
            MaskMode::InContextOnly => "in_context_only",
        };
        let r = gradcheck(&params, &batch, mode, g.tol, g.per_matrix, &root.named("coords"))?;
        reports.insert(name.into(), r);
    }
    write_json(&out.join("gradcheck.json"), &reports)?;
    let worst = reports.values().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let mut s = Summary::new();
    s.insert("max_rel_err".into(), Some(worst));
    s.insert("checked".into(), Some(reports.values().map(|r| r.checked).sum::<usize>() as f64));
    s.insert("passed".into(), Some(reports.values().all(|r| r.passed) as u8 as f64));
    Ok(s)
}

fn entropy(p: &[f64]) -> f64 {
    // `+ 0.0` turns a -0.0 from deterministic chains into 0.0
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum::<f64>() + 0.0
}

#[derive(Serialize)]
struct DataStats {
    #[serde(rename = "N")]
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    chars: Option<String>,
    pi_u: Vec<f64>,
    pi_b: Vec<Vec<f64>>,
    stationary: Vec<f64>,
    unigram_entropy: f64,
    /// Entropy rate of the chain under its stationary law.
    bigram_entropy_rate: f64,
    trigger_candidates: Vec<usize>,
    sampled_sequences: usize,
    #[serde(rename = "T")]
    t: usize,
    mean_trigger_positions: Option<f64>,
    mean_in_context_positions: Option<f64>,
}

fn run_data_stats(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let spec: MarkovSpec = cfg.markov.load()?;
    spec.save(&out.join("markov.json"))?;
    let trig = cfg.triggers.build(&spec)?;
    let n_seq = cfg.data_stats.sample_sequences;
    let t = cfg.geometry.t;
    let seqs = SequenceSampler::new(&spec, &trig)?.sample_batch(t, n_seq, &RngStream::new(cfg.seed).named("stats"))?;
    let mean = |f: &dyn Fn(&bilab_core::datagen::TaggedSequence) -> usize| {
        (n_seq > 0).then(|| seqs.iter().map(f).sum::<usize>() as f64 / n_seq as f64)
    };
    let stats = DataStats {
        n: spec.n,
        chars: spec.chars.as_ref().map(|c| String::from_utf8_lossy(c).into_owned()),
        pi_u: spec.pi_u.clone(),
        pi_b: spec.pi_b.clone(),
        stationary: spec.stationary(),
        unigram_entropy: entropy(&spec.pi_u),
        bigram_entropy_rate: spec.bigram_cross_entropy(0.0) + 0.0,
        trigger_candidates: trig.candidate_triggers(),
        sampled_sequences: n_seq,
        t,
        mean_trigger_positions: mean(&|s| s.is_trigger.iter().filter(|b| **b).count()),
        mean_in_context_positions: mean(&|s| s.in_context_positions().count()),
    };
    write_json(&out.join("data_stats.json"), &stats)?;
    let mut s = Summary::new();
    s.insert("N".into(), Some(spec.n as f64));
    s.insert("unigram_entropy".into(), Some(stats.unigram_entropy));
    s.insert("bigram_entropy_rate".into(), Some(stats.bigram_entropy_rate));
    s.insert("mean_trigger_positions".into(), stats.mean_trigger_positions);
    s.insert("mean_in_context_positions".into(), stats.mean_in_context_positions);
    Ok(s)
}

fn axis_value(axis: SweepAxis, v: f64) -> Result<Value, CliError> {
    match axis {
        SweepAxis::Eta => Ok(serde_json::json!(v)),
        _ => {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CliError::schema("sweep.values", format!("{v} is not a count")));
            }
            Ok(serde_json::json!(v as u64))
        }
    }
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::D => "d",
        SweepAxis::NBatches => "n_batches",
        SweepAxis::Eta => "eta",
        SweepAxis::K => "K",
    }
}

/// Repetition `r` of every sweep point uses the same derived seed, so
/// points differ only in the swept value.
pub fn sweep_seed(root: u64, rep: usize) -> u64 {
    RngStream::new(root).named("sweep").child(rep as u64).seed()
}

fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Summary, CliError> {
    let sw = &cfg.sweep;
    let path = sweep_path(sw.base, sw.axis)?;
    let name = axis_name(sw.axis);
    let mut base = serde_json::to_value(cfg)?;
    if let Some(o) = base.as_object_mut() {
        o.remove("sweep");
    }
    set_path(&mut base, "experiment", serde_json::to_value(sw.base)?)?;

    let mut rows: Vec<(f64, Summary)> = Vec::new();
    for &v in &sw.values {
        let point = format!("{name}={v}");
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut keys = BTreeSet::new();
        for r in 0..sw.seeds {
            let mut sub = base.clone();
            set_path(&mut sub, path, axis_value(sw.axis, v)?)?;
            set_path(&mut sub, "seed", serde_json::json!(sweep_seed(cfg.seed, r)))?;
            let dir = if sw.seeds == 1 {
                out.join(&point)
            } else {
                out.join(&point).join(format!("seed_{r}"))
            };
            set_path(&mut sub, "output_dir", serde_json::json!(dir))?;
            let sub_cfg = ExperimentConfig::from_value(sub)?;
            for (k, x) in run(&sub_cfg)? {
                keys.insert(k.clone());
                if let Some(x) = x {
                    let e = acc.entry(k).or_insert((0.0, 0));
                    e.0 += x;
                    e.1 += 1;
                }
            }
        }
        let means: Summary = keys
            .into_iter()
            .map(|k| {
                let m = acc.get(&k).map(|(s, n)| s / *n as f64);
                (k, m)
            })
            .collect();
        rows.push((v, means));
    }

    let cols: BTreeSet<String> = rows.iter().flat_map(|(_, s)| s.keys().cloned()).collect();
    let mut csv = format!("{name},seeds");
    for c in &cols {
        write!(csv, ",{c}").expect("writing to a String");
    }
    csv.push('\n');
    for (v, s) in &rows {
        write!(csv, "{v},{}", sw.seeds).expect("writing to a String");
        for c in &cols {
            csv.push(',');
            if let Some(Some(x)) = s.get(c) {
                write!(csv, "{x}").expect("writing to a String");
            }
        }
        csv.push('\n');
    }
    let p = out.join("sweep_summary.csv");
    std::fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;

    let mut s = Summary::new();
    s.insert("points".into(), Some(rows.len() as f64));
    Ok(s)
}

/// Reads the sweep summary back as `(value, column -> mean)` rows.
pub fn read_sweep_summary(path: &Path) -> Result<Vec<(f64, BTreeMap<String, Option<f64>>)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut out = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let v: f64 = f[0].parse().map_err(|_| CliError::Runtime(format!("bad sweep row '{l}'")))?;
        let m = header
            .iter()
            .zip(&f)
            .skip(2)
            .map(|(h, x)| (h.to_string(), x.parse().ok()))
            .collect();
        out.push((v, m));
    }
    Ok(out)
}
