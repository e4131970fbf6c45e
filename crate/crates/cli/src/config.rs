//! Experiment configuration: JSON document, `--set` overrides, and the
//! schema checks that map to exit code 2.

use std::path::{Path, PathBuf};

use bilab_core::datagen::{estimate_markov, fixed_triggers, uniform_markov, MarkovSpec, OutputMode, TriggerConfig};
use bilab_core::memories::OracleConfig;
use bilab_core::model::MaskMode;
use bilab_core::theory::onestep::R1Config;
use bilab_core::theory::CurriculumConfig;
use bilab_core::train::{Geometry, ProbeConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Train,
    Oracle,
    TheoryOnestep,
    TheoryThreestep,
    Gradcheck,
    DataStats,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// At most one source may be set; none means `synthetic_N = 65`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MarkovSource {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    /// A MarkovSpec JSON export.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec_path: Option<PathBuf>,
    #[serde(rename = "uniform_N", skip_serializing_if = "Option::is_none")]
    pub uniform_n: Option<usize>,
    #[serde(rename = "synthetic_N", skip_serializing_if = "Option::is_none")]
    pub synthetic_n: Option<usize>,
    /// Seed of the synthetic chain; independent of the run seed so that
    /// runs with different seeds share one distribution.
    pub synthetic_seed: u64,
}

pub const DEFAULT_SYNTHETIC_N: usize = 65;

impl MarkovSource {
    /// Fills the default source so the resolved config names it.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let set = [
            self.corpus_path.is_some(),
            self.spec_path.is_some(),
            self.uniform_n.is_some(),
            self.synthetic_n.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if set > 1 {
            return Err(CliError::schema(
                "markov",
                "set only one of corpus_path, spec_path, uniform_N, synthetic_N",
            ));
        }
        if set == 0 {
            self.synthetic_n = Some(DEFAULT_SYNTHETIC_N);
        }
        Ok(())
    }

    pub fn load(&self) -> Result<MarkovSpec, CliError> {
        if let Some(p) = &self.corpus_path {
            let text = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            return Ok(estimate_markov(&text)?);
        }
        if let Some(p) = &self.spec_path {
            return Ok(MarkovSpec::load(p)?);
        }
        if let Some(n) = self.uniform_n {
            return Ok(uniform_markov(n)?);
        }
        Ok(MarkovSpec::synthetic(self.synthetic_n.unwrap_or(DEFAULT_SYNTHETIC_N), self.synthetic_seed)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriggerSelection {
    Fixed,
    #[default]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TriggerLaw {
    /// `pi_q = pi_u`.
    #[default]
    Unigram,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerSettings {
    pub mode: TriggerSelection,
    #[serde(rename = "K")]
    pub k: usize,
    /// Fixed mode: explicit tokens; otherwise ranks `[rank_offset, rank_offset+K)` of `pi_u`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    pub rank_offset: usize,
    pub pi_q: TriggerLaw,
    pub output_mode: OutputMode,
}

impl Default for TriggerSettings {
    fn default() -> Self {
        Self {
            mode: TriggerSelection::Random,
            k: 5,
            tokens: None,
            rank_offset: 0,
            pi_q: TriggerLaw::Unigram,
            output_mode: OutputMode::Uniform,
        }
    }
}

impl TriggerSettings {
    pub fn build(&self, spec: &MarkovSpec) -> Result<TriggerConfig, CliError> {
        self.build_with(spec, self.output_mode)
    }

    pub fn build_with(&self, spec: &MarkovSpec, output_mode: OutputMode) -> Result<TriggerConfig, CliError> {
        let cfg = match self.mode {
            TriggerSelection::Fixed => {
                let tokens = match &self.tokens {
                    Some(t) => {
                        if t.len() != self.k {
                            return Err(CliError::schema(
                                "triggers.tokens",
                                format!("{} tokens given but K = {}", t.len(), self.k),
                            ));
                        }
                        t.clone()
                    }
                    None => fixed_triggers(spec, self.k, self.rank_offset)?,
                };
                TriggerConfig::fixed(tokens, output_mode)
            }
            TriggerSelection::Random => {
                let pi_q = match self.pi_q {
                    TriggerLaw::Unigram => spec.pi_u.clone(),
                    TriggerLaw::Uniform => vec![1.0 / spec.n as f64; spec.n],
                };
                TriggerConfig::random(self.k, pi_q, output_mode)
            }
        };
        cfg.validate(spec)?;
        Ok(cfg)
    }
}

/// Extra evaluation after training, e.g. on a shifted output law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub n_batches: usize,
    /// Defaults to the training output mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_mode: Option<OutputMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    pub beta: f64,
    pub exclude_triggers_from_wf: bool,
    pub use_ff: bool,
    pub smoothing: f64,
    pub center_wf: bool,
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        let c = OracleConfig::default();
        Self {
            beta: c.beta,
            exclude_triggers_from_wf: c.exclude_triggers_from_wf,
            use_ff: c.use_ff,
            smoothing: c.smoothing,
            center_wf: c.center_wf,
            n_batches: 50,
            batch_size: 128,
        }
    }
}

impl OracleSettings {
    pub fn core(&self) -> OracleConfig {
        OracleConfig {
            beta: self.beta,
            exclude_triggers_from_wf: self.exclude_triggers_from_wf,
            use_ff: self.use_ff,
            smoothing: self.smoothing,
            center_wf: self.center_wf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub batch_size: usize,
    pub per_matrix: usize,
    pub tol: f64,
    pub mask_modes: Vec<MaskMode>,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            batch_size: 4,
            per_matrix: 200,
            tol: 1e-4,
            mask_modes: vec![MaskMode::All, MaskMode::InContextOnly],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OneStepMode {
    /// Recall of the one-step `W_O2` estimate from class-conditional means.
    #[default]
    R1,
    /// One population step on the single-layer toy model.
    Illustrative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneStepSettings {
    pub mode: OneStepMode,
    pub r1: R1Config,
    pub eta: f64,
    /// Illustrative mode geometry.
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
}

impl Default for OneStepSettings {
    fn default() -> Self {
        Self {
            mode: OneStepMode::R1,
            r1: R1Config::default(),
            eta: 1.0,
            n: 20,
            t: 32,
            d: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataStatsSettings {
    /// Sequences sampled to count trigger and in-context positions.
    pub sample_sequences: usize,
}

impl Default for DataStatsSettings {
    fn default() -> Self {
        Self { sample_sequences: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    D,
    NBatches,
    Eta,
    #[serde(rename = "K")]
    K,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub base: Experiment,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Repetitions per value; the summary reports their mean.
    pub seeds: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            base: Experiment::TheoryOnestep,
            axis: SweepAxis::D,
            values: Vec::new(),
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default)]
    pub markov: MarkovSource,
    #[serde(default)]
    pub triggers: TriggerSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub gradcheck: GradcheckSettings,
    #[serde(default)]
    pub onestep: OneStepSettings,
    #[serde(default)]
    pub threestep: CurriculumConfig,
    #[serde(default)]
    pub data_stats: DataStatsSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Defaults for `experiment`, as written by `bilab defaults`.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut v = serde_json::json!({ "experiment": experiment });
        if experiment == Experiment::Sweep {
            v["sweep"] = serde_json::json!({ "values": [1.0] });
        }
        let mut cfg: Self = serde_json::from_value(v).expect("defaults deserialize");
        cfg.markov.resolve().expect("default markov source");
        cfg
    }

    /// Deserializes with the failing field path attached to errors.
    pub fn from_value(v: Value) -> Result<Self, CliError> {
        let mut cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            CliError::schema(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&mut self) -> Result<(), CliError> {
        self.markov.resolve()?;
        // the run seed drives training; echo it so the resolved config is honest
        self.train.seed = self.seed;
        let field = |f: &str, r: bilab_core::Result<()>| r.map_err(|e| CliError::schema(f, e.to_string()));
        field("train", self.train.validate())?;
        field("threestep", self.threestep.validate())?;
        if self.geometry.d == 0 || self.geometry.t < 2 {
            return Err(CliError::schema("geometry", "need d >= 1 and T >= 2"));
        }
        if self.triggers.k == 0 {
            return Err(CliError::schema("triggers.K", "need K >= 1"));
        }
        let r1 = &self.onestep.r1;
        if r1.k == 0 || r1.d == 0 || r1.n == 0 || r1.t < 2 || r1.n_batches == 0 || r1.batch_size == 0 {
            return Err(CliError::schema("onestep.r1", "need K, d, N, n_batches, batch_size >= 1 and T >= 2"));
        }
        if self.experiment == Experiment::Sweep {
            if self.sweep.values.is_empty() {
                return Err(CliError::schema("sweep.values", "empty value list"));
            }
            if self.sweep.base == Experiment::Sweep {
                return Err(CliError::schema("sweep.base", "a sweep cannot sweep itself"));
            }
            if self.sweep.seeds == 0 {
                return Err(CliError::schema("sweep.seeds", "need at least one seed"));
            }
            sweep_path(self.sweep.base, self.sweep.axis)?;
        }
        Ok(())
    }
}

/// Config path a sweep axis writes to for the given base experiment.
pub fn sweep_path(base: Experiment, axis: SweepAxis) -> Result<&'static str, CliError> {
    use Experiment as E;
    use SweepAxis as A;
    let p = match (axis, base) {
        (A::D, E::TheoryOnestep) => "onestep.r1.d",
        (A::D, E::TheoryThreestep) => "threestep.d",
        (A::D, E::Train | E::Oracle | E::Gradcheck) => "geometry.d",
        (A::NBatches, E::TheoryOnestep) => "onestep.r1.n_batches",
        (A::NBatches, E::Oracle) => "oracle.n_batches",
        (A::Eta, E::Train) => "train.eta",
        (A::Eta, E::TheoryOnestep) => "onestep.eta",
        (A::K, E::Train | E::Oracle | E::DataStats) => "triggers.K",
        (A::K, E::TheoryOnestep) => "onestep.r1.K",
        _ => {
            return Err(CliError::schema(
                "sweep.axis",
                format!("axis {axis:?} does not apply to experiment {base:?}"),
            ))
        }
    };
    Ok(p)
}

/// Parses the right-hand side of `KEY=VALUE`: JSON if it parses, else a string.
pub fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

/// Writes `value` at the dotted `path`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), CliError> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(CliError::schema(path, "malformed override key"));
    }
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(CliError::schema(parts[..i].join("."), "not an object"));
            }
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!()
}

pub fn apply_override(root: &mut Value, kv: &str) -> Result<(), CliError> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| CliError::schema(kv, "override must look like KEY=VALUE"))?;
    set_path(root, k.trim(), parse_value(v))
}

pub fn read_config_value(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::schema("", format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_objects() {
        let mut v = serde_json::json!({"experiment": "train"});
        apply_override(&mut v, "train.eta=0.5").unwrap();
        apply_override(&mut v, "markov.corpus_path=a.txt").unwrap();
        assert_eq!(v["train"]["eta"], 0.5);
        assert_eq!(v["markov"]["corpus_path"], "a.txt");
        assert!(apply_override(&mut v, "train..eta=1").is_err());
        assert!(apply_override(&mut v, "noequals").is_err());
    }

    #[test]
    fn unknown_field_reports_its_path() {
        let v = serde_json::json!({"experiment": "train", "train": {"etta": 1.0}});
        match ExperimentConfig::from_value(v) {
            Err(CliError::Schema { field, .. }) => assert_eq!(field, "train.etta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_markov_sources_conflict() {
        let v = serde_json::json!({"experiment": "data_stats", "markov": {"uniform_N": 3, "synthetic_N": 4}});
        assert!(matches!(ExperimentConfig::from_value(v), Err(CliError::Schema { .. })));
    }

    #[test]
    fn every_default_round_trips() {
        for e in [
            Experiment::Train,
            Experiment::Oracle,
            Experiment::TheoryOnestep,
            Experiment::TheoryThreestep,
            Experiment::Gradcheck,
            Experiment::DataStats,
            Experiment::Sweep,
        ] {
            let c = ExperimentConfig::defaults(e);
            let back = ExperimentConfig::from_value(serde_json::to_value(&c).unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }
}
