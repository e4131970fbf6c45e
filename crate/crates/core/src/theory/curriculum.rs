//! Sequential one-step updates of `W_O2`, `W_K2` and `W_K1` from zero, each
//! computed with the previously learned matrices in place, then installed
//! into the full model.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::data::{BatchSource, ConditionedSource, StandardSource};
use super::lemmas::{lemma3_gradient_wk2, lemma4_gradient_wk1, wk1_structure, wk2_structure};
use super::onestep::{estimate_from_sequences, one_step_matrix, DiagStats, ResidualStream};
use crate::error::{invalid, Result};
use crate::grad::evaluate;
use crate::model::{AttnScale, LossStats, Metrics, ModelParams, Trainable, TrainableInit};
use crate::probes::{recall, wk1_memory, wk2_memory, wo2_memory, KeyCandidates, TargetMemory};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Position of the supervised second trigger occurrence.
    #[serde(rename = "T")]
    pub t: usize,
    pub eta_wo2: f64,
    pub eta_wk2: f64,
    pub eta_wk1: f64,
    pub samples_per_step: usize,
    /// Sharpening of the normalized key-query matrices before install.
    pub beta: f64,
    /// Initial value of the three matrices; each step restarts its own matrix from zero.
    pub init: TrainableInit,
    pub order: Vec<Trainable>,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            d: 512,
            n: 50,
            t: 32,
            eta_wo2: 1.0,
            eta_wk2: 1.0,
            eta_wk1: 1.0,
            samples_per_step: 100_000,
            beta: 20.0,
            init: TrainableInit::Zeros,
            order: vec![Trainable::WO2, Trainable::WK2, Trainable::WK1],
            eval_batches: 16,
            eval_batch_size: 256,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.t < 4 {
            return invalid(format!("curriculum needs d, N >= 1 and T >= 4 (got d={}, N={}, T={})", self.d, self.n, self.t));
        }
        for (name, eta) in [("eta_wo2", self.eta_wo2), ("eta_wk2", self.eta_wk2), ("eta_wk1", self.eta_wk1)] {
            if !(eta > 0.0) {
                return invalid(format!("{name} must be > 0 (got {eta})"));
            }
        }
        if !(self.beta >= 0.0) {
            return invalid(format!("beta must be >= 0 (got {})", self.beta));
        }
        let mut seen = self.order.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.order.len() || self.order.contains(&Trainable::WF) {
            return invalid("order must list distinct matrices among W_O2, W_K2, W_K1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub matrix: Trainable,
    pub samples: usize,
    /// Recall against the matrix's ideal memory right after the step.
    pub recall: f64,
    /// Mean score of the ideal memory's own pairs under the step.
    pub target_score_mean: f64,
    pub stats: Option<DiagStats>,
    pub prev_token_fraction: Option<f64>,
    pub tau_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub steps: Vec<StepReport>,
    pub recall_wo2: f64,
    pub recall_wk2: f64,
    pub recall_wk1: f64,
    pub metrics: Metrics,
    pub positions_icl: usize,
}

fn target(params: &ModelParams<f64>, m: Trainable) -> Result<TargetMemory<f64>> {
    let all: Vec<usize> = (0..params.n()).collect();
    Ok(match m {
        Trainable::WO2 => wo2_memory(params),
        Trainable::WK2 => wk2_memory(params, &all, KeyCandidates::FullVocab),
        Trainable::WK1 => wk1_memory(params, (2, params.t_max() - 1))?,
        Trainable::WF => return invalid("W_F is not part of the curriculum"),
    })
}

/// Mean of `v_p^T W u_p` over the memory's pairs.
fn target_score_mean(w: &Array2<f64>, mem: &TargetMemory<f64>) -> f64 {
    let sc = mem.scores(w);
    let total: f64 = mem
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = mem.candidate_ids.iter().position(|&id| id == p.value_id).expect("value is a candidate");
            sc[[c, i]]
        })
        .sum();
    total / mem.pairs.len() as f64
}

fn set(params: &mut ModelParams<f64>, m: Trainable, w: Array2<f64>) {
    *params.trainable_mut(m).expect("curriculum matrices exist") = w;
}

/// Frozen matrices from `stream.named("model")`, step `i`'s sequences from
/// `stream.named("step").child(i)`, evaluation batches from
/// `stream.named("eval")`.
pub fn three_step_curriculum(cfg: &CurriculumConfig, stream: &RngStream) -> Result<(ModelParams<f64>, CurriculumReport)> {
    cfg.validate()?;
    // sequences carry the output token after position T
    let mut params = ModelParams::<f64>::init(
        cfg.d,
        cfg.n,
        cfg.t + 1,
        cfg.init,
        false,
        AttnScale::One,
        &stream.named("model"),
    )?;
    let src = ConditionedSource::new(cfg.n, cfg.t)?;
    let mut steps = Vec::new();
    for (i, &m) in cfg.order.iter().enumerate() {
        let samples = if cfg.samples_per_step > 0 {
            src.batch(cfg.samples_per_step, &stream.named("step").child(i as u64))?
        } else {
            Vec::new()
        };
        set(&mut params, m, Array2::zeros((cfg.d, cfg.d)));
        let mut tau_hat = None;
        if !samples.is_empty() {
            let w = match m {
                Trainable::WO2 => {
                    let est = estimate_from_sequences(&ResidualStream::new(&params), &samples, cfg.n, 32);
                    tau_hat = est.tau_hat;
                    one_step_matrix(cfg.eta_wo2, &params.w_u, &est)
                }
                Trainable::WK2 => lemma3_gradient_wk2(&params, &samples)?.mapv(|a| -cfg.eta_wk2 * a),
                Trainable::WK1 => lemma4_gradient_wk1(&params, &samples)?.mapv(|a| -cfg.eta_wk1 * a),
                Trainable::WF => unreachable!("rejected by validate"),
            };
            set(&mut params, m, w);
        }
        let w = params.trainable(m).expect("exists");
        let mem = target(&params, m)?;
        let (stats, prev) = match m {
            Trainable::WK2 => (Some(wk2_structure(&params, w)?.stats), None),
            Trainable::WK1 => (None, Some(wk1_structure(&params, w, cfg.t)?.prev_token_fraction)),
            _ => {
                let vals = params.w_v2.dot(&params.w_e);
                (Some(DiagStats::all(&params.w_u.dot(w).dot(&vals))), None)
            }
        };
        steps.push(StepReport {
            matrix: m,
            samples: samples.len(),
            recall: recall(w, &mem)?,
            target_score_mean: target_score_mean(w, &mem),
            stats,
            prev_token_fraction: prev,
            tau_hat,
        });
    }
    let mut recalls = [0.0; 3];
    for (slot, m) in [Trainable::WO2, Trainable::WK2, Trainable::WK1].into_iter().enumerate() {
        let mem = target(&params, m)?;
        let w = params.trainable(m).expect("exists").clone();
        recalls[slot] = recall(&w, &mem)?;
        let nu = target_score_mean(&w, &mem);
        let mut w = if nu > 0.0 && nu.is_finite() { w / nu } else { w };
        if m != Trainable::WO2 {
            w *= cfg.beta;
        }
        set(&mut params, m, w);
    }
    let eval_src = StandardSource::uniform(cfg.n, 1, cfg.t + 1)?;
    let mut stats = LossStats::default();
    for b in 0..cfg.eval_batches {
        let batch = eval_src.batch(cfg.eval_batch_size, &stream.named("eval").child(b as u64))?;
        stats.merge(&evaluate(&params, &batch)?);
    }
    Ok((
        params,
        CurriculumReport {
            steps,
            recall_wo2: recalls[0],
            recall_wk2: recalls[1],
            recall_wk1: recalls[2],
            metrics: stats.metrics(),
            positions_icl: stats.n_icl,
        },
    ))
}
