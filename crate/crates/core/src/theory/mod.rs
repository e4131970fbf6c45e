//! Population-gradient analyses of the single-trigger task: closed-form
//! gradients at zero initialization, the one-step matrices they produce,
//! and the sequential three-step construction of the induction head.

pub mod curriculum;
pub mod data;
pub mod lemmas;
pub mod onestep;

pub use curriculum::{three_step_curriculum, CurriculumConfig, CurriculumReport};
pub use data::{BatchSource, ConditionedSource, StandardSource};
pub use lemmas::{
    lemma1_gradient_exact, lemma1_via_backward, lemma2_gradient, lemma3_gradient_wk2, lemma4_gradient_wk1,
    restricted_wk1_loss, restricted_wk2_backward,
};
pub use onestep::{
    estimate_moments, illustrative_one_step_w1, one_step_wo2, r1_recall, AvgValueAttention, Featurize,
    OneStepReport, PopulationEstimate, R1Config, ResidualStream,
};

/// Elementwise Neumaier accumulator.
#[derive(Debug, Clone)]
pub(crate) struct Compensated {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl Compensated {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            comp: vec![0.0; len],
        }
    }

    pub(crate) fn add(&mut self, xs: &[f64]) {
        for ((s, c), &x) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(xs) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    pub(crate) fn value(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}
