//! Observation attacks, the evaluation harness, routing reports and the
//! teacher-ratio sweep.

mod attack;
mod eval;
mod normalize;
mod sweep;

use crate::datasets::DatasetError;
use crate::mop_policy::PolicyError;
use crate::sim::SimError;

pub use attack::{
    attack, attack_batch, ce_input_gradient, fgsm, noise, pgd_linf, AttackKind, AttackSpec,
};
pub(crate) use attack::{normalized, normalized_gradient, to_raw};
pub use eval::{
    eval_seeds, evaluate, mean_std, router_report, EvalReport, GreedyPolicy, Policy, RandomPolicy, RouterReport,
};
pub use normalize::Normalizer;
pub use sweep::{ratio_sweep, SweepConfig, SweepRow, SWEEP_CSV_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} attack needs a differentiable policy")]
    GradientUnavailable(AttackKind),
    #[error("normalization ranges unavailable")]
    MissingRanges,
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training failed: {0}")]
    Training(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::diffcore::DiffError> for EvalError {
    fn from(e: crate::diffcore::DiffError) -> Self {
        EvalError::Policy(PolicyError::Diff(e))
    }
}

#[cfg(test)]
mod tests;
