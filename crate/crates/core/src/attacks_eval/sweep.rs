use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{mix, teacher_count, Dataset, MixSpec};
use crate::mop_policy::{InputEncoder, NetworkConfig};
use crate::training::{offline_train, Algorithm, TrainConfig};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub p_values: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    /// Size of every mixed dataset.
    pub total: usize,
    pub network: NetworkConfig,
    /// Template; `algorithm` and `seed` are overridden per cell.
    pub train: TrainConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            p_values: vec![0.0, 0.125, 0.25, 0.5, 1.0],
            algorithms: vec![Algorithm::Ddqn, Algorithm::Cql],
            seeds: vec![0, 1, 2],
            total: 15_000,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub teacher_transitions: usize,
    pub final_return: f64,
}

pub const SWEEP_CSV_HEADER: &str = "p,algorithm,seed,teacher_transitions,final_return";

impl SweepRow {
    pub fn to_csv(rows: &[SweepRow]) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.p, r.algorithm, r.seed, r.teacher_transitions, r.final_return);
        }
        s
    }
}

fn run_cell(
    teacher: &Dataset,
    random: &Dataset,
    cfg: &SweepConfig,
    p: f64,
    algorithm: Algorithm,
    seed: u64,
) -> Result<SweepRow, EvalError> {
    let mixed = mix(teacher, random, &MixSpec { p, total: cfg.total, seed })?;
    let net = cfg.network.build(InputEncoder::from_dataset(&mixed), seed)?;
    let train = TrainConfig { algorithm, seed, ..cfg.train.clone() };
    let (_, outcome) = offline_train(&mixed, net, &train).map_err(|e| EvalError::Training(e.to_string()))?;
    let final_return = outcome.final_eval.map(|r| r.mean).ok_or_else(|| {
        EvalError::Invalid(format!("{} steps never reach an eval point every {}", train.total_steps, train.eval_every))
    })?;
    Ok(SweepRow { p, algorithm, seed, teacher_transitions: teacher_count(p, cfg.total), final_return })
}

/// Trains and evaluates every (p, algorithm, seed) cell. Rows come back in grid
/// order regardless of `jobs`.
pub fn ratio_sweep(
    teacher: &Dataset,
    random: &Dataset,
    cfg: &SweepConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>, EvalError> {
    if let Some(p) = cfg.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(EvalError::Invalid(format!("teacher ratio {p} outside [0, 1]")));
    }
    let cells: Vec<(f64, Algorithm, u64)> = cfg
        .p_values
        .iter()
        .flat_map(|&p| cfg.algorithms.iter().flat_map(move |&a| cfg.seeds.iter().map(move |&s| (p, a, s))))
        .collect();
    let run = |&(p, a, s): &(f64, Algorithm, u64)| run_cell(teacher, random, cfg, p, a, s);
    if jobs <= 1 {
        return cells.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(run).collect())
}
