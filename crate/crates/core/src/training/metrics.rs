use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str =
    "step,loss_td,loss_cql,loss_robust,eval_return_mean,eval_return_std,epsilon,wall_ms";

/// One evaluation point; loss columns average the updates since the previous row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_td: f64,
    pub loss_cql: f64,
    pub loss_robust: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub epsilon: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.loss_td,
                r.loss_cql,
                r.loss_robust,
                r.eval_return_mean,
                r.eval_return_std,
                r.epsilon,
                r.wall_ms
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err("unexpected metrics header".into());
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields, got {}", i + 2, f.len()));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
            rows.push(MetricsRow {
                step: f[0].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
                loss_td: num(1)?,
                loss_cql: num(2)?,
                loss_robust: num(3)?,
                eval_return_mean: num(4)?,
                eval_return_std: num(5)?,
                epsilon: num(6)?,
                wall_ms: f[7].parse().map_err(|e| format!("line {}: {e}", i + 2))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}
