//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Extra attempts at `h / 10^k` for coordinates that miss the tolerance.
    /// Central differences straddling a ReLU kink are biased; a correct
    /// gradient agrees once the step no longer reaches the kink.
    pub refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, abs_floor: 1e-6, max_coords_per_tensor: None, seed: 0, refinements: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub checked: usize,
    /// Coordinates that only passed at a reduced step.
    pub refined: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[i]` against central differences of `value` around `vars`.
pub fn finite_diff_check(
    vars: &mut [Tensor],
    names: &[String],
    analytic: &[Tensor],
    mut value: impl FnMut(&[Tensor]) -> f64,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, refined: 0, tolerance: opts.tolerance };
    for t in 0..vars.len() {
        let n = vars[t].len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let a = analytic[t].data()[j];
            let mut central = |h: f64| {
                let orig = vars[t].data()[j];
                vars[t].data_mut()[j] = orig + h;
                let plus = value(vars);
                vars[t].data_mut()[j] = orig - h;
                let minus = value(vars);
                vars[t].data_mut()[j] = orig;
                (plus - minus) / (2.0 * h)
            };
            let mut numeric = central(opts.h);
            let mut err = relative_error(a, numeric, opts.abs_floor);
            let mut h = opts.h;
            for _ in 0..opts.refinements {
                if err < opts.tolerance {
                    break;
                }
                h /= 10.0;
                let retry = central(h);
                let e = relative_error(a, retry, opts.abs_floor);
                if e < err {
                    (numeric, err) = (retry, e);
                }
                if err < opts.tolerance {
                    report.refined += 1;
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some(WorstCoordinate {
                    tensor: names[t].clone(),
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    report
}

/// Checks the gradient of a scalar graph built from `inputs`.
pub fn check_graph_fn<F>(inputs: &[Tensor], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.wrt(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let mut vars = inputs.to_vec();
    let eval = |vs: &[Tensor]| {
        let mut g = Graph::without_param_grads();
        let ids: Vec<NodeId> = vs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids).expect("graph rebuilt with identical shapes");
        g.value(out).item()
    };
    Ok(finite_diff_check(&mut vars, &names, &analytic, eval, opts))
}

/// Checks gradients of every trainable parameter of `store`.
pub fn check_store<F>(store: &mut ParamStore, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out)?.into_param_grads(store.len());
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let names: Vec<String> = ids.iter().map(|&id| store.get(id).name.clone()).collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.value(id).shape())))
        .collect();
    let mut vars: Vec<Tensor> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let mut scratch = store.clone();
    let eval = |vs: &[Tensor]| {
        for (&id, v) in ids.iter().zip(vs) {
            scratch.value_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mut g = Graph::without_param_grads();
        let out = build(&mut g, &scratch).expect("graph rebuilt with identical shapes");
        g.value(out).item()
    };
    Ok(finite_diff_check(&mut vars, &names, &analytic, eval, opts))
}
