use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphError, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(tensor, element)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph and one parameter node per entry of
/// `params` and returns the scalar loss node. Up to `samples_per_tensor`
/// coordinates of each tensor are checked (all of them when smaller). The
/// error at a coordinate is `|a - n| / max(|a|, |n|, floor)` where the floor
/// is `1e-6` times the largest analytic gradient magnitude, so entries that
/// are numerically zero do not dominate.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, GraphError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.parameter(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();
    let scale = analytic.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
    let floor = 1e-6 * scale + 1e-300;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|p| g.parameter(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for t in 0..params.len() {
        let len = params[t].len();
        let coords: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for i in coords {
            let orig = params[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
