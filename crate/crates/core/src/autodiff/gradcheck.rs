//! Central finite-difference checks for the tape.

use super::graph::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |analytic|)` over checked entries.
    pub max_error: f64,
    /// Leaf index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `h`.
///
/// `build` records the function on a fresh graph given the leaf ids of the
/// `inputs` (all registered as variables) and returns the scalar output.
/// `coords` selects `(leaf, element)` pairs to check; `None` checks every
/// element of every input.
pub fn finite_diff_check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    h: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.variable(v.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.variable(v.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out, &[])?;

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut result = GradCheck {
        max_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(leaf, elem) in coords {
        let analytic = grads.get(ids[leaf]).map_or(0.0, |t| t.data()[elem]);
        let orig = work[leaf].data()[elem];
        work[leaf].data_mut()[elem] = orig + h;
        let plus = eval(&work)?;
        work[leaf].data_mut()[elem] = orig - h;
        let minus = eval(&work)?;
        work[leaf].data_mut()[elem] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if err > result.max_error {
            result.max_error = err;
            result.worst = (leaf, elem);
        }
        result.checked += 1;
    }
    Ok(result)
}
