//! Central finite-difference verification of the autodiff engine.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Compares autodiff gradients against central finite differences for every
/// element of every parameter and returns the worst relative error.
///
/// The relative error uses a denominator floored at 1.0 so near-zero
/// gradients are judged on absolute error, which is what f32 numerics can
/// actually deliver.
pub fn grad_check<F>(params: &[Tensor], build: F, epsilon: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let run = |tensors: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone(), true)).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    // Analytic gradients once.
    let (mut graph, ids, loss) = run(params)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| graph.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut worst = 0.0f32;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for (ei, &orig) in p.data().iter().enumerate() {

            work[pi].data_mut()[ei] = orig + epsilon;
            let (g_plus, _, l_plus) = run(&work)?;
            let f_plus = g_plus.loss_value(l_plus);

            work[pi].data_mut()[ei] = orig - epsilon;
            let (g_minus, _, l_minus) = run(&work)?;
            let f_minus = g_minus.loss_value(l_minus);

            work[pi].data_mut()[ei] = orig;

            let numeric = ((f_plus - f_minus) / (2.0 * epsilon as f64)) as f32;
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
