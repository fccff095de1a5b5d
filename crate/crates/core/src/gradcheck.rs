//! Central-difference gradient checks in 64-bit arithmetic.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest relative error between analytic and central-difference gradients
/// of the scalar built by `f` with respect to a single input `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(x), step)
}

/// Same as [`grad_check`] over several inputs at once; the error is the max
/// over every coordinate of every input of
/// `|analytic − cd| / (|analytic| + |cd| + 1e-12)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("step must be > 0, got {step}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = values
            .iter()
            .map(|v| g.constant(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &ids)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let ids = inputs
        .iter()
        .map(|v| g.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&g, id);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let cd = (plus - minus) / (2.0 * step);
            let an = analytic.data()[i];
            let err = (an - cd).abs() / (an.abs() + cd.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph<f64>, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.numel() != 1 {
        return Err(Error::InvalidShape {
            op: "grad_check",
            shape: v.shape().to_vec(),
            reason: "function must be scalar-valued".into(),
        });
    }
    Ok(v.data()[0])
}
