//! Effective rank, Frobenius norm and output-Lipschitz estimates.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Gpt};
use crate::tensor::{Scalar, Tensor};

/// `exp` of the Shannon entropy (natural log) of the singular values
/// normalized to sum to one.
pub fn effective_rank(singular_values: &[f64]) -> Result<f64> {
    if singular_values.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Probe("singular values must be finite and non-negative".into()));
    }
    let total: f64 = singular_values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Probe("effective rank of an all-zero spectrum is undefined".into()));
    }
    let entropy: f64 = singular_values
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    if rows * cols != data.len() || rows == 0 || cols == 0 {
        return Err(Error::InvalidShape {
            op: "singular_values",
            shape: vec![rows, cols],
            reason: format!("{} values", data.len()),
        });
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    Ok(m.singular_values().iter().copied().collect())
}

/// Effective rank of a row-major `rows × cols` matrix.
pub fn matrix_effective_rank(rows: usize, cols: usize, data: &[f64]) -> Result<f64> {
    effective_rank(&singular_values(rows, cols, data)?)
}

fn tensor_as_matrix<T: Scalar>(t: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let cols = *t.shape().last().unwrap_or(&1);
    let rows = t.numel() / cols.max(1);
    (rows, cols, t.data().iter().map(|v| v.as_f64()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRank {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// `None` for an all-zero matrix.
    pub effective_rank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightGeometry {
    pub matrices: Vec<MatrixRank>,
    pub mean_effective_rank: Option<f64>,
    /// `sqrt` of the summed squares of every matrix entry.
    pub frobenius_total: f64,
}

/// Ranks and total Frobenius norm over a set of 2-D weights.
pub fn weight_geometry<'a, T: Scalar>(matrices: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<WeightGeometry> {
    let mut out = Vec::new();
    let mut sq = 0.0;
    for (name, t) in matrices {
        if t.shape().len() != 2 {
            return Err(Error::Probe(format!("{name} is not a matrix: {:?}", t.shape())));
        }
        let (rows, cols, data) = tensor_as_matrix(t);
        sq += t.sum_squares_f64();
        let rank = if data.iter().all(|&v| v == 0.0) {
            None
        } else {
            Some(matrix_effective_rank(rows, cols, &data)?)
        };
        out.push(MatrixRank {
            name: name.to_string(),
            rows,
            cols,
            effective_rank: rank,
        });
    }
    let ranks: Vec<f64> = out.iter().filter_map(|m| m.effective_rank).collect();
    Ok(WeightGeometry {
        mean_effective_rank: (!ranks.is_empty()).then(|| ranks.iter().sum::<f64>() / ranks.len() as f64),
        matrices: out,
        frobenius_total: sq.sqrt(),
    })
}

/// [`weight_geometry`] over every 2-D parameter of `model` (embeddings and
/// linear weights).
pub fn model_weight_geometry<T: Scalar>(model: &Gpt<T>) -> Result<WeightGeometry> {
    weight_geometry(model.named().filter(|(_, t)| t.shape().len() == 2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRank {
    pub per_block: Vec<f64>,
    pub mean: f64,
    pub rows: usize,
    pub cols: usize,
    /// Set when `B·T < d_model`, which caps the attainable rank.
    pub warning: Option<String>,
}

/// Effective rank of each block output reshaped to `(B·T, d_model)`.
pub fn activation_effective_rank<T: Scalar>(model: &Gpt<T>, ids: &[usize], batch: usize) -> Result<ActivationRank> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, ids, batch, ForwardOptions::probing())?;
    let d = model.config().d_model;
    let rows = ids.len();
    let mut per_block = Vec::with_capacity(out.block_outputs.len());
    for &b in &out.block_outputs {
        let (r, c, data) = tensor_as_matrix(g.value(b));
        per_block.push(matrix_effective_rank(r, c, &data)?);
    }
    let mean = per_block.iter().sum::<f64>() / per_block.len().max(1) as f64;
    Ok(ActivationRank {
        per_block,
        mean,
        rows,
        cols: d,
        warning: (rows < d).then(|| format!("B·T = {rows} < d_model = {d}: rank is capped at {rows}")),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub eps: f64,
    pub trials: usize,
    pub ratios: Vec<f64>,
    pub mean: f64,
}

/// Mean of `‖f(x + δ) − f(x)‖_F / ‖δ‖_F` over `trials` Gaussian
/// perturbations `δ = eps · z`, drawn from a fixed seed.
pub fn lipschitz_probe<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if !(eps > 0.0) {
        return Err(Error::Probe(format!("perturbation size must be > 0, got {eps}")));
    }
    if trials == 0 {
        return Err(Error::Probe("need at least one perturbation trial".into()));
    }
    let base = f(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(trials);
    for _ in 0..trials {
        let delta: Vec<f64> = (0..x.numel())
            .map(|_| eps * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let moved = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&delta).map(|(v, d)| T::from_f64(v.as_f64() + d)).collect(),
        )?;
        // The applied perturbation after rounding to T.
        let applied: f64 = moved
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let y = f(&moved)?;
        if y.shape() != base.shape() {
            return Err(Error::ShapeMismatch {
                op: "lipschitz_probe",
                lhs: base.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let diff: f64 = y
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        ratios.push(diff / applied);
    }
    let mean = ratios.iter().sum::<f64>() / trials as f64;
    Ok(LipschitzEstimate {
        eps,
        trials,
        ratios,
        mean,
    })
}

/// Logit-layer Lipschitz estimate with the perturbation added to the
/// embeddings entering the first block.
pub fn model_lipschitz<T: Scalar>(
    model: &Gpt<T>,
    ids: &[usize],
    batch: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, ids, batch, ForwardOptions::eval())?;
    let emb = g.value(out.embeddings).clone();
    lipschitz_probe(
        |e| {
            let mut g = Graph::new();
            let x = g.constant(e.clone())?;
            let out = model.forward_from_embeddings(&mut g, x, ForwardOptions::eval())?;
            Ok(g.value(out.logits).clone())
        },
        &emb,
        eps,
        trials,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_ranks() {
        assert!((effective_rank(&[1.0; 5]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(effective_rank(&[3.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!((effective_rank(&[2.0, 1.0, 1.0]).unwrap() - 2.8284).abs() < 1e-3);
        assert!(effective_rank(&[0.0, 0.0]).is_err());
        assert!(effective_rank(&[]).is_err());
    }

    #[test]
    fn identity_weight() {
        let eye = Tensor::<f64>::from_f64_slice(
            [4, 4],
            &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
        )
        .unwrap();
        let g = weight_geometry([("eye", &eye)]).unwrap();
        assert!((g.matrices[0].effective_rank.unwrap() - 4.0).abs() < 1e-12);
        assert!((g.frobenius_total - 2.0).abs() < 1e-12);

        let zero = Tensor::<f64>::zeros([3, 2]);
        let g = weight_geometry([("z", &zero)]).unwrap();
        assert_eq!(g.frobenius_total, 0.0);
        assert_eq!(g.matrices[0].effective_rank, None);
    }

    #[test]
    fn lipschitz_of_scaled_identity() {
        let x = Tensor::<f64>::from_f64_slice([2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let id = lipschitz_probe(|t| Ok(t.clone()), &x, 0.01, 3, 0).unwrap();
        assert!((id.mean - 1.0).abs() < 1e-9);
        let two = lipschitz_probe(|t| Ok(t.map(|v| 2.0 * v)), &x, 0.05, 3, 1).unwrap();
        assert!((two.mean - 2.0).abs() < 1e-9);
        assert!(lipschitz_probe(|t| Ok(t.clone()), &x, 0.0, 3, 0).is_err());
    }
}
