//! Finite-difference checks for every differentiable graph op.

use normlab::gradcheck::{grad_check, grad_check_many};
use normlab::{Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Contracts `y` against a fixed random weight so every output coordinate
/// carries a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = g.constant(random(g.shape(y), seed ^ 0xABCD))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary(name: &str, shape: &[usize], f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) {
    let x = random(shape, name.len() as u64);
    let err = grad_check(
        |g, x| {
            let y = f(g, x)?;
            weighted_sum(g, y, 7)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{name}: {err}");
}

fn check_binary(
    name: &str,
    a: &[usize],
    b: &[usize],
    f: impl Fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>,
) {
    let inputs = [random(a, 1), random(b, 2)];
    let err = grad_check_many(
        |g, ids| {
            let y = f(g, ids[0], ids[1])?;
            weighted_sum(g, y, 3)
        },
        &inputs,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{name}: {err}");
}

#[test]
fn elementwise_binary_ops() {
    for (a, b) in [(&[3, 4][..], &[3, 4][..]), (&[2, 3, 4], &[4]), (&[2, 3, 4], &[3, 1]), (&[2, 3], &[1])] {
        check_binary("add", a, b, |g, x, y| g.add(x, y));
        check_binary("sub", a, b, |g, x, y| g.sub(x, y));
        check_binary("mul", a, b, |g, x, y| g.mul(x, y));
    }
}

#[test]
fn elementwise_unary_ops() {
    check_unary("scale", &[3, 5], |g, x| g.scale(x, -0.7));
    check_unary("tanh", &[3, 5], |g, x| g.tanh(x));
    check_unary("gelu", &[3, 5], |g, x| g.gelu(x));
    check_unary("silu", &[3, 5], |g, x| g.silu(x));
    check_unary("exp", &[3, 5], |g, x| g.exp(x));
    check_unary("sigmoid", &[3, 5], |g, x| g.sigmoid(x));
}

#[test]
fn hardtanh_away_from_kinks() {
    // Inputs kept off ±1 where the derivative is undefined.
    let vals: Vec<f64> = (0..12).map(|i| -1.9 + 0.33 * i as f64).collect();
    assert!(vals.iter().all(|v| (v.abs() - 1.0).abs() > 0.01));
    let x = Tensor::from_f64_slice([3, 4], &vals).unwrap();
    let err = grad_check(
        |g, x| {
            let y = g.hardtanh(x)?;
            weighted_sum(g, y, 5)
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn matmul_family() {
    let inputs = [random(&[3, 3], 10), random(&[3, 3], 11)];
    let err = grad_check_many(
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            g.sum(y)
        },
        &inputs,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "sum(A·B): {err}");

    check_binary("matmul", &[2, 4, 5], &[5, 3], |g, a, b| g.matmul(a, b));
    check_binary("matmul_t", &[2, 4, 5], &[3, 5], |g, a, b| g.matmul_ext(a, b, true));
    check_binary("batch_matmul", &[2, 3, 4, 5], &[2, 3, 5, 2], |g, a, b| g.batch_matmul(a, b, false));
    check_binary("batch_matmul_t", &[2, 3, 4, 5], &[2, 3, 6, 5], |g, a, b| g.batch_matmul(a, b, true));
}

#[test]
fn softmax_and_normalization() {
    check_unary("softmax_rows", &[4], |g, x| g.softmax_rows(x));
    check_unary("softmax_rows", &[2, 3, 6], |g, x| g.softmax_rows(x));
    check_unary("causal_softmax", &[2, 5, 5], |g, x| g.causal_softmax(x));
    check_unary("layer_norm", &[3, 8], |g, x| g.layer_norm(x, 1e-5));
    check_unary("rms_norm", &[3, 8], |g, x| g.rms_norm(x, 1e-5));
}

#[test]
fn shape_ops() {
    check_unary("reshape", &[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
    check_unary("permute", &[2, 3, 4, 5], |g, x| g.permute(x, &[0, 2, 1, 3]));
    check_unary("permute", &[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
    check_unary("index_select", &[2, 4, 3], |g, x| g.index_select(x, 1, &[3, 0, 0, 2, 1, 1]));
    check_unary("rope", &[2, 3, 5, 4], |g, x| g.rope(x, 10_000.0));
    check_unary("embedding", &[6, 4], |g, t| g.embedding(t, &[0, 5, 2, 2, 1, 0], &[2, 3]));
}

#[test]
fn reductions_and_loss() {
    check_unary("sum", &[3, 4], |g, x| g.sum(x));
    check_unary("mean", &[3, 4], |g, x| g.mean(x));
    let logits = random(&[2, 3, 5], 21);
    let targets = [0, 4, 2, 1, 3, 3];
    let err = grad_check(|g, x| g.cross_entropy(x, &targets), &logits, STEP).unwrap();
    assert!(err < TOL, "cross_entropy: {err}");
}
