use nalgebra::DMatrix;
use normlab::data::Split;
use normlab::model::{Gpt, ModelConfig, NormKind};
use normlab::probes::*;
use normlab::Tensor;
use proptest::prelude::*;

fn micro(norm: NormKind) -> ModelConfig {
    ModelConfig {
        n_layer: 2,
        n_head: 4,
        n_kv_head: 4,
        d_model: 32,
        vocab_size: 64,
        block_size: 16,
        norm_kind: norm,
        ..Default::default()
    }
}

fn split(n: usize, vocab: usize) -> Split {
    Split::new((0..n).map(|i| ((i * i * 7 + i * 13 + 5) % vocab) as u16).collect(), vocab)
}

fn spec() -> SampleSpec {
    SampleSpec::new(3, 4, 16, 9)
}

#[test]
fn saturation_is_deterministic_and_accounts_exactly() {
    let m = Gpt::<f32>::new(micro(NormKind::Dyt), 1).unwrap();
    let s = split(4000, 64);
    let a = saturation(&m, &s, &spec(), TAIL_THRESHOLD).unwrap();
    let b = saturation(&m, &s, &spec(), TAIL_THRESHOLD).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sites.len(), 5);
    assert_eq!(a.kind, SaturationKind::DytTail);
    let weighted: f64 = a.sites.iter().map(|r| r.fraction * r.count as f64).sum::<f64>() / a.total_count as f64;
    assert!((weighted - a.global).abs() < 1e-12);
    // All sites see B·T·D entries, so the plain mean agrees too.
    let plain = a.sites.iter().map(|r| r.fraction).sum::<f64>() / a.sites.len() as f64;
    assert!((plain - a.global).abs() < 1e-12);
    assert!(a.sites.iter().all(|r| (0.0..=1.0).contains(&r.fraction)));
    assert!((a.mean_alpha.unwrap() - m.config().alpha_init).abs() < 1e-6);
}

#[test]
fn huge_alpha_saturates_every_nonzero_input() {
    let m = Gpt::<f32>::new(micro(NormKind::Dyt), 2).unwrap();
    let sites = collect_site_inputs(&m, &split(4000, 64), &spec()).unwrap();
    let nonzero = sites.iter().flat_map(|s| &s.values).filter(|v| **v != 0.0).count() as f64;
    let total = sites.iter().map(|s| s.values.len()).sum::<usize>() as f64;
    let r = count_saturation(&sites, TAIL_THRESHOLD, 1e6, SaturationKind::DytTail);
    assert!((r.global - nonzero / total).abs() < 1e-3);
    assert!(r.global > 0.99);
}

#[test]
fn saturation_needs_dyt_and_hardtanh_is_separate() {
    let s = split(4000, 64);
    let vanilla = Gpt::<f32>::new(micro(NormKind::LayerNorm), 0).unwrap();
    assert!(saturation(&vanilla, &s, &spec(), TAIL_THRESHOLD).is_err());
    assert!(hardtanh_clip(&vanilla, &s, &spec()).is_err());

    let ht = Gpt::<f32>::new(micro(NormKind::HardTanh), 0).unwrap();
    assert!(saturation(&ht, &s, &spec(), TAIL_THRESHOLD).is_err());
    let r = hardtanh_clip(&ht, &s, &spec()).unwrap();
    assert_eq!(r.kind, SaturationKind::HardtanhClip);
    assert_eq!(r.threshold, 1.0);
    assert_eq!(r.mean_alpha, None);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"hardtanh_clip\""));
}

#[test]
fn oversized_sample_is_rejected() {
    let m = Gpt::<f32>::new(micro(NormKind::Dyt), 0).unwrap();
    assert!(saturation(&m, &split(4000, 64), &SampleSpec::new(1, 2, 17, 0), 2.0).is_err());
    assert!(saturation(&m, &split(4000, 64), &SampleSpec::new(0, 2, 16, 0), 2.0).is_err());
}

#[test]
fn random_init_activations_are_near_full_rank() {
    let m = Gpt::<f32>::new(micro(NormKind::LayerNorm), 3).unwrap();
    let b = normlab::data::batches(&split(4000, 64), 16, 16, 0, 0).unwrap();
    let r = activation_effective_rank(&m, &b.inputs, b.batch).unwrap();
    assert_eq!(r.per_block.len(), 2);
    assert_eq!(r.warning, None);
    let cap = (r.rows.min(r.cols)) as f64;
    for v in &r.per_block {
        assert!(*v >= 0.8 * cap && *v <= cap, "{v} vs {cap}");
    }

    let small = normlab::data::batches(&split(4000, 64), 1, 16, 0, 0).unwrap();
    let r = activation_effective_rank(&m, &small.inputs, small.batch).unwrap();
    assert!(r.warning.is_some());
}

#[test]
fn identical_rows_have_rank_one() {
    let row = [0.3, -1.0, 2.0, 0.5];
    let data: Vec<f64> = row.iter().cycle().take(4 * 6).copied().collect();
    assert!((matrix_effective_rank(6, 4, &data).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn weight_scaling_scales_frobenius_only() {
    let m = Gpt::<f64>::new(micro(NormKind::LayerNorm), 4).unwrap();
    let base = model_weight_geometry(&m).unwrap();
    let mut scaled = m.clone();
    for t in scaled.tensors_mut() {
        *t = t.map(|v| 3.0 * v);
    }
    let s = model_weight_geometry(&scaled).unwrap();
    assert!((s.frobenius_total - 3.0 * base.frobenius_total).abs() < 1e-9 * s.frobenius_total);
    for (a, b) in base.matrices.iter().zip(&s.matrices) {
        assert!((a.effective_rank.unwrap() - b.effective_rank.unwrap()).abs() < 1e-9);
        let cap = a.rows.min(a.cols) as f64;
        assert!(a.effective_rank.unwrap() >= 1.0 && a.effective_rank.unwrap() <= cap + 1e-9);
    }
}

#[test]
fn model_lipschitz_is_locally_stable() {
    let m = Gpt::<f64>::new(micro(NormKind::LayerNorm), 5).unwrap();
    let b = normlab::data::batches(&split(4000, 64), 2, 16, 0, 0).unwrap();
    let est: Vec<f64> = [0.005, 0.01, 0.02]
        .iter()
        .map(|&e| model_lipschitz(&m, &b.inputs, b.batch, e, 3, 7).unwrap().mean)
        .collect();
    let mid = est[1];
    assert!(est.iter().all(|v| (v - mid).abs() <= 0.15 * mid), "{est:?}");
    assert!(model_lipschitz(&m, &b.inputs, b.batch, -0.1, 3, 7).is_err());
}

#[test]
fn rotation_lipschitz_ignores_the_draw() {
    let (c, s) = (0.6, 0.8);
    let rot = |t: &Tensor<f64>| {
        let d = t.data();
        Tensor::new(vec![2], vec![c * d[0] - s * d[1], s * d[0] + c * d[1]])
    };
    let x = Tensor::<f64>::from_f64_slice([2], &[1.0, 2.0]).unwrap();
    for seed in 0..5 {
        let e = lipschitz_probe(rot, &x, 0.01, 3, seed).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-6);
    }
}

/// Singular values from the eigenvalues of the Gram matrix.
fn gram_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let g = m.transpose() * &m;
    g.symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect()
}

proptest! {
    #[test]
    fn rank_is_scale_and_order_invariant(
        sv in prop::collection::vec(0.0f64..10.0, 1..12),
        c in 1e-3f64..1e3,
        rot in 0usize..12,
    ) {
        prop_assume!(sv.iter().any(|&v| v > 1e-6));
        let r = effective_rank(&sv).unwrap();
        let scaled: Vec<f64> = sv.iter().map(|v| v * c).collect();
        let mut perm = sv.clone();
        perm.rotate_left(rot % sv.len());
        perm.reverse();
        prop_assert!((effective_rank(&scaled).unwrap() - r).abs() < 1e-9);
        prop_assert!((effective_rank(&perm).unwrap() - r).abs() < 1e-9);
        prop_assert!(r >= 1.0 - 1e-12 && r <= sv.len() as f64 + 1e-9);
    }

    #[test]
    fn matrix_rank_matches_gram_oracle(data in prop::collection::vec(-2.0f64..2.0, 15)) {
        prop_assume!(data.iter().any(|v| v.abs() > 0.1));
        let r = matrix_effective_rank(5, 3, &data).unwrap();
        let oracle = effective_rank(&gram_singular_values(5, 3, &data)).unwrap();
        prop_assert!((r - oracle).abs() < 1e-6);
        prop_assert!(r >= 1.0 - 1e-9 && r <= 3.0 + 1e-9);
    }

    #[test]
    fn saturation_monotone_in_alpha_scale(
        values in prop::collection::vec(-5.0f32..5.0, 1..40),
        alpha in 0.01f64..3.0,
        c in 1.0f64..50.0,
    ) {
        let sites = vec![SiteActivations { site: "s".into(), alpha: Some(alpha), values }];
        let lo = count_saturation(&sites, TAIL_THRESHOLD, 1.0, SaturationKind::DytTail);
        let hi = count_saturation(&sites, TAIL_THRESHOLD, c, SaturationKind::DytTail);
        prop_assert!(hi.global >= lo.global);
    }
}
