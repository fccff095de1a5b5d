use normlab::fixtures::{self, Cell};
use normlab::stats::*;
use proptest::prelude::*;

fn scores_labels(cells: &[Cell]) -> (Vec<f64>, Vec<bool>) {
    (cells.iter().map(|c| c.saturation).collect(), cells.iter().map(|c| c.helps).collect())
}

fn student_pdf(x: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

/// Stirling series; only needed at half-integers here.
fn ln_gamma(x: f64) -> f64 {
    // Shift up for accuracy, then use the asymptotic expansion.
    let mut shift = 0.0;
    let mut z = x;
    while z < 10.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    shift + (z - 0.5) * z.ln() - z + 0.5 * (2.0 * std::f64::consts::PI).ln() + inv / 12.0 - inv.powi(3) / 360.0
        + inv.powi(5) / 1260.0
}

/// `2 ∫_{|t|}^{∞} pdf`, by Simpson on the substitution x = |t| + u/(1-u).
fn integrated_two_sided(t: f64, df: f64) -> f64 {
    let n = 200_000;
    let h = 1.0 / n as f64;
    let f = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let x = t.abs() + u / (1.0 - u);
        student_pdf(x, df) / (1.0 - u).powi(2)
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    2.0 * s * h / 3.0
}

#[test]
fn t_tail_matches_independent_oracles() {
    for &t in &[0.0f64, 0.3, 1.0, 2.5, 7.0, 24.458] {
        // df = 2 has a closed form.
        let closed = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((t_two_sided_p(t, 2.0).unwrap() - closed).abs() < 1e-10, "t={t}");
        for df in [2.0, 3.0] {
            let p = t_two_sided_p(t, df).unwrap();
            let q = integrated_two_sided(t, df);
            assert!((p - q).abs() < 1e-8, "t={t} df={df}: {p} vs {q}");
        }
    }
}

#[test]
fn seed_tables_reproduce_printed_summaries() {
    let ps = fixtures::per_seed().unwrap();
    for table in &ps.tables {
        for row in &table.rows {
            let r = mean_std(&row.values).unwrap();
            assert!((r.mean - row.printed_mean).abs() <= 0.001, "{} {} {}", table.scale, row.data, row.config);
            assert!((r.std.unwrap() - row.printed_std).abs() <= 0.0011, "{} {} {}", table.scale, row.data, row.config);
        }
    }
}

#[test]
fn scale1_dyt_significance() {
    let ps = fixtures::per_seed().unwrap();
    let van = ps.row("S1", "1M", "vanilla").unwrap();
    let dyt = ps.row("S1", "1M", "dyt").unwrap();
    let s = PairedSample::new(ps.seeds.clone(), van.values.clone(), dyt.values.clone()).unwrap();
    let row = significance_row("S1/1M/dyt", &s, 19).unwrap();
    assert!((row.delta_percent + 27.3).abs() <= 0.05);
    assert!((row.p_raw - 0.0017).abs() <= 0.0003);
    assert!((row.p_bonf - 0.032).abs() <= 0.002);
    assert_eq!(row.stars, "*");
}

#[test]
fn reconstructible_rows_track_published_p() {
    let ps = fixtures::per_seed().unwrap();
    let sig = fixtures::significance().unwrap();
    let mut checked = 0;
    for pub_row in &sig.rows {
        let Some(van) = ps.row(&pub_row.cell, &pub_row.data, "vanilla") else { continue };
        let modified = ps.row(&pub_row.cell, &pub_row.data, &pub_row.modification).unwrap();
        let s = PairedSample::new(ps.seeds.clone(), van.values.clone(), modified.values.clone()).unwrap();
        let row = significance_row("", &s, sig.family_size).unwrap();
        assert!((row.delta_percent - pub_row.delta_percent).abs() <= 0.06, "{pub_row:?}");
        // Inputs are printed to 3 decimals, so small p-values move a lot;
        // the order of magnitude and significance band must agree.
        let ratio = row.p_raw / pub_row.p_raw;
        assert!((0.2..5.0).contains(&ratio), "{pub_row:?}: p={}", row.p_raw);
        checked += 1;
    }
    assert_eq!(checked, 11);
}

#[test]
fn published_bonferroni_values() {
    assert!((bonferroni(0.0017, 19).unwrap() - 0.032).abs() < 0.001);
    assert!((bonferroni(0.0041, 19).unwrap() - 0.078).abs() < 0.001);
    assert_eq!(bonferroni(0.9, 19).unwrap(), 1.0);
    assert!(bonferroni(0.1, 0).is_err());
    let sig = fixtures::significance().unwrap();
    for r in &sig.rows {
        let b = bonferroni(r.p_raw, sig.family_size).unwrap();
        assert!((b - r.p_bonf).abs() <= 0.003 + 0.05 * r.p_bonf, "{r:?}");
    }
}

#[test]
fn delta_examples() {
    assert!((delta_percent(9.384, 6.819).unwrap() + 27.3).abs() < 0.05);
    assert!((delta_percent(3.631, 4.313).unwrap() - 18.8).abs() < 0.05);
    assert_eq!(delta_percent(4.2, 4.2).unwrap(), 0.0);
    assert!(delta_percent(0.0, 1.0).is_err());
}

#[test]
fn wilson_nine_of_twelve() {
    let (lo, hi) = wilson_interval(9, 12, 1.96).unwrap();
    assert!((lo - 0.468).abs() <= 0.005 && (hi - 0.911).abs() <= 0.005, "{lo} {hi}");
}

#[test]
fn gpt2_threshold_classifier() {
    let cells = fixtures::gpt2_cells(false).unwrap();
    let (s, l) = scores_labels(&cells);
    let m = classifier_metrics(&s, &l, 0.43).unwrap();
    assert_eq!((m.correct, m.n), (9, 12));
    assert!((m.balanced_accuracy - 0.688).abs() <= 0.001);
    assert!((m.auc.unwrap() - 0.75).abs() <= 0.01);
    let mut wrong: Vec<&str> = m.misclassified.iter().map(|&i| cells[i].label.as_str()).collect();
    wrong.sort();
    assert_eq!(wrong, ["S2/10M", "S3/10M", "S3/1M"]);

    // Flipping labels flips every verdict.
    let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
    let f = classifier_metrics(&s, &flipped, 0.43).unwrap();
    assert!((f.accuracy - (1.0 - m.accuracy)).abs() < 1e-12);

    let all = fixtures::gpt2_cells(true).unwrap();
    let (s, l) = scores_labels(&all);
    let m = classifier_metrics(&s, &l, 0.43).unwrap();
    assert_eq!((m.correct, m.n), (9, 14));
    assert!((m.auc.unwrap() - 0.60).abs() <= 0.01);
}

#[test]
fn llama_cells_classify_in_published_direction() {
    let cells = fixtures::llama_cells().unwrap();
    let (s, l) = scores_labels(&cells);
    let m = classifier_metrics(&s, &l, 0.43).unwrap();
    assert_eq!(m.correct, 3);
    assert_eq!(l, [true, true, false]);
}

#[test]
fn loso_reproduces_pooled_held_out_accuracy() {
    let cells = fixtures::gpt2_cells(false).unwrap();
    let input: Vec<LabelledScore> = cells
        .iter()
        .map(|c| LabelledScore {
            group: c.scale.clone(),
            score: c.saturation,
            label: c.helps,
        })
        .collect();
    let r = loso(&input, 1.96).unwrap();
    assert_eq!(r.folds.len(), 4);
    assert_eq!((r.correct, r.n), (6, 12));
    assert!((r.balanced_accuracy - 0.438).abs() <= 0.001);
    assert!((r.wilson.0 - 0.25).abs() <= 0.01 && (r.wilson.1 - 0.75).abs() <= 0.01);
    assert!((r.threshold_range.0 - 0.27).abs() <= 0.02);
    assert!((r.threshold_range.1 - 0.49).abs() <= 0.02);
}

/// OLS through the 3×3 normal equations, solved by Cramer's rule.
fn cramer_fit(rows: &[FitRow]) -> [f64; 3] {
    let mut a = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for &(s, p, y) in rows {
        let x = [s, p, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            b[i] += x[i] * y;
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&a);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = a;
        for i in 0..3 {
            m[i][k] = b[i];
        }
        *o = det(&m) / d;
    }
    out
}

fn fit_rows(cells: &[Cell]) -> Vec<FitRow> {
    cells.iter().map(|c| (c.saturation, (c.params as f64).log10(), c.delta_percent)).collect()
}

#[test]
fn ols_matches_normal_equation_oracle() {
    let rows = fit_rows(&fixtures::gpt2_cells(false).unwrap());
    let fit = linear_fit_2var(&rows).unwrap();
    let w = cramer_fit(&rows);
    assert!((fit.w_sat - w[0]).abs() < 1e-6 * w[0].abs());
    assert!((fit.w_log_params - w[1]).abs() < 1e-6 * w[1].abs().max(1.0));
    assert!((fit.intercept - w[2]).abs() < 1e-6 * w[2].abs());
    assert!(fit.r_squared > 0.0 && fit.r_squared < 1.0);
    assert!(linear_fit_2var(&rows[..3]).is_err());
}

proptest! {
    #[test]
    fn paired_t_is_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 3..8),
        noise in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let seeds: Vec<u64> = (0..a.len() as u64).collect();
        let s = PairedSample::new(seeds, a, b).unwrap();
        let f = paired_t(&s).unwrap();
        let r = paired_t(&s.swapped()).unwrap();
        prop_assert!((f.t + r.t).abs() < 1e-9 * f.t.abs().max(1.0));
        prop_assert!((f.p - r.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f.p));
    }

    #[test]
    fn bonferroni_is_monotone_and_capped(p in 0.0f64..1.0, q in 0.0f64..1.0, m in 1usize..50, k in 1usize..50) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(bonferroni(lo, m).unwrap() <= bonferroni(hi, m).unwrap());
        prop_assert!(bonferroni(p, m).unwrap() <= bonferroni(p, m + k).unwrap());
        prop_assert!(bonferroni(p, m).unwrap() <= 1.0);
    }

    #[test]
    fn wilson_contains_the_proportion(n in 1usize..500, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as usize;
        let (lo, hi) = wilson_interval(k, n, 1.96).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(0.0f64..1.0, 2..20),
        labels in prop::collection::vec(any::<bool>(), 20),
        shift in -3.0f64..3.0,
    ) {
        let labels = &labels[..scores.len()];
        let moved: Vec<f64> = scores.iter().map(|s| (5.0 * s + shift).exp()).collect();
        prop_assert_eq!(auc(&scores, labels), auc(&moved, labels));
    }
}
