//! Seed statistics, paired t-tests, Wilson intervals and threshold
//! classifier scoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn fail<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Stats(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub n: usize,
    pub mean: f64,
    /// Population (divide-by-n) deviation, the convention of the seed
    /// tables. `None` below two values.
    pub std: Option<f64>,
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return fail("mean of an empty sample");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    let m = mean(values)?;
    let n = values.len();
    let std = (n >= 2).then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt());
    Ok(MeanStd { n, mean: m, std })
}

/// Bessel-corrected (n − 1) standard deviation.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
}

/// `100 · (modified − baseline) / baseline`.
pub fn delta_percent(baseline: f64, modified: f64) -> Result<f64> {
    if baseline == 0.0 || !baseline.is_finite() {
        return fail(format!("delta against baseline {baseline}"));
    }
    Ok(100.0 * (modified - baseline) / baseline)
}

/// Two conditions measured on the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub seeds: Vec<u64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(seeds: Vec<u64>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.len() != seeds.len() {
            return fail(format!("paired lengths differ: {} seeds, {} vs {}", seeds.len(), a.len(), b.len()));
        }
        Ok(Self { seeds, a, b })
    }

    /// Pairs `(seed, value)` lists by seed; seeds missing on either side are
    /// dropped.
    pub fn align(a: &[(u64, f64)], b: &[(u64, f64)]) -> Result<Self> {
        let mut seeds = Vec::new();
        let (mut va, mut vb) = (Vec::new(), Vec::new());
        for &(s, x) in a {
            if seeds.contains(&s) {
                return fail(format!("seed {s} appears twice"));
            }
            if let Some(&(_, y)) = b.iter().find(|(t, _)| *t == s) {
                seeds.push(s);
                va.push(x);
                vb.push(y);
            }
        }
        Self::new(seeds, va, vb)
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            seeds: self.seeds.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Mean of `a − b`.
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    /// Differences had zero variance; `t` is 0 or infinite and `p` is exact.
    pub degenerate: bool,
}

/// Two-sided Student-t tail probability `P(|T| ≥ |t|)`.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return fail(format!("t distribution needs df > 0, got {df}"));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Paired t-test on per-seed differences `a − b`.
pub fn paired_t(sample: &PairedSample) -> Result<TTest> {
    let n = sample.len();
    if n < 2 {
        return fail(format!("paired t-test needs at least 2 pairs, got {n}"));
    }
    let d: Vec<f64> = sample.a.iter().zip(&sample.b).map(|(x, y)| x - y).collect();
    let m = d.iter().sum::<f64>() / n as f64;
    let sd = sample_std(&d).unwrap_or(0.0);
    let df = n - 1;
    // Differences equal to rounding noise count as constant.
    let scale = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if sd <= 1e-12 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            mean_diff: m,
            t,
            df,
            p,
            degenerate: true,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    Ok(TTest {
        mean_diff: m,
        t,
        df,
        p: t_two_sided_p(t, df as f64)?,
        degenerate: false,
    })
}

/// `min(1, m · p)`.
pub fn bonferroni(p_raw: f64, family: usize) -> Result<f64> {
    if family == 0 {
        return fail("bonferroni family size must be >= 1");
    }
    if !(0.0..=1.0).contains(&p_raw) {
        return fail(format!("p-value {p_raw} outside [0, 1]"));
    }
    Ok((p_raw * family as f64).min(1.0))
}

/// Significance stars for a corrected p-value.
pub fn star_band(p: f64) -> &'static str {
    match p {
        p if p < 0.001 => "***",
        p if p < 0.01 => "**",
        p if p < 0.05 => "*",
        _ => "ns",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub label: String,
    pub mean_baseline: f64,
    pub mean_modified: f64,
    pub delta_percent: f64,
    pub t: f64,
    pub p_raw: f64,
    pub p_bonf: f64,
    pub family: usize,
    pub stars: String,
    pub degenerate: bool,
}

/// Baseline is `sample.a`, modification is `sample.b`.
pub fn significance_row(label: impl Into<String>, sample: &PairedSample, family: usize) -> Result<SignificanceRow> {
    let base = mean(&sample.a)?;
    let modified = mean(&sample.b)?;
    let tt = paired_t(sample)?;
    let p_bonf = bonferroni(tt.p, family)?;
    Ok(SignificanceRow {
        label: label.into(),
        mean_baseline: base,
        mean_modified: modified,
        delta_percent: delta_percent(base, modified)?,
        t: tt.t,
        p_raw: tt.p,
        p_bonf,
        family,
        stars: star_band(p_bonf).to_string(),
        degenerate: tt.degenerate,
    })
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return fail(format!("wilson interval needs 0 <= k <= n, n >= 1 (k={k}, n={n})"));
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (centre + half).min(1.0) };
    Ok((lo, hi))
}

/// Rank-statistic AUC with half credit for ties; `None` for single-class
/// input.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(credit / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub threshold: f64,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean of per-class recalls over the classes present.
    pub balanced_accuracy: f64,
    pub auc: Option<f64>,
    /// Indices of cells whose prediction disagrees with the label.
    pub misclassified: Vec<usize>,
}

/// Scores strictly above `threshold` predict the positive label.
pub fn classifier_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassifierMetrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return fail(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let mut misclassified = Vec::new();
    let (mut tp, mut tn, mut np, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for (i, (&s, &l)) in scores.iter().zip(labels).enumerate() {
        let pred = s > threshold;
        if l {
            np += 1;
            tp += pred as usize;
        } else {
            nn += 1;
            tn += !pred as usize;
        }
        if pred != l {
            misclassified.push(i);
        }
    }
    let recalls: Vec<f64> = [(tp, np), (tn, nn)]
        .iter()
        .filter(|(_, n)| *n > 0)
        .map(|&(k, n)| k as f64 / n as f64)
        .collect();
    let n = scores.len();
    Ok(ClassifierMetrics {
        threshold,
        n,
        correct: tp + tn,
        accuracy: (tp + tn) as f64 / n as f64,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        auc: auc(scores, labels),
        misclassified,
    })
}

/// `y ≈ w_sat · sat + w_logp · log10 P + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub w_sat: f64,
    pub w_log_params: f64,
    pub intercept: f64,
    /// In-sample coefficient of determination.
    pub r_squared: f64,
}

/// One regression row: (saturation, log10 params, response).
pub type FitRow = (f64, f64, f64);

impl LinearFit {
    pub fn predict(&self, sat: f64, log_params: f64) -> f64 {
        self.w_sat * sat + self.w_log_params * log_params + self.intercept
    }

    /// `1 − SS_res / SS_tot` on `rows`; negative when worse than the mean.
    pub fn r_squared_on(&self, rows: &[FitRow]) -> Result<f64> {
        if rows.len() < 2 {
            return fail("R² needs at least 2 rows");
        }
        let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let my = mean(&ys)?;
        let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        if ss_tot == 0.0 {
            return fail("R² undefined for a constant response");
        }
        let ss_res: f64 = rows.iter().map(|&(s, p, y)| (y - self.predict(s, p)).powi(2)).sum();
        Ok(1.0 - ss_res / ss_tot)
    }
}

/// Ordinary least squares with intercept on two regressors.
pub fn linear_fit_2var(rows: &[FitRow]) -> Result<LinearFit> {
    if rows.len() < 4 {
        return fail(format!("linear fit needs at least 4 rows, got {}", rows.len()));
    }
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
        0 => rows[i].0,
        1 => rows[i].1,
        _ => 1.0,
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    let svd = x.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * rows.len() as f64;
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return fail("rank-deficient design matrix");
    }
    let w = svd.solve(&y, tol).map_err(|e| Error::Stats(e.to_string()))?;
    let mut fit = LinearFit {
        w_sat: w[0],
        w_log_params: w[1],
        intercept: w[2],
        r_squared: 0.0,
    };
    fit.r_squared = fit.r_squared_on(rows)?;
    Ok(fit)
}

/// One labelled cell for threshold cross-validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledScore {
    pub group: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoFold {
    pub held_out: String,
    pub threshold: f64,
    pub train_accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<LosoFold>,
    pub correct: usize,
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub wilson: (f64, f64),
    pub threshold_range: (f64, f64),
}

/// Training-accuracy-maximizing cut. Candidates sit at midpoints between
/// adjacent distinct scores (plus one below and one above the range); ties
/// go to the lowest cut.
pub fn optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return fail("threshold search needs matching non-empty scores and labels");
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut cuts = vec![sorted[0] - 1e-3];
    cuts.extend(sorted.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(sorted[sorted.len() - 1] + 1e-3);
    let mut best = (cuts[0], -1.0);
    for c in cuts {
        let acc = scores.iter().zip(labels).filter(|(&s, &l)| (s > c) == l).count() as f64 / scores.len() as f64;
        if acc > best.1 {
            best = (c, acc);
        }
    }
    Ok(best)
}

/// Leave-one-group-out evaluation of [`optimal_threshold`].
pub fn loso(cells: &[LabelledScore], z: f64) -> Result<LosoReport> {
    let mut groups: Vec<&str> = Vec::new();
    for c in cells {
        if !groups.contains(&c.group.as_str()) {
            groups.push(&c.group);
        }
    }
    if groups.len() < 2 {
        return fail("leave-one-group-out needs at least 2 groups");
    }
    let mut folds = Vec::new();
    let (mut preds, mut truth) = (Vec::new(), Vec::new());
    for g in &groups {
        let (train, test): (Vec<&LabelledScore>, Vec<&LabelledScore>) = cells.iter().partition(|c| c.group != *g);
        let s: Vec<f64> = train.iter().map(|c| c.score).collect();
        let l: Vec<bool> = train.iter().map(|c| c.label).collect();
        let (cut, acc) = optimal_threshold(&s, &l)?;
        let mut correct = 0;
        for c in &test {
            let p = c.score > cut;
            correct += (p == c.label) as usize;
            preds.push(p);
            truth.push(c.label);
        }
        folds.push(LosoFold {
            held_out: g.to_string(),
            threshold: cut,
            train_accuracy: acc,
            correct,
            n: test.len(),
        });
    }
    let n = preds.len();
    let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
    // Balanced accuracy on the pooled held-out predictions.
    let pseudo: Vec<f64> = preds.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let pooled = classifier_metrics(&pseudo, &truth, 0.5)?;
    let lo = folds.iter().map(|f| f.threshold).fold(f64::INFINITY, f64::min);
    let hi = folds.iter().map(|f| f.threshold).fold(f64::NEG_INFINITY, f64::max);
    Ok(LosoReport {
        folds,
        correct,
        n,
        accuracy: correct as f64 / n as f64,
        balanced_accuracy: pooled.balanced_accuracy,
        wilson: wilson_interval(correct, n, z)?,
        threshold_range: (lo, hi),
    })
}
