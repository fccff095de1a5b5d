//! Phase-diagram report: per-cell mean±std of best validation loss, Δ% and
//! seed-paired tests against vanilla, and (σ, Δ%) scatter rows.
//!
//! Output is a pure function of the records: no timestamps, stable order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::Result;
use normlab::stats::{bonferroni, delta_percent, mean_std, paired_t, star_band, PairedSample};
use normlab::train::RunRecord;
use serde::Serialize;

pub const BASELINE: &str = "vanilla";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub scale: String,
    pub train_tokens: usize,
    pub variant: String,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    /// Omitted for single-seed cells.
    pub std: Option<f64>,
    pub mean_saturation: Option<f64>,
    pub single_seed: bool,
    /// Runs without a finite best validation loss.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub scale: String,
    pub train_tokens: usize,
    pub variant: String,
    pub baseline_mean: Option<f64>,
    pub mean: f64,
    pub delta_percent: Option<f64>,
    pub paired_seeds: usize,
    pub t: Option<f64>,
    pub p_raw: Option<f64>,
    pub p_bonf: Option<f64>,
    pub stars: Option<String>,
    pub degenerate: bool,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub scale: String,
    pub train_tokens: usize,
    pub variant: String,
    pub saturation: f64,
    pub delta_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub metric: String,
    pub family_size: usize,
    /// `comparisons` (the default) or `override`.
    pub family_source: String,
    pub records: usize,
    pub cells: Vec<CellSummary>,
    pub comparisons: Vec<Comparison>,
    pub scatter: Vec<ScatterPoint>,
}

type Key = (String, usize, String);

fn variant_order(v: &str) -> (bool, &str) {
    (v != BASELINE, v)
}

/// Builds the report; `family` overrides the Bonferroni family size.
pub fn build(records: &[RunRecord], family: Option<usize>) -> Result<Report> {
    // Last record per run id wins, as in the manifest.
    let mut latest: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in records {
        latest.insert(&r.run_id, r);
    }
    let mut groups: BTreeMap<Key, Vec<&RunRecord>> = BTreeMap::new();
    for r in latest.values() {
        groups
            .entry((r.scale.clone(), r.data_budget.train_tokens, r.variant.clone()))
            .or_default()
            .push(r);
    }
    let mut keys: Vec<&Key> = groups.keys().collect();
    keys.sort_by(|a, b| (&a.0, a.1, variant_order(&a.2)).cmp(&(&b.0, b.1, variant_order(&b.2))));

    let mut cells = Vec::new();
    let mut per_seed: BTreeMap<&Key, Vec<(u64, f64)>> = BTreeMap::new();
    for key in &keys {
        let mut runs = groups[*key].clone();
        runs.sort_by_key(|r| (r.seed, r.run_id.clone()));
        let values: Vec<(u64, f64)> = runs
            .iter()
            .filter_map(|r| r.best_val_loss.filter(|v| v.is_finite()).map(|v| (r.seed, v)))
            .collect();
        let excluded = runs.len() - values.len();
        if values.is_empty() {
            continue;
        }
        let ms = mean_std(&values.iter().map(|v| v.1).collect::<Vec<_>>())?;
        let sats: Vec<f64> = runs.iter().filter_map(|r| r.saturation).collect();
        cells.push(CellSummary {
            scale: key.0.clone(),
            train_tokens: key.1,
            variant: key.2.clone(),
            n: values.len(),
            seeds: values.iter().map(|v| v.0).collect(),
            mean: ms.mean,
            std: ms.std,
            mean_saturation: (!sats.is_empty()).then(|| sats.iter().sum::<f64>() / sats.len() as f64),
            single_seed: values.len() < 2,
            excluded,
        });
        per_seed.insert(key, values);
    }

    let mut comparisons = Vec::new();
    let mut tests = Vec::new();
    for cell in cells.iter().filter(|c| c.variant != BASELINE) {
        let key = (cell.scale.clone(), cell.train_tokens, cell.variant.clone());
        let base_key = (cell.scale.clone(), cell.train_tokens, BASELINE.to_string());
        let base = cells
            .iter()
            .find(|c| (c.scale.clone(), c.train_tokens, c.variant.clone()) == base_key);
        let mut cmp = Comparison {
            scale: cell.scale.clone(),
            train_tokens: cell.train_tokens,
            variant: cell.variant.clone(),
            baseline_mean: base.map(|b| b.mean),
            mean: cell.mean,
            delta_percent: None,
            paired_seeds: 0,
            t: None,
            p_raw: None,
            p_bonf: None,
            stars: None,
            degenerate: false,
            note: None,
        };
        let Some(base) = base else {
            cmp.note = Some("no vanilla baseline; delta unavailable".into());
            comparisons.push(cmp);
            continue;
        };
        cmp.delta_percent = delta_percent(base.mean, cell.mean).ok();
        let pairs = PairedSample::align(&per_seed[&base_key], &per_seed[&key])?;
        cmp.paired_seeds = pairs.len();
        if pairs.len() >= 2 {
            let t = paired_t(&pairs)?;
            cmp.t = Some(t.t);
            cmp.p_raw = Some(t.p);
            cmp.degenerate = t.degenerate;
            tests.push(comparisons.len());
        } else {
            cmp.note = Some(format!("{} paired seed(s); p omitted", pairs.len()));
        }
        comparisons.push(cmp);
    }
    let (family_size, family_source) = match family {
        Some(m) => (m, "override"),
        None => (tests.len(), "comparisons"),
    };
    for &i in &tests {
        let c = &mut comparisons[i];
        let pb = bonferroni(c.p_raw.unwrap(), family_size)?;
        c.p_bonf = Some(pb);
        c.stars = Some(star_band(pb).to_string());
    }

    let scatter = comparisons
        .iter()
        .filter_map(|c| {
            let sat = cells
                .iter()
                .find(|x| x.scale == c.scale && x.train_tokens == c.train_tokens && x.variant == c.variant)?
                .mean_saturation?;
            Some(ScatterPoint {
                scale: c.scale.clone(),
                train_tokens: c.train_tokens,
                variant: c.variant.clone(),
                saturation: sat,
                delta_percent: c.delta_percent?,
            })
        })
        .collect();

    Ok(Report {
        metric: "best_val_loss".into(),
        family_size,
        family_source: family_source.into(),
        records: latest.len(),
        cells,
        comparisons,
        scatter,
    })
}

/// Three significant figures.
fn sig3(p: f64) -> String {
    if p == 0.0 {
        return "0".into();
    }
    let digits = (2 - p.abs().log10().floor() as i32).max(0) as usize;
    format!("{p:.digits$}")
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map_or_else(|| "-".into(), f)
}

pub fn markdown(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Phase diagram");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "metric: {} | records: {} | Bonferroni family size m = {} ({})",
        r.metric,
        r.records,
        r.family_size,
        if r.family_source == "override" {
            "set by --family"
        } else {
            "number of modification-vs-vanilla tests in this report"
        }
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "## Cells");
    let _ = writeln!(s);
    let _ = writeln!(s, "| scale | tokens | variant | n | mean ± std | mean σ | flags |");
    let _ = writeln!(s, "|---|---:|---|---:|---|---:|---|");
    for c in &r.cells {
        let mut flags = Vec::new();
        if c.single_seed {
            flags.push("single seed".to_string());
        }
        if c.excluded > 0 {
            flags.push(format!("{} run(s) without a loss", c.excluded));
        }
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            c.scale,
            c.train_tokens,
            c.variant,
            c.n,
            match c.std {
                Some(sd) => format!("{:.3} ± {sd:.3}", c.mean),
                None => format!("{:.3}", c.mean),
            },
            opt(c.mean_saturation, |v| format!("{v:.3}")),
            flags.join("; ")
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "## Versus vanilla");
    let _ = writeln!(s);
    let _ = writeln!(s, "| scale | tokens | variant | Δ% | seeds | t | p_raw | p_bonf | note |");
    let _ = writeln!(s, "|---|---:|---|---:|---:|---:|---:|---:|---|");
    for c in &r.comparisons {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            c.scale,
            c.train_tokens,
            c.variant,
            opt(c.delta_percent, |d| format!("{d:+.1}")),
            c.paired_seeds,
            opt(c.t, |t| format!("{t:.3}")),
            opt(c.p_raw, sig3),
            match (c.p_bonf, &c.stars) {
                (Some(p), Some(st)) => format!("{}{st}", sig3(p)),
                _ => "-".into(),
            },
            c.note.clone().unwrap_or_default()
                + if c.degenerate { "zero-variance differences" } else { "" }
        );
    }
    s
}

pub fn scatter_csv(r: &Report) -> String {
    let mut s = String::from("scale,train_tokens,variant,saturation,delta_percent\n");
    for p in &r.scatter {
        let _ = writeln!(s, "{},{},{},{},{}", p.scale, p.train_tokens, p.variant, p.saturation, p.delta_percent);
    }
    s
}
