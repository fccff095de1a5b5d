//! Flat-tail fractions at norm-site inputs.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{batches, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Gpt, NormKind};
use crate::tensor::Scalar;

/// `|α·x|` above this lies in tanh's flat tail.
pub const TAIL_THRESHOLD: f64 = 2.0;
/// Screening cut on global σ: strictly above means DyT helps.
pub const SATURATION_CUT: f64 = 0.43;

/// Which batches a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_batches: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(n_batches: usize, batch_size: usize, block_size: usize, seed: u64) -> Self {
        Self {
            n_batches,
            batch_size,
            block_size,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationKind {
    /// `|α·x| > threshold` at DyT sites.
    DytTail,
    /// `|x| > 1` at HardTanh sites.
    HardtanhClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSaturation {
    pub site: String,
    pub count: u64,
    pub saturated: u64,
    pub fraction: f64,
    /// Learned α (DyT only).
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub kind: SaturationKind,
    pub threshold: f64,
    pub sites: Vec<SiteSaturation>,
    /// Total saturated count over total activation count.
    pub global: f64,
    pub total_count: u64,
    pub total_saturated: u64,
    /// Unweighted mean of per-site α.
    pub mean_alpha: Option<f64>,
    pub sample: Option<SampleSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationVerdict {
    Helps,
    Hurts,
}

/// `σ > threshold` (strict) → helps.
pub fn classify_saturation(sigma: f64, threshold: f64) -> SaturationVerdict {
    if sigma > threshold {
        SaturationVerdict::Helps
    } else {
        SaturationVerdict::Hurts
    }
}

/// Norm-site inputs captured from probing forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteActivations {
    pub site: String,
    pub alpha: Option<f64>,
    pub values: Vec<f32>,
}

/// Counts entries with `|scale · α · x| > threshold` (α = 1 when absent).
pub fn count_saturation(sites: &[SiteActivations], threshold: f64, alpha_scale: f64, kind: SaturationKind) -> SaturationReport {
    let mut rows = Vec::with_capacity(sites.len());
    let (mut total, mut sat) = (0u64, 0u64);
    for s in sites {
        let a = alpha_scale * s.alpha.unwrap_or(1.0);
        let n = s.values.len() as u64;
        let k = s.values.iter().filter(|&&x| (a * x as f64).abs() > threshold).count() as u64;
        total += n;
        sat += k;
        rows.push(SiteSaturation {
            site: s.site.clone(),
            count: n,
            saturated: k,
            fraction: if n == 0 { 0.0 } else { k as f64 / n as f64 },
            alpha: s.alpha,
        });
    }
    let alphas: Vec<f64> = sites.iter().filter_map(|s| s.alpha).collect();
    SaturationReport {
        kind,
        threshold,
        sites: rows,
        global: if total == 0 { 0.0 } else { sat as f64 / total as f64 },
        total_count: total,
        total_saturated: sat,
        mean_alpha: (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64),
        sample: None,
    }
}

/// Runs `spec.n_batches` deterministic probing passes over `split` and
/// returns every norm site's input values.
pub fn collect_site_inputs<T: Scalar>(model: &Gpt<T>, split: &Split, spec: &SampleSpec) -> Result<Vec<SiteActivations>> {
    if spec.n_batches == 0 {
        return Err(Error::Probe("sample spec needs at least one batch".into()));
    }
    if spec.block_size > model.config().block_size {
        return Err(Error::Probe(format!(
            "sample block size {} exceeds the model's {}",
            spec.block_size,
            model.config().block_size
        )));
    }
    let alphas = model.alphas();
    let mut sites: Vec<SiteActivations> = model
        .config()
        .site_names()
        .into_iter()
        .enumerate()
        .map(|(i, site)| SiteActivations {
            site,
            alpha: alphas.as_ref().map(|a| a[i].1),
            values: Vec::new(),
        })
        .collect();
    for step in 0..spec.n_batches as u64 {
        let b = batches(split, spec.batch_size, spec.block_size, spec.seed, step)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b.inputs, b.batch, ForwardOptions::probing())?;
        for (dst, tap) in sites.iter_mut().zip(&out.taps) {
            dst.values.extend(g.value(tap.input).data().iter().map(|v| v.as_f64() as f32));
        }
    }
    Ok(sites)
}

/// Global and per-site σ of a DyT model.
pub fn saturation<T: Scalar>(model: &Gpt<T>, split: &Split, spec: &SampleSpec, threshold: f64) -> Result<SaturationReport> {
    if model.config().norm_kind != NormKind::Dyt {
        return Err(Error::Probe(format!(
            "saturation needs a dyt model, got {} (use hardtanh_clip for hardtanh)",
            model.config().norm_kind
        )));
    }
    let sites = collect_site_inputs(model, split, spec)?;
    let mut r = count_saturation(&sites, threshold, 1.0, SaturationKind::DytTail);
    r.sample = Some(*spec);
    Ok(r)
}

/// Share of HardTanh-site inputs outside `[-1, 1]`.
pub fn hardtanh_clip<T: Scalar>(model: &Gpt<T>, split: &Split, spec: &SampleSpec) -> Result<SaturationReport> {
    if model.config().norm_kind != NormKind::HardTanh {
        return Err(Error::Probe(format!(
            "clip fraction needs a hardtanh model, got {}",
            model.config().norm_kind
        )));
    }
    let sites = collect_site_inputs(model, split, spec)?;
    let mut r = count_saturation(&sites, 1.0, 1.0, SaturationKind::HardtanhClip);
    r.sample = Some(*spec);
    Ok(r)
}
