//! `probe`: instruments run against a saved checkpoint. Each probe is
//! independent; one failing (say, saturation on a LayerNorm model) is
//! reported and the rest still run.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use clap::ValueEnum;
use normlab::data::{batches, Split};
use normlab::model::{Gpt, NormKind};
use normlab::probes::{
    activation_effective_rank, hardtanh_clip, model_lipschitz, model_weight_geometry, saturation, SampleSpec,
    SaturationReport,
};
use serde::Serialize;
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Saturation,
    AlphaReport,
    ActRank,
    WeightGeom,
    Lipschitz,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Saturation => "saturation",
            Which::AlphaReport => "alpha-report",
            Which::ActRank => "act-rank",
            Which::WeightGeom => "weight-geom",
            Which::Lipschitz => "lipschitz",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeSettings {
    pub threshold: f64,
    pub batches: usize,
    pub batch_size: usize,
    pub seq: usize,
    pub seed: u64,
    pub eps: f64,
    pub trials: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeOutcome {
    pub probe: Which,
    pub ok: bool,
    pub error: Option<String>,
    pub result: Option<Value>,
    /// Requested sequence length when it was clamped to the model's block.
    pub seq_clamped_from: Option<usize>,
}

/// Result as JSON plus a CSV rendering.
fn run_one(which: Which, model: &Gpt<f32>, val: &Split, s: &ProbeSettings) -> normlab::Result<(Value, String)> {
    let seq = s.seq.min(model.config().block_size);
    let spec = SampleSpec::new(s.batches, s.batch_size, seq, s.seed);
    let mut csv = String::new();
    let json = match which {
        Which::Saturation => {
            let r: SaturationReport = if model.config().norm_kind == NormKind::HardTanh {
                hardtanh_clip(model, val, &spec)?
            } else {
                saturation(model, val, &spec, s.threshold)?
            };
            csv.push_str("site,count,saturated,fraction,alpha\n");
            for x in &r.sites {
                let a = x.alpha.map(|a| a.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{},{},{a}", x.site, x.count, x.saturated, x.fraction);
            }
            let _ = writeln!(csv, "global,{},{},{},{}", r.total_count, r.total_saturated, r.global,
                r.mean_alpha.map(|a| a.to_string()).unwrap_or_default());
            serde_json::to_value(&r)?
        }
        Which::AlphaReport => {
            let alphas = model.alphas().ok_or_else(|| {
                normlab::Error::Probe(format!("alpha report needs a dyt model, got {}", model.config().norm_kind))
            })?;
            csv.push_str("site,alpha\n");
            for (site, a) in &alphas {
                let _ = writeln!(csv, "{site},{a}");
            }
            let mean = alphas.iter().map(|a| a.1).sum::<f64>() / alphas.len() as f64;
            serde_json::json!({
                "sites": alphas.iter().map(|(s, a)| serde_json::json!({"site": s, "alpha": a})).collect::<Vec<_>>(),
                "mean_alpha": mean,
            })
        }
        Which::ActRank => {
            let b = batches(val, s.batch_size, seq, s.seed, 0)?;
            let r = activation_effective_rank(model, &b.inputs, b.batch)?;
            csv.push_str("block,effective_rank\n");
            for (i, v) in r.per_block.iter().enumerate() {
                let _ = writeln!(csv, "{i},{v}");
            }
            serde_json::to_value(&r)?
        }
        Which::WeightGeom => {
            let r = model_weight_geometry(model)?;
            csv.push_str("name,rows,cols,effective_rank\n");
            for m in &r.matrices {
                let er = m.effective_rank.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(csv, "{},{},{},{er}", m.name, m.rows, m.cols);
            }
            serde_json::to_value(&r)?
        }
        Which::Lipschitz => {
            let b = batches(val, s.batch_size, seq, s.seed, 0)?;
            let r = model_lipschitz(model, &b.inputs, b.batch, s.eps, s.trials, s.seed)?;
            csv.push_str("trial,ratio\n");
            for (i, v) in r.ratios.iter().enumerate() {
                let _ = writeln!(csv, "{i},{v}");
            }
            serde_json::to_value(&r)?
        }
    };
    Ok((json, csv))
}

/// Runs each probe in `which`, writing `probe-<name>.json`/`.csv` for the
/// ones that succeed and `probes.json` with every outcome.
pub fn run_probes(model: &Gpt<f32>, val: &Split, which: &[Which], s: &ProbeSettings, out: &Path) -> Result<Vec<ProbeOutcome>> {
    std::fs::create_dir_all(out)?;
    let block = model.config().block_size;
    let mut outcomes = Vec::new();
    for &w in which {
        let clamped = (s.seq > block && matches!(w, Which::Saturation | Which::ActRank | Which::Lipschitz))
            .then_some(s.seq);
        let o = match run_one(w, model, val, s) {
            Ok((json, csv)) => {
                std::fs::write(out.join(format!("probe-{}.json", w.name())), serde_json::to_string_pretty(&json)?)?;
                std::fs::write(out.join(format!("probe-{}.csv", w.name())), csv)?;
                ProbeOutcome {
                    probe: w,
                    ok: true,
                    error: None,
                    result: Some(json),
                    seq_clamped_from: clamped,
                }
            }
            Err(e) => ProbeOutcome {
                probe: w,
                ok: false,
                error: Some(e.to_string()),
                result: None,
                seq_clamped_from: None,
            },
        };
        outcomes.push(o);
    }
    std::fs::write(out.join("probes.json"), serde_json::to_string_pretty(&outcomes)?)?;
    Ok(outcomes)
}
