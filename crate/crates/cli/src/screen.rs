//! `screen`: the DyT go/no-go recipe. Either the T/P prior alone, or short
//! DyT calibrations followed by collapse checks and the saturation cut.

use std::fmt::Write as _;

use anyhow::Result;
use normlab::model::{Gpt, ModelConfig, NormKind};
use normlab::probes::SampleSpec;
use normlab::screening::{
    calibrate, decide, detect_collapse, label_collapsed, Calibration, ScreenContext, ScreeningDecision, SeedOutcome,
    Thresholds,
};
use normlab::train::{RunData, TrainConfig};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct ScreenOutput {
    pub decision: ScreeningDecision,
    pub model: ModelConfig,
    pub calibrations: Vec<Calibration>,
    pub notes: Vec<String>,
}

/// The candidate is always the DyT version of `model`.
pub fn dyt_candidate(model: &ModelConfig) -> (ModelConfig, Option<String>) {
    if model.norm_kind == NormKind::Dyt {
        return (model.clone(), None);
    }
    let note = format!("screening the dyt swap of a {} configuration", model.norm_kind);
    (
        ModelConfig {
            norm_kind: NormKind::Dyt,
            ..model.clone()
        },
        Some(note),
    )
}

pub fn params_of(model: &ModelConfig) -> Result<usize> {
    Ok(Gpt::<f32>::new(model.clone(), 0)?.num_params())
}

pub fn prior_only(model: &ModelConfig, params: f64, tokens: f64, th: &Thresholds) -> Result<ScreenOutput> {
    let (model, note) = dyt_candidate(model);
    let ctx = ScreenContext {
        params,
        tokens,
        llama_style: model.is_llama_style(),
        calibration_steps: None,
    };
    Ok(ScreenOutput {
        decision: decide(None, &ctx, th)?,
        model,
        calibrations: Vec::new(),
        notes: note.into_iter().collect(),
    })
}

pub struct CalibrationPlan<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub data: RunData<'a>,
    pub seeds: &'a [u64],
    pub steps: usize,
    pub sample: SampleSpec,
    pub params: Option<f64>,
    pub tokens: Option<f64>,
}

pub fn calibrated(plan: &CalibrationPlan<'_>, th: &Thresholds) -> Result<ScreenOutput> {
    let (model, note) = dyt_candidate(plan.model);
    let mut cals = calibrate(&model, plan.train, plan.data, plan.seeds, plan.steps, &plan.sample, th)?;
    let outcomes: Vec<SeedOutcome> = cals.iter().map(SeedOutcome::from).collect();
    let flags = detect_collapse(&outcomes, model.is_llama_style(), th);
    label_collapsed(&mut cals, &flags);
    let ctx = ScreenContext {
        params: match plan.params {
            Some(p) => p,
            None => cals[0].record.n_params as f64,
        },
        tokens: plan.tokens.unwrap_or(plan.data.budget.train_tokens as f64),
        llama_style: model.is_llama_style(),
        calibration_steps: Some(plan.steps),
    };
    Ok(ScreenOutput {
        decision: decide(Some(&outcomes), &ctx, th)?,
        model,
        calibrations: cals,
        notes: note.into_iter().collect(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn pretty(out: &ScreenOutput) -> String {
    let d = &out.decision;
    let mut s = String::new();
    let _ = writeln!(s, "verdict: {}", d.verdict);
    let _ = writeln!(s, "mode: {}", d.evidence.mode);
    let _ = writeln!(s, "candidate: {} {}", out.model.variant_label(), out.model.scale_label());
    if let Some(p) = &d.prior {
        let _ = writeln!(s, "T/P: {:.4} (P = {:.4e}, T = {:.4e}) -> prior says {}", p.ratio, p.params, p.tokens, p.verdict);
    }
    if d.evidence.mode == "calibrated" {
        let _ = writeln!(s, "calibration steps: {}", fmt_opt(d.evidence.calibration_steps.map(|v| v as f64)));
        let _ = writeln!(s, "mean saturation: {} (cut {})", fmt_opt(d.mean_saturation), d.evidence.thresholds.saturation_cut);
        for (i, seed) in d.evidence.seeds.iter().enumerate() {
            let flags = &d.collapse[i];
            let _ = writeln!(
                s,
                "  seed {seed}: run {} sigma {} loss drop {} {}",
                d.evidence.run_ids[i],
                fmt_opt(d.per_seed_saturation[i]),
                fmt_opt(flags.loss_drop),
                if flags.any() { format!("[{}]", flags.triggers.join("; ")) } else { String::new() }
            );
        }
    }
    for r in &d.evidence.reasons {
        let _ = writeln!(s, "reason: {r}");
    }
    for n in &out.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}
