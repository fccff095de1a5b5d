//! Deciding whether DyT is worth a full run: short calibration runs,
//! saturation, collapse triggers and a tokens-per-parameter prior.

use serde::{Deserialize, Serialize};

use crate::data::DataBudget;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NormKind};
use crate::probes::{saturation, SampleSpec, SaturationReport, SATURATION_CUT, TAIL_THRESHOLD};
use crate::stats::mean_std;
use crate::train::{train_run, RunData, RunOptions, RunRecord, RunStatus, TrainConfig};

pub const CALIBRATION_STEPS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Mean σ strictly above this favours DyT.
    pub saturation_cut: f64,
    /// `|α·x|` cut used when measuring σ; the cut above is only valid at 2.0.
    pub tail_threshold: f64,
    /// Any seed at or above this σ is flagged when Llama-style parts are on.
    pub collapse_saturation: f64,
    /// Minimum train-loss drop (nats) over calibration.
    pub plateau_margin: f64,
    /// Maximum std (nats) of final validation losses across seeds.
    pub dispersion_margin: f64,
    pub prior_low: f64,
    pub prior_high: f64,
    /// The prior is not applied at or above this parameter count.
    pub prior_max_params: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            saturation_cut: SATURATION_CUT,
            tail_threshold: TAIL_THRESHOLD,
            collapse_saturation: 0.5,
            plateau_margin: 0.5,
            dispersion_margin: 0.5,
            prior_low: 0.05,
            prior_high: 0.5,
            prior_max_params: 354e6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TryDyt,
    PreferNorm,
    NeedsCalibration,
    UnstableAbort,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::TryDyt => "try_dyt",
            Verdict::PreferNorm => "prefer_norm",
            Verdict::NeedsCalibration => "needs_calibration",
            Verdict::UnstableAbort => "unstable_abort",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Seeds a calibration needs: three with any Llama-style part, else two.
pub fn required_seeds(config: &ModelConfig) -> usize {
    if config.is_llama_style() {
        3
    } else {
        2
    }
}

/// One finished calibration seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub record: RunRecord,
    /// Absent when the run diverged.
    pub saturation: Option<SaturationReport>,
}

/// Runs `seeds.len()` DyT calibrations of `steps` optimizer steps each,
/// following the learning-rate schedule of the full `train` run, and
/// measures σ on the validation split afterwards.
pub fn calibrate(
    model_cfg: &ModelConfig,
    train: &TrainConfig,
    data: RunData<'_>,
    seeds: &[u64],
    steps: usize,
    sample: &SampleSpec,
    thresholds: &Thresholds,
) -> Result<Vec<Calibration>> {
    if model_cfg.norm_kind != NormKind::Dyt {
        return Err(Error::Precondition(format!(
            "calibration trains dyt models, got norm_kind = {}",
            model_cfg.norm_kind
        )));
    }
    let need = required_seeds(model_cfg);
    if seeds.len() < need {
        return Err(Error::Precondition(format!(
            "calibration needs at least {need} seeds for this configuration ({}), got {}; \
             the screening recipe asks for three seeds when swiglu, rope or gqa is active and two otherwise",
            model_cfg.variant_label(),
            seeds.len()
        )));
    }
    if steps == 0 {
        return Err(Error::Precondition("calibration needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            max_steps: train.max_steps.max(steps),
            ..train.clone()
        };
        let run = train_run(
            model_cfg,
            &cfg,
            data,
            RunOptions {
                stop_after: Some(steps),
                ..Default::default()
            },
        )?;
        let mut record = run.record;
        let prefix = format!("calibration: first {steps} of {} steps", cfg.max_steps);
        record.note = Some(match record.note.take() {
            Some(n) => format!("{prefix}; {n}"),
            None => prefix,
        });
        let report = if record.status == RunStatus::Diverged {
            None
        } else {
            let r = saturation(&run.model, data.val, sample, thresholds.tail_threshold)?;
            record.saturation = Some(r.global);
            Some(r)
        };
        out.push(Calibration {
            record,
            saturation: report,
        });
    }
    Ok(out)
}

/// The per-seed numbers collapse detection looks at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub run_id: String,
    pub seed: u64,
    pub diverged: bool,
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub saturation: Option<f64>,
}

impl From<&Calibration> for SeedOutcome {
    fn from(c: &Calibration) -> Self {
        let r = &c.record;
        Self {
            run_id: r.run_id.clone(),
            seed: r.seed,
            diverged: r.status == RunStatus::Diverged,
            initial_train_loss: r.trace.first().map(|p| p.train_loss),
            final_train_loss: r.trace.last().map(|p| p.train_loss),
            final_val_loss: r.trace.last().map(|p| p.val_loss),
            saturation: c.saturation.as_ref().map(|s| s.global),
        }
    }
}

/// Collapse triggers for one seed, each with the number that set it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseFlags {
    pub plateau: bool,
    pub diverged: bool,
    pub seed_dispersion: bool,
    pub high_saturation: bool,
    /// Initial minus final train loss.
    pub loss_drop: Option<f64>,
    /// Std of final validation losses across seeds.
    pub val_loss_std: Option<f64>,
    pub saturation: Option<f64>,
    pub triggers: Vec<String>,
}

impl CollapseFlags {
    pub fn any(&self) -> bool {
        self.plateau || self.diverged || self.seed_dispersion || self.high_saturation
    }
}

/// Flags each seed. Seed dispersion is a property of the group and is set
/// on every seed when it fires.
pub fn detect_collapse(outcomes: &[SeedOutcome], llama_style: bool, th: &Thresholds) -> Vec<CollapseFlags> {
    let finals: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.final_val_loss)
        .filter(|v| v.is_finite())
        .collect();
    let spread = if finals.len() >= 2 {
        mean_std(&finals).ok().and_then(|m| m.std)
    } else {
        None
    };
    outcomes
        .iter()
        .map(|o| {
            let mut f = CollapseFlags {
                val_loss_std: spread,
                saturation: o.saturation,
                ..Default::default()
            };
            if o.diverged {
                f.diverged = true;
                f.triggers.push(format!("seed {}: trainer reported divergence", o.seed));
            }
            if let (Some(a), Some(b)) = (o.initial_train_loss, o.final_train_loss) {
                let drop = a - b;
                f.loss_drop = Some(drop);
                if !(drop >= th.plateau_margin) {
                    f.plateau = true;
                    f.triggers.push(format!(
                        "seed {}: train loss fell {drop:.4} nats ({a:.4} -> {b:.4}), below the {} nat margin",
                        o.seed, th.plateau_margin
                    ));
                }
            }
            if let Some(s) = spread.filter(|s| *s > th.dispersion_margin) {
                f.seed_dispersion = true;
                f.triggers.push(format!(
                    "final val loss std {s:.4} nats across seeds exceeds {}",
                    th.dispersion_margin
                ));
            }
            if let Some(s) = o.saturation.filter(|s| llama_style && *s >= th.collapse_saturation) {
                f.high_saturation = true;
                f.triggers.push(format!(
                    "seed {}: saturation {s:.3} >= {} with llama-style components",
                    o.seed, th.collapse_saturation
                ));
            }
            f
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorDecision {
    pub verdict: Verdict,
    pub params: f64,
    pub tokens: f64,
    pub ratio: f64,
    /// Why the prior was not applied, if it was refused.
    pub refused: Option<String>,
}

/// Tokens-per-parameter prior. Refuses (needs_calibration with a reason)
/// above the parameter guard or when `llama_style` is set.
pub fn tp_prior(params: f64, tokens: f64, llama_style: bool, th: &Thresholds) -> Result<PriorDecision> {
    if !(params > 0.0 && tokens > 0.0 && params.is_finite() && tokens.is_finite()) {
        return Err(Error::Precondition(format!(
            "tokens-per-parameter prior needs P, T > 0 (P={params}, T={tokens})"
        )));
    }
    let ratio = tokens / params;
    let refused = if params >= th.prior_max_params {
        Some(format!(
            "P = {params:.3e} is at or above the {:.3e} parameter guard",
            th.prior_max_params
        ))
    } else if llama_style {
        Some("the prior was derived on GPT-2-style stacks; swiglu/rope/gqa are active".to_string())
    } else {
        None
    };
    let verdict = if refused.is_some() {
        Verdict::NeedsCalibration
    } else if ratio < th.prior_low {
        Verdict::TryDyt
    } else if ratio > th.prior_high {
        Verdict::PreferNorm
    } else {
        Verdict::NeedsCalibration
    };
    Ok(PriorDecision {
        verdict,
        params,
        tokens,
        ratio,
        refused,
    })
}

/// What `decide` knows about the configuration being screened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenContext {
    pub params: f64,
    pub tokens: f64,
    pub llama_style: bool,
    pub calibration_steps: Option<usize>,
}

impl ScreenContext {
    pub fn new(config: &ModelConfig, params: usize, budget: &DataBudget) -> Self {
        Self {
            params: params as f64,
            tokens: budget.train_tokens as f64,
            llama_style: config.is_llama_style(),
            calibration_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub mode: String,
    pub run_ids: Vec<String>,
    pub seeds: Vec<u64>,
    pub thresholds: Thresholds,
    pub calibration_steps: Option<usize>,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDecision {
    pub verdict: Verdict,
    pub mean_saturation: Option<f64>,
    pub per_seed_saturation: Vec<Option<f64>>,
    pub collapse: Vec<CollapseFlags>,
    pub tp_ratio: f64,
    pub prior: Option<PriorDecision>,
    pub evidence: Evidence,
}

/// Collapse beats the saturation threshold, which beats the prior. With no
/// calibration outcomes the prior alone decides.
pub fn decide(outcomes: Option<&[SeedOutcome]>, ctx: &ScreenContext, th: &Thresholds) -> Result<ScreeningDecision> {
    let prior = tp_prior(ctx.params, ctx.tokens, ctx.llama_style, th)?;
    let mut reasons = Vec::new();
    let Some(outcomes) = outcomes else {
        reasons.push(match &prior.refused {
            Some(r) => format!("prior refused: {r}"),
            None => format!(
                "T/P = {:.4}: below {} -> try_dyt, above {} -> prefer_norm, otherwise calibrate",
                prior.ratio, th.prior_low, th.prior_high
            ),
        });
        return Ok(ScreeningDecision {
            verdict: prior.verdict,
            mean_saturation: None,
            per_seed_saturation: Vec::new(),
            collapse: Vec::new(),
            tp_ratio: prior.ratio,
            prior: Some(prior),
            evidence: Evidence {
                mode: "prior_only".into(),
                run_ids: Vec::new(),
                seeds: Vec::new(),
                thresholds: *th,
                calibration_steps: None,
                reasons,
            },
        });
    };
    if outcomes.is_empty() {
        return Err(Error::Precondition("calibrated screening needs at least one seed".into()));
    }
    let collapse = detect_collapse(outcomes, ctx.llama_style, th);
    let per_seed: Vec<Option<f64>> = outcomes.iter().map(|o| o.saturation).collect();
    let measured: Vec<f64> = per_seed.iter().flatten().copied().collect();
    let mean_sat = (!measured.is_empty()).then(|| measured.iter().sum::<f64>() / measured.len() as f64);

    let verdict = if collapse.iter().any(CollapseFlags::any) {
        reasons.extend(collapse.iter().flat_map(|f| f.triggers.iter().cloned()));
        reasons.dedup();
        Verdict::UnstableAbort
    } else if (th.tail_threshold - TAIL_THRESHOLD).abs() > 1e-12 {
        reasons.push(format!(
            "saturation measured at |a*x| > {}; the {} cut is only calibrated at {}",
            th.tail_threshold, th.saturation_cut, TAIL_THRESHOLD
        ));
        Verdict::NeedsCalibration
    } else {
        match mean_sat {
            Some(m) if m > th.saturation_cut => {
                reasons.push(format!("mean saturation {m:.4} > {}", th.saturation_cut));
                Verdict::TryDyt
            }
            Some(m) => {
                reasons.push(format!("mean saturation {m:.4} <= {}", th.saturation_cut));
                Verdict::PreferNorm
            }
            None => {
                reasons.push("no seed produced a saturation measurement".into());
                Verdict::NeedsCalibration
            }
        }
    };
    Ok(ScreeningDecision {
        verdict,
        mean_saturation: mean_sat,
        per_seed_saturation: per_seed,
        collapse,
        tp_ratio: prior.ratio,
        prior: Some(prior),
        evidence: Evidence {
            mode: "calibrated".into(),
            run_ids: outcomes.iter().map(|o| o.run_id.clone()).collect(),
            seeds: outcomes.iter().map(|o| o.seed).collect(),
            thresholds: *th,
            calibration_steps: ctx.calibration_steps,
            reasons,
        },
    })
}

/// Marks plateaued calibration runs as collapsed.
pub fn label_collapsed(calibrations: &mut [Calibration], flags: &[CollapseFlags]) {
    for (c, f) in calibrations.iter_mut().zip(flags) {
        if f.plateau && c.record.status == RunStatus::Completed {
            c.record.status = RunStatus::Collapsed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(seed: u64, first: f64, last: f64, sat: f64) -> SeedOutcome {
        SeedOutcome {
            run_id: format!("r{seed}"),
            seed,
            diverged: false,
            initial_train_loss: Some(first),
            final_train_loss: Some(last),
            final_val_loss: Some(last + 0.1),
            saturation: Some(sat),
        }
    }

    fn ctx() -> ScreenContext {
        ScreenContext {
            params: 1e6,
            tokens: 1e5,
            llama_style: false,
            calibration_steps: Some(500),
        }
    }

    #[test]
    fn threshold_rule() {
        let th = Thresholds::default();
        let o = [outcome(1, 5.5, 2.0, 0.49), outcome(2, 5.5, 2.1, 0.49)];
        assert_eq!(decide(Some(&o), &ctx(), &th).unwrap().verdict, Verdict::TryDyt);
        let o = [outcome(1, 5.5, 2.0, 0.30), outcome(2, 5.5, 2.1, 0.30)];
        assert_eq!(decide(Some(&o), &ctx(), &th).unwrap().verdict, Verdict::PreferNorm);
    }

    #[test]
    fn plateau_dominates() {
        let o = [outcome(1, 10.9, 10.7, 0.6), outcome(2, 5.5, 2.1, 0.6)];
        let d = decide(Some(&o), &ctx(), &Thresholds::default()).unwrap();
        assert_eq!(d.verdict, Verdict::UnstableAbort);
        assert!(d.collapse[0].plateau && !d.collapse[1].plateau);
        assert!(!d.evidence.reasons.is_empty());
    }

    #[test]
    fn other_tail_threshold_needs_calibration() {
        let th = Thresholds {
            tail_threshold: 1.5,
            ..Default::default()
        };
        let o = [outcome(1, 5.5, 2.0, 0.9), outcome(2, 5.5, 2.1, 0.9)];
        assert_eq!(decide(Some(&o), &ctx(), &th).unwrap().verdict, Verdict::NeedsCalibration);
    }
}
