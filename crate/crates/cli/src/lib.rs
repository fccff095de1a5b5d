//! Command-line harness: `train`, `sweep`, `screen`, `probe`, `report` and
//! `fixtures`.
//!
//! Exit codes: 0 on success (a diverged run or a negative verdict is still a
//! success), 1 for usage and configuration errors, 2 for I/O errors.

pub mod config;
pub mod manifest;
pub mod probe;
pub mod report;
pub mod screen;
pub mod sweep;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use normlab::fixtures;
use normlab::model::ModelConfig;
use normlab::probes::SampleSpec;
use normlab::screening::{Thresholds, CALIBRATION_STEPS};
use normlab::train::checkpoint;
use normlab::train::{run_id, train_run, EvalPoint, RunData, RunOptions, RunRecord, RunStatus, TrainConfig};

use config::{ConfigArgs, DataArgs, FileConfig};
use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "normlab", version, about = "Normalization-layer experiments on small GPT models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one run and append its record to the manifest.
    Train(TrainCmd),
    /// Run a variants × budgets × seeds grid, skipping cells already done.
    Sweep(SweepCmd),
    /// Decide whether to try DyT for a configuration.
    Screen(ScreenCmd),
    /// Run instruments on a checkpoint.
    Probe(ProbeCmd),
    /// Summarize a manifest against vanilla.
    Report(ReportCmd),
    /// Write the shipped reference tables, optionally as manifest records.
    Fixtures(FixturesCmd),
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Append even if the run id is already in the manifest.
    #[arg(long)]
    pub force: bool,
    /// Write the record here instead of to the manifest (sweep workers).
    #[arg(long, hide = true)]
    pub cell_record: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    /// Sweep spec (TOML).
    pub spec: PathBuf,
    /// Parallel worker processes (default: spec `workers`, else 1).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Run at most this many pending cells, then stop.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Run cells in this process instead of launching workers.
    #[arg(long)]
    pub in_process: bool,
    #[arg(long = "out", env = config::OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScreenCmd {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Decide from the tokens-per-parameter prior without training.
    #[arg(long)]
    pub prior_only: bool,
    /// Parameter count P (default: the model's).
    #[arg(long)]
    pub params: Option<f64>,
    /// Training tokens T (default: the data budget).
    #[arg(long)]
    pub tokens: Option<f64>,
    /// Calibration seeds, comma separated (default: 1337,42,7 or the first two).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Calibration length in optimizer steps.
    #[arg(long = "calibration-steps", default_value_t = CALIBRATION_STEPS)]
    pub calibration_steps: usize,
    /// `|α·x|` cut for counting saturation.
    #[arg(long, default_value_t = normlab::probes::TAIL_THRESHOLD)]
    pub threshold: f64,
    /// Batches sampled for the saturation measurement.
    #[arg(long = "sample-batches", default_value_t = 50)]
    pub sample_batches: usize,
}

#[derive(Args, Debug)]
pub struct ProbeCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Probes to run (comma separated; default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub which: Vec<probe::Which>,
    /// Config file whose [data] section picks the corpus.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = normlab::probes::TAIL_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    #[arg(long = "probe-batch-size", default_value_t = 8)]
    pub probe_batch_size: usize,
    /// Sequence length; clamped to the model's block size.
    #[arg(long, default_value_t = 512)]
    pub seq: usize,
    #[arg(long = "probe-seed", default_value_t = 0)]
    pub probe_seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long = "out", env = config::OUT_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportCmd {
    /// Manifest to summarize (default: <out>/manifest.jsonl).
    pub manifest: Option<PathBuf>,
    /// Bonferroni family size (default: number of comparisons).
    #[arg(long)]
    pub family: Option<usize>,
    #[arg(long = "out", env = config::OUT_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FixturesCmd {
    #[arg(long = "out", env = config::OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Also append the per-seed tables to this manifest as run records.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

fn out_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("normlab-out"))
}

/// 2 when the error chain contains an I/O failure, else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(normlab::Error::Io { .. }) = cause.downcast_ref::<normlab::Error>() {
            return 2;
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Screen(c) => cmd_screen(c),
        Command::Probe(c) => cmd_probe(c),
        Command::Report(c) => cmd_report(c),
        Command::Fixtures(c) => cmd_fixtures(c),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(c: TrainCmd) -> Result<()> {
    let cfg = c.config.resolve()?;
    let budget = cfg.data.budget();
    let id = run_id(&cfg.model, &cfg.train, &budget);
    let mut manifest = match &c.cell_record {
        Some(_) => None,
        None => {
            let m = Manifest::open(&cfg.output.manifest())?;
            if m.contains(&id) && !c.force {
                anyhow::bail!(manifest::DuplicateRun(id));
            }
            Some(m)
        }
    };
    let (train, val, source) = cfg.data.load_splits()?;
    let out = cfg.output.dir();
    let mut progress = |p: &EvalPoint| {
        eprintln!("step {:>6}  train {:.4}  val {:.4}  lr {:.2e}", p.step, p.train_loss, p.val_loss, p.lr);
    };
    let run = train_run(
        &cfg.model,
        &cfg.train,
        RunData {
            train: &train,
            val: &val,
            budget,
            source: &source,
        },
        RunOptions {
            checkpoint_dir: Some(out.join("checkpoints")),
            interval_checkpoints: cfg.output.interval_checkpoints,
            on_eval: Some(&mut progress),
            stop_after: None,
        },
    )?;
    let r = run.record;
    match (&c.cell_record, manifest.as_mut()) {
        (Some(path), _) => write_json(path, &r)?,
        (None, Some(m)) => {
            write_json(&out.join("runs").join(format!("{}.json", r.run_id)), &r)?;
            m.append(&r, c.force)?;
        }
        (None, None) => unreachable!(),
    }
    println!(
        "{} status={} params={} best_val={} final_train={} gap={}",
        r.run_id,
        serde_json::to_value(r.status)?.as_str().unwrap_or_default(),
        r.n_params,
        fmt_loss(r.best_val_loss),
        fmt_loss(r.final_train_loss),
        fmt_loss(r.train_val_gap),
    );
    Ok(())
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn cmd_sweep(c: SweepCmd) -> Result<()> {
    let spec = sweep::SweepSpec::read(&c.spec)?;
    let cells = spec.cells()?;
    let mut output = spec.output.clone();
    if c.out.is_some() {
        output.dir = c.out.clone();
    }
    if c.manifest.is_some() {
        output.manifest = c.manifest.clone();
    }
    let mut manifest = Manifest::open(&output.manifest())?;
    let workers = c.workers.or(spec.workers).unwrap_or(1);
    let exe = if c.in_process {
        None
    } else {
        Some(std::env::current_exe().context("locating the normlab binary")?)
    };
    let summary = sweep::run_sweep(
        &cells,
        &mut manifest,
        &sweep::SweepOptions {
            workers,
            limit: c.limit,
            exe,
            out_dir: output.dir(),
        },
    )?;
    println!(
        "{} cells: {} already done, {} ran, {} failed",
        summary.total,
        summary.skipped,
        summary.completed.len(),
        summary.failed.len()
    );
    for (id, e) in &summary.failed {
        println!("failed {id}: {e}");
    }
    Ok(())
}

fn default_seeds(model: &ModelConfig) -> Vec<u64> {
    let need = normlab::screening::required_seeds(model);
    [1337, 42, 7].into_iter().take(need).collect()
}

fn cmd_screen(c: ScreenCmd) -> Result<()> {
    let cfg = c.config.resolve()?;
    let th = Thresholds {
        tail_threshold: c.threshold,
        ..Thresholds::default()
    };
    let out = if c.prior_only {
        let (candidate, _) = screen::dyt_candidate(&cfg.model);
        let params = match c.params {
            Some(p) => p,
            None => screen::params_of(&candidate)? as f64,
        };
        let tokens = c.tokens.unwrap_or(cfg.data.train_tokens as f64);
        screen::prior_only(&cfg.model, params, tokens, &th)?
    } else {
        let (train, val, source) = cfg.data.load_splits()?;
        let seeds = if c.seeds.is_empty() {
            default_seeds(&screen::dyt_candidate(&cfg.model).0)
        } else {
            c.seeds.clone()
        };
        let plan = screen::CalibrationPlan {
            model: &cfg.model,
            train: &cfg.train,
            data: RunData {
                train: &train,
                val: &val,
                budget: cfg.data.budget(),
                source: &source,
            },
            seeds: &seeds,
            steps: c.calibration_steps,
            sample: SampleSpec::new(c.sample_batches, cfg.train.batch_size, cfg.model.block_size, 0),
            params: c.params,
            tokens: c.tokens,
        };
        screen::calibrated(&plan, &th)?
    };
    print!("{}", screen::pretty(&out));
    write_json(&cfg.output.dir().join("screen.json"), &out)
}

fn cmd_probe(c: ProbeCmd) -> Result<()> {
    let (model, header) = checkpoint::load(&c.checkpoint)?;
    let mut data = match &c.config {
        Some(p) => FileConfig::read(p)?.data,
        None => Default::default(),
    };
    let args = ConfigArgs {
        data: c.data.clone(),
        ..Default::default()
    };
    let overlay = args.resolve()?.data;
    if c.data.path.is_some() {
        data.path = overlay.path;
    }
    if c.data.format.is_some() {
        data.format = overlay.format;
    }
    for (flag, dst, src) in [
        (c.data.synthetic_bytes.is_some(), &mut data.synthetic_bytes, overlay.synthetic_bytes),
        (c.data.train_tokens.is_some(), &mut data.train_tokens, overlay.train_tokens),
        (c.data.val_tokens.is_some(), &mut data.val_tokens, overlay.val_tokens),
    ] {
        if flag {
            *dst = src;
        }
    }
    if let Some(s) = c.data.synthetic_seed {
        data.synthetic_seed = s;
    }
    if let Some(s) = c.data.data_seed {
        data.seed = s;
    }
    let (_, val, _) = data.load_splits()?;
    let which = if c.which.is_empty() {
        vec![
            probe::Which::Saturation,
            probe::Which::AlphaReport,
            probe::Which::ActRank,
            probe::Which::WeightGeom,
            probe::Which::Lipschitz,
        ]
    } else {
        c.which.clone()
    };
    let settings = probe::ProbeSettings {
        threshold: c.threshold,
        batches: c.batches,
        batch_size: c.probe_batch_size,
        seq: c.seq,
        seed: c.probe_seed,
        eps: c.eps,
        trials: c.trials,
    };
    let out = out_dir(&c.out);
    let outcomes = probe::run_probes(&model, &val, &which, &settings, &out)?;
    println!("checkpoint step {} ({} {})", header.step, model.config().variant_label(), model.config().scale_label());
    for o in &outcomes {
        match &o.error {
            None => println!("{}: ok", o.probe.name()),
            Some(e) => println!("{}: error: {e}", o.probe.name()),
        }
    }
    Ok(())
}

fn cmd_report(c: ReportCmd) -> Result<()> {
    let out = out_dir(&c.out);
    let path = c.manifest.clone().unwrap_or_else(|| out.join("manifest.jsonl"));
    let records = manifest::read_records(&path)?;
    let r = report::build(&records, c.family)?;
    let md = report::markdown(&r);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &r)?;
    std::fs::write(out.join("report.md"), &md)?;
    std::fs::write(out.join("scatter.csv"), report::scatter_csv(&r))?;
    print!("{md}");
    Ok(())
}

/// Published per-seed values as run records, so `report` can reproduce the
/// published phase-diagram rows. The metric is stored as `best_val_loss`.
pub fn per_seed_records() -> Result<Vec<RunRecord>> {
    let ps = fixtures::per_seed()?;
    let mut out = Vec::new();
    for table in &ps.tables {
        for row in &table.rows {
            let variant = match row.config.as_str() {
                "diffattn" => "diff_v1".to_string(),
                other => other.to_string(),
            };
            let tokens = parse_tokens(&row.data)?;
            for (&seed, &v) in ps.seeds.iter().zip(&row.values) {
                out.push(RunRecord {
                    schema_version: normlab::train::RUN_SCHEMA_VERSION,
                    run_id: format!("published-{}-{}-{}-s{seed}", table.scale, row.data, variant),
                    config_hash: String::new(),
                    variant: variant.clone(),
                    scale: table.scale.clone(),
                    n_params: table.params as usize,
                    model: ModelConfig::default(),
                    train: TrainConfig::default(),
                    seed,
                    data_budget: normlab::data::DataBudget {
                        train_tokens: tokens,
                        val_tokens: 0,
                        seed: 0,
                    },
                    data_source: "published per-seed table".into(),
                    effective_batch: 0,
                    trace: Vec::new(),
                    best_val_loss: Some(v),
                    best_step: None,
                    final_train_loss: None,
                    train_val_gap: None,
                    wall_seconds: 0.0,
                    status: RunStatus::Completed,
                    saturation: None,
                    note: Some("ingested from the published per-seed table".into()),
                });
            }
        }
    }
    Ok(out)
}

/// `"118M"` → 118_000_000.
fn parse_tokens(s: &str) -> Result<usize> {
    let (num, mult) = match s.strip_suffix('M') {
        Some(n) => (n, 1_000_000.0),
        None => match s.strip_suffix('B') {
            Some(n) => (n, 1e9),
            None => (s, 1.0),
        },
    };
    let v: f64 = num
        .parse()
        .map_err(|_| normlab::Error::Data(format!("bad token count {s:?}")))?;
    Ok((v * mult).round() as usize)
}

fn cmd_fixtures(c: FixturesCmd) -> Result<()> {
    let out = out_dir(&c.out).join("fixtures");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (name, text) in fixtures::all() {
        std::fs::write(out.join(name), text).with_context(|| format!("writing {name}"))?;
        println!("{}", out.join(name).display());
    }
    if let Some(path) = &c.manifest {
        let mut m = Manifest::open(path)?;
        let records = per_seed_records()?;
        for r in &records {
            m.append(r, c.force)?;
        }
        println!("appended {} records to {}", records.len(), path.display());
    }
    Ok(())
}
