//! Sweep grids: variants × budgets × seeds, resumable against a manifest.
//!
//! A spec is TOML with top-level `seeds`, `budgets` and optional `workers`,
//! base `[model]`, `[train]`, `[data]`, `[output]` sections, and one
//! `[[variants]]` table per condition holding `[model]` overrides.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{mpsc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use normlab::data::{subset, Split};
use normlab::model::ModelConfig;
use normlab::train::{run_id, train_run, RunData, RunOptions, RunRecord, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, FileConfig, OutputSection};
use crate::manifest::Manifest;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    /// Training-token budgets.
    pub budgets: Vec<usize>,
    pub workers: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub output: OutputSection,
    pub variants: Vec<toml::Table>,
}

/// One (variant, budget, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub config: FileConfig,
}

fn config_error(msg: String) -> anyhow::Error {
    normlab::Error::Config(msg).into()
}

impl SweepSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading sweep spec {}", path.display()))?;
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    fn variant_configs(&self) -> Result<Vec<ModelConfig>> {
        let base = toml::Table::try_from(&self.model)?;
        if self.variants.is_empty() {
            return Ok(vec![self.model.clone()]);
        }
        self.variants
            .iter()
            .map(|v| {
                let mut t = base.clone();
                t.extend(v.clone());
                let cfg: ModelConfig = t.try_into().map_err(|e| config_error(format!("variant {v}: {e}")))?;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    /// Every cell of the grid, in spec order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.seeds.is_empty() || self.budgets.is_empty() {
            bail!(config_error("a sweep needs at least one seed and one budget".into()));
        }
        let mut seen = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            bail!(config_error(format!("seed {s} is listed twice")));
        }
        let mut seen = HashSet::new();
        if let Some(b) = self.budgets.iter().find(|b| !seen.insert(**b)) {
            bail!(config_error(format!("budget {b} is listed twice")));
        }
        self.train.validate()?;
        let variants = self.variant_configs()?;
        // One stream shared by every budget, so validation windows agree.
        let synthetic = self.data.synthetic_bytes.max(self.budgets.iter().max().unwrap() + self.data.val_tokens);
        let mut cells = Vec::new();
        let mut ids = HashSet::new();
        for model in &variants {
            for &budget in &self.budgets {
                for &seed in &self.seeds {
                    let config = FileConfig {
                        model: model.clone(),
                        train: TrainConfig { seed, ..self.train.clone() },
                        data: DataSection {
                            train_tokens: budget,
                            synthetic_bytes: synthetic,
                            ..self.data.clone()
                        },
                        output: self.output.clone(),
                    };
                    let id = run_id(&config.model, &config.train, &config.data.budget());
                    if !ids.insert(id.clone()) {
                        bail!(config_error(format!("two variants produce the same cell {id}")));
                    }
                    cells.push(Cell { id, config });
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    pub workers: usize,
    /// Stop after launching this many pending cells.
    pub limit: Option<usize>,
    /// Binary to launch per cell; cells run in-process when absent.
    pub exe: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Runs every cell not already in the manifest. Failing cells are logged to
/// `<out>/sweep-failures.jsonl` and the sweep carries on.
pub fn run_sweep(cells: &[Cell], manifest: &mut Manifest, opts: &SweepOptions) -> Result<SweepSummary> {
    let mut summary = SweepSummary {
        total: cells.len(),
        ..Default::default()
    };
    let mut pending: Vec<&Cell> = cells.iter().filter(|c| !manifest.contains(&c.id)).collect();
    summary.skipped = cells.len() - pending.len();
    if let Some(n) = opts.limit {
        pending.truncate(n);
    }
    if pending.is_empty() {
        return Ok(summary);
    }
    std::fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let splits = match opts.exe {
        Some(_) => BTreeMap::new(),
        None => load_splits(&pending)?,
    };
    let job = |cell: &Cell| -> Result<RunRecord> {
        match &opts.exe {
            Some(exe) => run_child(exe, cell, &opts.out_dir),
            None => run_in_process(cell, &splits, &opts.out_dir),
        }
    };

    let queue = Mutex::new(pending.iter().copied().collect::<VecDeque<_>>());
    let (tx, rx) = mpsc::channel::<(&Cell, Result<RunRecord>)>();
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..opts.workers.max(1).min(pending.len()) {
            let tx = tx.clone();
            let (queue, job) = (&queue, &job);
            s.spawn(move || loop {
                let Some(cell) = queue.lock().unwrap().pop_front() else { break };
                if tx.send((cell, job(cell))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Manifest writes happen only here, on the coordinating thread.
        for (cell, result) in rx {
            match result.and_then(|r| {
                if r.run_id != cell.id {
                    bail!("cell {} produced record {}", cell.id, r.run_id);
                }
                Ok(r)
            }) {
                Ok(record) => {
                    manifest.append(&record, false)?;
                    eprintln!("[sweep] {} {:?} best_val={:?}", cell.id, record.status, record.best_val_loss);
                    summary.completed.push(cell.id.clone());
                }
                Err(e) => {
                    let msg = format!("{e:#}");
                    eprintln!("[sweep] {} failed: {msg}", cell.id);
                    log_failure(&opts.out_dir, &cell.id, &msg)?;
                    summary.failed.push((cell.id.clone(), msg));
                }
            }
        }
        Ok(())
    })?;
    Ok(summary)
}

type SplitKey = String;

fn split_key(d: &DataSection) -> SplitKey {
    serde_json::to_string(d).expect("data section serializes")
}

fn load_splits(cells: &[&Cell]) -> Result<BTreeMap<SplitKey, (Split, Split, String)>> {
    let mut out = BTreeMap::new();
    let mut streams = BTreeMap::new();
    for c in cells {
        let d = &c.config.data;
        let key = split_key(d);
        if out.contains_key(&key) {
            continue;
        }
        let stream_key = split_key(&DataSection {
            train_tokens: 0,
            val_tokens: 0,
            seed: 0,
            ..d.clone()
        });
        if !streams.contains_key(&stream_key) {
            streams.insert(stream_key.clone(), d.load_stream()?);
        }
        let stream = &streams[&stream_key];
        let (tr, va) = subset(stream, &d.budget())?;
        out.insert(key, (tr, va, stream.source().to_string()));
    }
    Ok(out)
}

fn run_in_process(
    cell: &Cell,
    splits: &BTreeMap<SplitKey, (Split, Split, String)>,
    out_dir: &Path,
) -> Result<RunRecord> {
    let c = &cell.config;
    let (tr, va, source) = splits
        .get(&split_key(&c.data))
        .ok_or_else(|| anyhow!("no data loaded for cell {}", cell.id))?;
    let data = RunData {
        train: tr,
        val: va,
        budget: c.data.budget(),
        source,
    };
    let opts = RunOptions {
        checkpoint_dir: Some(out_dir.join("checkpoints")),
        interval_checkpoints: c.output.interval_checkpoints,
        ..Default::default()
    };
    Ok(train_run(&c.model, &c.train, data, opts)?.record)
}

/// Runs one cell as `exe train --config <cell>.toml --cell-record <cell>.json`.
fn run_child(exe: &Path, cell: &Cell, out_dir: &Path) -> Result<RunRecord> {
    let dir = out_dir.join("cells");
    std::fs::create_dir_all(&dir)?;
    let config_path = dir.join(format!("{}.toml", cell.id));
    let record_path = dir.join(format!("{}.json", cell.id));
    let log_path = dir.join(format!("{}.log", cell.id));
    let mut cfg = cell.config.clone();
    cfg.output.dir = Some(out_dir.to_path_buf());
    std::fs::write(&config_path, toml::to_string(&cfg)?)?;
    let _ = std::fs::remove_file(&record_path);
    let log = std::fs::File::create(&log_path)?;
    let status = Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&config_path)
        .arg("--cell-record")
        .arg(&record_path)
        .env_remove(crate::config::OUT_ENV)
        .stdout(Stdio::null())
        .stderr(log)
        .status()
        .with_context(|| format!("launching {}", exe.display()))?;
    if !status.success() {
        let tail = std::fs::read_to_string(&log_path).unwrap_or_default();
        let tail: Vec<&str> = tail.lines().rev().take(3).collect();
        bail!("worker exited with {status}: {}", tail.into_iter().rev().collect::<Vec<_>>().join(" | "));
    }
    let text = std::fs::read_to_string(&record_path).with_context(|| format!("reading {}", record_path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn log_failure(out_dir: &Path, id: &str, msg: &str) -> Result<()> {
    let path = out_dir.join("sweep-failures.jsonl");
    let line = serde_json::json!({ "run_id": id, "error": msg }).to_string() + "\n";
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}
