//! Append-only JSON-lines run manifest.
//!
//! Line 1 is a schema header; every later line is one `RunRecord`. Each
//! append is a single `write` of a complete line followed by `fsync`, and a
//! torn trailing line left by a killed writer is dropped on open.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use normlab::train::RunRecord;
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "normlab-manifest";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

fn header_line() -> String {
    let h = Header {
        schema: SCHEMA.into(),
        version: VERSION,
    };
    serde_json::to_string(&h).expect("header serializes") + "\n"
}

#[derive(Debug)]
pub struct Manifest {
    path: PathBuf,
    records: Vec<RunRecord>,
    index: HashMap<String, usize>,
}

/// Parses manifest text. A final line without a newline is treated as torn
/// and skipped; any other malformed line is an error.
fn parse(path: &Path, text: &str) -> Result<Vec<RunRecord>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut lines = complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Header = serde_json::from_str(first)
        .map_err(|e| normlab::Error::Data(format!("{}: bad manifest header: {e}", path.display())))?;
    if header.schema != SCHEMA || header.version != VERSION {
        bail!(normlab::Error::Data(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    lines
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| normlab::Error::Data(format!("{}:{}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

/// Reads every record; a missing file is an I/O error, an empty one is empty.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    parse(path, &text)
}

impl Manifest {
    /// Opens or creates the manifest, truncating a torn trailing line.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e).with_context(|| format!("reading manifest {}", path.display())),
        };
        let records = parse(path, &text)?;
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        if keep < text.len() {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(keep as u64)?;
            f.sync_all()?;
        }
        if keep == 0 {
            let mut f = File::create(path).with_context(|| format!("creating manifest {}", path.display()))?;
            f.write_all(header_line().as_bytes())?;
            f.sync_all()?;
        }
        let mut m = Manifest {
            path: path.to_path_buf(),
            records: Vec::new(),
            index: HashMap::new(),
        };
        for r in records {
            m.remember(r);
        }
        Ok(m)
    }

    fn remember(&mut self, r: RunRecord) {
        match self.index.get(&r.run_id) {
            Some(&i) => self.records[i] = r,
            None => {
                self.index.insert(r.run_id.clone(), self.records.len());
                self.records.push(r);
            }
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Latest record per run id, in first-seen order.
    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.index.contains_key(run_id)
    }

    /// Appends one record. A run id already present is rejected unless
    /// `force`, in which case the new line supersedes the old one.
    pub fn append(&mut self, record: &RunRecord, force: bool) -> Result<()> {
        if self.contains(&record.run_id) && !force {
            bail!(DuplicateRun(record.run_id.clone()));
        }
        let line = serde_json::to_string(record)? + "\n";
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening manifest {}", self.path.display()))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        self.remember(record.clone());
        Ok(())
    }
}

#[derive(Debug)]
pub struct DuplicateRun(pub String);

impl std::fmt::Display for DuplicateRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run {} is already in the manifest (pass --force to append anyway)", self.0)
    }
}

impl std::error::Error for DuplicateRun {}
