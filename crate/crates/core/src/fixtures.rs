//! Published result tables shipped as versioned JSON.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SATURATION_CELLS_JSON: &str = include_str!("../fixtures/saturation_cells.json");
pub const LLAMA_CELLS_JSON: &str = include_str!("../fixtures/llama_cells.json");
pub const PER_SEED_JSON: &str = include_str!("../fixtures/per_seed.json");
pub const SIGNIFICANCE_JSON: &str = include_str!("../fixtures/significance.json");

/// One (scale, data budget) DyT cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub scale: String,
    pub params: u64,
    pub tokens: u64,
    pub saturation: f64,
    pub mean_alpha: Option<f64>,
    pub delta_percent: f64,
    /// DyT lowered validation loss relative to vanilla.
    pub helps: bool,
    /// Excluded from the 12-cell calibration set.
    pub stress: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    pub version: u32,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub tail_threshold: Option<f64>,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub data: String,
    pub config: String,
    pub values: Vec<f64>,
    pub printed_mean: f64,
    pub printed_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTable {
    pub scale: String,
    pub params: u64,
    pub rows: Vec<SeedRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSeed {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub tables: Vec<SeedTable>,
}

impl PerSeed {
    pub fn row(&self, scale: &str, data: &str, config: &str) -> Option<&SeedRow> {
        self.tables
            .iter()
            .find(|t| t.scale == scale)?
            .rows
            .iter()
            .find(|r| r.data == data && r.config == config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedSignificance {
    pub cell: String,
    pub data: String,
    pub modification: String,
    pub vanilla_mean: f64,
    pub modified_mean: f64,
    pub delta_percent: f64,
    pub p_raw: f64,
    pub p_bonf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    pub version: u32,
    pub family_size: usize,
    pub rows: Vec<PublishedSignificance>,
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Data(format!("fixture {name}: {e}")))
}

/// GPT-2 saturation cells; the two stress cells are included on request.
pub fn gpt2_cells(include_stress: bool) -> Result<Vec<Cell>> {
    let t: CellTable = parse("saturation_cells", SATURATION_CELLS_JSON)?;
    Ok(t.cells.into_iter().filter(|c| include_stress || !c.stress).collect())
}

pub fn llama_cells() -> Result<Vec<Cell>> {
    Ok(parse::<CellTable>("llama_cells", LLAMA_CELLS_JSON)?.cells)
}

pub fn per_seed() -> Result<PerSeed> {
    parse("per_seed", PER_SEED_JSON)
}

pub fn significance() -> Result<SignificanceTable> {
    parse("significance", SIGNIFICANCE_JSON)
}

/// Every fixture by name, for export.
pub fn all() -> [(&'static str, &'static str); 4] {
    [
        ("saturation_cells.json", SATURATION_CELLS_JSON),
        ("llama_cells.json", LLAMA_CELLS_JSON),
        ("per_seed.json", PER_SEED_JSON),
        ("significance.json", SIGNIFICANCE_JSON),
    ]
}
