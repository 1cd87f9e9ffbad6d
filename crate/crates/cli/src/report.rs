//! Experiment report CSV. The first header cell is `schema=1`; readers
//! reject any other version.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_COLUMN: &str = "schema=1";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowMethod {
    /// Trained from a random initialization on the task data only.
    Baseline,
    Fft,
    Lora,
    /// A pretrained model applied without adaptation.
    Pfm,
}

impl RowMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Fft => "fft",
            Self::Lora => "lora",
            Self::Pfm => "pfm",
        }
    }
}

impl fmt::Display for RowMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a test set relates to the data the model was adapted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    #[serde(rename = "schema=1")]
    pub schema: u32,
    pub command: String,
    pub train_dataset: String,
    pub test_dataset: String,
    pub split: Split,
    pub method: RowMethod,
    pub data_fraction: u32,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub n_train: usize,
    pub mae: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
    pub best: bool,
    pub improvement_mae: Option<f64>,
    pub improvement_rmse: Option<f64>,
    pub improvement_ssim: Option<f64>,
}

/// Short hex digest of any serializable settings, in the style of an
/// abbreviated commit id.
pub fn config_hash<S: Serialize>(settings: &S) -> String {
    let json = serde_json::to_vec(settings).expect("settings serialize");
    let digest = Sha256::digest(&json);
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn write_csv(rows: &[Row], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows)?).with_context(|| format!("writing {}", path.display()))
}

pub const HEADER: [&str; 22] = [
    SCHEMA_COLUMN,
    "command",
    "train_dataset",
    "test_dataset",
    "split",
    "method",
    "data_fraction",
    "rank",
    "alpha",
    "trainable_params",
    "total_params",
    "n_train",
    "mae",
    "rmse",
    "ssim",
    "wall_seconds",
    "seed",
    "config_hash",
    "best",
    "improvement_mae",
    "improvement_rmse",
    "improvement_ssim",
];

/// Parses a report; errors name the offending line.
pub fn parse_csv(text: &str) -> Result<Vec<Row>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().context("line 1: unreadable header")?.clone();
    if header.get(0) != Some(SCHEMA_COLUMN) {
        bail!("line 1: expected first column {SCHEMA_COLUMN:?}, found {:?}", header.get(0).unwrap_or(""));
    }
    if header.iter().ne(HEADER) {
        bail!("line 1: header does not match schema {SCHEMA_VERSION}");
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| anyhow::anyhow!("line {}: {e}", line_of(&e)))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&header))
            .map_err(|e| anyhow::anyhow!("line {line}: {e}"))?;
        if row.schema != SCHEMA_VERSION {
            bail!("line {line}: unsupported schema {}", row.schema);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("report has no rows");
    }
    Ok(rows)
}

fn line_of(e: &csv::Error) -> u64 {
    match e.kind() {
        csv::ErrorKind::UnequalLengths { pos: Some(p), .. } => p.line(),
        csv::ErrorKind::Deserialize { pos: Some(p), .. } => p.line(),
        csv::ErrorKind::Utf8 { pos: Some(p), .. } => p.line(),
        _ => 0,
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_csv(&text).with_context(|| path.display().to_string())
}

/// Relative gain of LoRA over full fine-tuning, positive when LoRA is
/// better: `(fft - lora) / fft` for errors, `(lora - fft) / fft` for SSIM.
pub fn improvement(fft: &Row, lora: &Row) -> (f64, f64, f64) {
    (
        (fft.mae - lora.mae) / fft.mae,
        (fft.rmse - lora.rmse) / fft.rmse,
        (lora.ssim - fft.ssim) / fft.ssim,
    )
}
