use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseKind, Phase};

pub const RECORDS_FILE: &str = "records.csv";
pub const INDEX_FILE: &str = "index.json";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Global,
    Walking,
    Mixed,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Global => "global",
            Experiment::Walking => "walking",
            Experiment::Mixed => "mixed",
        }
    }
}

/// One (config, layer, σ-point, seed) cell. Flat so it maps onto a CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub code_version: String,
    pub experiment: Experiment,
    /// Injection point id, or `global`.
    pub layer: String,
    pub layer_name: String,
    pub noise: NoiseKind,
    /// The swept σ; equals `sigma_mul` for mixed cells.
    pub sigma: f64,
    pub sigma_add: f64,
    pub sigma_mul: f64,
    /// `mul_first`, `add_first`, or empty.
    pub order: String,
    pub phase: Phase,
    pub clamp: bool,
    pub seed: u64,
    pub classes: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub epochs_run: usize,
    pub wallclock_s: f64,
    /// Training hit a non-finite loss; accuracy is set to chance.
    pub diverged: bool,
    /// Checkpoint path relative to the output directory, or empty.
    pub checkpoint: String,
}

impl ExperimentRecord {
    /// Identity of the cell within its config.
    pub fn cell_key(&self) -> String {
        cell_key(self.experiment, &self.layer, self.sigma_add, self.sigma_mul, &self.order, self.seed)
    }

    /// Everything except timing, which differs between otherwise identical runs.
    pub fn same_result(&self, other: &ExperimentRecord) -> bool {
        let mut a = self.clone();
        a.wallclock_s = other.wallclock_s;
        a == *other
    }
}

pub(crate) fn cell_key(experiment: Experiment, layer: &str, sigma_add: f64, sigma_mul: f64, order: &str, seed: u64) -> String {
    format!(
        "{}|{layer}|{:016x}|{:016x}|{order}|{seed}",
        experiment.as_str(),
        sigma_add.to_bits(),
        sigma_mul.to_bits()
    )
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_records(records: &[ExperimentRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Append-only results log of an output directory plus its JSON index.
pub struct ResultsStore {
    dir: PathBuf,
    existing: Vec<ExperimentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub config_hash: String,
    pub name: String,
    pub code_version: String,
    pub records: usize,
    pub config: serde_json::Value,
}

impl ResultsStore {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RECORDS_FILE);
        let existing = if path.exists() { read_records(&path)? } else { Vec::new() };
        Ok(ResultsStore {
            dir: dir.to_path_buf(),
            existing,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join(RECORDS_FILE)
    }

    pub fn existing<'a>(&'a self, config_hash: &'a str) -> impl Iterator<Item = &'a ExperimentRecord> + 'a {
        self.existing.iter().filter(move |r| r.config_hash == config_hash)
    }

    pub fn done_keys(&self, config_hash: &str) -> HashSet<String> {
        self.existing(config_hash).map(|r| r.cell_key()).collect()
    }

    /// Opens the log for appending; the header is written only to a new file.
    pub fn appender(&self) -> Result<csv::Writer<File>> {
        let path = self.records_path();
        let fresh = fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
    }

    /// Rewrites the index entry of one config.
    pub fn update_index(&self, entry: IndexEntry) -> Result<()> {
        let path = self.dir.join(INDEX_FILE);
        let mut entries: Vec<IndexEntry> = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            Vec::new()
        };
        entries.retain(|e| e.config_hash != entry.config_hash);
        entries.push(entry);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
