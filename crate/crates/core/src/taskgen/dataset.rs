// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSONL dataset files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{generate_dataset, Dataset, GenConfig, OrderRegime};
use super::problem::{OrderMode, Problem, Split};
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const ROW_SCHEMA: u32 = 1;

/// One line of a dataset file. `order` is 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub schema: u32,
    pub text: String,
    pub answer: u8,
    pub n_steps: usize,
    pub n_vas: usize,
    pub order: Vec<usize>,
    pub order_mode: OrderMode,
    pub split: Split,
    pub template: String,
}

impl DatasetRow {
    pub fn from_problem(p: &Problem) -> Self {
        DatasetRow {
            schema: ROW_SCHEMA,
            text: p.text(),
            answer: p.answer(),
            n_steps: p.n_steps(),
            n_vas: p.n_vas(),
            order: p.order.iter().map(|i| i + 1).collect(),
            order_mode: p.order_mode,
            split: p.split,
            template: p.template.canonical(),
        }
    }

    /// Rebuild the problem and check that the stored derived fields agree.
    pub fn to_problem(&self) -> Result<Problem> {
        if self.schema != ROW_SCHEMA {
            return Err(Error::Structure(format!("row schema {} (expected {ROW_SCHEMA})", self.schema)));
        }
        let order: Vec<usize> = self
            .order
            .iter()
            .map(|&i| i.checked_sub(1).ok_or_else(|| Error::Structure("order is 1-based".into())))
            .collect::<Result<_>>()?;
        let p = Problem::from_text(&self.text, &order, self.order_mode, self.split)?;
        if p.answer() != self.answer || p.n_vas() != self.n_vas || p.n_steps() != self.n_steps {
            return Err(Error::Structure(format!("row `{}` has inconsistent derived fields", self.text)));
        }
        Ok(p)
    }
}

pub fn write_jsonl(path: &Path, problems: &[Problem]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in problems {
        serde_json::to_writer(&mut w, &DatasetRow::from_problem(p))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<DatasetRow>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DatasetRow =
            serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_problems(path: &Path) -> Result<Vec<Problem>> {
    read_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| r.to_problem().map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Paths of a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetPaths { dir: dir.into() }
    }
    pub fn split(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{}.jsonl", split.as_str()))
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.json")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("gen_config.json")
    }
    pub fn stratified(&self, n_steps: usize) -> PathBuf {
        self.dir.join(format!("test_vas_{n_steps}.jsonl"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_rows: usize,
    pub test_id_rows: usize,
    pub test_ood_rows: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct StoredGenConfig {
    regime: OrderRegime,
    config: GenConfig,
}

/// Generate and write `train.jsonl`, `test_id.jsonl`, `test_ood.jsonl`,
/// `vocab.json` and `gen_config.json` into `dir`.
pub fn build_dataset(cfg: &GenConfig, regime: OrderRegime, dir: &Path) -> Result<(Dataset, DatasetSummary)> {
    let ds = generate_dataset(cfg, regime)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::new(dir);
    let mut files = Vec::new();
    for (split, rows) in [(Split::Train, &ds.train), (Split::TestId, &ds.test_id), (Split::TestOod, &ds.test_ood)] {
        let p = paths.split(split);
        write_jsonl(&p, rows)?;
        files.push(p);
    }
    let vocab = paths.vocab();
    write_json(&vocab, &Vocab::new().manifest())?;
    files.push(vocab);
    let conf = paths.config();
    write_json(&conf, &StoredGenConfig { regime, config: cfg.clone() })?;
    files.push(conf);
    let summary = DatasetSummary {
        train_rows: ds.train.len(),
        test_id_rows: ds.test_id.len(),
        test_ood_rows: ds.test_ood.len(),
        files,
    };
    Ok((ds, summary))
}

/// Read back the generation config stored next to a dataset.
pub fn read_gen_config(dir: &Path) -> Result<(GenConfig, OrderRegime)> {
    let p = DatasetPaths::new(dir).config();
    let s: StoredGenConfig = read_json(&p)?;
    Ok((s.config, s.regime))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}
