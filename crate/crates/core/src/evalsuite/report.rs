// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::interpret::SweepPoint;
use crate::minigpt::ModelState;
use crate::taskgen::{hex_digest, OrderMode, Problem};
use crate::trainer::outcomes;

/// Default minimum instances per reported cell.
pub const MIN_CELL_COUNT: usize = 100;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex_digest(h))
}

/// Where a report's numbers came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: Option<PathBuf>,
    /// Hash of the checkpoint manifest, which itself pins the tensor blob hash.
    pub checkpoint_sha256: Option<String>,
    pub dataset: Option<PathBuf>,
    pub dataset_sha256: Option<String>,
    pub seed: u64,
}

impl Provenance {
    /// Hash the given checkpoint directory and dataset file.
    pub fn of(checkpoint_dir: Option<&Path>, dataset: Option<&Path>, seed: u64) -> Result<Self> {
        let checkpoint_sha256 = checkpoint_dir.map(|d| sha256_file(&d.join("manifest.json"))).transpose()?;
        let dataset_sha256 = dataset.map(sha256_file).transpose()?;
        Ok(Provenance {
            checkpoint: checkpoint_dir.map(Path::to_path_buf),
            checkpoint_sha256,
            dataset: dataset.map(Path::to_path_buf),
            dataset_sha256,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Breakdown {
    NSteps,
    NVas,
}

impl Breakdown {
    pub fn as_str(self) -> &'static str {
        match self {
            Breakdown::NSteps => "n_steps",
            Breakdown::NVas => "n_vas",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub order_mode: OrderMode,
    /// Aligned with [`Report::columns`]; `None` marks a cell with no instances.
    pub cells: Vec<Option<Cell>>,
}

/// Accuracy matrix of order mode by step count or VAS count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub provenance: Provenance,
    pub breakdown: Breakdown,
    /// Step count the VAS breakdown was restricted to.
    pub n_steps: Option<usize>,
    pub window: Option<usize>,
    pub min_cell_count: usize,
    pub columns: Vec<usize>,
    pub rows: Vec<Row>,
}

impl Report {
    pub fn row(&self, order: OrderMode) -> Option<&Row> {
        self.rows.iter().find(|r| r.order_mode == order)
    }

    pub fn cell(&self, order: OrderMode, column: usize) -> Option<&Cell> {
        let c = self.columns.iter().position(|&c| c == column)?;
        self.row(order)?.cells[c].as_ref()
    }

    /// `(column, accuracy)` for the present cells of one order.
    pub fn points(&self, order: OrderMode) -> Vec<(usize, f64)> {
        self.row(order)
            .map(|r| self.columns.iter().zip(&r.cells).filter_map(|(&c, cell)| cell.map(|x| (c, x.accuracy))).collect())
            .unwrap_or_default()
    }

    /// Largest accuracy difference between order modes in one column.
    pub fn column_spread(&self, column: usize) -> Option<f64> {
        let accs: Vec<f64> =
            self.rows.iter().filter_map(|r| self.cell(r.order_mode, column)).map(|c| c.accuracy).collect();
        if accs.is_empty() {
            return None;
        }
        let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    /// Spearman correlation between column index value and accuracy for one order.
    pub fn spearman(&self, order: OrderMode) -> Option<f64> {
        let pts = self.points(order);
        let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        spearman(&xs, &ys)
    }

    /// Present cells holding fewer than `min_cell_count` instances.
    pub fn undersized_cells(&self) -> Vec<(OrderMode, usize, usize)> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (&c, cell) in self.columns.iter().zip(&r.cells) {
                if let Some(cell) = cell {
                    if cell.n < self.min_cell_count {
                        out.push((r.order_mode, c, cell.n));
                    }
                }
            }
        }
        out
    }
}

/// Ranks with ties sharing their average rank, 1-based.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks. `None` for fewer than two
/// points or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Greedy-answer correctness, sharded across threads over a shared model.
pub fn outcomes_sharded<T: Float>(
    model: &ModelState<T>,
    problems: &[Problem],
    window: Option<usize>,
    threads: usize,
) -> Result<Vec<bool>> {
    let threads = threads.max(1).min(problems.len().max(1));
    if threads == 1 {
        return outcomes(model, problems, window);
    }
    let shard = problems.len().div_ceil(threads);
    thread::scope(|s| {
        let handles: Vec<_> =
            problems.chunks(shard).map(|chunk| s.spawn(move || outcomes(model, chunk, window))).collect();
        let mut out = Vec::with_capacity(problems.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Contract("evaluation worker panicked".into()))??);
        }
        Ok(out)
    })
}

fn default_threads() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn orders_present(problems: &[Problem]) -> Vec<OrderMode> {
    let set: BTreeSet<OrderMode> = problems.iter().map(|p| p.order_mode).collect();
    set.into_iter().collect()
}

/// Build the matrix from per-problem outcomes.
pub fn tabulate(
    problems: &[Problem],
    correct: &[bool],
    breakdown: Breakdown,
    columns: &[usize],
    orders: &[OrderMode],
) -> Vec<Row> {
    orders
        .iter()
        .map(|&order| {
            let cells = columns
                .iter()
                .map(|&col| {
                    let (mut n, mut ok) = (0, 0);
                    for (p, &c) in problems.iter().zip(correct) {
                        let key = match breakdown {
                            Breakdown::NSteps => p.n_steps(),
                            Breakdown::NVas => p.n_vas(),
                        };
                        if p.order_mode == order && key == col {
                            n += 1;
                            ok += c as usize;
                        }
                    }
                    (n > 0).then(|| Cell { n, correct: ok, accuracy: ok as f64 / n as f64 })
                })
                .collect();
            Row { order_mode: order, cells }
        })
        .collect()
}

/// Accuracy by order mode and step count over every problem given.
pub fn table_by_step<T: Float>(
    model: &ModelState<T>,
    problems: &[Problem],
    window: Option<usize>,
    provenance: Provenance,
) -> Result<Report> {
    if problems.is_empty() {
        return Err(Error::Contract("table_by_step needs at least one problem".into()));
    }
    let correct = outcomes_sharded(model, problems, window, default_threads())?;
    let columns: Vec<usize> = problems.iter().map(Problem::n_steps).collect::<BTreeSet<_>>().into_iter().collect();
    let orders = orders_present(problems);
    Ok(Report {
        experiment: "accuracy_by_step".into(),
        provenance,
        breakdown: Breakdown::NSteps,
        n_steps: None,
        window,
        min_cell_count: 1,
        rows: tabulate(problems, &correct, Breakdown::NSteps, &columns, &orders),
        columns,
    })
}

/// Instances missing from one (order, VAS count) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDeficit {
    pub order_mode: OrderMode,
    pub n_vas: usize,
    pub have: usize,
    pub missing: usize,
}

/// Cells of the `n_steps` slice that hold fewer than `min_per_cell` problems.
pub fn vas_deficit(
    problems: &[Problem],
    n_steps: usize,
    min_per_cell: usize,
    orders: &[OrderMode],
) -> Vec<CellDeficit> {
    let mut out = Vec::new();
    for &order in orders {
        for v in 0..n_steps {
            let have =
                problems.iter().filter(|p| p.n_steps() == n_steps && p.order_mode == order && p.n_vas() == v).count();
            if have < min_per_cell {
                out.push(CellDeficit { order_mode: order, n_vas: v, have, missing: min_per_cell - have });
            }
        }
    }
    out
}

/// Accuracy by order mode and VAS count for `n_steps`-step problems. Every
/// `(order, n_vas)` cell with `n_vas < n_steps` must hold at least
/// `min_per_cell` problems; otherwise nothing is evaluated and the error
/// lists each cell's exact deficit.
pub fn table_by_vas<T: Float>(
    model: &ModelState<T>,
    problems: &[Problem],
    n_steps: usize,
    min_per_cell: usize,
    window: Option<usize>,
    provenance: Provenance,
) -> Result<Report> {
    if n_steps < 2 {
        return Err(Error::Config("VAS tables need at least 2 steps".into()));
    }
    let slice: Vec<Problem> = problems.iter().filter(|p| p.n_steps() == n_steps).cloned().collect();
    let orders = orders_present(&slice);
    if orders.is_empty() {
        return Err(Error::Exhausted(format!("no {n_steps}-step problems to stratify")));
    }
    let deficit = vas_deficit(&slice, n_steps, min_per_cell, &orders);
    if !deficit.is_empty() {
        let parts: Vec<String> = deficit
            .iter()
            .map(|d| format!("{} n_vas={}: have {}, need {} more", d.order_mode, d.n_vas, d.have, d.missing))
            .collect();
        return Err(Error::Exhausted(format!("{n_steps}-step VAS stratification short: {}", parts.join("; "))));
    }
    let correct = outcomes_sharded(model, &slice, window, default_threads())?;
    let columns: Vec<usize> = (0..n_steps).collect();
    Ok(Report {
        experiment: format!("accuracy_by_vas_{n_steps}step"),
        provenance,
        breakdown: Breakdown::NVas,
        n_steps: Some(n_steps),
        window,
        min_cell_count: min_per_cell,
        rows: tabulate(&slice, &correct, Breakdown::NVas, &columns, &orders),
        columns,
    })
}

/// Accuracy against attention window size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub provenance: Provenance,
    pub points: Vec<SweepPoint>,
}
