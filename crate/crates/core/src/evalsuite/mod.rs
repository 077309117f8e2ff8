// SPDX-License-Identifier: MIT OR Apache-2.0

//! Accuracy tables by step count and by variable-as-subtrahend count,
//! window sweeps, and CSV/SVG exports of every experiment artifact.

mod export;
mod report;

pub use export::{
    export_curves, grid_csv, load_artifact, report_csv, report_svg, report_text, sweep_csv, sweep_svg, train_log_csv,
    train_log_svg, vas_comparison_csv, vas_comparison_svg, Artifact,
};
pub use report::{
    average_ranks, outcomes_sharded, sha256_file, spearman, table_by_step, table_by_vas, tabulate, vas_deficit,
    Breakdown, Cell, CellDeficit, Provenance, Report, Row, SweepCurve, MIN_CELL_COUNT,
};
