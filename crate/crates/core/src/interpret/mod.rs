// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching: corrupted pairs, patching-effect metrics, sliding
//! window grids over layers and positions, and attention-window sweeps.

mod grid;
mod metric;
mod pairs;
mod render;

pub use grid::{
    compare_fixed_varied, diagonal_stats, make_pairs, run_grid, step_boundaries, window_sweep, DiagonalStats,
    FixedVaried, PatchGrid, SweepPoint,
};
pub use metric::{patch_effect, Metric, RunLogits, DEGENERATE_EPS};
pub use pairs::{compensate, filter_combo, make_pair, CorruptionKind, CorruptionSpec, OperandCombo, PatchPair, Slot};
pub use render::{grid_svg, read_grid, write_grid};

#[cfg(test)]
mod tests;
