// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use super::grid::PatchGrid;
use crate::error::{Error, Result};
use crate::plot::heatmap;

/// Grid heatmap with layers on the vertical axis, layer 0 at the bottom.
pub fn grid_svg(grid: &PatchGrid) -> String {
    let title = format!(
        "{} patching, metric {}, window {}x{}, n={}",
        grid.component.as_str(),
        grid.metric.as_str(),
        grid.window.0,
        grid.window.1,
        grid.n
    );
    let rows: Vec<String> = (0..grid.n_layers()).map(|l| l.to_string()).collect();
    heatmap(&title, &grid.tokens, &rows, &grid.values)
}

/// Write `<stem>.json` and `<stem>.svg`.
pub fn write_grid(grid: &PatchGrid, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::taskgen::write_json(&dir.join(format!("{stem}.json")), grid)?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, grid_svg(grid)).map_err(|e| Error::io(&svg, e))
}

pub fn read_grid(path: &Path) -> Result<PatchGrid> {
    crate::taskgen::read_json(path)
}
