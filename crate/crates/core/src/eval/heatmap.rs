use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Min-max normalisation to `[0, 1]`; a constant list maps to all zeros.
pub fn normalize_attention(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Blue at 0, red at 1, linear in between.
pub fn heat_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    [(255.0 * v).round() as u8, 0, (255.0 * (1.0 - v)).round() as u8]
}

/// One instance to draw: its scale, grid cell and raw attention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatCell {
    pub scale: usize,
    pub position: Option<(usize, usize)>,
    pub attention: f64,
}

/// RGB raster of one bag at one scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub scale: usize,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    /// Normalised value of every drawn instance, in input order.
    pub values: Vec<f64>,
}

/// Draws a bag's attentions on a `grid = (rows, cols)` canvas with square
/// cells of `cell_px` pixels. Attentions are normalised over the whole bag,
/// then one raster is produced per scale. Where cells coincide the later
/// instance wins.
pub fn render_attention_heatmap(cells: &[HeatCell], grid: (usize, usize), cell_px: usize) -> Result<Vec<Heatmap>> {
    if cells.is_empty() {
        return Err(Error::Argument("heatmap of an empty bag".into()));
    }
    if cell_px == 0 || grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Argument(format!("bad heatmap geometry {grid:?} with {cell_px}px cells")));
    }
    let norm = normalize_attention(&cells.iter().map(|c| c.attention).collect::<Vec<_>>());
    let (width, height) = (grid.1 * cell_px, grid.0 * cell_px);
    let mut maps: BTreeMap<usize, Heatmap> = BTreeMap::new();
    for (cell, &v) in cells.iter().zip(&norm) {
        let (row, col) = cell
            .position
            .ok_or_else(|| Error::Data("instance has no grid position; cannot place it on a heatmap".into()))?;
        if row >= grid.0 || col >= grid.1 {
            return Err(Error::Data(format!("grid cell ({row}, {col}) outside a {grid:?} grid")));
        }
        let map = maps.entry(cell.scale).or_insert_with(|| Heatmap {
            scale: cell.scale,
            width,
            height,
            rgb: BACKGROUND.repeat(width * height),
            values: Vec::new(),
        });
        map.values.push(v);
        let color = heat_color(v);
        for y in row * cell_px..(row + 1) * cell_px {
            for x in col * cell_px..(col + 1) * cell_px {
                let i = (y * width + x) * 3;
                map.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }
    Ok(maps.into_values().collect())
}
