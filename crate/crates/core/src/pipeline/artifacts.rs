use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{ParamGroup, SensitivityReport};
use crate::error::{ensure, Error, Result};
use crate::glyphdata::GlyphImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, points: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,epoch,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.step, p.epoch, p.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: &str| Error::validation(format!("malformed loss row {line:?} in {}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(line));
            }
            Ok(LossPoint {
                step: f[0].parse().map_err(|_| bad(line))?,
                epoch: f[1].parse().map_err(|_| bad(line))?,
                loss: f[2].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

/// One grid cell: generated | target | source.
#[derive(Debug, Clone)]
pub struct Triptych {
    pub generated: GlyphImage,
    pub target: GlyphImage,
    pub source: GlyphImage,
}

const GAP: u32 = 2;
const SEPARATOR: u8 = 128;

/// Lays triptychs out `columns` to a row on a mid-grey canvas.
pub fn triptych_grid(cells: &[Triptych], columns: usize) -> Result<GrayImage> {
    ensure!(!cells.is_empty(), Validation, "no triptychs to draw");
    ensure!(columns >= 1, Validation, "grid needs at least one column");
    let s = cells[0].generated.size() as u32;
    for c in cells {
        for img in [&c.generated, &c.target, &c.source] {
            ensure!(img.size() as u32 == s, Validation, "triptych images must share one size");
        }
    }
    let cols = columns.min(cells.len()) as u32;
    let rows = cells.len().div_ceil(columns) as u32;
    let cell_w = 3 * s + 2 * GAP;
    let width = cols * cell_w + (cols + 1) * 2 * GAP;
    let height = rows * s + (rows + 1) * 2 * GAP;
    let mut canvas = GrayImage::from_pixel(width, height, Luma([SEPARATOR]));
    for (i, c) in cells.iter().enumerate() {
        let (r, k) = (i as u32 / cols, i as u32 % cols);
        let x0 = 2 * GAP + k * (cell_w + 2 * GAP);
        let y0 = 2 * GAP + r * (s + 2 * GAP);
        for (j, img) in [&c.generated, &c.target, &c.source].into_iter().enumerate() {
            let g = img.to_gray8();
            image::imageops::replace(&mut canvas, &g, (x0 + j as u32 * (s + GAP)) as i64, y0 as i64);
        }
    }
    Ok(canvas)
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

const PALETTE: [[u8; 3]; 4] = [[90, 90, 90], [214, 120, 40], [40, 110, 200], [60, 160, 80]];

/// Grouped bars of sensitivity ratios: one cluster per parameter group, one
/// bar per setting, with a rule at ratio 1.
pub fn bar_chart(report: &SensitivityReport) -> RgbImage {
    let (bar, gap, cluster_gap, height, margin) = (18u32, 4u32, 24u32, 240u32, 20u32);
    let settings: Vec<_> = report.ratios.keys().copied().collect();
    let groups = ParamGroup::ALL;
    let max = report
        .ratios
        .values()
        .flat_map(|m| m.values().copied())
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max)
        * 1.1;
    let per = settings.len() as u32 * (bar + gap);
    let width = 2 * margin + groups.len() as u32 * (per + cluster_gap);
    let mut img = RgbImage::from_pixel(width, height + 2 * margin, Rgb([255, 255, 255]));
    let base_y = margin + height;
    let y_of = |v: f64| base_y - ((v / max).clamp(0.0, 1.0) * height as f64).round() as u32;
    for (gi, g) in groups.iter().enumerate() {
        let x0 = margin + gi as u32 * (per + cluster_gap);
        for (si, s) in settings.iter().enumerate() {
            let v = report.ratios[s].get(g).copied().unwrap_or(0.0);
            let top = y_of(if v.is_finite() { v } else { 0.0 });
            let x = x0 + si as u32 * (bar + gap);
            let color = Rgb(PALETTE[si % PALETTE.len()]);
            for yy in top..base_y {
                for xx in x..x + bar {
                    img.put_pixel(xx, yy, color);
                }
            }
        }
    }
    let one = y_of(1.0);
    for x in margin / 2..width - margin / 2 {
        img.put_pixel(x, one, Rgb([0, 0, 0]));
        img.put_pixel(x, base_y, Rgb([0, 0, 0]));
    }
    img
}

pub fn save_bar_chart(report: &SensitivityReport, path: &Path) -> Result<()> {
    bar_chart(report).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let pts = vec![
            LossPoint { step: 0, epoch: 0, loss: 0.123456789012345 },
            LossPoint { step: 1, epoch: 0, loss: 1e-9 },
        ];
        write_loss_csv(&path, &pts).unwrap();
        assert_eq!(read_loss_csv(&path).unwrap(), pts);
    }

    #[test]
    fn grid_places_cells() {
        let a = GlyphImage::filled(4, 0.0, 1, 2).unwrap();
        let b = GlyphImage::filled(4, 1.0, 1, 2).unwrap();
        let cell = Triptych {
            generated: a.clone(),
            target: b.clone(),
            source: a,
        };
        let grid = triptych_grid(&[cell.clone(), cell.clone(), cell], 2).unwrap();
        let cell_w = 3 * 4 + 2 * GAP;
        assert_eq!(grid.width(), 2 * cell_w + 3 * 2 * GAP);
        assert_eq!(grid.height(), 2 * 4 + 3 * 2 * GAP);
        // generated cell of the first triptych is black, its target white
        assert_eq!(grid.get_pixel(2 * GAP, 2 * GAP)[0], 0);
        assert_eq!(grid.get_pixel(2 * GAP + 4 + GAP, 2 * GAP)[0], 255);
        // the unused last slot keeps the separator colour
        assert_eq!(grid.get_pixel(grid.width() - 3 * GAP, grid.height() - 3 * GAP)[0], SEPARATOR);
    }
}
