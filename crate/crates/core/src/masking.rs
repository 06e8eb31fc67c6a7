//! Binary masks for masked image modeling.
//!
//! The padded scheme tiles the image with square cells of side
//! `patch + 2 * padding` anchored at the origin. Each full cell is masked with
//! probability `mask_prob`; only its central `patch x patch` square is ever
//! masked, so masked patches are always separated by at least `2 * padding`
//! unmasked pixels. Partial cells along the right and bottom border stay
//! unmasked.
//!
//! The MAE-style scheme splits the image into a `grid x grid` layout and masks
//! an exact number of cells chosen uniformly without replacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    pub patch: usize,
    pub padding: usize,
    pub mask_prob: f64,
    pub fill_value: f32,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::with_patch(12)
    }
}

impl MaskSpec {
    /// Padding defaults to a quarter of the patch side.
    pub fn with_patch(patch: usize) -> Self {
        MaskSpec {
            patch,
            padding: patch / 4,
            mask_prob: 0.5,
            fill_value: 0.0,
            seed: 0,
        }
    }

    pub fn cell_side(&self) -> usize {
        self.patch + 2 * self.padding
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::InvalidParameter(
                "mask patch must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidParameter(format!(
                "mask probability {} outside [0, 1]",
                self.mask_prob
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::InvalidParameter("fill value must be finite".into()));
        }
        Ok(())
    }
}

/// Realized mask: per-cell decisions plus the full-resolution raster.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    cell_rows: usize,
    cell_cols: usize,
    cells: Vec<bool>,
    realized: Vec<bool>,
}

impl MaskGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of cell rows and columns that take part in masking.
    pub fn cell_layout(&self) -> (usize, usize) {
        (self.cell_rows, self.cell_cols)
    }

    pub fn cell_masked(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cell_cols + col]
    }

    pub fn masked_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    #[inline]
    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.realized[y * self.width + x]
    }

    pub fn realized(&self) -> &[bool] {
        &self.realized
    }

    pub fn masked_pixels(&self) -> usize {
        self.realized.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.realized.is_empty() {
            0.0
        } else {
            self.masked_pixels() as f64 / self.realized.len() as f64
        }
    }

    /// 1.0 where masked, 0.0 elsewhere.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .realized
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        GrayImage::new(self.height, self.width, data).expect("mask raster dimensions")
    }

    fn empty(height: usize, width: usize, cell_rows: usize, cell_cols: usize) -> Self {
        MaskGrid {
            height,
            width,
            cell_rows,
            cell_cols,
            cells: vec![false; cell_rows * cell_cols],
            realized: vec![false; height * width],
        }
    }

    fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize) {
        for y in y0..y1 {
            self.realized[y * self.width + x0..y * self.width + x1].fill(true);
        }
    }
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based uniform draw in `[0, 1)` for one mask cell.
///
/// `splitmix64(splitmix64(splitmix64(seed) ^ row) ^ col)`, top 53 bits scaled
/// by 2^-53. Each cell's draw depends only on `(seed, row, col)`. The mapping is
/// frozen: changing it changes every generated mask.
pub fn cell_uniform(seed: u64, row: u64, col: u64) -> f64 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ row) ^ col);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn build_padded_mask(height: usize, width: usize, spec: &MaskSpec) -> Result<MaskGrid> {
    spec.validate()?;
    let side = spec.cell_side();
    if height < side || width < side {
        return Err(Error::InvalidParameter(format!(
            "{height}x{width} image is smaller than one {side}x{side} mask cell"
        )));
    }
    let (rows, cols) = (height / side, width / side);
    let mut grid = MaskGrid::empty(height, width, rows, cols);
    for row in 0..rows {
        for col in 0..cols {
            if cell_uniform(spec.seed, row as u64, col as u64) < spec.mask_prob {
                grid.cells[row * cols + col] = true;
                let x0 = col * side + spec.padding;
                let y0 = row * side + spec.padding;
                grid.fill_rect(x0, y0, x0 + spec.patch, y0 + spec.patch);
            }
        }
    }
    Ok(grid)
}

pub fn build_mae_mask(
    height: usize,
    width: usize,
    grid: usize,
    ratio: f64,
    seed: u64,
) -> Result<MaskGrid> {
    if grid == 0 {
        return Err(Error::InvalidParameter(
            "MAE grid must have at least one cell".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    if height < grid || width < grid {
        return Err(Error::InvalidParameter(format!(
            "{height}x{width} image cannot be split into {grid}x{grid} cells"
        )));
    }
    let total = grid * grid;
    let count = (ratio * total as f64).round() as usize;
    let mut out = MaskGrid::empty(height, width, grid, grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cell_h, cell_w) = (height / grid, width / grid);
    for idx in rand::seq::index::sample(&mut rng, total, count) {
        let (row, col) = (idx / grid, idx % grid);
        out.cells[idx] = true;
        // remainder pixels belong to the last row/column of cells
        let y1 = if row + 1 == grid {
            height
        } else {
            (row + 1) * cell_h
        };
        let x1 = if col + 1 == grid {
            width
        } else {
            (col + 1) * cell_w
        };
        out.fill_rect(col * cell_w, row * cell_h, x1, y1);
    }
    Ok(out)
}

pub fn apply_mask(img: &GrayImage, mask: &MaskGrid, fill: f32) -> Result<GrayImage> {
    if img.dims() != (mask.height, mask.width) {
        return Err(Error::DimensionMismatch(format!(
            "image {:?} vs mask {:?}",
            img.dims(),
            (mask.height, mask.width)
        )));
    }
    let data = img
        .data()
        .iter()
        .zip(&mask.realized)
        .map(|(&v, &m)| if m { fill } else { v })
        .collect();
    GrayImage::new(img.height(), img.width(), data)
}

/// Analytic expectation of the padded mask's masked-pixel fraction.
pub fn expected_mask_ratio(height: usize, width: usize, spec: &MaskSpec) -> f64 {
    let side = spec.cell_side();
    if height == 0 || width == 0 || side == 0 {
        return 0.0;
    }
    let full_cells = (height / side) * (width / side);
    spec.mask_prob * (spec.patch * spec.patch * full_cells) as f64 / (height * width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec() {
        let spec = MaskSpec::default();
        assert_eq!((spec.patch, spec.padding, spec.cell_side()), (12, 3, 18));
        assert_eq!(spec.mask_prob, 0.5);
        assert_eq!(spec.fill_value, 0.0);
    }

    #[test]
    fn cell_layout_for_360() {
        let grid = build_padded_mask(360, 360, &MaskSpec::default()).unwrap();
        assert_eq!(grid.cell_layout(), (20, 20));
        assert_eq!(grid.masked_pixels(), grid.masked_cells() * 144);
    }

    #[test]
    fn probability_extremes() {
        let spec = MaskSpec {
            mask_prob: 0.0,
            ..MaskSpec::default()
        };
        assert_eq!(
            build_padded_mask(100, 100, &spec).unwrap().masked_pixels(),
            0
        );
        let spec = MaskSpec {
            mask_prob: 1.0,
            ..MaskSpec::default()
        };
        let grid = build_padded_mask(100, 100, &spec).unwrap();
        // 5x5 full cells, 10 px border remainder left unmasked
        assert_eq!(grid.masked_pixels(), 25 * 144);
        assert!(!grid.is_masked(2, 2) && grid.is_masked(3, 3) && grid.is_masked(14, 14));
        assert!(!grid.is_masked(15, 15) && !grid.is_masked(95, 95));
    }

    #[test]
    fn too_small_for_one_cell() {
        assert!(build_padded_mask(17, 100, &MaskSpec::default()).is_err());
        assert!(build_padded_mask(18, 18, &MaskSpec::default()).is_ok());
    }

    #[test]
    fn invalid_spec() {
        let spec = MaskSpec {
            patch: 0,
            ..MaskSpec::default()
        };
        assert!(build_padded_mask(100, 100, &spec).is_err());
        let spec = MaskSpec {
            mask_prob: 1.5,
            ..MaskSpec::default()
        };
        assert!(build_padded_mask(100, 100, &spec).is_err());
    }

    #[test]
    fn mae_geometry_and_count() {
        let grid = build_mae_mask(224, 224, 14, 0.75, 7).unwrap();
        assert_eq!(grid.masked_cells(), 147);
        assert_eq!(grid.masked_pixels(), 147 * 16 * 16);
        assert_eq!(
            build_mae_mask(224, 224, 14, 0.0, 7)
                .unwrap()
                .masked_pixels(),
            0
        );
        assert_eq!(
            build_mae_mask(230, 225, 14, 1.0, 7)
                .unwrap()
                .masked_pixels(),
            230 * 225
        );
    }

    #[test]
    fn apply_sets_fill() {
        let img = GrayImage::filled(18, 18, 1.0);
        let spec = MaskSpec {
            mask_prob: 1.0,
            ..MaskSpec::default()
        };
        let grid = build_padded_mask(18, 18, &spec).unwrap();
        let out = apply_mask(&img, &grid, 0.0).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 144);

        let zero = GrayImage::zeros(18, 18);
        let out = apply_mask(&zero, &grid, 1.0).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 144);

        let none = build_padded_mask(
            18,
            18,
            &MaskSpec {
                mask_prob: 0.0,
                ..spec
            },
        )
        .unwrap();
        assert_eq!(apply_mask(&img, &none, 0.0).unwrap(), img);
        assert!(apply_mask(&GrayImage::zeros(19, 18), &grid, 0.0).is_err());
    }

    #[test]
    fn expected_ratios() {
        let spec = MaskSpec::default();
        assert!((expected_mask_ratio(360, 360, &spec) - 2.0 / 9.0).abs() < 1e-12);
        let r384 = 0.5 * 144.0 * 441.0 / (384.0 * 384.0);
        assert!((expected_mask_ratio(384, 384, &spec) - r384).abs() < 1e-12);
        assert!((r384 - 0.2153).abs() < 1e-4);
        assert_eq!(
            expected_mask_ratio(
                360,
                360,
                &MaskSpec {
                    mask_prob: 0.0,
                    ..spec
                }
            ),
            0.0
        );
    }

    #[test]
    fn cell_draw_is_frozen() {
        assert_eq!(cell_uniform(0, 0, 0), 0.13870941014555427);
        assert_eq!(cell_uniform(0, 0, 1), 0.18436667429957676);
        assert_eq!(cell_uniform(42, 3, 7), 0.6686949404958634);
    }
}
