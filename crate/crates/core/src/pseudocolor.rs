//! Colormap lookup tables and perceived-brightness analysis.
//!
//! The four built-in tables are sampled at 256 levels from matplotlib's
//! definitions (`scripts/gen_luts.py`) and embedded at compile time.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{GrayImage, RgbImage};

pub const LUT_SIZE: usize = 256;

pub const BUILTIN_COLORMAPS: [&str; 4] = ["rainbow", "seismic", "nipy_spectral", "viridis"];

const RAINBOW_CSV: &str = include_str!("../data/colormaps/rainbow.csv");
const SEISMIC_CSV: &str = include_str!("../data/colormaps/seismic.csv");
const NIPY_SPECTRAL_CSV: &str = include_str!("../data/colormaps/nipy_spectral.csv");
const VIRIDIS_CSV: &str = include_str!("../data/colormaps/viridis.csv");

/// Embedded CSV source of a built-in colormap.
pub fn builtin_csv(name: &str) -> Option<&'static str> {
    match name {
        "rainbow" => Some(RAINBOW_CSV),
        "seismic" => Some(SEISMIC_CSV),
        "nipy_spectral" => Some(NIPY_SPECTRAL_CSV),
        "viridis" => Some(VIRIDIS_CSV),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Colormap {
    name: String,
    lut: Vec<[f64; 3]>,
}

impl Colormap {
    pub fn from_lut(name: impl Into<String>, lut: Vec<[f64; 3]>) -> Result<Self> {
        if lut.len() != LUT_SIZE {
            return Err(Error::InvalidValue(format!(
                "colormap needs {LUT_SIZE} entries, got {}",
                lut.len()
            )));
        }
        if let Some(i) = lut
            .iter()
            .position(|e| e.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::InvalidValue(format!("LUT entry {i} outside [0, 1]")));
        }
        Ok(Colormap {
            name: name.into(),
            lut,
        })
    }

    /// Parses 256 rows of `r,g,b`.
    pub fn from_csv(name: impl Into<String>, csv_text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(csv_text.as_bytes());
        let mut lut = Vec::with_capacity(LUT_SIZE);
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Schema(format!("LUT row {row}: {e}")))?;
            if record.len() != 3 {
                return Err(Error::Schema(format!(
                    "LUT row {row}: expected 3 columns, found {}",
                    record.len()
                )));
            }
            let mut entry = [0.0; 3];
            for (c, field) in record.iter().enumerate() {
                entry[c] = field.parse().map_err(|_| {
                    Error::Schema(format!("LUT row {row}: invalid number {field:?}"))
                })?;
            }
            lut.push(entry);
        }
        Self::from_lut(name, lut)
    }

    /// Serializes with shortest round-trip float formatting, one row per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(LUT_SIZE * 48);
        for [r, g, b] in &self.lut {
            out.push_str(&format!("{r:?},{g:?},{b:?}\n"));
        }
        out
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom")
            .to_string();
        Self::from_csv(name, &text)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lut(&self) -> &[[f64; 3]] {
        &self.lut
    }

    pub fn entry(&self, i: usize) -> [f64; 3] {
        self.lut[i]
    }

    /// Nearest LUT entry for an intensity in `[0, 1]`.
    #[inline]
    pub fn lookup(&self, v: f32) -> [f64; 3] {
        self.lut[lut_index(v)]
    }
}

#[inline]
fn lut_index(v: f32) -> usize {
    ((v as f64) * (LUT_SIZE - 1) as f64).round() as usize
}

pub fn load_colormap(name: &str) -> Result<Colormap> {
    let csv_text = builtin_csv(name).ok_or_else(|| Error::UnknownColormap(name.to_string()))?;
    Colormap::from_csv(name, csv_text)
}

pub fn apply_colormap(img: &GrayImage, cmap: &Colormap) -> Result<RgbImage> {
    if let Some(i) = img.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidValue(format!(
            "intensity {} at ({}, {}) outside [0, 1]",
            img.data()[i],
            i % img.width(),
            i / img.width()
        )));
    }
    let data = img
        .data()
        .iter()
        .map(|&v| cmap.lookup(v).map(|c| c as f32))
        .collect();
    RgbImage::new(img.height(), img.width(), data)
}

/// HSP perceived brightness `sqrt(0.299 R² + 0.587 G² + 0.114 B²)`.
#[inline]
pub fn perceived_brightness([r, g, b]: [f64; 3]) -> f64 {
    (0.299 * r * r + 0.587 * g * g + 0.114 * b * b).sqrt()
}

pub fn brightness_curve(cmap: &Colormap) -> Vec<f64> {
    cmap.lut()
        .iter()
        .map(|&e| perceived_brightness(e))
        .collect()
}

/// Horizontal colour strip, `height` rows of the 256 LUT entries.
pub fn colormap_strip(cmap: &Colormap, height: usize) -> RgbImage {
    let row: Vec<[f32; 3]> = cmap.lut().iter().map(|e| e.map(|c| c as f32)).collect();
    let data = row
        .iter()
        .copied()
        .cycle()
        .take(row.len() * height)
        .collect();
    RgbImage::new(height, LUT_SIZE, data).expect("LUT entries are within [0, 1]")
}
