//! Domain types shared across the toolkit.
//!
//! Coordinates follow raster conventions: `x` is the column index, `y` the row
//! index, and the origin sits at the centre of the top-left pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel floating-point raster stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite pixel at ({}, {})",
                i % width.max(1),
                i / width.max(1)
            )));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Panics if `value` is not finite.
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        GrayImage {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        self.data.iter().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

/// Three-channel raster with every component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<[f32; 3]>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|px| px.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::InvalidValue(format!(
                "color component outside [0, 1] at ({}, {})",
                i % width.max(1),
                i / width.max(1)
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    /// Extracts one channel (0 = R, 1 = G, 2 = B) as a gray image.
    pub fn channel(&self, c: usize) -> GrayImage {
        assert!(c < 3, "channel index {c} out of range");
        GrayImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|px| px[c]).collect(),
        }
    }
}

/// One annotated cell: centroid plus axis-aligned extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CellAnnotation {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let cell = CellAnnotation { cx, cy, w, h };
        cell.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidValue("non-finite cell annotation".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidValue(format!(
                "cell extent must be positive, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Bounding box in top-left + size form.
    pub fn to_box(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - self.w / 2.0,
            y_min: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }
}

/// Axis-aligned box given by its top-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_min + self.w).min(other.x_min + other.w) - self.x_min.max(other.x_min);
        let iy = (self.y_min + self.h).min(other.y_min + other.h) - self.y_min.max(other.y_min);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// A scored bounding box produced by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x_min: f64,
    pub y_min: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if ![self.x_min, self.y_min, self.w, self.h, self.score]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidValue("non-finite detection".into()));
        }
        if self.w < 0.0 || self.h < 0.0 {
            return Err(Error::InvalidValue(format!(
                "negative box extent w={} h={}",
                self.w, self.h
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidValue(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        Ok(())
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min,
            y_min: self.y_min,
            w: self.w,
            h: self.h,
        }
    }
}

/// Training target triple: centroid heatmap plus the two size maps.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub heatmap: GrayImage,
    pub height_map: GrayImage,
    pub width_map: GrayImage,
    pub reference_side: u32,
}

impl TargetMaps {
    pub fn new(
        heatmap: GrayImage,
        height_map: GrayImage,
        width_map: GrayImage,
        reference_side: u32,
    ) -> Result<Self> {
        if heatmap.dims() != height_map.dims() || heatmap.dims() != width_map.dims() {
            return Err(Error::DimensionMismatch(
                "heatmap and size maps must share dimensions".into(),
            ));
        }
        if reference_side == 0 {
            return Err(Error::InvalidParameter(
                "reference side must be positive".into(),
            ));
        }
        Ok(TargetMaps {
            heatmap,
            height_map,
            width_map,
            reference_side,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.heatmap.dims()
    }
}

/// Depth-major stack of equally sized slices.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeStack {
    slices: Vec<GrayImage>,
}

impl VolumeStack {
    pub fn new(slices: Vec<GrayImage>) -> Result<Self> {
        let first = slices.first().ok_or_else(|| {
            Error::InvalidParameter("volume must contain at least one slice".into())
        })?;
        let dims = first.dims();
        if let Some(z) = slices.iter().position(|s| s.dims() != dims) {
            return Err(Error::DimensionMismatch(format!(
                "slice {z} is {:?}, expected {dims:?}",
                slices[z].dims()
            )));
        }
        Ok(VolumeStack { slices })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices[0].dims()
    }

    pub fn slice(&self, z: usize) -> &GrayImage {
        &self.slices[z]
    }

    pub fn slices(&self) -> &[GrayImage] {
        &self.slices
    }
}
