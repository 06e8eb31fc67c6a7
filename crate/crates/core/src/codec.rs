//! Target encoding (annotations to heatmap + size maps) and decoding
//! (maps to scored boxes).
//!
//! Encoding: every cell is rasterized as a filled ellipse, smoothed with a
//! normalized box filter whose size is `(w // 1.5, h // 1.5)`, and the smoothed
//! per-cell maps are merged by pixelwise maximum. Size maps hold `w / side` and
//! `h / side` inside a rectangle covering half of each cell dimension.
//!
//! Decoding: threshold the heatmap (strict `>`), label 8-connected blobs, take
//! each blob's moment centroid and read the size maps at the nearest pixel.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CellAnnotation, Detection, GrayImage, TargetMaps};

pub const DEFAULT_THRESHOLD: f32 = 0.75;
pub const DEFAULT_REFERENCE_SIDE: u32 = 384;

/// Inclusive pixel range `[lo, hi]` of an interval clipped to `[0, n)`.
fn pixel_span(center: f64, half: f64, n: usize) -> Option<(usize, usize)> {
    if n == 0 {
        return None;
    }
    let lo = (center - half).ceil().max(0.0);
    let hi = (center + half).floor().min((n - 1) as f64);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

#[inline]
fn inside_ellipse(cell: &CellAnnotation, x: usize, y: usize) -> bool {
    let dx = (x as f64 - cell.cx) / (cell.w / 2.0);
    let dy = (y as f64 - cell.cy) / (cell.h / 2.0);
    dx * dx + dy * dy <= 1.0
}

/// Clipped ellipse raster of one cell, as a mask over its bounding box.
struct EllipsePatch {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    mask: Vec<bool>,
}

impl EllipsePatch {
    fn new(cell: &CellAnnotation, height: usize, width: usize) -> Option<Self> {
        let (x0, x1) = pixel_span(cell.cx, cell.w / 2.0, width)?;
        let (y0, y1) = pixel_span(cell.cy, cell.h / 2.0, height)?;
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut mask = Vec::with_capacity(w * h);
        for y in y0..=y1 {
            for x in x0..=x1 {
                mask.push(inside_ellipse(cell, x, y));
            }
        }
        mask.iter()
            .any(|&m| m)
            .then_some(EllipsePatch { x0, y0, w, h, mask })
    }
}

/// Pixels `(x, y)` covered by a cell's ellipse, clipped to the raster.
pub fn ellipse_pixels(cell: &CellAnnotation, height: usize, width: usize) -> Vec<(usize, usize)> {
    let Some(p) = EllipsePatch::new(cell, height, width) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for dy in 0..p.h {
        for dx in 0..p.w {
            if p.mask[dy * p.w + dx] {
                out.push((p.x0 + dx, p.y0 + dy));
            }
        }
    }
    out
}

pub fn render_ellipse_map(cells: &[CellAnnotation], height: usize, width: usize) -> GrayImage {
    let mut data = vec![0.0f32; height * width];
    for cell in cells {
        for (x, y) in ellipse_pixels(cell, height, width) {
            data[y * width + x] = 1.0;
        }
    }
    GrayImage::new(height, width, data).expect("ellipse map dimensions")
}

/// Box filter size `(floor(w / 1.5), floor(h / 1.5))`, each at least 1.
pub fn box_kernel(w: f64, h: f64) -> (usize, usize) {
    let k = |d: f64| ((d / 1.5).floor() as usize).max(1);
    (k(w), k(h))
}

/// Box-filtered ellipse of one cell: fraction of the `kw x kh` window (anchored
/// at `floor(k / 2)`) covered by the ellipse, evaluated wherever it is nonzero.
/// Calls `emit(x, y, value)` for each such pixel.
fn smoothed_cell(
    cell: &CellAnnotation,
    height: usize,
    width: usize,
    mut emit: impl FnMut(usize, usize, f32),
) {
    let Some(p) = EllipsePatch::new(cell, height, width) else {
        return;
    };
    let (kw, kh) = box_kernel(cell.w, cell.h);
    let (ax, ay) = (kw / 2, kh / 2);

    // summed-area table over the patch, one row/column of zero padding
    let stride = p.w + 1;
    let mut sat = vec![0u32; stride * (p.h + 1)];
    for y in 0..p.h {
        let mut row = 0u32;
        for x in 0..p.w {
            row += p.mask[y * p.w + x] as u32;
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    // count of patch pixels in patch-relative [xa, xb) x [ya, yb), clipped
    let count = |xa: i64, xb: i64, ya: i64, yb: i64| -> u32 {
        let cx = |v: i64| v.clamp(0, p.w as i64) as usize;
        let cy = |v: i64| v.clamp(0, p.h as i64) as usize;
        let (xa, xb, ya, yb) = (cx(xa), cx(xb), cy(ya), cy(yb));
        if xa >= xb || ya >= yb {
            return 0;
        }
        sat[yb * stride + xb] + sat[ya * stride + xa]
            - sat[ya * stride + xb]
            - sat[yb * stride + xa]
    };

    let norm = (kw * kh) as f64;
    // output pixel x sees window [x - ax, x - ax + kw); nonzero range follows
    let ox0 = (p.x0 + ax).saturating_sub(kw - 1);
    let ox1 = (p.x0 + p.w - 1 + ax).min(width - 1);
    let oy0 = (p.y0 + ay).saturating_sub(kh - 1);
    let oy1 = (p.y0 + p.h - 1 + ay).min(height - 1);
    for y in oy0..=oy1 {
        let ya = y as i64 - ay as i64 - p.y0 as i64;
        for x in ox0..=ox1 {
            let xa = x as i64 - ax as i64 - p.x0 as i64;
            let n = count(xa, xa + kw as i64, ya, ya + kh as i64);
            if n > 0 {
                emit(x, y, (n as f64 / norm) as f32);
            }
        }
    }
}

pub fn encode_centroid_heatmap(cells: &[CellAnnotation], height: usize, width: usize) -> GrayImage {
    let merge = |mut acc: Vec<f32>, cell: &CellAnnotation| {
        smoothed_cell(cell, height, width, |x, y, v| {
            let px = &mut acc[y * width + x];
            if v > *px {
                *px = v;
            }
        });
        acc
    };
    let data = cells
        .par_iter()
        .fold(|| vec![0.0f32; height * width], merge)
        .reduce(
            || vec![0.0f32; height * width],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = x.max(y));
                a
            },
        );
    GrayImage::new(height, width, data).expect("heatmap dimensions")
}

/// Returns `(width_map, height_map)`. Later cells overwrite earlier ones.
pub fn encode_size_maps(
    cells: &[CellAnnotation],
    height: usize,
    width: usize,
    reference_side: u32,
) -> (GrayImage, GrayImage) {
    let side = reference_side as f64;
    let mut wmap = vec![0.0f32; height * width];
    let mut hmap = vec![0.0f32; height * width];
    for cell in cells {
        // half-open [c - d/4, c + d/4) along each axis
        let span = |c: f64, d: f64, n: usize| -> Option<(usize, usize)> {
            let lo = (c - d / 4.0).ceil().max(0.0);
            let hi = ((c + d / 4.0).ceil() - 1.0).min(n as f64 - 1.0);
            (lo <= hi).then_some((lo as usize, hi as usize))
        };
        let (Some((x0, x1)), Some((y0, y1))) =
            (span(cell.cx, cell.w, width), span(cell.cy, cell.h, height))
        else {
            continue;
        };
        let (wv, hv) = ((cell.w / side) as f32, (cell.h / side) as f32);
        for y in y0..=y1 {
            wmap[y * width + x0..=y * width + x1].fill(wv);
            hmap[y * width + x0..=y * width + x1].fill(hv);
        }
    }
    (
        GrayImage::new(height, width, wmap).expect("size map dimensions"),
        GrayImage::new(height, width, hmap).expect("size map dimensions"),
    )
}

pub fn encode_targets(
    cells: &[CellAnnotation],
    height: usize,
    width: usize,
    reference_side: u32,
) -> Result<TargetMaps> {
    for (i, c) in cells.iter().enumerate() {
        c.validate().map_err(|e| Error::InvalidRecord {
            position: format!("cell {i}"),
            reason: e.to_string(),
        })?;
    }
    let heatmap = encode_centroid_heatmap(cells, height, width);
    let (width_map, height_map) = encode_size_maps(cells, height, width, reference_side);
    TargetMaps::new(heatmap, height_map, width_map, reference_side)
}

/// Boolean raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(BinaryMap {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

pub fn threshold_heatmap(heatmap: &GrayImage, t: f32) -> BinaryMap {
    BinaryMap {
        height: heatmap.height(),
        width: heatmap.width(),
        data: heatmap.data().iter().map(|&v| v > t).collect(),
    }
}

/// One connected component with its raw image moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(usize, usize)>,
    pub m00: f64,
    pub m10: f64,
    pub m01: f64,
}

impl Blob {
    pub fn from_pixels(pixels: Vec<(usize, usize)>) -> Self {
        let m10 = pixels.iter().map(|&(x, _)| x as f64).sum();
        let m01 = pixels.iter().map(|&(_, y)| y as f64).sum();
        Blob {
            m00: pixels.len() as f64,
            m10,
            m01,
            pixels,
        }
    }
}

/// 8-connected components in raster order of their first pixel.
pub fn connected_components(map: &BinaryMap) -> Vec<Blob> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !map.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if map.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        blobs.push(Blob::from_pixels(pixels));
    }
    blobs
}

/// Moment centroid `(M10 / M00, M01 / M00)`.
pub fn blob_centroid(blob: &Blob) -> Result<(f64, f64)> {
    if blob.m00 <= 0.0 {
        return Err(Error::InvalidValue("centroid of an empty blob".into()));
    }
    Ok((blob.m10 / blob.m00, blob.m01 / blob.m00))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub detections: Vec<Detection>,
    /// Size lookups whose rounded centroid fell outside the maps and was clamped.
    pub clamped_lookups: usize,
}

pub fn decode_detections(
    maps: &TargetMaps,
    image_height: usize,
    image_width: usize,
    t: f32,
) -> Result<Decoded> {
    let (h, w) = maps.dims();
    if h == 0 || w == 0 {
        return Ok(Decoded {
            detections: Vec::new(),
            clamped_lookups: 0,
        });
    }
    let blobs = connected_components(&threshold_heatmap(&maps.heatmap, t));
    let decoded: Vec<(Detection, bool)> = blobs
        .par_iter()
        .map(|blob| {
            let (cx, cy) = blob_centroid(blob)?;
            let (rx, ry) = (cx.round(), cy.round());
            let px = rx.clamp(0.0, (w - 1) as f64);
            let py = ry.clamp(0.0, (h - 1) as f64);
            let clamped = px != rx || py != ry;
            let (px, py) = (px as usize, py as usize);
            let bw = maps.width_map.get(px, py).max(0.0) as f64 * image_width as f64;
            let bh = maps.height_map.get(px, py).max(0.0) as f64 * image_height as f64;
            let peak = blob
                .pixels
                .iter()
                .map(|&(x, y)| maps.heatmap.get(x, y))
                .fold(f32::NEG_INFINITY, f32::max);
            let det = Detection {
                x_min: cx - bw / 2.0,
                y_min: cy - bh / 2.0,
                w: bw,
                h: bh,
                score: (peak as f64).clamp(0.0, 1.0),
            };
            Ok((det, clamped))
        })
        .collect::<Result<_>>()?;
    let clamped_lookups = decoded.iter().filter(|(_, c)| *c).count();
    Ok(Decoded {
        detections: decoded.into_iter().map(|(d, _)| d).collect(),
        clamped_lookups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(cx: f64, cy: f64, w: f64, h: f64) -> CellAnnotation {
        CellAnnotation::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(box_kernel(30.0, 30.0), (20, 20));
        assert_eq!(box_kernel(1.0, 1.0), (1, 1));
        assert_eq!(box_kernel(40.0, 20.0), (26, 13));
    }

    #[test]
    fn unit_disk_ellipse() {
        let map = render_ellipse_map(&[cell(10.0, 10.0, 2.0, 2.0)], 20, 20);
        let on: Vec<_> = (0..400)
            .filter(|&i| map.data()[i] == 1.0)
            .map(|i| (i % 20, i / 20))
            .collect();
        assert_eq!(on, vec![(10, 9), (9, 10), (10, 10), (11, 10), (10, 11)]);
        assert!(render_ellipse_map(&[], 5, 5)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn disk_area_close_to_pi_r2() {
        let map = render_ellipse_map(&[cell(192.0, 192.0, 30.0, 30.0)], 384, 384);
        let n = map.data().iter().filter(|&&v| v == 1.0).count() as f64;
        assert!((n - std::f64::consts::PI * 225.0).abs() <= 30.0, "area {n}");
    }

    #[test]
    fn ellipse_clipped_at_border() {
        let map = render_ellipse_map(&[cell(0.0, 0.0, 10.0, 10.0)], 20, 20);
        assert_eq!(map.get(0, 0), 1.0);
        assert_eq!(map.get(5, 0), 1.0);
        assert_eq!(map.get(6, 0), 0.0);
    }

    #[test]
    fn heatmap_peak_at_centroid() {
        let heat = encode_centroid_heatmap(&[cell(100.0, 100.0, 30.0, 30.0)], 200, 200);
        assert_eq!(heat.get(100, 100), 1.0);
        assert!(heat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(encode_centroid_heatmap(&[], 8, 8)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_matches_direct_convolution() {
        let cells = [cell(12.3, 9.7, 13.0, 9.0), cell(0.5, 18.0, 8.0, 11.0)];
        let heat = encode_centroid_heatmap(&cells, 24, 30);
        for y in 0..24 {
            for x in 0..30 {
                let mut best = 0.0f32;
                for c in &cells {
                    let (kw, kh) = box_kernel(c.w, c.h);
                    let mut n = 0;
                    for wy in 0..kh {
                        for wx in 0..kw {
                            let sx = x as i64 - (kw / 2) as i64 + wx as i64;
                            let sy = y as i64 - (kh / 2) as i64 + wy as i64;
                            if sx >= 0
                                && sy >= 0
                                && sx < 30
                                && sy < 24
                                && inside_ellipse(c, sx as usize, sy as usize)
                            {
                                n += 1;
                            }
                        }
                    }
                    best = best.max((n as f64 / (kw * kh) as f64) as f32);
                }
                assert_eq!(heat.get(x, y), best, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn size_map_rectangle() {
        let (wmap, hmap) = encode_size_maps(&[cell(100.0, 150.0, 40.0, 20.0)], 384, 384, 384);
        let expected = (40.0f64 / 384.0) as f32;
        let filled: Vec<_> = (0..384 * 384).filter(|&i| wmap.data()[i] != 0.0).collect();
        assert_eq!(filled.len(), 20 * 10);
        assert!(filled.iter().all(|&i| wmap.data()[i] == expected));
        assert!((expected as f64 - 0.104167).abs() < 1e-6);
        assert_eq!(hmap.get(100, 150), (20.0f64 / 384.0) as f32);
        assert_eq!(
            (wmap.get(90, 145), wmap.get(109, 154)),
            (expected, expected)
        );
        assert_eq!((wmap.get(89, 145), wmap.get(110, 154)), (0.0, 0.0));

        let (_, hmap) = encode_size_maps(&[cell(192.0, 192.0, 10.0, 384.0)], 384, 384, 384);
        assert_eq!(hmap.get(192, 192), 1.0);
    }

    #[test]
    fn size_maps_last_writer_wins() {
        let cells = [cell(10.0, 10.0, 20.0, 20.0), cell(12.0, 10.0, 8.0, 8.0)];
        let (wmap, _) = encode_size_maps(&cells, 30, 30, 384);
        assert_eq!(wmap.get(12, 10), (8.0f64 / 384.0) as f32);
        assert_eq!(wmap.get(6, 10), (20.0f64 / 384.0) as f32);
    }

    #[test]
    fn threshold_is_strict() {
        let heat = GrayImage::new(1, 3, vec![0.75, 0.76, 0.0]).unwrap();
        assert_eq!(
            threshold_heatmap(&heat, 0.75).data,
            vec![false, true, false]
        );
    }

    #[test]
    fn components_use_eight_connectivity() {
        let map = BinaryMap::new(2, 2, vec![true, false, false, true]).unwrap();
        assert_eq!(connected_components(&map).len(), 1);
        assert!(connected_components(&BinaryMap::new(3, 3, vec![false; 9]).unwrap()).is_empty());
        let square = BinaryMap::new(
            7,
            7,
            (0..49)
                .map(|i| (1..6).contains(&(i % 7)) && (1..6).contains(&(i / 7)))
                .collect(),
        )
        .unwrap();
        let blobs = connected_components(&square);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].m00, 25.0);
    }

    #[test]
    fn centroids() {
        let block: Vec<_> = (4..=6)
            .flat_map(|y| (9..=11).map(move |x| (x, y)))
            .collect();
        assert_eq!(
            blob_centroid(&Blob::from_pixels(block)).unwrap(),
            (10.0, 5.0)
        );
        assert_eq!(
            blob_centroid(&Blob::from_pixels(vec![(7, 2)])).unwrap(),
            (7.0, 2.0)
        );
        let (x, y) = blob_centroid(&Blob::from_pixels(vec![(0, 0), (1, 0), (0, 1)])).unwrap();
        assert!((x - 1.0 / 3.0).abs() < 1e-12 && (y - 1.0 / 3.0).abs() < 1e-12);
        assert!(blob_centroid(&Blob::from_pixels(vec![])).is_err());
    }

    #[test]
    fn decode_single_cell() {
        let maps = encode_targets(&[cell(100.0, 150.0, 40.0, 20.0)], 384, 384, 384).unwrap();
        let out = decode_detections(&maps, 384, 384, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.clamped_lookups, 0);
        let d = out.detections[0];
        assert!((d.x_min + d.w / 2.0 - 100.0).abs() <= 1.0);
        assert!((d.y_min + d.h / 2.0 - 150.0).abs() <= 1.0);
        assert!((d.w - 40.0).abs() < 1e-4 && (d.h - 20.0).abs() < 1e-4);
        assert!((d.x_min - 80.0).abs() <= 1.0 && (d.y_min - 140.0).abs() <= 1.0);
        assert_eq!(d.score, 1.0);
    }

    #[test]
    fn decode_empty_and_two_cells() {
        let maps = encode_targets(&[], 64, 64, 384).unwrap();
        assert!(decode_detections(&maps, 64, 64, 0.75)
            .unwrap()
            .detections
            .is_empty());
        let cells = [cell(50.0, 50.0, 30.0, 30.0), cell(200.0, 220.0, 24.0, 40.0)];
        let maps = encode_targets(&cells, 384, 384, 384).unwrap();
        assert_eq!(
            decode_detections(&maps, 384, 384, 0.75)
                .unwrap()
                .detections
                .len(),
            2
        );
    }
}
