//! Raster file formats: Portable FloatMap (read/write), PNG and TIFF (read),
//! plus 8/16-bit PNG export for previews.
//!
//! PFM payloads are little-endian `f32` (scale `-1.0`) stored bottom row first.
//! Target maps are written as one 3-channel PFM in the channel order
//! (heatmap, height map, width map) with a JSON sidecar next to it.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::ColorType;

use crate::context::ContextTensor;
use crate::error::{Error, Result};
use crate::model::{GrayImage, RgbImage, TargetMaps, VolumeStack};

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Raw PFM raster: `channels` interleaved `f32` values per pixel, rows stored
/// top to bottom in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{magic}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row_len = self.width * self.channels;
        out.reserve(self.data.len() * 4);
        for row in (0..self.height).rev() {
            for v in &self.data[row * row_len..(row + 1) * row_len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        // Four whitespace-separated header tokens followed by exactly one
        // whitespace byte, then the payload.
        let mut tokens = Vec::with_capacity(4);
        let mut pos = 0;
        while tokens.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos || pos - start > 32 {
                return Err(Error::CorruptHeader("truncated PFM header".into()));
            }
            tokens.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::CorruptHeader("non-ASCII PFM header".into()))?,
            );
        }
        if pos >= bytes.len() {
            return Err(Error::CorruptHeader("missing PFM payload".into()));
        }
        pos += 1;

        let channels = match tokens[0] {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::UnsupportedFormat(format!("PFM magic {other:?}"))),
        };
        let parse_dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::CorruptHeader(format!("invalid PFM dimension {s:?}")))
        };
        let width = parse_dim(tokens[1])?;
        let height = parse_dim(tokens[2])?;
        let scale: f32 = tokens[3]
            .parse()
            .map_err(|_| Error::CorruptHeader(format!("invalid PFM scale {:?}", tokens[3])))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::CorruptHeader(format!("invalid PFM scale {scale}")));
        }
        let little_endian = scale < 0.0;

        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::CorruptHeader("PFM dimensions overflow".into()))?;
        let payload = &bytes[pos..];
        if payload.len() != count * 4 {
            return Err(Error::CorruptHeader(format!(
                "PFM payload has {} bytes, expected {}",
                payload.len(),
                count * 4
            )));
        }

        let row_len = width * channels;
        let mut data = vec![0.0f32; count];
        for (file_row, chunk) in payload.chunks_exact(row_len * 4).enumerate() {
            let row = height - 1 - file_row;
            for (i, b) in chunk.chunks_exact(4).enumerate() {
                let b = [b[0], b[1], b[2], b[3]];
                data[row * row_len + i] = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
            }
        }
        Ok(Pfm {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn into_gray(self) -> Result<GrayImage> {
        if self.channels != 1 {
            return Err(Error::NotGrayscale(self.channels));
        }
        GrayImage::new(self.height, self.width, self.data)
    }

    pub fn into_rgb(self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected a 3-channel PFM, found {} channel(s)",
                self.channels
            )));
        }
        let px = self
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        RgbImage::new(self.height, self.width, px)
    }

    /// Splits a 3-channel raster into its planes.
    pub fn into_planes(self) -> Result<Vec<GrayImage>> {
        (0..self.channels)
            .map(|c| {
                let plane = self
                    .data
                    .iter()
                    .skip(c)
                    .step_by(self.channels)
                    .copied()
                    .collect();
                GrayImage::new(self.height, self.width, plane)
            })
            .collect()
    }

    fn from_planes(planes: [&GrayImage; 3]) -> Pfm {
        let (height, width) = planes[0].dims();
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            for p in &planes {
                data.push(p.data()[i]);
            }
        }
        Pfm {
            width,
            height,
            channels: 3,
            data,
        }
    }
}

/// Rasters that serialize to PFM.
pub trait ToPfm {
    fn to_pfm(&self) -> Pfm;
}

impl ToPfm for GrayImage {
    fn to_pfm(&self) -> Pfm {
        Pfm {
            width: self.width(),
            height: self.height(),
            channels: 1,
            data: self.data().to_vec(),
        }
    }
}

impl ToPfm for RgbImage {
    fn to_pfm(&self) -> Pfm {
        Pfm {
            width: self.width(),
            height: self.height(),
            channels: 3,
            data: self.data().iter().flatten().copied().collect(),
        }
    }
}

impl ToPfm for TargetMaps {
    fn to_pfm(&self) -> Pfm {
        Pfm::from_planes([&self.heatmap, &self.height_map, &self.width_map])
    }
}

impl ToPfm for ContextTensor {
    fn to_pfm(&self) -> Pfm {
        Pfm::from_planes([&self.prev, &self.current, &self.next])
    }
}

/// Writes `bytes` through a temporary file in the target directory and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_pfm(image: &impl ToPfm, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &image.to_pfm().encode())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Pfm> {
    Pfm::decode(&read_bytes(path.as_ref())?)
}

/// Reads an 8/16-bit single-channel PNG, a single-channel TIFF (first page)
/// or a grayscale PFM. Integer codes are divided by their maximum code value.
pub fn read_gray_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode_gray(&bytes).map_err(|e| annotate(path, e))
}

fn annotate(path: &Path, err: Error) -> Error {
    match err {
        Error::CorruptHeader(m) => Error::CorruptHeader(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        Pfm::decode(bytes)?.into_gray()
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png_gray(bytes)
    } else if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
        let mut pages = decode_tiff_pages(bytes, 1)?;
        Ok(pages.remove(0))
    } else {
        Err(Error::UnsupportedFormat(
            "expected PNG, TIFF or PFM data".into(),
        ))
    }
}

fn decode_png_gray(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| (v as f64 / 65535.0) as f32)
            .collect(),
        other => return Err(Error::NotGrayscale(other.color().channel_count() as usize)),
    };
    GrayImage::new(h, w, data)
}

fn tiff_err(e: tiff::TiffError) -> Error {
    match e {
        tiff::TiffError::UnsupportedError(u) => Error::UnsupportedFormat(u.to_string()),
        other => Error::CorruptHeader(other.to_string()),
    }
}

/// Decodes up to `max_pages` single-channel TIFF pages.
fn decode_tiff_pages(bytes: &[u8], max_pages: usize) -> Result<Vec<GrayImage>> {
    let mut dec = Decoder::new(Cursor::new(bytes)).map_err(tiff_err)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(tiff_err)?;
        let channels = match dec.colortype().map_err(tiff_err)? {
            ColorType::Gray(_) => 1,
            ColorType::GrayA(_) => 2,
            ColorType::RGB(_) | ColorType::YCbCr(_) | ColorType::Lab(_) | ColorType::Palette(_) => {
                3
            }
            ColorType::RGBA(_) | ColorType::CMYK(_) => 4,
            ColorType::CMYKA(_) => 5,
            ColorType::Multiband { num_samples, .. } => num_samples as usize,
            _ => 0,
        };
        if channels != 1 {
            return Err(Error::NotGrayscale(channels));
        }
        let data: Vec<f32> = match dec.read_image().map_err(tiff_err)? {
            DecodingResult::U8(v) => v.into_iter().map(|c| c as f32 / 255.0).collect(),
            DecodingResult::U16(v) => v.into_iter().map(|c| (c as f64 / 65535.0) as f32).collect(),
            DecodingResult::F32(v) => v,
            _ => return Err(Error::UnsupportedFormat("TIFF sample type".into())),
        };
        pages.push(GrayImage::new(h as usize, w as usize, data)?);
        if pages.len() >= max_pages || !dec.more_images() {
            break;
        }
        dec.next_image().map_err(tiff_err)?;
    }
    Ok(pages)
}

/// Loads a volume from a multi-page TIFF, or from a directory of slice files
/// taken in lexicographic file-name order.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeStack> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_raster_file(p))
            .collect();
        files.sort();
        let slices = files
            .iter()
            .map(read_gray_image)
            .collect::<Result<Vec<_>>>()?;
        VolumeStack::new(slices)
    } else {
        let bytes = read_bytes(path)?;
        if bytes.starts_with(b"II*\0") || bytes.starts_with(b"MM\0*") {
            VolumeStack::new(decode_tiff_pages(&bytes, usize::MAX).map_err(|e| annotate(path, e))?)
        } else {
            VolumeStack::new(vec![decode_gray(&bytes).map_err(|e| annotate(path, e))?])
        }
    }
}

/// File extensions accepted as raster inputs in batch commands.
pub fn is_raster_file(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "tif" | "tiff" | "pfm")
    )
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn encode_png(img: DynamicImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Invariant(format!("PNG encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

/// Writes a gray image as 16-bit PNG, clamping to `[0, 1]`.
pub fn write_png16(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| quantize(v, 65535.0) as u16)
        .collect();
    let buf =
        ImageBuffer::<Luma<u16>, _>::from_raw(image.width() as u32, image.height() as u32, raw)
            .ok_or_else(|| Error::Invariant("PNG buffer size".into()))?;
    write_atomic(path.as_ref(), &encode_png(DynamicImage::ImageLuma16(buf))?)
}

/// Writes a gray image as 8-bit PNG, clamping to `[0, 1]`.
pub fn write_png8(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| quantize(v, 255.0) as u8)
        .collect();
    let buf =
        ImageBuffer::<Luma<u8>, _>::from_raw(image.width() as u32, image.height() as u32, raw)
            .ok_or_else(|| Error::Invariant("PNG buffer size".into()))?;
    write_atomic(path.as_ref(), &encode_png(DynamicImage::ImageLuma8(buf))?)
}

pub fn write_rgb_png8(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let raw: Vec<u8> = image
        .data()
        .iter()
        .flatten()
        .map(|&v| quantize(v, 255.0) as u8)
        .collect();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(image.width() as u32, image.height() as u32, raw)
        .ok_or_else(|| Error::Invariant("PNG buffer size".into()))?;
    write_atomic(path.as_ref(), &encode_png(DynamicImage::ImageRgb8(buf))?)
}

/// JSON sidecar stored next to a target-map PFM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSidecar {
    pub reference_side: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<i64>,
}

pub fn sidecar_path(pfm_path: &Path) -> PathBuf {
    pfm_path.with_extension("json")
}

pub fn write_target_maps(
    maps: &TargetMaps,
    image_id: Option<i64>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    write_pfm(maps, path)?;
    let sidecar = TargetSidecar {
        reference_side: maps.reference_side,
        image_id,
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Invariant(e.to_string()))?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_target_maps(path: impl AsRef<Path>) -> Result<(TargetMaps, TargetSidecar)> {
    let path = path.as_ref();
    let pfm = read_pfm(path).map_err(|e| annotate(path, e))?;
    if pfm.channels != 3 {
        return Err(Error::DimensionMismatch(format!(
            "{}: target maps need 3 channels, found {}",
            path.display(),
            pfm.channels
        )));
    }
    let side = sidecar_path(path);
    let sidecar: TargetSidecar = serde_json::from_slice(&read_bytes(&side)?)
        .map_err(|e| Error::Schema(format!("{}: {e}", side.display())))?;
    let mut planes = pfm.into_planes()?.into_iter();
    let (heat, height, width) = (planes.next(), planes.next(), planes.next());
    let maps = TargetMaps::new(
        heat.ok_or_else(|| Error::Invariant("missing plane".into()))?,
        height.ok_or_else(|| Error::Invariant("missing plane".into()))?,
        width.ok_or_else(|| Error::Invariant("missing plane".into()))?,
        sidecar.reference_side,
    )?;
    Ok((maps, sidecar))
}
