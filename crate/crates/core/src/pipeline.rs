//! Batch commands over files and directories.
//!
//! Every command is deterministic given its inputs, configuration and seed,
//! and writes only below its output location. Files are written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_detections, encode_targets, DEFAULT_REFERENCE_SIDE, DEFAULT_THRESHOLD};
use crate::context::{forward_volume, ContextWeights};
use crate::dataset::{
    read_annotations, read_detections, AnnotatedDataset, ImageDetections, ImageRecord,
};
use crate::error::{Error, Result};
use crate::io::{
    is_raster_file, read_gray_image, read_pfm, read_target_maps, read_volume, write_atomic,
    write_pfm, write_png16, write_png8, write_rgb_png8, write_target_maps,
};
use crate::masking::{
    apply_mask, build_mae_mask, build_padded_mask, expected_mask_ratio, splitmix64, MaskGrid,
    MaskSpec,
};
use crate::metrics::{
    coco_ap, miou_heatmap, per_image_summary, ssim, ApReport, ImageMatchSummary, ImageTruths,
};
use crate::model::{GrayImage, RgbImage};
use crate::preprocess::preprocess;
use crate::pseudocolor::{
    apply_colormap, brightness_curve, colormap_strip, load_colormap, Colormap,
};
use crate::synth::{generate_synthetic, SynthSpec};

/// Environment variable holding the default worker count.
pub const JOBS_ENV: &str = "PSEUDOCELL_JOBS";

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-item seed from the global seed and a relative path (FNV-1a of the
/// path bytes mixed with splitmix64).
pub fn derive_seed(global: u64, relative_path: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in relative_path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ splitmix64(h))
}

/// Worker count from `PSEUDOCELL_JOBS`, or `None` for the rayon default.
pub fn default_jobs() -> Option<usize> {
    std::env::var(JOBS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

fn run_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.or_else(default_jobs).unwrap_or(0))
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    write_atomic(path, &json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub colormap: String,
    /// Custom LUT CSV; overrides `colormap` when set.
    pub colormap_lut: Option<PathBuf>,
    /// Mask geometry; its `seed` field is replaced by the per-image seed.
    pub mask: MaskSpec,
    pub threshold: f32,
    pub reference_side: u32,
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            colormap: "nipy_spectral".into(),
            colormap_lut: None,
            mask: MaskSpec::default(),
            threshold: DEFAULT_THRESHOLD,
            reference_side: DEFAULT_REFERENCE_SIDE,
            input_dir: None,
            output_dir: None,
            seed: 0,
            jobs: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Schema(format!("pipeline config: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if self.reference_side == 0 {
            return Err(Error::InvalidParameter(
                "reference side must be positive".into(),
            ));
        }
        self.mask.validate()
    }

    pub fn load_colormap(&self) -> Result<Colormap> {
        match &self.colormap_lut {
            Some(path) => Colormap::read_csv(path),
            None => load_colormap(&self.colormap),
        }
    }
}

/// One generated pre-training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPair {
    pub masked_input: GrayImage,
    pub target: RgbImage,
    pub mask: MaskGrid,
}

/// Preprocess, mask the input copy and colorize the unmasked image.
pub fn make_pretrain_pair(
    raw: &GrayImage,
    cmap: &Colormap,
    mask: &MaskSpec,
) -> Result<PretrainPair> {
    let clean = preprocess(raw);
    let grid = build_padded_mask(clean.height(), clean.width(), mask)?;
    let masked_input = apply_mask(&clean, &grid, mask.fill_value)?;
    let target = apply_colormap(&clean, cmap)?;
    Ok(PretrainPair {
        masked_input,
        target,
        mask: grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub seed: u64,
    pub input: String,
    pub target: String,
    pub height: usize,
    pub width: usize,
    pub masked_fraction: f64,
    pub expected_mask_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub colormap: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colormap_lut: Option<PathBuf>,
    pub mask: MaskSpec,
    pub global_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    /// Mask spec used for one entry.
    pub fn entry_mask(&self, entry: &ManifestEntry) -> MaskSpec {
        MaskSpec {
            seed: entry.seed,
            ..self.mask
        }
    }
}

fn relative_string(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Raster files under `root`, recursively, as sorted relative paths.
pub fn list_rasters(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input directory not found"),
        ));
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        if entry.file_type().is_file() && is_raster_file(entry.path()) {
            out.push(relative_string(root, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn stem_of(rel: &str) -> String {
    match rel.rfind('.') {
        Some(i) if !rel[i..].contains('/') => rel[..i].to_string(),
        _ => rel.to_string(),
    }
}

/// Generates masked-input / pseudo-colorized-target pairs for every image in
/// the input directory and writes a manifest.
pub fn pretrain_gen(config: &PipelineConfig) -> Result<Manifest> {
    config.validate()?;
    let input = config
        .input_dir
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("input directory is required".into()))?;
    let output = config
        .output_dir
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("output directory is required".into()))?;
    let cmap = config.load_colormap()?;
    let sources = list_rasters(input)?;
    create_dir(output)?;

    let entries = run_pool(config.jobs, || {
        sources
            .par_iter()
            .map(|rel| {
                let seed = derive_seed(config.seed, rel);
                let spec = MaskSpec {
                    seed,
                    ..config.mask
                };
                let raw = read_gray_image(input.join(rel))?;
                let pair = make_pretrain_pair(&raw, &cmap, &spec).map_err(|e| match e {
                    Error::InvalidParameter(m) => Error::InvalidParameter(format!("{rel}: {m}")),
                    other => other,
                })?;
                let stem = stem_of(rel);
                let input_rel = format!("{stem}.input.pfm");
                let target_rel = format!("{stem}.target.pfm");
                let input_path = output.join(&input_rel);
                if let Some(parent) = input_path.parent() {
                    create_dir(parent)?;
                }
                write_pfm(&pair.masked_input, &input_path)?;
                write_pfm(&pair.target, output.join(&target_rel))?;
                Ok(ManifestEntry {
                    source: rel.clone(),
                    seed,
                    input: input_rel,
                    target: target_rel,
                    height: raw.height(),
                    width: raw.width(),
                    masked_fraction: pair.mask.masked_fraction(),
                    expected_mask_ratio: expected_mask_ratio(raw.height(), raw.width(), &spec),
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let manifest = Manifest {
        colormap: cmap.name().to_string(),
        colormap_lut: config.colormap_lut.clone(),
        mask: MaskSpec {
            seed: 0,
            ..config.mask
        },
        global_seed: config.seed,
        entries,
    };
    write_json(&manifest, &output.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub image_id: i64,
    pub maps: String,
    pub cells: usize,
}

/// Encodes every annotated image to `<out>/<image_id>.pfm` plus sidecar.
pub fn encode_dataset(
    annotations: &Path,
    output: &Path,
    reference_side: u32,
    jobs: Option<usize>,
) -> Result<Vec<EncodedImage>> {
    let dataset = read_annotations(annotations)?;
    create_dir(output)?;
    run_pool(jobs, || {
        dataset
            .images
            .par_iter()
            .map(|img| {
                let cells = dataset.cells_for(img.id);
                let maps = encode_targets(
                    cells,
                    img.height as usize,
                    img.width as usize,
                    reference_side,
                )?;
                let name = format!("{}.pfm", img.id);
                write_target_maps(&maps, Some(img.id), output.join(&name))?;
                Ok(EncodedImage {
                    image_id: img.id,
                    maps: name,
                    cells: cells.len(),
                })
            })
            .collect()
    })?
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedMaps {
    pub detections: ImageDetections,
    pub clamped_lookups: usize,
}

/// Decodes a target-map PFM. Image dimensions default to the reference side
/// recorded in the sidecar.
pub fn decode_maps(
    maps_path: &Path,
    threshold: f32,
    image_dims: Option<(usize, usize)>,
    image_id: Option<i64>,
) -> Result<DecodedMaps> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (maps, sidecar) = read_target_maps(maps_path)?;
    let side = maps.reference_side as usize;
    let (h, w) = image_dims.unwrap_or((side, side));
    let decoded = decode_detections(&maps, h, w, threshold)?;
    Ok(DecodedMaps {
        detections: ImageDetections {
            image_id: image_id.or(sidecar.image_id).unwrap_or(0),
            detections: decoded.detections,
        },
        clamped_lookups: decoded.clamped_lookups,
    })
}

pub fn truths_from_dataset(dataset: &AnnotatedDataset) -> Vec<ImageTruths> {
    dataset
        .images
        .iter()
        .map(|img| ImageTruths {
            image_id: img.id,
            cells: dataset.cells_for(img.id).to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ApReport,
    pub per_image: Vec<ImageMatchSummary>,
}

pub fn evaluate(detections: &Path, truths: &Path) -> Result<Evaluation> {
    let dets = read_detections(detections)?;
    let truths = truths_from_dataset(&read_annotations(truths)?);
    Ok(Evaluation {
        report: coco_ap(&dets, &truths)?,
        per_image: per_image_summary(&dets, &truths, 0.5)?,
    })
}

pub fn write_summary_csv(rows: &[ImageMatchSummary], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Invariant(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Invariant(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    pub channels: usize,
    /// Mean per-channel SSIM.
    pub ssim: f64,
    /// mIoU of the first channel (the heatmap for target maps).
    pub miou: f64,
}

pub fn eval_maps(pred: &Path, gt: &Path, threshold: f32, dynamic_range: f64) -> Result<MapScores> {
    let p = read_pfm(pred)?;
    let g = read_pfm(gt)?;
    if (p.channels, p.height, p.width) != (g.channels, g.height, g.width) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            p.height, p.width, p.channels, g.height, g.width, g.channels
        )));
    }
    let channels = p.channels;
    let pp = p.into_planes()?;
    let gp = g.into_planes()?;
    let mut total = 0.0;
    for (a, b) in pp.iter().zip(&gp) {
        total += ssim(a, b, dynamic_range)?;
    }
    Ok(MapScores {
        channels,
        ssim: total / channels as f64,
        miou: miou_heatmap(&pp[0], &gp[0], threshold)?,
    })
}

/// Writes `count` synthetic PNG images and `annotations.json` to `output`.
pub fn synth_dataset(
    spec: &SynthSpec,
    output: &Path,
    count: usize,
    jobs: Option<usize>,
) -> Result<AnnotatedDataset> {
    spec.validate()?;
    create_dir(output)?;
    let samples = run_pool(jobs, || {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let name = format!("synth_{i:04}.png");
                let sample_spec = SynthSpec {
                    seed: derive_seed(spec.seed, &name),
                    ..spec.clone()
                };
                let sample = generate_synthetic(&sample_spec)?;
                write_png16(&sample.image, output.join(&name))?;
                Ok((name, sample))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut dataset = AnnotatedDataset::default();
    for (i, (name, sample)) in samples.into_iter().enumerate() {
        let id = i as i64;
        dataset.images.push(ImageRecord {
            id,
            path: name,
            height: sample.image.height() as u32,
            width: sample.image.width() as u32,
        });
        dataset.cells.insert(id, sample.cells);
    }
    crate::dataset::write_annotations(&dataset, output.join("annotations.json"))?;
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColormapPreview {
    pub strip: PathBuf,
    pub brightness: PathBuf,
}

/// Writes `<name>_strip.png` and `<name>_brightness.csv`.
pub fn colormap_preview(cmap: &Colormap, output: &Path) -> Result<ColormapPreview> {
    create_dir(output)?;
    let strip = output.join(format!("{}_strip.png", cmap.name()));
    write_rgb_png8(&colormap_strip(cmap, 32), &strip)?;
    let mut csv_text = String::from("index,brightness\n");
    for (i, b) in brightness_curve(cmap).iter().enumerate() {
        csv_text.push_str(&format!("{i},{b:?}\n"));
    }
    let brightness = output.join(format!("{}_brightness.csv", cmap.name()));
    write_atomic(&brightness, csv_text.as_bytes())?;
    Ok(ColormapPreview { strip, brightness })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    Padded,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeParams {
    pub grid: usize,
    pub ratio: f64,
}

impl Default for MaeParams {
    fn default() -> Self {
        MaeParams {
            grid: 14,
            ratio: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPreview {
    pub scheme: MaskScheme,
    pub height: usize,
    pub width: usize,
    pub masked_cells: usize,
    pub masked_pixels: usize,
    pub masked_fraction: f64,
    /// Analytic expectation (padded) or exact target fraction of cells (MAE).
    pub expected_ratio: f64,
}

pub fn build_mask(
    scheme: MaskScheme,
    height: usize,
    width: usize,
    spec: &MaskSpec,
    mae: MaeParams,
) -> Result<(MaskGrid, f64)> {
    match scheme {
        MaskScheme::Padded => Ok((
            build_padded_mask(height, width, spec)?,
            expected_mask_ratio(height, width, spec),
        )),
        MaskScheme::Mae => {
            let grid = build_mae_mask(height, width, mae.grid, mae.ratio, spec.seed)?;
            let expected =
                (mae.ratio * (mae.grid * mae.grid) as f64).round() / (mae.grid * mae.grid) as f64;
            Ok((grid, expected))
        }
    }
}

/// Writes the realized mask as 8-bit PNG (255 = masked), optionally also as a
/// 0/1 gray PFM.
pub fn mask_preview(
    scheme: MaskScheme,
    height: usize,
    width: usize,
    spec: &MaskSpec,
    mae: MaeParams,
    png: &Path,
    pfm: Option<&Path>,
) -> Result<MaskPreview> {
    let (grid, expected_ratio) = build_mask(scheme, height, width, spec, mae)?;
    let raster = grid.to_gray();
    write_png8(&raster, png)?;
    if let Some(p) = pfm {
        write_pfm(&raster, p)?;
    }
    Ok(MaskPreview {
        scheme,
        height,
        width,
        masked_cells: grid.masked_cells(),
        masked_pixels: grid.masked_pixels(),
        masked_fraction: grid.masked_fraction(),
        expected_ratio,
    })
}

/// Runs the context block over a stack and writes `slice_<z>.pfm` per slice.
pub fn context_forward(
    weights: &Path,
    stack: &Path,
    output: &Path,
    jobs: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let weights = ContextWeights::read(weights)?;
    let volume = read_volume(stack)?;
    create_dir(output)?;
    let tensors = run_pool(jobs, || forward_volume(&volume, &weights))??;
    tensors
        .iter()
        .enumerate()
        .map(|(z, t)| {
            let path = output.join(format!("slice_{z:04}.pfm"));
            write_pfm(t, &path)?;
            Ok(path)
        })
        .collect()
}
