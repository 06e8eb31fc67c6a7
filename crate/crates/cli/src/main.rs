use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pseudocell::codec::{DEFAULT_REFERENCE_SIDE, DEFAULT_THRESHOLD};
use pseudocell::dataset::write_detections;
use pseudocell::masking::MaskSpec;
use pseudocell::pipeline::{self, MaeParams, MaskScheme, PipelineConfig};
use pseudocell::pseudocolor::{load_colormap, Colormap};
use pseudocell::synth::SynthSpec;
use pseudocell::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pseudocell",
    version,
    about = "Pseudo-colorized masked-cell pre-training data and cell detection tooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate masked-input / pseudo-colorized-target pairs for a directory of images.
    PretrainGen(PretrainArgs),
    /// Encode cell annotations into heatmap + size target maps.
    Encode(EncodeArgs),
    /// Decode target maps into detections.
    Decode(DecodeArgs),
    /// COCO-style AP of detections against annotations.
    Eval(EvalArgs),
    /// SSIM and heatmap mIoU between two PFM rasters.
    EvalMaps(EvalMapsArgs),
    /// Generate a synthetic annotated dataset.
    Synth(SynthArgs),
    #[command(subcommand)]
    Preview(PreviewCommand),
    /// Run the slice-context block over a stack.
    Context(ContextArgs),
}

#[derive(Subcommand)]
enum PreviewCommand {
    /// Colormap strip PNG and brightness curve CSV.
    Colormap(ColormapPreviewArgs),
    /// Realized mask as PNG.
    Mask(MaskPreviewArgs),
}

#[derive(Args, Default)]
struct MaskFlags {
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    padding: Option<usize>,
    #[arg(long)]
    mask_prob: Option<f64>,
    #[arg(long)]
    fill_value: Option<f32>,
}

impl MaskFlags {
    fn apply(&self, spec: &mut MaskSpec) {
        if let Some(v) = self.patch {
            spec.patch = v;
        }
        if let Some(v) = self.padding {
            spec.padding = v;
        }
        if let Some(v) = self.mask_prob {
            spec.mask_prob = v;
        }
        if let Some(v) = self.fill_value {
            spec.fill_value = v;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    colormap: Option<String>,
    /// Custom colormap LUT CSV (256 rows of r,g,b).
    #[arg(long)]
    colormap_lut: Option<PathBuf>,
    #[command(flatten)]
    mask: MaskFlags,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    reference_side: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker count (default: PSEUDOCELL_JOBS or all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl PretrainArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::read(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input_dir = Some(v.clone());
        }
        if let Some(v) = &self.output {
            cfg.output_dir = Some(v.clone());
        }
        if let Some(v) = &self.colormap {
            cfg.colormap = v.clone();
            cfg.colormap_lut = None;
        }
        if let Some(v) = &self.colormap_lut {
            cfg.colormap_lut = Some(v.clone());
        }
        self.mask.apply(&mut cfg.mask);
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.reference_side {
            cfg.reference_side = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_REFERENCE_SIDE)]
    reference_side: u32,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Target-map PFM files or directories of them.
    #[arg(required = true)]
    maps: Vec<PathBuf>,
    /// Detections JSON to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    /// Original image height (default: the maps' reference side).
    #[arg(long, requires = "image_width")]
    image_height: Option<usize>,
    #[arg(long, requires = "image_height")]
    image_width: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth annotations JSON.
    #[arg(long)]
    truths: PathBuf,
    /// Optional per-image match summary CSV (IoU 0.5).
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Args)]
struct EvalMapsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, default_value_t = 1.0)]
    dynamic_range: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// JSON generator spec; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    min_cells: Option<usize>,
    #[arg(long)]
    max_cells: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f32>,
    #[arg(long)]
    allow_overlap: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl SynthArgs {
    fn spec(&self) -> Result<SynthSpec> {
        let mut spec = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?
            }
            None => SynthSpec::default(),
        };
        if let Some(v) = self.side {
            spec.side = v;
        }
        if let Some(v) = self.min_cells {
            spec.cell_count.0 = v;
        }
        if let Some(v) = self.max_cells {
            spec.cell_count.1 = v;
        }
        if let Some(v) = self.noise_sigma {
            spec.noise_sigma = v;
        }
        if self.allow_overlap {
            spec.allow_overlap = true;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct ColormapPreviewArgs {
    #[arg(long, default_value = "nipy_spectral", conflicts_with = "lut")]
    colormap: String,
    #[arg(long)]
    lut: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Padded,
    Mae,
}

#[derive(Args)]
struct MaskPreviewArgs {
    #[arg(long, value_enum, default_value_t = SchemeArg::Padded)]
    scheme: SchemeArg,
    #[arg(long, default_value_t = 384)]
    height: usize,
    #[arg(long, default_value_t = 384)]
    width: usize,
    #[command(flatten)]
    mask: MaskFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 14)]
    grid: usize,
    #[arg(long, default_value_t = 0.75)]
    ratio: f64,
    #[arg(long)]
    png: PathBuf,
    #[arg(long)]
    pfm: Option<PathBuf>,
}

#[derive(Args)]
struct ContextArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Multi-page TIFF or directory of slices.
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn collect_maps(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::Io {
                    path: input.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm"))
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::PretrainGen(args) => {
            let cfg = args.config()?;
            let manifest = pipeline::pretrain_gen(&cfg)?;
            let output = cfg.output_dir.unwrap_or_default();
            Ok(json!({
                "images": manifest.entries.len(),
                "manifest": output.join(pipeline::MANIFEST_FILE),
                "colormap": manifest.colormap,
                "global_seed": manifest.global_seed,
            }))
        }
        Command::Encode(args) => {
            let encoded = pipeline::encode_dataset(
                &args.annotations,
                &args.output,
                args.reference_side,
                args.jobs,
            )?;
            Ok(json!({ "images": encoded.len(), "maps": to_value(&encoded) }))
        }
        Command::Decode(args) => {
            let dims = args.image_height.zip(args.image_width);
            let mut sets = Vec::new();
            let mut clamped = 0;
            for path in collect_maps(&args.maps)? {
                let decoded = pipeline::decode_maps(&path, args.threshold, dims, None)?;
                clamped += decoded.clamped_lookups;
                sets.push(decoded.detections);
            }
            sets.sort_by_key(|s| s.image_id);
            if let Some(w) = sets.windows(2).find(|w| w[0].image_id == w[1].image_id) {
                return Err(Error::InvalidValue(format!(
                    "duplicate image id {} among decoded maps",
                    w[0].image_id
                )));
            }
            write_detections(&sets, &args.output)?;
            Ok(json!({
                "images": sets.len(),
                "detections": sets.iter().map(|s| s.detections.len()).sum::<usize>(),
                "clamped_lookups": clamped,
                "output": args.output,
            }))
        }
        Command::Eval(args) => {
            let eval = pipeline::evaluate(&args.detections, &args.truths)?;
            if let Some(p) = &args.per_image {
                pipeline::write_summary_csv(&eval.per_image, p)?;
            }
            Ok(to_value(&eval.report))
        }
        Command::EvalMaps(args) => Ok(to_value(&pipeline::eval_maps(
            &args.pred,
            &args.gt,
            args.threshold,
            args.dynamic_range,
        )?)),
        Command::Synth(args) => {
            let spec = args.spec()?;
            let dataset = pipeline::synth_dataset(&spec, &args.output, args.count, args.jobs)?;
            Ok(json!({
                "images": dataset.images.len(),
                "cells": dataset.cells.values().map(Vec::len).sum::<usize>(),
                "annotations": args.output.join("annotations.json"),
            }))
        }
        Command::Preview(PreviewCommand::Colormap(args)) => {
            let cmap = match &args.lut {
                Some(p) => Colormap::read_csv(p)?,
                None => load_colormap(&args.colormap)?,
            };
            Ok(to_value(&pipeline::colormap_preview(&cmap, &args.output)?))
        }
        Command::Preview(PreviewCommand::Mask(args)) => {
            let mut spec = MaskSpec {
                seed: args.seed,
                ..MaskSpec::default()
            };
            args.mask.apply(&mut spec);
            let scheme = match args.scheme {
                SchemeArg::Padded => MaskScheme::Padded,
                SchemeArg::Mae => MaskScheme::Mae,
            };
            let mae = MaeParams {
                grid: args.grid,
                ratio: args.ratio,
            };
            let preview = pipeline::mask_preview(
                scheme,
                args.height,
                args.width,
                &spec,
                mae,
                &args.png,
                args.pfm.as_deref(),
            )?;
            Ok(to_value(&preview))
        }
        Command::Context(args) => {
            let written =
                pipeline::context_forward(&args.weights, &args.stack, &args.output, args.jobs)?;
            Ok(json!({ "slices": written.len(), "output": args.output }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors; help and version are not errors
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 2 } else { 1 })
        }
    }
}
