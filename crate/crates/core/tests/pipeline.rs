use std::fs;
use std::path::Path;

use pseudocell::context::ContextWeights;
use pseudocell::dataset::write_detections;
use pseudocell::io::{read_gray_image, read_pfm, write_png16};
use pseudocell::masking::MaskSpec;
use pseudocell::masking::{apply_mask, build_padded_mask};
use pseudocell::pipeline::{
    colormap_preview, context_forward, decode_maps, derive_seed, encode_dataset, eval_maps,
    evaluate, mask_preview, pretrain_gen, synth_dataset, MaeParams, Manifest, MaskScheme,
    PipelineConfig, MANIFEST_FILE,
};
use pseudocell::preprocess::preprocess;
use pseudocell::pseudocolor::{apply_colormap, load_colormap};
use pseudocell::synth::SynthSpec;
use pseudocell::GrayImage;

fn ramp(h: usize, w: usize, k: usize) -> GrayImage {
    GrayImage::from_fn(h, w, |x, y| ((x * 13 + y * 7 + k * 31) % 97) as f32 / 96.0).unwrap()
}

fn config(input: &Path, output: &Path) -> PipelineConfig {
    PipelineConfig {
        input_dir: Some(input.to_path_buf()),
        output_dir: Some(output.to_path_buf()),
        seed: 99,
        jobs: Some(2),
        ..PipelineConfig::default()
    }
}

#[test]
fn one_image_gives_two_pfms_and_a_manifest_entry() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    write_png16(&ramp(50, 60, 0), input.join("cell.png")).unwrap();
    let out = dir.path().join("out");
    let manifest = pretrain_gen(&config(&input, &out)).unwrap();
    assert_eq!(manifest.entries.len(), 1);
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec!["cell.input.pfm", "cell.target.pfm", MANIFEST_FILE]
    );
    assert_eq!(Manifest::read(out.join(MANIFEST_FILE)).unwrap(), manifest);
}

#[test]
fn manifest_reproduces_each_output_in_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(input.join("sub")).unwrap();
    write_png16(&ramp(40, 55, 1), input.join("a.png")).unwrap();
    write_png16(&ramp(72, 36, 2), input.join("sub/b.png")).unwrap();
    let out = dir.path().join("out");
    let manifest = pretrain_gen(&config(&input, &out)).unwrap();
    let cmap = load_colormap(&manifest.colormap).unwrap();
    for entry in &manifest.entries {
        assert_eq!(entry.seed, derive_seed(manifest.global_seed, &entry.source));
        let clean = preprocess(&read_gray_image(input.join(&entry.source)).unwrap());
        let spec = manifest.entry_mask(entry);
        let mask = build_padded_mask(clean.height(), clean.width(), &spec).unwrap();
        let input_pfm = read_pfm(out.join(&entry.input))
            .unwrap()
            .into_gray()
            .unwrap();
        assert_eq!(
            input_pfm,
            apply_mask(&clean, &mask, spec.fill_value).unwrap()
        );
        // the target side is never masked
        let target = read_pfm(out.join(&entry.target))
            .unwrap()
            .into_rgb()
            .unwrap();
        assert_eq!(target, apply_colormap(&clean, &cmap).unwrap());
        assert_eq!(entry.masked_fraction, mask.masked_fraction());
    }
}

#[test]
fn subsets_regenerate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    fs::create_dir_all(&full).unwrap();
    fs::create_dir_all(&part).unwrap();
    for k in 0..4 {
        write_png16(&ramp(45, 45, k), full.join(format!("{k}.png"))).unwrap();
    }
    fs::copy(full.join("2.png"), part.join("2.png")).unwrap();
    pretrain_gen(&config(&full, &dir.path().join("o1"))).unwrap();
    pretrain_gen(&config(&part, &dir.path().join("o2"))).unwrap();
    for name in ["2.input.pfm", "2.target.pfm"] {
        assert_eq!(
            fs::read(dir.path().join("o1").join(name)).unwrap(),
            fs::read(dir.path().join("o2").join(name)).unwrap()
        );
    }
}

#[test]
fn pretrain_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = config(&dir.path().join("nope"), &dir.path().join("out"));
    assert!(pretrain_gen(&missing).is_err());

    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    fs::write(input.join("bad.png"), b"not a png").unwrap();
    assert!(pretrain_gen(&config(&input, &dir.path().join("out"))).is_err());

    let cfg = PipelineConfig {
        threshold: 0.0,
        ..config(&input, &dir.path().join("out"))
    };
    assert!(pretrain_gen(&cfg).is_err());
}

#[test]
fn synth_encode_decode_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    let spec = SynthSpec {
        side: 128,
        cell_count: (2, 5),
        seed: 3,
        ..SynthSpec::default()
    };
    let dataset = synth_dataset(&spec, &data, 4, Some(2)).unwrap();
    assert_eq!(dataset.images.len(), 4);
    for img in &dataset.images {
        assert_eq!(
            read_gray_image(data.join(&img.path)).unwrap().dims(),
            (128, 128)
        );
    }

    let maps = dir.path().join("maps");
    let encoded = encode_dataset(&data.join("annotations.json"), &maps, 128, None).unwrap();
    assert_eq!(encoded.len(), 4);
    let mut sets = Vec::new();
    for e in &encoded {
        let decoded = decode_maps(&maps.join(&e.maps), 0.75, None, None).unwrap();
        assert_eq!(decoded.detections.image_id, e.image_id);
        assert_eq!(decoded.detections.detections.len(), e.cells);
        assert_eq!(decoded.clamped_lookups, 0);
        sets.push(decoded.detections);
    }
    let dets = dir.path().join("dets.json");
    write_detections(&sets, &dets).unwrap();
    let eval = evaluate(&dets, &data.join("annotations.json")).unwrap();
    assert_eq!(eval.report.ap50, 1.0);
    assert!(eval.per_image.iter().all(|r| r.true_positives == r.truths));
}

#[test]
fn identical_truths_as_detections_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    let dataset = synth_dataset(
        &SynthSpec {
            side: 96,
            seed: 8,
            ..SynthSpec::default()
        },
        &data,
        3,
        None,
    )
    .unwrap();
    let sets: Vec<_> = dataset
        .images
        .iter()
        .map(|img| pseudocell::dataset::ImageDetections {
            image_id: img.id,
            detections: dataset
                .cells_for(img.id)
                .iter()
                .map(|c| {
                    let b = c.to_box();
                    pseudocell::Detection {
                        x_min: b.x_min,
                        y_min: b.y_min,
                        w: b.w,
                        h: b.h,
                        score: 1.0,
                    }
                })
                .collect(),
        })
        .collect();
    let dets = dir.path().join("dets.json");
    write_detections(&sets, &dets).unwrap();
    assert_eq!(
        evaluate(&dets, &data.join("annotations.json"))
            .unwrap()
            .report
            .ap,
        1.0
    );
}

#[test]
fn mask_preview_png_matches_reported_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("m.png");
    let spec = MaskSpec {
        seed: 12,
        ..MaskSpec::default()
    };
    let summary = mask_preview(
        MaskScheme::Padded,
        200,
        150,
        &spec,
        MaeParams::default(),
        &png,
        None,
    )
    .unwrap();
    let raster = read_gray_image(&png).unwrap();
    let masked = raster.data().iter().filter(|&&v| v == 1.0).count();
    assert!(raster.data().iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(masked, summary.masked_pixels);
    assert_eq!(masked as f64 / (200.0 * 150.0), summary.masked_fraction);

    let mae = mask_preview(
        MaskScheme::Mae,
        224,
        224,
        &spec,
        MaeParams::default(),
        &png,
        None,
    )
    .unwrap();
    assert_eq!(mae.masked_cells, 147);
    assert_eq!(mae.masked_fraction, 147.0 / 196.0);
}

#[test]
fn colormap_preview_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = colormap_preview(&load_colormap("viridis").unwrap(), dir.path()).unwrap();
    let csv = fs::read_to_string(&files.brightness).unwrap();
    assert_eq!(csv.lines().count(), 257);
    assert!(files.strip.exists());
}

#[test]
fn eval_maps_scores_identical_maps_as_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pfm");
    let b = dir.path().join("b.pfm");
    pseudocell::io::write_pfm(&ramp(20, 20, 0), &a).unwrap();
    pseudocell::io::write_pfm(&ramp(20, 20, 5), &b).unwrap();
    let same = eval_maps(&a, &a, 0.75, 1.0).unwrap();
    assert_eq!((same.ssim, same.miou, same.channels), (1.0, 1.0, 1));
    assert!(eval_maps(&a, &b, 0.75, 1.0).unwrap().ssim < 1.0);
}

#[test]
fn context_forward_writes_one_tensor_per_slice() {
    let dir = tempfile::tempdir().unwrap();
    let stack = dir.path().join("stack");
    fs::create_dir(&stack).unwrap();
    for z in 0..3 {
        pseudocell::io::write_pfm(&ramp(6, 7, z), stack.join(format!("z{z}.pfm"))).unwrap();
    }
    let weights = dir.path().join("w.json");
    fs::write(
        &weights,
        serde_json::to_string(&ContextWeights::zeros()).unwrap(),
    )
    .unwrap();
    let out = dir.path().join("out");
    let written = context_forward(&weights, &stack, &out, Some(1)).unwrap();
    assert_eq!(written.len(), 3);
    let planes = read_pfm(&written[1]).unwrap().into_planes().unwrap();
    assert_eq!(planes[1], ramp(6, 7, 1));
}
