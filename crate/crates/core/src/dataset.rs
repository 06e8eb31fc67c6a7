//! Annotation and detection JSON documents.
//!
//! Annotations:
//! `{"images":[{"id","path","height","width"}], "annotations":[{"image_id","cx","cy","w","h"}]}`
//!
//! Detections, one object per image (a file may hold one object or an array):
//! `{"image_id", "detections":[{"x_min","y_min","w","h","score"}]}`

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{CellAnnotation, Detection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: i64,
    pub path: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: i64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Validated annotations grouped by image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotatedDataset {
    pub images: Vec<ImageRecord>,
    pub cells: BTreeMap<i64, Vec<CellAnnotation>>,
}

impl AnnotatedDataset {
    pub fn cells_for(&self, image_id: i64) -> &[CellAnnotation] {
        self.cells.get(&image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn to_file(&self) -> AnnotationFile {
        let annotations = self
            .images
            .iter()
            .flat_map(|img| {
                self.cells_for(img.id)
                    .iter()
                    .map(move |c| AnnotationRecord {
                        image_id: img.id,
                        cx: c.cx,
                        cy: c.cy,
                        w: c.w,
                        h: c.h,
                    })
            })
            .collect();
        AnnotationFile {
            images: self.images.clone(),
            annotations,
        }
    }
}

impl AnnotationFile {
    /// Checks ids, extents and centroid bounds, and groups cells per image.
    pub fn validate(self) -> Result<AnnotatedDataset> {
        let mut cells: BTreeMap<i64, Vec<CellAnnotation>> = BTreeMap::new();
        let mut bounds = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            if bounds.insert(img.id, (img.width, img.height)).is_some() {
                return Err(Error::InvalidRecord {
                    position: format!("images[{i}]"),
                    reason: format!("duplicate image id {}", img.id),
                });
            }
            cells.insert(img.id, Vec::new());
        }
        for (i, rec) in self.annotations.iter().enumerate() {
            let bad = |reason: String| Error::InvalidRecord {
                position: format!("annotations[{i}]"),
                reason,
            };
            let &(width, height) = bounds
                .get(&rec.image_id)
                .ok_or_else(|| bad(format!("unknown image id {}", rec.image_id)))?;
            let cell = CellAnnotation::new(rec.cx, rec.cy, rec.w, rec.h)
                .map_err(|e| bad(e.to_string()))?;
            // pixel centres span [0, dim - 1]; allow centroids up to the pixel edges
            let inside = |v: f64, dim: u32| v >= -0.5 && v <= dim as f64 - 0.5;
            if !inside(cell.cx, width) || !inside(cell.cy, height) {
                return Err(bad(format!(
                    "centroid ({}, {}) outside the {}x{} image",
                    cell.cx, cell.cy, width, height
                )));
            }
            cells.entry(rec.image_id).or_default().push(cell);
        }
        Ok(AnnotatedDataset {
            images: self.images,
            cells,
        })
    }
}

pub fn parse_annotations(json: &str) -> Result<AnnotatedDataset> {
    let file: AnnotationFile =
        serde_json::from_str(json).map_err(|e| Error::Schema(e.to_string()))?;
    file.validate()
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotatedDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        Error::InvalidRecord { position, reason } => Error::InvalidRecord {
            position: format!("{} {position}", path.display()),
            reason,
        },
        other => other,
    })
}

pub fn write_annotations(dataset: &AnnotatedDataset, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec_pretty(&dataset.to_file())
        .map_err(|e| Error::Invariant(e.to_string()))?;
    write_atomic(path.as_ref(), &json)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: i64,
    pub detections: Vec<Detection>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DetectionsDoc {
    Many(Vec<ImageDetections>),
    One(ImageDetections),
}

pub fn parse_detections(json: &str) -> Result<Vec<ImageDetections>> {
    let doc: DetectionsDoc = serde_json::from_str(json)
        .map_err(|e| Error::Schema(format!("detections document: {e}")))?;
    let sets = match doc {
        DetectionsDoc::Many(v) => v,
        DetectionsDoc::One(d) => vec![d],
    };
    let mut seen = HashSet::new();
    for (i, set) in sets.iter().enumerate() {
        if !seen.insert(set.image_id) {
            return Err(Error::InvalidRecord {
                position: format!("[{i}]"),
                reason: format!("duplicate image id {}", set.image_id),
            });
        }
        for (j, d) in set.detections.iter().enumerate() {
            d.validate().map_err(|e| Error::InvalidRecord {
                position: format!("[{i}].detections[{j}]"),
                reason: e.to_string(),
            })?;
        }
    }
    Ok(sets)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<ImageDetections>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text)
}

pub fn write_detections(sets: &[ImageDetections], path: impl AsRef<Path>) -> Result<()> {
    let json = if sets.len() == 1 {
        serde_json::to_vec_pretty(&sets[0])
    } else {
        serde_json::to_vec_pretty(sets)
    }
    .map_err(|e| Error::Invariant(e.to_string()))?;
    write_atomic(path.as_ref(), &json)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_CELL: &str = r#"{"images":[{"id":1,"path":"a.png","height":384,"width":384}],
        "annotations":[{"image_id":1,"cx":100,"cy":150,"w":40,"h":20}]}"#;

    #[test]
    fn maps_record_fields() {
        let ds = parse_annotations(ONE_CELL).unwrap();
        assert_eq!(
            ds.cells_for(1),
            &[CellAnnotation {
                cx: 100.0,
                cy: 150.0,
                w: 40.0,
                h: 20.0
            }]
        );
    }

    #[test]
    fn empty_annotation_list() {
        let ds = parse_annotations(r#"{"images":[],"annotations":[]}"#).unwrap();
        assert!(ds.cells.is_empty());
        let ds = parse_annotations(
            r#"{"images":[{"id":3,"path":"x","height":4,"width":4}],"annotations":[]}"#,
        )
        .unwrap();
        assert!(ds.cells_for(3).is_empty());
    }

    #[test]
    fn zero_width_rejected_with_position() {
        let json = ONE_CELL.replace("\"w\":40", "\"w\":0");
        match parse_annotations(&json) {
            Err(Error::InvalidRecord { position, .. }) => assert_eq!(position, "annotations[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_and_reference_errors() {
        assert!(matches!(
            parse_annotations(r#"{"images":[]}"#),
            Err(Error::Schema(_))
        ));
        let json = ONE_CELL.replace("\"image_id\":1", "\"image_id\":9");
        assert!(matches!(
            parse_annotations(&json),
            Err(Error::InvalidRecord { .. })
        ));
        let json = ONE_CELL.replace("\"cx\":100", "\"cx\":500");
        assert!(matches!(
            parse_annotations(&json),
            Err(Error::InvalidRecord { .. })
        ));
    }

    #[test]
    fn detections_single_or_array() {
        let one = r#"{"image_id":2,"detections":[{"x_min":1,"y_min":2,"w":3,"h":4,"score":0.5}]}"#;
        let sets = parse_detections(one).unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].detections[0].h, 4.0);
        let many = format!("[{one}, {{\"image_id\":3,\"detections\":[]}}]");
        assert_eq!(parse_detections(&many).unwrap().len(), 2);
        let dup = format!("[{one},{one}]");
        assert!(parse_detections(&dup).is_err());
        let neg = one.replace("\"w\":3", "\"w\":-3");
        assert!(parse_detections(&neg).is_err());
    }
}
