//! Dataset exporters: YOLO text labels, COCO detection JSON and annotation JSONL.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::annotate::AnnotationRecord;
use crate::catalog::ClassCatalog;
use crate::diversify::TrainingManifest;
use crate::evaluate::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::preprocess::ImageRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    YoloTxt,
    CocoJson,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yolo_txt" => Ok(ExportFormat::YoloTxt),
            "coco_json" => Ok(ExportFormat::CocoJson),
            "jsonl" => Ok(ExportFormat::Jsonl),
            _ => Err(Error::InvalidArgument(format!("unknown export format `{s}` (yolo_txt, coco_json, jsonl)"))),
        }
    }
}

/// Fixed six-decimal rendering with trailing zeros dropped, keeping one.
pub fn format_normalized(v: f64) -> String {
    let s = format!("{v:.6}");
    let t = s.trim_end_matches('0');
    if t.ends_with('.') {
        format!("{t}0")
    } else {
        t.to_string()
    }
}

fn class_index(catalog: &ClassCatalog, a: &AnnotationRecord) -> Result<usize> {
    let class =
        a.class.as_deref().ok_or_else(|| Error::UnknownClass(format!("unresolved phrase `{}` on `{}`", a.phrase, a.image_id)))?;
    catalog.index_of(class).ok_or_else(|| Error::UnknownClass(class.to_string()))
}

/// One YOLO label line: `class cx cy w h`, normalized to the image size.
pub fn yolo_line(index: usize, a: &AnnotationRecord, image: &ImageRecord) -> String {
    let v = a.bbox().to_cxcywh_normalized(image.width as f64, image.height as f64);
    format!(
        "{index} {} {} {} {}",
        format_normalized(v[0]),
        format_normalized(v[1]),
        format_normalized(v[2]),
        format_normalized(v[3])
    )
}

fn group(anns: &[AnnotationRecord]) -> BTreeMap<&str, Vec<&AnnotationRecord>> {
    let mut m: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in anns {
        m.entry(a.image_id.as_str()).or_default().push(a);
    }
    m
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `labels/<image>.txt` per image plus `classes.txt` in catalog order.
pub fn export_yolo(manifest: &TrainingManifest, catalog: &ClassCatalog, out: &Path) -> Result<Vec<PathBuf>> {
    let by_image = group(&manifest.annotations);
    let mut written = Vec::new();
    for img in &manifest.images {
        let mut text = String::new();
        for a in by_image.get(img.id.as_str()).into_iter().flatten() {
            text.push_str(&yolo_line(class_index(catalog, a)?, a, img));
            text.push('\n');
        }
        let path = out.join("labels").join(format!("{}.txt", img.id));
        write(&path, &text)?;
        written.push(path);
    }
    let names = catalog.class_names().join("\n") + "\n";
    let path = out.join("classes.txt");
    write(&path, &names)?;
    written.push(path);
    Ok(written)
}

/// COCO detection dataset; category ids are catalog indices plus one.
pub fn to_coco(manifest: &TrainingManifest, catalog: &ClassCatalog) -> Result<CocoDataset> {
    let categories = catalog
        .class_names()
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.to_string(), supercategory: String::new() })
        .collect();
    let ids: BTreeMap<&str, u64> = manifest.images.iter().enumerate().map(|(i, m)| (m.id.as_str(), i as u64 + 1)).collect();
    let images = manifest
        .images
        .iter()
        .map(|m| CocoImage { id: ids[m.id.as_str()], file_name: m.path.clone(), width: m.width, height: m.height })
        .collect();
    let mut annotations = Vec::new();
    for a in &manifest.annotations {
        let image_id = *ids
            .get(a.image_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("annotation on unknown image `{}`", a.image_id)))?;
        let b = a.bbox();
        annotations.push(CocoAnnotation {
            id: annotations.len() as u64 + 1,
            image_id,
            category_id: class_index(catalog, a)? as u64 + 1,
            bbox: b.to_xywh(),
            area: b.area(),
            iscrowd: 0,
            score: None,
        });
    }
    Ok(CocoDataset { images, annotations, categories })
}

pub fn export(manifest: &TrainingManifest, catalog: &ClassCatalog, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    match format {
        ExportFormat::YoloTxt => export_yolo(manifest, catalog, out),
        ExportFormat::CocoJson => {
            let path = out.join("annotations.coco.json");
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            crate::jsonl::write_json(&path, &to_coco(manifest, catalog)?)?;
            Ok(vec![path])
        }
        ExportFormat::Jsonl => {
            let path = out.join("annotations.jsonl");
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            for a in &manifest.annotations {
                class_index(catalog, a)?;
            }
            crate::jsonl::write_jsonl(&path, &manifest.annotations)?;
            Ok(vec![path])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{PromptKind, Stage};
    use crate::catalog::ClassEntry;
    use crate::diversify::Ratio;
    use crate::preprocess::Origin;

    fn ann(image: &str, class: &str, b: [f64; 4]) -> AnnotationRecord {
        AnnotationRecord {
            image_id: image.into(),
            x1: b[0],
            y1: b[1],
            x2: b[2],
            y2: b[3],
            score: 0.8,
            phrase: class.into(),
            class: Some(class.into()),
            stage: Stage::Approved,
            prompt_kind: PromptKind::Original,
            synonym: false,
        }
    }

    fn manifest(anns: Vec<AnnotationRecord>) -> TrainingManifest {
        TrainingManifest {
            seed: 0,
            ratio: Ratio::new(0, 1).unwrap(),
            base: ".".into(),
            quotas: BTreeMap::new(),
            images: vec![ImageRecord {
                id: "a".into(),
                path: "img/a.png".into(),
                class_names: vec!["bulldozer".into()],
                origin: Origin::Original,
                width: 200,
                height: 100,
            }],
            annotations: anns,
        }
    }

    fn catalog() -> ClassCatalog {
        ClassCatalog::new("t", vec![ClassEntry::new("wheel loader"), ClassEntry::new("bulldozer")]).unwrap()
    }

    #[test]
    fn number_format() {
        assert_eq!(format_normalized(0.5), "0.5");
        assert_eq!(format_normalized(1.0), "1.0");
        assert_eq!(format_normalized(0.0), "0.0");
        assert_eq!(format_normalized(0.1234567), "0.123457");
    }

    #[test]
    fn full_image_box() {
        let m = manifest(vec![ann("a", "bulldozer", [0.0, 0.0, 200.0, 100.0])]);
        let line = yolo_line(1, &m.annotations[0], &m.images[0]);
        assert_eq!(line, "1 0.5 0.5 1.0 1.0");
        let dir = tempfile::tempdir().unwrap();
        export(&m, &catalog(), ExportFormat::YoloTxt, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("labels/a.txt")).unwrap();
        assert_eq!(text, "1 0.5 0.5 1.0 1.0\n");
        assert_eq!(std::fs::read_to_string(dir.path().join("classes.txt")).unwrap(), "wheel loader\nbulldozer\n");
    }

    #[test]
    fn unknown_class_rejected() {
        let m = manifest(vec![ann("a", "giraffe", [0.0, 0.0, 1.0, 1.0])]);
        let dir = tempfile::tempdir().unwrap();
        for f in [ExportFormat::YoloTxt, ExportFormat::CocoJson, ExportFormat::Jsonl] {
            assert!(matches!(export(&m, &catalog(), f, dir.path()), Err(Error::UnknownClass(_))));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let m = manifest(vec![ann("a", "bulldozer", [1.5, 2.25, 30.125, 40.0]), ann("a", "wheel loader", [3.0, 3.0, 9.0, 9.0])]);
        let dir = tempfile::tempdir().unwrap();
        let files = export(&m, &catalog(), ExportFormat::Jsonl, dir.path()).unwrap();
        let back: Vec<AnnotationRecord> = crate::jsonl::read_jsonl(&files[0]).unwrap();
        assert_eq!(back, m.annotations);
    }

    #[test]
    fn coco_fields() {
        let m = manifest(vec![ann("a", "bulldozer", [10.0, 20.0, 50.0, 60.0])]);
        let c = to_coco(&m, &catalog()).unwrap();
        assert_eq!(c.annotations[0].bbox, [10.0, 20.0, 40.0, 40.0]);
        assert_eq!(c.annotations[0].category_id, 2);
        assert_eq!(c.annotations[0].area, 1600.0);
        assert_eq!(c.categories[1].name, "bulldozer");
    }
}
