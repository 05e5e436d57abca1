//! Pseudo-label generation: detection prompt sets per class, backend fan-out,
//! score filtering, label canonicalization and class-agnostic NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, DetectRequest, Detector};
use crate::catalog::{normalize_phrase, ClassCatalog};
use crate::concurrency::bounded_map;
use crate::geometry::{nms_class_agnostic, BBox, ScoredBox};
use crate::preprocess::ImageRecord;
use crate::{Error, Result};

/// Delimiter joining class names in a co-occurring prompt.
pub const PROMPT_DELIMITER: &str = " . ";

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Original,
    Synonym,
    Cooccurring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Filtered,
    Final,
    Approved,
    Rejected,
}

impl Stage {
    fn rank(self) -> u8 {
        match self {
            Stage::Raw => 0,
            Stage::Filtered => 1,
            Stage::Final => 2,
            Stage::Approved | Stage::Rejected => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectPrompt {
    pub text: String,
    pub kind: PromptKind,
    /// True when the prompt substitutes a synonym for the queried class.
    pub synonym: bool,
    /// Normalized phrase -> canonical class name.
    pub decode_map: BTreeMap<String, String>,
}

impl DetectPrompt {
    fn new(names: &[(&str, &str)], kind: PromptKind, synonym: bool) -> Self {
        DetectPrompt {
            text: names.iter().map(|(phrase, _)| *phrase).collect::<Vec<_>>().join(PROMPT_DELIMITER),
            kind,
            synonym,
            decode_map: names.iter().map(|(phrase, class)| (normalize_phrase(phrase), class.to_string())).collect(),
        }
    }

    /// Maps a phrase echoed by the detector back to a canonical class.
    ///
    /// Exact (normalized) matches win. Otherwise the longest prompt token that
    /// contains, or is contained in, the phrase decides; a tie between tokens
    /// of different classes leaves the phrase unresolved.
    pub fn decode(&self, phrase: &str) -> Option<&str> {
        let p = normalize_phrase(phrase);
        if p.is_empty() {
            return None;
        }
        if let Some(c) = self.decode_map.get(&p) {
            return Some(c);
        }
        let mut best_len = 0;
        let mut best: Vec<&str> = Vec::new();
        for (token, class) in &self.decode_map {
            let overlap = if p.contains(token.as_str()) {
                token.len()
            } else if token.contains(p.as_str()) {
                p.len()
            } else {
                continue;
            };
            match overlap.cmp(&best_len) {
                Ordering::Greater => {
                    best_len = overlap;
                    best = vec![class.as_str()];
                }
                Ordering::Equal => best.push(class.as_str()),
                Ordering::Less => {}
            }
        }
        best.dedup();
        match best.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }
}

/// Enumerates the detection prompts for one class: the original name, a
/// co-occurring prompt when the class has co-occurring classes, and for each
/// synonym a synonym prompt plus (again when co-occurring classes exist) a
/// co-occurring prompt led by the synonym.
pub fn build_prompt_set(class_name: &str, catalog: &ClassCatalog) -> Result<Vec<DetectPrompt>> {
    let class = catalog.require(class_name)?;
    let canonical = class.name.as_str();
    let co: Vec<(&str, &str)> =
        catalog.co_occurring_of(canonical)?.into_iter().map(|c| (c.name.as_str(), c.name.as_str())).collect();

    let mut prompts = vec![DetectPrompt::new(&[(canonical, canonical)], PromptKind::Original, false)];
    let with_co = |lead: (&str, &str), synonym: bool| {
        let mut names = vec![lead];
        names.extend(co.iter().copied());
        DetectPrompt::new(&names, PromptKind::Cooccurring, synonym)
    };
    if !co.is_empty() {
        prompts.push(with_co((canonical, canonical), false));
    }
    for syn in &class.synonyms {
        prompts.push(DetectPrompt::new(&[(syn, canonical)], PromptKind::Synonym, true));
        if !co.is_empty() {
            prompts.push(with_co((syn, canonical), true));
        }
    }
    Ok(prompts)
}

/// Number of prompts [`build_prompt_set`] produces for a class with the given
/// synonym count and co-occurring flag.
pub fn expected_prompt_count(synonyms: usize, has_co_occurring: bool) -> usize {
    let co = has_co_occurring as usize;
    1 + co + synonyms * (1 + co)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub phrase: String,
    pub prompt_kind: PromptKind,
    pub synonym: bool,
    /// Canonical class decoded through the eliciting prompt, when resolvable.
    pub class_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub class_name: String,
    pub phrase: String,
    pub prompt_kind: PromptKind,
    pub stage: Stage,
}

impl Annotation {
    /// Moves the annotation to a later stage; backwards moves are rejected.
    pub fn advance(&mut self, to: Stage) -> Result<()> {
        if to.rank() <= self.stage.rank() {
            return Err(Error::InvalidArgument(format!("annotation stage cannot move from {:?} to {:?}", self.stage, to)));
        }
        self.stage = to;
        Ok(())
    }

    pub fn scored_box(&self) -> ScoredBox {
        ScoredBox { bbox: self.bbox, score: self.score }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One line of the annotation store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub phrase: String,
    pub class: Option<String>,
    pub stage: Stage,
    pub prompt_kind: PromptKind,
    #[serde(default, skip_serializing_if = "is_false")]
    pub synonym: bool,
}

impl AnnotationRecord {
    pub fn bbox(&self) -> BBox {
        BBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 }
    }
}

impl From<&Annotation> for AnnotationRecord {
    fn from(a: &Annotation) -> Self {
        AnnotationRecord {
            image_id: a.image_id.clone(),
            x1: a.bbox.x1,
            y1: a.bbox.y1,
            x2: a.bbox.x2,
            y2: a.bbox.y2,
            score: a.score,
            phrase: a.phrase.clone(),
            class: Some(a.class_name.clone()),
            stage: a.stage,
            prompt_kind: a.prompt_kind,
            synonym: false,
        }
    }
}

impl From<&RawAnnotation> for AnnotationRecord {
    fn from(a: &RawAnnotation) -> Self {
        AnnotationRecord {
            image_id: a.image_id.clone(),
            x1: a.bbox.x1,
            y1: a.bbox.y1,
            x2: a.bbox.x2,
            y2: a.bbox.y2,
            score: a.score,
            phrase: a.phrase.clone(),
            class: a.class_name.clone(),
            stage: Stage::Raw,
            prompt_kind: a.prompt_kind,
            synonym: a.synonym,
        }
    }
}

impl TryFrom<&AnnotationRecord> for Annotation {
    type Error = Error;

    fn try_from(r: &AnnotationRecord) -> Result<Self> {
        let class_name =
            r.class.clone().ok_or_else(|| Error::InvalidArgument(format!("annotation on `{}` has no class", r.image_id)))?;
        Ok(Annotation {
            image_id: r.image_id.clone(),
            bbox: r.bbox(),
            score: r.score,
            class_name,
            phrase: r.phrase.clone(),
            prompt_kind: r.prompt_kind,
            stage: r.stage,
        })
    }
}

impl From<&AnnotationRecord> for RawAnnotation {
    fn from(r: &AnnotationRecord) -> Self {
        RawAnnotation {
            image_id: r.image_id.clone(),
            bbox: r.bbox(),
            score: r.score,
            phrase: r.phrase.clone(),
            prompt_kind: r.prompt_kind,
            synonym: r.synonym,
            class_name: r.class.clone(),
        }
    }
}

/// Thresholds forwarded to the detection backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectThresholds {
    pub box_threshold: f64,
    pub text_threshold: f64,
}

impl Default for DetectThresholds {
    fn default() -> Self {
        DetectThresholds {
            box_threshold: crate::backends::DEFAULT_BOX_THRESHOLD,
            text_threshold: crate::backends::DEFAULT_TEXT_THRESHOLD,
        }
    }
}

/// Runs every prompt of every pre-assigned class of `image` through the
/// detector and returns the union of the results, boxes clamped to the image.
pub fn annotate_image(
    image: &ImageRecord,
    catalog: &ClassCatalog,
    backend: &dyn Detector,
    thresholds: DetectThresholds,
) -> Result<Vec<RawAnnotation>> {
    let (w, h) = (image.width as f64, image.height as f64);
    let mut out = Vec::new();
    for class in &image.class_names {
        if !catalog.contains(class) {
            log::warn!("image `{}`: class `{class}` is not in the catalog, skipped", image.id);
            continue;
        }
        for prompt in build_prompt_set(class, catalog)? {
            let mut req = DetectRequest::new(image.path.clone(), prompt.text.clone());
            req.box_threshold = Some(thresholds.box_threshold);
            req.text_threshold = Some(thresholds.text_threshold);
            let resp = backend.detect(&req)?;
            for d in resp.detections {
                let coords_ok = [d.x1, d.y1, d.x2, d.y2].iter().all(|v| v.is_finite());
                if !coords_ok || !(0.0..=1.0).contains(&d.score) {
                    return Err(
                        BackendError::Malformed(format!("detection on `{}` has invalid box or score: {d:?}", image.id)).into()
                    );
                }
                let bbox = BBox { x1: d.x1, y1: d.y1, x2: d.x2, y2: d.y2 }.clamp_to(w, h);
                out.push(RawAnnotation {
                    image_id: image.id.clone(),
                    bbox,
                    score: d.score,
                    class_name: prompt.decode(&d.phrase).map(str::to_string),
                    phrase: d.phrase,
                    prompt_kind: prompt.kind,
                    synonym: prompt.synonym,
                });
            }
        }
    }
    Ok(out)
}

/// [`annotate_image`] over many images with a bounded number of images in flight.
pub fn annotate_images(
    images: &[ImageRecord],
    catalog: &ClassCatalog,
    backend: &dyn Detector,
    thresholds: DetectThresholds,
    max_in_flight: usize,
) -> Result<Vec<Vec<RawAnnotation>>> {
    bounded_map(images, max_in_flight, |img| annotate_image(img, catalog, backend, thresholds)).into_iter().collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    /// Survivors of score filtering, at stage `filtered`.
    pub filtered: Vec<Annotation>,
    /// Survivors of NMS, at stage `final`.
    pub final_annotations: Vec<Annotation>,
    /// Raw annotations whose phrase resolved to no class.
    pub unresolved: usize,
}

fn merge_order(a: &Annotation, b: &Annotation) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then_with(|| a.prompt_kind.cmp(&b.prompt_kind))
        .then_with(|| a.class_name.cmp(&b.class_name))
        .then_with(|| a.phrase.cmp(&b.phrase))
}

/// Filtering, canonicalization and class-agnostic NMS for one image, keeping
/// the intermediate filtered set.
pub fn filter_and_nms_detailed(
    raw: &[RawAnnotation],
    catalog: &ClassCatalog,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<FilterOutcome> {
    if let Some(first) = raw.first() {
        if let Some(other) = raw.iter().find(|r| r.image_id != first.image_id) {
            return Err(Error::InvalidArgument(format!(
                "filter_and_nms expects one image, got `{}` and `{}`",
                first.image_id, other.image_id
            )));
        }
    }

    let mut unresolved = 0;
    let mut pool: Vec<Annotation> = Vec::with_capacity(raw.len());
    for r in raw {
        let class = r.class_name.as_deref().and_then(|c| catalog.get(c)).or_else(|| catalog.lookup(&r.phrase));
        match class {
            Some(c) => pool.push(Annotation {
                image_id: r.image_id.clone(),
                bbox: r.bbox,
                score: r.score,
                class_name: c.name.clone(),
                phrase: r.phrase.clone(),
                prompt_kind: r.prompt_kind,
                stage: Stage::Raw,
            }),
            None => {
                log::warn!("image `{}`: dropping unresolvable phrase `{}`", r.image_id, r.phrase);
                unresolved += 1;
            }
        }
    }

    // a lone annotation survives regardless of its score
    if pool.len() != 1 {
        pool.retain(|a| a.score >= score_thresh);
    }
    pool.sort_by(merge_order);
    for a in &mut pool {
        a.stage = Stage::Filtered;
    }

    let boxes: Vec<ScoredBox> = pool.iter().map(Annotation::scored_box).collect();
    let final_annotations = nms_class_agnostic(&boxes, iou_thresh)
        .into_iter()
        .map(|i| Annotation { stage: Stage::Final, ..pool[i].clone() })
        .collect();

    Ok(FilterOutcome { filtered: pool, final_annotations, unresolved })
}

/// Returns the final (post-NMS) annotations for one image.
pub fn filter_and_nms(
    raw: &[RawAnnotation],
    catalog: &ClassCatalog,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Annotation>> {
    Ok(filter_and_nms_detailed(raw, catalog, score_thresh, iou_thresh)?.final_annotations)
}

/// Raw, filtered and final annotations for a set of images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationStore {
    pub raw: Vec<RawAnnotation>,
    pub filtered: Vec<Annotation>,
    pub final_annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub count: usize,
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAccounting {
    pub rows: Vec<StageRow>,
}

impl StageAccounting {
    pub fn count(&self, stage: &str) -> Option<usize> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.count)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<26} {:>8} {:>10}\n", "stage", "count", "mean score");
        for r in &self.rows {
            let mean = r.mean_score.map(|m| format!("{m:.2}")).unwrap_or_else(|| "-".into());
            s.push_str(&format!("{:<26} {:>8} {:>10}\n", r.stage, r.count, mean));
        }
        s
    }
}

pub const STAGE_ORIGINAL: &str = "original + co-occurring";
pub const STAGE_SYNONYM: &str = "+ synonym/co-occurring";
pub const STAGE_FILTERED: &str = "filtering";
pub const STAGE_NMS: &str = "nms";

fn row(stage: &str, scores: impl Iterator<Item = f64>) -> StageRow {
    let (mut n, mut sum) = (0usize, 0.0);
    for s in scores {
        n += 1;
        sum += s;
    }
    StageRow { stage: stage.to_string(), count: n, mean_score: (n > 0).then(|| sum / n as f64) }
}

/// Per-stage counts and mean scores: raw annotations from original-name
/// prompts, all raw annotations, filtered, and post-NMS.
pub fn stage_accounting(store: &AnnotationStore) -> StageAccounting {
    StageAccounting {
        rows: vec![
            row(STAGE_ORIGINAL, store.raw.iter().filter(|r| !r.synonym).map(|r| r.score)),
            row(STAGE_SYNONYM, store.raw.iter().map(|r| r.score)),
            row(STAGE_FILTERED, store.filtered.iter().map(|a| a.score)),
            row(STAGE_NMS, store.final_annotations.iter().map(|a| a.score)),
        ],
    }
}
