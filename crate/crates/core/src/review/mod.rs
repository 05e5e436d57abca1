//! Reviewer-based gating of pseudo-labels (precision, recall, fit) and of
//! generated images (photorealism).

mod overlay;
mod verdict;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::annotate::Annotation;
use crate::backends::{ReviewRequest, ReviewTask, Reviewer, PROTOCOL_VERSION};
use crate::catalog::{render_with, ClassCatalog, PromptRole, PromptTemplate, REVIEW_SYSTEM};
use crate::concurrency::bounded_map;
use crate::preprocess::ImageRecord;
use crate::{Error, Result};

pub use overlay::{
    label_text, overlay_sidecar_path, overlay_size, read_overlay_sidecar, render_overlay, write_overlay, OverlayBox,
    OverlayImage, OverlaySidecar, OVERLAY_LONG_SIDE, PALETTE, STROKE,
};
pub use verdict::{parse_photorealism, parse_verdict, VerdictError};

/// Score below which a lone annotation is still sent for review.
pub const REVIEW_SCORE_THRESHOLD: f64 = 0.5;
pub const NO_SECONDARY_TARGET: &str = "no secondary target";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    pub image_id: String,
    pub reviewer: String,
    pub precision: bool,
    pub recall: bool,
    pub fit: bool,
    pub kept: bool,
    pub raw_text: String,
}

impl ReviewVerdict {
    pub fn from_text(image_id: &str, reviewer: &str, raw_text: &str) -> std::result::Result<Self, VerdictError> {
        let (precision, recall, fit) = parse_verdict(raw_text)?;
        Ok(ReviewVerdict {
            image_id: image_id.to_string(),
            reviewer: reviewer.to_string(),
            precision,
            recall,
            fit,
            kept: precision && recall && fit,
            raw_text: raw_text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhotorealismVerdict {
    pub image_id: String,
    pub reviewer: String,
    pub suitable: bool,
    pub authentic: bool,
    pub kept: bool,
    pub raw_text: String,
}

impl PhotorealismVerdict {
    pub fn from_text(image_id: &str, reviewer: &str, raw_text: &str) -> std::result::Result<Self, VerdictError> {
        let (suitable, authentic) = parse_photorealism(raw_text)?;
        Ok(PhotorealismVerdict {
            image_id: image_id.to_string(),
            reviewer: reviewer.to_string(),
            suitable,
            authentic,
            kept: suitable && authentic,
            raw_text: raw_text.to_string(),
        })
    }
}

/// An image excluded from training because its review could not be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedsAttention {
    pub image_id: String,
    pub task: ReviewTask,
    pub reason: String,
    #[serde(default)]
    pub raw_text: String,
}

pub fn gate_pseudo_labels(v: &ReviewVerdict) -> bool {
    v.precision && v.recall && v.fit
}

pub fn gate_photorealism(v: &PhotorealismVerdict) -> bool {
    v.suitable && v.authentic
}

/// Images with several annotations or a low-confidence one go to review;
/// the rest bypass it and stay in the training pool.
pub fn select_for_review(annotations: &[Annotation]) -> bool {
    annotations.len() > 1 || annotations.iter().any(|a| a.score < REVIEW_SCORE_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewPrompt {
    pub system: String,
    pub user: String,
}

/// System and user prompts for reviewing an image of `primary_class`.
pub fn review_prompt(primary_class: &str, catalog: &ClassCatalog) -> Result<ReviewPrompt> {
    let class = catalog.require(primary_class)?;
    let secondary = catalog.co_occurring_of(&class.name)?.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", ");
    let secondary = if secondary.is_empty() { NO_SECONDARY_TARGET.to_string() } else { secondary };
    let user = render_with(
        &PromptTemplate::builtin(PromptRole::ReviewUser),
        &[("target", &class.name), ("secondary_target", &secondary)],
    )?;
    Ok(ReviewPrompt { system: REVIEW_SYSTEM.to_string(), user })
}

/// Review request for an already written overlay.
pub fn build_review_request(
    image: &ImageRecord,
    overlay_path: &Path,
    catalog: &ClassCatalog,
    inline_overlay: bool,
) -> Result<ReviewRequest> {
    let prompt = review_prompt(image.primary_class(), catalog)?;
    let image_base64 = if inline_overlay {
        let bytes = std::fs::read(overlay_path).map_err(|e| Error::io(overlay_path, e))?;
        Some(base64::engine::general_purpose::STANDARD.encode(bytes))
    } else {
        None
    };
    Ok(ReviewRequest {
        protocol_version: PROTOCOL_VERSION.into(),
        task: ReviewTask::PseudoLabel,
        image_ref: overlay_path.to_string_lossy().into_owned(),
        image_base64,
        system_prompt: Some(prompt.system),
        user_prompt: prompt.user,
    })
}

pub fn photorealism_request(image_ref: &Path, class_name: &str) -> Result<ReviewRequest> {
    let user = render_with(&PromptTemplate::builtin(PromptRole::Photorealism), &[("target", class_name)])?;
    Ok(ReviewRequest {
        protocol_version: PROTOCOL_VERSION.into(),
        task: ReviewTask::Photorealism,
        image_ref: image_ref.to_string_lossy().into_owned(),
        image_base64: None,
        system_prompt: None,
        user_prompt: user,
    })
}

/// Result of gating a set of annotated images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewOutcome {
    pub verdicts: Vec<ReviewVerdict>,
    pub needs_attention: Vec<NeedsAttention>,
    /// Images that were not selected for review.
    pub bypassed: BTreeSet<String>,
    /// Images whose annotations may be used for training.
    pub kept: BTreeSet<String>,
}

/// Where a review pass reads images and writes overlays.
#[derive(Debug, Clone, Copy)]
pub struct ReviewContext<'a> {
    /// Directory image paths are relative to.
    pub root: &'a Path,
    pub overlay_dir: &'a Path,
    /// Send overlays as base64 instead of by reference.
    pub inline_overlay: bool,
    pub max_in_flight: usize,
}

/// Reviews every image that [`select_for_review`] picks and gates it.
///
/// `finals` maps image ids to their final annotations; images with none are
/// neither reviewed nor kept.
pub fn review_pseudo_labels(
    images: &[ImageRecord],
    finals: &BTreeMap<String, Vec<Annotation>>,
    catalog: &ClassCatalog,
    reviewer: &dyn Reviewer,
    ctx: ReviewContext<'_>,
) -> Result<ReviewOutcome> {
    let mut outcome = ReviewOutcome::default();
    let mut selected = Vec::new();
    for img in images {
        let anns = match finals.get(&img.id) {
            Some(a) if !a.is_empty() => a,
            _ => continue,
        };
        if select_for_review(anns) {
            selected.push((img, anns));
        } else {
            outcome.bypassed.insert(img.id.clone());
            outcome.kept.insert(img.id.clone());
        }
    }

    let mut requests = Vec::with_capacity(selected.len());
    for (img, anns) in &selected {
        let overlay = write_overlay(ctx.overlay_dir, &img.id, &ctx.root.join(&img.path), anns)?;
        requests.push((img.id.clone(), build_review_request(img, &overlay, catalog, ctx.inline_overlay)?));
    }
    let answers = bounded_map(&requests, ctx.max_in_flight, |(_, req)| reviewer.review(req));
    for ((id, _), answer) in requests.iter().zip(answers) {
        match answer {
            Ok(resp) => match ReviewVerdict::from_text(id, &resp.reviewer, &resp.text) {
                Ok(v) => {
                    if gate_pseudo_labels(&v) {
                        outcome.kept.insert(id.clone());
                    }
                    outcome.verdicts.push(v);
                }
                Err(e) => outcome.needs_attention.push(NeedsAttention {
                    image_id: id.clone(),
                    task: ReviewTask::PseudoLabel,
                    reason: e.to_string(),
                    raw_text: resp.text,
                }),
            },
            Err(e) => {
                log::warn!("review of `{id}` failed: {e}");
                outcome.needs_attention.push(NeedsAttention {
                    image_id: id.clone(),
                    task: ReviewTask::PseudoLabel,
                    reason: e.to_string(),
                    raw_text: String::new(),
                });
            }
        }
    }
    Ok(outcome)
}

/// 2x2 keep/drop agreement between two reviewers over the same images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub keep_keep: usize,
    pub keep_drop: usize,
    pub drop_keep: usize,
    pub drop_drop: usize,
    pub agreement: f64,
}

pub fn agreement_matrix(a: &BTreeMap<String, bool>, b: &BTreeMap<String, bool>) -> Result<Agreement> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let only: Vec<&String> =
            a.keys().filter(|k| !b.contains_key(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).collect();
        return Err(Error::InvalidArgument(format!("verdict sets cover different images: {only:?}")));
    }
    let mut m = Agreement { keep_keep: 0, keep_drop: 0, drop_keep: 0, drop_drop: 0, agreement: 0.0 };
    for (x, y) in a.values().zip(b.values()) {
        match (x, y) {
            (true, true) => m.keep_keep += 1,
            (true, false) => m.keep_drop += 1,
            (false, true) => m.drop_keep += 1,
            (false, false) => m.drop_drop += 1,
        }
    }
    let n = a.len();
    m.agreement = if n == 0 { 0.0 } else { (m.keep_keep + m.drop_drop) as f64 / n as f64 };
    Ok(m)
}
