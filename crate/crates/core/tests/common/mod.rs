//! Independent reference implementations and generators shared by the
//! integration and acceptance tests. Nothing here calls the code under test
//! for the quantity it checks.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use labelforge::annotate::{AnnotationRecord, PromptKind, RawAnnotation};
use labelforge::catalog::ClassCatalog;
use labelforge::evaluate::{Detection, GroundTruth};
use labelforge::geometry::{BBox, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// IoU from first principles.
pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

fn corners(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Textbook NMS: repeatedly take the best remaining box and delete every
/// remaining box overlapping it by more than `t`. Priority is score, then
/// lower index. Zero-area boxes never participate.
pub fn brute_force_nms(items: &[ScoredBox], t: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> =
        (0..items.len()).filter(|&i| items[i].bbox.x2 > items[i].bbox.x1 && items[i].bbox.y2 > items[i].bbox.y1).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if items[i].score > items[best].score || (items[i].score == items[best].score && i < best) {
                best = i;
            }
        }
        kept.push(best);
        remaining.retain(|&i| i != best && ref_iou(corners(&items[i].bbox), corners(&items[best].bbox)) <= t);
    }
    kept.sort_unstable();
    kept
}

/// Random box on a coarse grid so exact ties and duplicates occur.
pub fn grid_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let step = extent / 20.0;
    let x1 = r.random_range(0..18) as f64 * step;
    let y1 = r.random_range(0..18) as f64 * step;
    let w = r.random_range(1..=6) as f64 * step;
    let h = r.random_range(1..=6) as f64 * step;
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

pub fn nms_instance(r: &mut ChaCha8Rng) -> Vec<ScoredBox> {
    let n = r.random_range(0..=50);
    (0..n)
        .map(|_| {
            let mut bbox = grid_box(r, 100.0);
            if r.random_bool(0.03) {
                bbox.x2 = bbox.x1;
            }
            let score = if r.random_bool(0.3) { r.random_range(0..5) as f64 / 4.0 } else { r.random::<f64>() };
            ScoredBox { bbox, score }
        })
        .collect()
}

/// 101-point interpolated AP for one class at one threshold, computed from
/// scratch: greedy matching by descending score (input order on ties) to the
/// best unmatched same-image ground truth with IoU >= t, then the maximum
/// precision at recall >= r for r = 0, 0.01, ..., 1. `None` without ground truth.
pub fn ref_ap(dets: &[Detection], gts: &[GroundTruth], class: &str, t: f64) -> Option<f64> {
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_name == class).collect();
    if g.is_empty() {
        return None;
    }
    let mut d: Vec<&Detection> = dets.iter().filter(|d| d.class_name == class).collect();
    d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut used = vec![false; g.len()];
    let mut tp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::new();
    for (k, det) in d.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (j, gt) in g.iter().enumerate() {
            if used[j] || gt.image_id != det.image_id {
                continue;
            }
            let v = ref_iou(corners(&det.bbox), corners(&gt.bbox));
            if v >= t && v > best_iou {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
        pr.push((tp as f64 / g.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pr.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

/// Class-mean AP at `t` over classes present in the ground truth.
pub fn ref_map(dets: &[Detection], gts: &[GroundTruth], t: f64) -> f64 {
    let mut classes: Vec<&str> = gts.iter().map(|g| g.class_name.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let aps: Vec<f64> = classes.iter().filter_map(|c| ref_ap(dets, gts, c, t)).collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn ap_instance(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let classes = ["a", "b", "c"];
    let images = ["i0", "i1", "i2"];
    let ng = r.random_range(1..=15);
    let gts: Vec<GroundTruth> = (0..ng)
        .map(|_| GroundTruth {
            image_id: images[r.random_range(0..3)].into(),
            bbox: grid_box(r, 100.0),
            class_name: classes[r.random_range(0..3)].into(),
        })
        .collect();
    let nd = r.random_range(0..=30);
    let dets = (0..nd)
        .map(|_| {
            let (image_id, class_name, bbox) = if !gts.is_empty() && r.random_bool(0.6) {
                let g = &gts[r.random_range(0..gts.len())];
                let j = |r: &mut ChaCha8Rng| r.random_range(-3..=3) as f64 * 2.5;
                let b = BBox { x1: g.bbox.x1 + j(r), y1: g.bbox.y1 + j(r), x2: g.bbox.x2 + j(r), y2: g.bbox.y2 + j(r) };
                let b = if b.x2 > b.x1 && b.y2 > b.y1 { b } else { g.bbox };
                (g.image_id.clone(), g.class_name.clone(), b)
            } else {
                (images[r.random_range(0..3)].to_string(), classes[r.random_range(0..3)].to_string(), grid_box(r, 100.0))
            };
            let score = if r.random_bool(0.25) { r.random_range(1..5) as f64 / 5.0 } else { r.random::<f64>() };
            Detection { image_id, bbox, score, class_name }
        })
        .collect();
    (dets, gts)
}

/// Recomputes the four accounting rows from the raw annotation store:
/// non-synonym raw count, all raw, score-filtered (a lone resolvable
/// annotation on an image is exempt) and class-agnostic NMS survivors.
pub fn ref_accounting(raw: &[AnnotationRecord], catalog: &ClassCatalog, score_t: f64, iou_t: f64) -> [(usize, f64); 4] {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let original: Vec<f64> = raw.iter().filter(|r| !r.synonym).map(|r| r.score).collect();
    let all: Vec<f64> = raw.iter().map(|r| r.score).collect();

    let mut per_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for r in raw {
        let resolvable = r.class.as_deref().is_some_and(|c| catalog.contains(c)) || catalog.lookup(&r.phrase).is_some();
        if resolvable {
            per_image.entry(&r.image_id).or_default().push(r);
        }
    }
    let mut filtered = Vec::new();
    let mut survivors = Vec::new();
    for (_, list) in per_image {
        let kept: Vec<&AnnotationRecord> =
            if list.len() == 1 { list } else { list.into_iter().filter(|r| r.score >= score_t).collect() };
        filtered.extend(kept.iter().map(|r| r.score));
        let items: Vec<ScoredBox> =
            kept.iter().map(|r| ScoredBox { bbox: BBox { x1: r.x1, y1: r.y1, x2: r.x2, y2: r.y2 }, score: r.score }).collect();
        // Ties between distinct boxes with equal scores can only change which
        // box survives, not the count, unless they overlap; order them the
        // same way as an exact canonical sort to be safe.
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&kept[a], &kept[b]);
            y.score
                .total_cmp(&x.score)
                .then(x.x1.total_cmp(&y.x1))
                .then(x.y1.total_cmp(&y.y1))
                .then(x.x2.total_cmp(&y.x2))
                .then(x.y2.total_cmp(&y.y2))
                .then(kind_rank(x.prompt_kind).cmp(&kind_rank(y.prompt_kind)))
                .then(class_of(x, catalog).cmp(&class_of(y, catalog)))
                .then(x.phrase.cmp(&y.phrase))
        });
        let sorted: Vec<ScoredBox> = order.iter().map(|&i| items[i]).collect();
        survivors.extend(brute_force_nms(&sorted, iou_t).into_iter().map(|i| sorted[i].score));
    }
    [
        (original.len(), mean(&original)),
        (all.len(), mean(&all)),
        (filtered.len(), mean(&filtered)),
        (survivors.len(), mean(&survivors)),
    ]
}

fn kind_rank(k: PromptKind) -> u8 {
    match k {
        PromptKind::Original => 0,
        PromptKind::Synonym => 1,
        PromptKind::Cooccurring => 2,
    }
}

fn class_of(r: &AnnotationRecord, catalog: &ClassCatalog) -> String {
    r.class
        .clone()
        .filter(|c| catalog.contains(c))
        .or_else(|| catalog.lookup(&r.phrase).map(|c| c.name.clone()))
        .unwrap_or_default()
}

/// Random raw annotations for one image, drawn from the catalog's phrases
/// plus an occasional unknown phrase.
pub fn raw_instance(r: &mut ChaCha8Rng, catalog: &ClassCatalog) -> Vec<RawAnnotation> {
    let mut phrases: Vec<(String, Option<String>)> = Vec::new();
    for c in catalog.classes() {
        phrases.push((c.name.clone(), Some(c.name.clone())));
        for s in &c.synonyms {
            phrases.push((s.clone(), Some(c.name.clone())));
        }
    }
    phrases.push(("giraffe".into(), None));
    let n = r.random_range(0..=12);
    (0..n)
        .map(|_| {
            let (phrase, class_name) = phrases[r.random_range(0..phrases.len())].clone();
            let kind = [PromptKind::Original, PromptKind::Cooccurring, PromptKind::Synonym][r.random_range(0..3)];
            let score = if r.random_bool(0.3) { r.random_range(0..=4) as f64 / 4.0 } else { r.random::<f64>() };
            RawAnnotation {
                image_id: "img".into(),
                bbox: grid_box(r, 200.0),
                score,
                phrase,
                prompt_kind: kind,
                synonym: kind == PromptKind::Synonym,
                class_name,
            }
        })
        .collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
