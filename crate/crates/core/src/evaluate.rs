//! COCO-style detection evaluation: greedy matching, 101-point interpolated
//! AP at single and averaged IoU thresholds, and confusion matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::AnnotationRecord;
use crate::geometry::{iou, BBox};
use crate::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_CONFUSION_IOU: f64 = 0.45;
pub const DEFAULT_CONFUSION_CONF: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub bbox: BBox,
    pub class_name: String,
}

impl Detection {
    /// Annotation records without a resolved class are skipped.
    pub fn from_records(records: &[AnnotationRecord]) -> Vec<Detection> {
        records
            .iter()
            .filter_map(|r| {
                Some(Detection { image_id: r.image_id.clone(), bbox: r.bbox(), score: r.score, class_name: r.class.clone()? })
            })
            .collect()
    }
}

impl GroundTruth {
    pub fn from_records(records: &[AnnotationRecord]) -> Vec<GroundTruth> {
        records
            .iter()
            .filter_map(|r| Some(GroundTruth { image_id: r.image_id.clone(), bbox: r.bbox(), class_name: r.class.clone()? }))
            .collect()
    }
}

/// Matching result for one class at one IoU threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatch {
    /// (score, is_tp) in descending score order, ties by input order.
    pub detections: Vec<(f64, bool)>,
    pub num_gt: usize,
    pub false_negatives: usize,
}

/// Greedy per-class matching: detections in descending score order each take
/// the unmatched same-image, same-class ground truth with the highest IoU at
/// or above `iou_t` (lowest index on ties).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_t: f64) -> BTreeMap<String, ClassMatch> {
    let mut out: BTreeMap<String, ClassMatch> = BTreeMap::new();
    let mut gt_index: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_index.entry((&g.class_name, &g.image_id)).or_default().push(i);
        out.entry(g.class_name.clone()).or_default().num_gt += 1;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_index.get(&(d.class_name.as_str(), d.image_id.as_str())) {
            for &j in cands {
                if taken[j] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[j].bbox);
                if v >= iou_t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        out.entry(d.class_name.clone()).or_default().detections.push((d.score, best.is_some()));
    }
    for (j, g) in gts.iter().enumerate() {
        if !taken[j] {
            out.get_mut(&g.class_name).expect("inserted above").false_negatives += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub class_name: String,
    pub iou_t: f64,
    /// (recall, precision) after each detection.
    pub points: Vec<(f64, f64)>,
    /// Interpolated precision on the recall grid 0, 0.01, ..., 1.
    pub envelope: Vec<f64>,
}

impl PRCurve {
    pub fn ap(&self) -> f64 {
        self.envelope.iter().sum::<f64>() / RECALL_POINTS as f64
    }
}

/// Builds the PR curve and its monotone envelope. `None` when the class has
/// no ground truth.
pub fn pr_curve(class_name: &str, m: &ClassMatch, iou_t: f64) -> Option<PRCurve> {
    if m.num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut counts = Vec::with_capacity(m.detections.len());
    for (k, &(_, is_tp)) in m.detections.iter().enumerate() {
        tp += is_tp as usize;
        counts.push((tp, k + 1));
    }
    let points: Vec<(f64, f64)> = counts.iter().map(|&(tp, n)| (tp as f64 / m.num_gt as f64, tp as f64 / n as f64)).collect();
    let mut running = vec![0.0; points.len()];
    let mut best = 0.0f64;
    for i in (0..points.len()).rev() {
        best = best.max(points[i].1);
        running[i] = best;
    }
    // recall_i >= k/100 compared in integers to avoid grid rounding
    let envelope = (0..RECALL_POINTS)
        .map(|k| {
            let first = counts.partition_point(|&(tp, _)| tp * 100 < k * m.num_gt);
            running.get(first).copied().unwrap_or(0.0)
        })
        .collect();
    Some(PRCurve { class_name: class_name.to_string(), iou_t, points, envelope })
}

/// AP of one class at one threshold; `None` if the class is absent from GT.
pub fn ap_at(dets: &[Detection], gts: &[GroundTruth], iou_t: f64, class: &str) -> Option<f64> {
    let dets: Vec<Detection> = dets.iter().filter(|d| d.class_name == class).cloned().collect();
    let gts: Vec<GroundTruth> = gts.iter().filter(|g| g.class_name == class).cloned().collect();
    let m = match_detections(&dets, &gts, iou_t).remove(class)?;
    pr_curve(class, &m, iou_t).map(|c| c.ap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAP {
    /// AP at each threshold of [`coco_thresholds`].
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap50_95: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub thresholds: Vec<f64>,
    pub per_class: BTreeMap<String, ClassAP>,
    pub ap50: f64,
    pub ap50_95: f64,
    pub num_classes: usize,
    /// Classes that only appear in detections; excluded from the means.
    pub absent_classes: Vec<String>,
}

/// Per-class AP over the ten thresholds; class means, then the threshold mean.
pub fn ap_summary(dets: &[Detection], gts: &[GroundTruth]) -> Result<APReport> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate against empty ground truth".into()));
    }
    let thresholds = coco_thresholds();
    let mut per_class: BTreeMap<String, ClassAP> = BTreeMap::new();
    for &t in &thresholds {
        for (class, m) in match_detections(dets, gts, t) {
            if let Some(curve) = pr_curve(&class, &m, t) {
                let e = per_class.entry(class).or_insert_with(|| ClassAP {
                    ap: Vec::new(),
                    ap50: 0.0,
                    ap50_95: 0.0,
                    num_gt: m.num_gt,
                });
                e.ap.push(curve.ap());
            }
        }
    }
    for c in per_class.values_mut() {
        c.ap50 = c.ap[0];
        c.ap50_95 = c.ap.iter().sum::<f64>() / c.ap.len() as f64;
    }
    let n = per_class.len() as f64;
    let per_threshold: Vec<f64> = (0..thresholds.len()).map(|i| per_class.values().map(|c| c.ap[i]).sum::<f64>() / n).collect();
    let gt_classes: BTreeSet<&str> = gts.iter().map(|g| g.class_name.as_str()).collect();
    let absent: BTreeSet<String> =
        dets.iter().filter(|d| !gt_classes.contains(d.class_name.as_str())).map(|d| d.class_name.clone()).collect();
    Ok(APReport {
        thresholds: thresholds.to_vec(),
        ap50: per_threshold[0],
        ap50_95: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        num_classes: per_class.len(),
        per_class,
        absent_classes: absent.into_iter().collect(),
    })
}

impl APReport {
    /// Aligned text table: one row per class plus an "all" row.
    pub fn to_table(&self) -> String {
        let width = self.per_class.keys().map(String::len).chain([5]).max().unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6}  {:>8}", "class", "gt", "AP50", "AP50-95");
        for (c, ap) in &self.per_class {
            let _ = writeln!(s, "{c:<width$}  {:>6}  {:>6.3}  {:>8.3}", ap.num_gt, ap.ap50, ap.ap50_95);
        }
        let total: usize = self.per_class.values().map(|c| c.num_gt).sum();
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>6.3}  {:>8.3}", "all", total, self.ap50, self.ap50_95);
        s
    }
}

/// Counts indexed `[gt][det]`, with the background at index `classes.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn background(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, gt: &str, det: &str) -> Option<usize> {
        let idx = |c: &str| if c == "background" { Some(self.background()) } else { self.classes.iter().position(|x| x == c) };
        Some(self.counts[idx(gt)?][idx(det)?])
    }

    pub fn off_diagonal(&self) -> usize {
        let n = self.background();
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| self.counts[i][j]).sum()
    }
}

/// Class-agnostic greedy matching per image: detections at or above `conf_t`
/// in descending score order take the unmatched ground truth of highest IoU
/// at or above `iou_t`.
pub fn confusion_matrix(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: &[String],
    iou_t: f64,
    conf_t: f64,
) -> Result<ConfusionMatrix> {
    if !(iou_t > 0.0 && iou_t < 1.0 && conf_t > 0.0 && conf_t < 1.0) {
        return Err(Error::InvalidArgument(format!("thresholds must lie in (0,1): iou {iou_t}, conf {conf_t}")));
    }
    let bg = classes.len();
    let index = |c: &str| classes.iter().position(|x| x == c).ok_or_else(|| Error::UnknownClass(c.to_string()));
    let mut counts = vec![vec![0usize; bg + 1]; bg + 1];
    let mut by_image: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(&g.image_id).or_default().0.push(i);
    }
    for (i, d) in dets.iter().enumerate().filter(|(_, d)| d.score >= conf_t) {
        by_image.entry(&d.image_id).or_default().1.push(i);
    }
    for (g_idx, mut d_idx) in by_image.into_values() {
        d_idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut taken = vec![false; g_idx.len()];
        for di in d_idx {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (k, &gi) in g_idx.iter().enumerate() {
                let v = iou(&d.bbox, &gts[gi].bbox);
                if !taken[k] && v >= iou_t && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            let det_class = index(&d.class_name)?;
            match best {
                Some((k, _)) => {
                    taken[k] = true;
                    counts[index(&gts[g_idx[k]].class_name)?][det_class] += 1;
                }
                None => counts[bg][det_class] += 1,
            }
        }
        for (k, &gi) in g_idx.iter().enumerate() {
            if !taken[k] {
                counts[index(&gts[gi].class_name)?][bg] += 1;
            }
        }
    }
    Ok(ConfusionMatrix { classes: classes.to_vec(), counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub supercategory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Image id used for a COCO image: the file name without directory or extension.
pub fn coco_image_key(file_name: &str) -> String {
    Path::new(file_name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl CocoDataset {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::jsonl::read_json(path)
    }

    /// Converts annotations to ground truth boxes keyed by image file stem.
    pub fn ground_truth(&self) -> Result<Vec<GroundTruth>> {
        let images: BTreeMap<u64, String> = self.images.iter().map(|i| (i.id, coco_image_key(&i.file_name))).collect();
        let cats: BTreeMap<u64, &str> = self.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        self.annotations
            .iter()
            .map(|a| {
                let image_id = images.get(&a.image_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("annotation {} references unknown image {}", a.id, a.image_id))
                })?;
                let class = cats.get(&a.category_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("annotation {} references unknown category {}", a.id, a.category_id))
                })?;
                Ok(GroundTruth { image_id: image_id.clone(), bbox: BBox::from_xywh(a.bbox), class_name: class.to_string() })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    fn gt(img: &str, bbox: BBox, c: &str) -> GroundTruth {
        GroundTruth { image_id: img.into(), bbox, class_name: c.into() }
    }

    fn det(img: &str, bbox: BBox, s: f64, c: &str) -> Detection {
        Detection { image_id: img.into(), bbox, score: s, class_name: c.into() }
    }

    #[test]
    fn thresholds_are_exact() {
        let t = coco_thresholds();
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
        assert_eq!(t[3], 0.65);
    }

    #[test]
    fn perfect_and_empty() {
        let g = vec![gt("a", b(0., 0., 10., 10.), "x"), gt("b", b(5., 5., 20., 20.), "x")];
        let d: Vec<_> = g.iter().map(|g| det(&g.image_id, g.bbox, 1.0, "x")).collect();
        assert_eq!(ap_at(&d, &g, 0.5, "x"), Some(1.0));
        assert_eq!(ap_at(&[], &g, 0.5, "x"), Some(0.0));
        assert_eq!(ap_at(&d, &g, 0.5, "y"), None);
        let m = match_detections(&[], &g, 0.5);
        assert_eq!(m["x"].false_negatives, 2);
        let r = ap_summary(&d, &g).unwrap();
        assert_eq!((r.ap50, r.ap50_95), (1.0, 1.0));
        assert!(ap_summary(&d, &[]).is_err());
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = vec![gt("a", b(0., 0., 10., 10.), "x")];
        let d = vec![det("a", b(0., 0., 10., 9.), 0.6, "x"), det("a", b(0., 0., 10., 10.), 0.9, "x")];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m["x"].detections, vec![(0.9, true), (0.6, false)]);
    }

    #[test]
    fn hand_computed_curve() {
        // 3 gts; ranked: TP, FP, TP, FP, TP -> precision 1, 1/2, 2/3, 2/4, 3/5
        let g: Vec<_> = (0..3).map(|i| gt("a", b(i as f64 * 20., 0., i as f64 * 20. + 10., 10.), "x")).collect();
        let far = b(100., 100., 110., 110.);
        let d = vec![
            det("a", g[0].bbox, 0.9, "x"),
            det("a", far, 0.8, "x"),
            det("a", g[1].bbox, 0.7, "x"),
            det("a", far, 0.6, "x"),
            det("a", g[2].bbox, 0.5, "x"),
        ];
        // envelope: recall <= 1/3 -> 1, <= 2/3 -> 2/3, <= 1 -> 3/5
        let expected = (34.0 * 1.0 + 33.0 * (2.0 / 3.0) + 34.0 * 0.6) / 101.0;
        assert!((ap_at(&d, &g, 0.5, "x").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn confusion_swap_case() {
        let classes = vec!["x".to_string(), "y".to_string()];
        let g = vec![gt("a", b(0., 0., 10., 10.), "x"), gt("a", b(20., 0., 30., 10.), "y")];
        let d = vec![det("a", g[0].bbox, 0.9, "y"), det("a", g[1].bbox, 0.9, "x")];
        let cm = confusion_matrix(&d, &g, &classes, 0.45, 0.25).unwrap();
        assert_eq!(cm.off_diagonal(), 2);
        assert_eq!(cm.get("x", "y"), Some(1));
        let low: Vec<_> = d.iter().map(|d| Detection { score: 0.1, ..d.clone() }).collect();
        let cm = confusion_matrix(&low, &g, &classes, 0.45, 0.25).unwrap();
        assert_eq!(cm.get("x", "background"), Some(1));
        assert_eq!(cm.get("y", "background"), Some(1));
        assert!(confusion_matrix(&d, &g, &classes, 1.0, 0.25).is_err());
    }

    #[test]
    fn coco_ground_truth() {
        let ds: CocoDataset = serde_json::from_str(
            r#"{"images":[{"id":1,"file_name":"dir/img7.png","width":50,"height":40}],
                "annotations":[{"id":3,"image_id":1,"category_id":2,"bbox":[1,2,10,20],"area":200,"iscrowd":0}],
                "categories":[{"id":2,"name":"bulldozer"}]}"#,
        )
        .unwrap();
        let g = ds.ground_truth().unwrap();
        assert_eq!(g, vec![gt("img7", b(1., 2., 11., 22.), "bulldozer")]);
    }
}
