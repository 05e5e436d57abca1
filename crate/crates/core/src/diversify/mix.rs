//! Mixing of approved generated images with the original training split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotate::AnnotationRecord;
use crate::catalog::ClassCatalog;
use crate::paths::{normalize, relative_path, to_portable};
use crate::preprocess::{ImageRecord, Origin};
use crate::{Error, Result};

/// Generated-to-original ratio `g:o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub generated: u32,
    pub original: u32,
}

impl Ratio {
    pub fn new(generated: u32, original: u32) -> Result<Self> {
        if generated == 0 && original == 0 {
            return Err(Error::InvalidArgument("ratio 0:0 selects nothing".into()));
        }
        Ok(Ratio { generated, original })
    }

    /// Whether the original images enter the mix (false only for `g:0`).
    pub fn includes_originals(&self) -> bool {
        self.original > 0
    }

    /// Number of generated images to select for `originals` original images.
    pub fn generated_total(&self, originals: usize) -> usize {
        let g = self.generated as usize;
        if self.original == 0 {
            originals * g
        } else {
            originals * g / self.original as usize
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.generated, self.original)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("ratio `{s}` is not of the form g:o"));
        let (g, o) = s.trim().split_once(':').ok_or_else(bad)?;
        let g = g.trim().parse().map_err(|_| bad())?;
        let o = o.trim().parse().map_err(|_| bad())?;
        Ratio::new(g, o)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixPlan {
    pub ratio: Ratio,
    /// Fixed quotas for individual classes; the rest is apportioned.
    #[serde(default)]
    pub per_class_quota: BTreeMap<String, usize>,
    #[serde(default)]
    pub excluded_classes: BTreeSet<String>,
}

impl MixPlan {
    pub fn new(ratio: Ratio) -> Self {
        MixPlan { ratio, per_class_quota: BTreeMap::new(), excluded_classes: BTreeSet::new() }
    }
}

/// Per-class generated quotas for the given original images.
///
/// Classes flagged `diversify=false` in the catalog or listed in the plan's
/// exclusions get 0. Explicit per-class quotas are taken as given; the
/// remainder of the ratio total is split in proportion to the original
/// primary-class counts, floored, with the rounding remainder going to the
/// class with the largest quota (first by name on ties).
pub fn apportion_quotas(originals: &[ImageRecord], catalog: &ClassCatalog, plan: &MixPlan) -> Result<BTreeMap<String, usize>> {
    let excluded = |c: &str| plan.excluded_classes.contains(c) || catalog.get(c).is_some_and(|e| !e.diversify);
    for c in plan.per_class_quota.keys().chain(&plan.excluded_classes) {
        catalog.require(c)?;
    }
    if let Some((c, _)) = plan.per_class_quota.iter().find(|(c, q)| **q > 0 && excluded(c)) {
        return Err(Error::InvalidArgument(format!("class `{c}` is excluded but has a quota")));
    }

    let total = plan.ratio.generated_total(originals.len());
    let mut quotas: BTreeMap<String, usize> = catalog.class_names().into_iter().map(|c| (c.to_string(), 0)).collect();
    let mut fixed = 0usize;
    for (c, &q) in &plan.per_class_quota {
        quotas.insert(c.clone(), q);
        fixed += q;
    }
    let remaining = total.saturating_sub(fixed);

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for img in originals {
        let c = img.primary_class();
        if catalog.contains(c) && !excluded(c) && !plan.per_class_quota.contains_key(c) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let weight: usize = counts.values().sum();
    if remaining > 0 {
        if weight == 0 {
            return Err(Error::InvalidArgument("no diversifiable class among the originals to receive generated quota".into()));
        }
        let mut assigned = 0;
        for (&c, &n) in &counts {
            let q = remaining * n / weight;
            quotas.insert(c.to_string(), q);
            assigned += q;
        }
        let largest = counts.keys().max_by(|a, b| quotas[**a].cmp(&quotas[**b]).then_with(|| b.cmp(a))).expect("weight > 0");
        *quotas.get_mut(*largest).expect("present") += remaining - assigned;
    }
    Ok(quotas)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixResult {
    /// Originals (when included) followed by the selected generated images.
    pub images: Vec<ImageRecord>,
    pub quotas: BTreeMap<String, usize>,
    pub generated_selected: usize,
}

/// Selects the generated images for a training mix.
///
/// Per class, the pool is sorted by id, shuffled with a per-class seeded
/// stream and the first `quota` images are taken.
pub fn mix_dataset(
    originals: &[ImageRecord],
    pool: &[ImageRecord],
    catalog: &ClassCatalog,
    plan: &MixPlan,
    seed: u64,
) -> Result<MixResult> {
    if let Some(img) = pool.iter().find(|i| i.origin != Origin::Generated) {
        return Err(Error::InvalidArgument(format!("pool image `{}` is not generated", img.id)));
    }
    let quotas = apportion_quotas(originals, catalog, plan)?;
    let mut by_class: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for img in pool {
        by_class.entry(img.primary_class()).or_default().push(img);
    }
    let shortfall: Vec<(String, usize, usize)> = quotas
        .iter()
        .filter_map(|(c, &q)| {
            let have = by_class.get(c.as_str()).map_or(0, Vec::len);
            (have < q).then(|| (c.clone(), have, q))
        })
        .collect();
    if !shortfall.is_empty() {
        return Err(Error::Shortfall(shortfall));
    }

    let mut images: Vec<ImageRecord> = if plan.ratio.includes_originals() { originals.to_vec() } else { Vec::new() };
    let mut generated_selected = 0;
    for (c, &q) in quotas.iter().filter(|(_, &q)| q > 0) {
        let mut candidates = by_class[c.as_str()].clone();
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = crate::backends::world::derived_rng(seed, &["mix", c]);
        candidates.shuffle(&mut rng);
        let mut picked: Vec<ImageRecord> = candidates[..q].iter().map(|i| (*i).clone()).collect();
        picked.sort_by(|a, b| a.id.cmp(&b.id));
        generated_selected += picked.len();
        images.extend(picked);
    }
    Ok(MixResult { images, quotas, generated_selected })
}

/// Training manifest handed to a detector train backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub seed: u64,
    pub ratio: Ratio,
    /// Run root relative to the manifest's directory; image paths are
    /// relative to it.
    pub base: String,
    pub quotas: BTreeMap<String, usize>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl TrainingManifest {
    /// Builds a manifest for `mix`, keeping the annotations of its images.
    /// Originals without annotations stay in as background images; generated
    /// images without annotations are left out.
    pub fn new(
        mix: &MixResult,
        annotations: &[AnnotationRecord],
        ratio: Ratio,
        seed: u64,
        manifest_dir: &Path,
        root: &Path,
    ) -> Self {
        let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
        for a in annotations {
            by_image.entry(a.image_id.as_str()).or_default().push(a);
        }
        let mut images = Vec::new();
        let mut anns = Vec::new();
        for img in &mix.images {
            match by_image.get(img.id.as_str()) {
                Some(list) => {
                    images.push(img.clone());
                    anns.extend(list.iter().map(|a| (*a).clone()));
                }
                None if img.origin == Origin::Original => images.push(img.clone()),
                None => log::info!("generated image `{}` has no annotations; left out of the manifest", img.id),
            }
        }
        TrainingManifest {
            seed,
            ratio,
            base: to_portable(&relative_path(manifest_dir, root)),
            quotas: mix.quotas.clone(),
            images,
            annotations: anns,
        }
    }

    /// Directory that image paths are relative to.
    pub fn base_dir(&self, manifest_path: &Path) -> PathBuf {
        let dir = manifest_path.parent().unwrap_or(Path::new(""));
        normalize(&dir.join(&self.base))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ClassEntry;

    fn catalog() -> ClassCatalog {
        let mut classes: Vec<ClassEntry> =
            ["bulldozer", "mobile crane", "crawler excavator"].into_iter().map(ClassEntry::new).collect();
        classes[0].diversify = true;
        classes[1].diversify = true;
        ClassCatalog::new("t", classes).unwrap()
    }

    fn rec(id: String, class: &str, origin: Origin) -> ImageRecord {
        ImageRecord { id, path: String::new(), class_names: vec![class.into()], origin, width: 8, height: 8 }
    }

    fn originals(counts: &[(&str, usize)]) -> Vec<ImageRecord> {
        counts.iter().flat_map(|(c, n)| (0..*n).map(move |i| rec(format!("o-{c}-{i}"), c, Origin::Original))).collect()
    }

    fn pool(counts: &[(&str, usize)]) -> Vec<ImageRecord> {
        counts.iter().flat_map(|(c, n)| (0..*n).map(move |i| rec(format!("g-{c}-{i:04}"), c, Origin::Generated))).collect()
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("3:1".parse::<Ratio>().unwrap(), Ratio { generated: 3, original: 1 });
        assert_eq!(Ratio::new(1, 0).unwrap().generated_total(10), 10);
        assert_eq!(Ratio::new(1, 2).unwrap().generated_total(5), 2);
        assert!("0:0".parse::<Ratio>().is_err());
        assert!("3-1".parse::<Ratio>().is_err());
        assert_eq!(serde_json::to_string(&Ratio::new(3, 1).unwrap()).unwrap(), "\"3:1\"");
        assert_eq!(Ratio::new(3, 1).unwrap().generated_total(12_000), 36_000);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let o = originals(&[("bulldozer", 5), ("crawler excavator", 3)]);
        let mix = mix_dataset(&o, &[], &catalog(), &MixPlan::new("0:1".parse().unwrap()), 1).unwrap();
        assert_eq!(mix.images, o);
        assert_eq!(mix.generated_selected, 0);
    }

    #[test]
    fn proportional_quotas_with_remainder() {
        let o = originals(&[("bulldozer", 3), ("mobile crane", 4), ("crawler excavator", 10)]);
        let plan = MixPlan::new("1:1".parse().unwrap());
        let q = apportion_quotas(&o, &catalog(), &plan).unwrap();
        // total 17 over weights 3 and 4: floor gives 7 and 9, remainder 1 to the larger
        assert_eq!(q["bulldozer"], 7);
        assert_eq!(q["mobile crane"], 10);
        assert_eq!(q["crawler excavator"], 0);
    }

    #[test]
    fn overrides_and_exclusions() {
        let o = originals(&[("bulldozer", 10), ("mobile crane", 10)]);
        let mut plan = MixPlan::new("1:1".parse().unwrap());
        plan.per_class_quota.insert("bulldozer".into(), 15);
        let q = apportion_quotas(&o, &catalog(), &plan).unwrap();
        assert_eq!((q["bulldozer"], q["mobile crane"]), (15, 5));
        plan.per_class_quota.clear();
        plan.excluded_classes.insert("mobile crane".into());
        let q = apportion_quotas(&o, &catalog(), &plan).unwrap();
        assert_eq!((q["bulldozer"], q["mobile crane"]), (20, 0));
        plan.per_class_quota.insert("mobile crane".into(), 1);
        assert!(apportion_quotas(&o, &catalog(), &plan).is_err());
    }

    #[test]
    fn shortfall_is_reported_per_class() {
        let o = originals(&[("bulldozer", 4), ("mobile crane", 4)]);
        let p = pool(&[("bulldozer", 10), ("mobile crane", 2)]);
        let err = mix_dataset(&o, &p, &catalog(), &MixPlan::new("2:1".parse().unwrap()), 0).unwrap_err();
        match err {
            Error::Shortfall(s) => assert_eq!(s, vec![("mobile crane".to_string(), 2, 8)]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn one_to_zero_drops_originals() {
        let o = originals(&[("bulldozer", 4)]);
        let p = pool(&[("bulldozer", 6)]);
        let mix = mix_dataset(&o, &p, &catalog(), &MixPlan::new("1:0".parse().unwrap()), 0).unwrap();
        assert_eq!(mix.images.len(), 4);
        assert!(mix.images.iter().all(|i| i.origin == Origin::Generated));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let o = originals(&[("bulldozer", 20), ("mobile crane", 20)]);
        let p = pool(&[("bulldozer", 100), ("mobile crane", 100)]);
        let plan = MixPlan::new("1:1".parse().unwrap());
        let a = mix_dataset(&o, &p, &catalog(), &plan, 9).unwrap();
        let mut shuffled = p.clone();
        shuffled.reverse();
        let b = mix_dataset(&o, &shuffled, &catalog(), &plan, 9).unwrap();
        assert_eq!(a, b);
        let c = mix_dataset(&o, &p, &catalog(), &plan, 10).unwrap();
        assert_ne!(a.images, c.images);
        assert_eq!(a.generated_selected, 40);
    }

    #[test]
    fn manifest_base_and_filtering() {
        let o = originals(&[("bulldozer", 2)]);
        let mix = mix_dataset(&o, &[], &catalog(), &MixPlan::new("0:1".parse().unwrap()), 0).unwrap();
        let ann = AnnotationRecord {
            image_id: "o-bulldozer-0".into(),
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
            score: 0.9,
            phrase: "bulldozer".into(),
            class: Some("bulldozer".into()),
            stage: crate::annotate::Stage::Final,
            prompt_kind: crate::annotate::PromptKind::Original,
            synonym: false,
        };
        let root = Path::new("/runs/a");
        let m = TrainingManifest::new(&mix, std::slice::from_ref(&ann), mix_ratio(), 0, &root.join("mix"), root);
        assert_eq!(m.images, o);
        assert_eq!(m.annotations, vec![ann]);
        assert_eq!(m.base, "..");
        assert_eq!(m.base_dir(&root.join("mix/manifest.json")), PathBuf::from("/runs/a"));
    }

    fn mix_ratio() -> Ratio {
        Ratio::new(0, 1).unwrap()
    }
}
