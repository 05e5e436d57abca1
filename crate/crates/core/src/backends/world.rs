//! Seeded synthetic world: flat images with rectangular "machines" whose
//! ground truth is known, plus the noise model the mock backend applies.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{AnnotationRecord, PromptKind, Stage};
use crate::catalog::{ClassCatalog, ClassEntry, InstanceEntry, Terrain};
use crate::geometry::BBox;
use crate::preprocess::Origin;
use crate::{Error, Result};

/// File suffix of the ground-truth sidecar written next to every world image.
pub const TRUTH_SUFFIX: &str = "truth.json";

/// Deterministic RNG for a (seed, labels...) tuple.
pub fn derived_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Per-edge box jitter, as a fraction of box width/height.
    pub jitter_sigma: f64,
    /// Probability of one spurious box per detect call.
    pub decoy_rate: f64,
    /// Probability a truth object is missed by one prompt.
    pub miss_rate: f64,
    /// Probability a detected object is also reported under another prompt token.
    pub confusion_rate: f64,
    pub score_max: f64,
    /// Score lost per unit of IoU deficit.
    pub score_slope: f64,
    pub score_sigma: f64,
    /// Fraction of generated images the world marks as not photorealistic.
    pub unrealistic_rate: f64,
    /// Jitter floor of the mock-trained detector, divided by the class count.
    pub trained_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            jitter_sigma: 0.03,
            decoy_rate: 0.15,
            miss_rate: 0.05,
            confusion_rate: 0.1,
            score_max: 0.95,
            score_slope: 1.2,
            score_sigma: 0.03,
            unrealistic_rate: 0.2,
            trained_sigma: 0.02,
        }
    }
}

impl NoiseModel {
    /// A noiseless detector: exact truth boxes at `score_max`.
    pub fn none() -> Self {
        NoiseModel {
            jitter_sigma: 0.0,
            decoy_rate: 0.0,
            miss_rate: 0.0,
            confusion_rate: 0.0,
            score_sigma: 0.0,
            unrealistic_rate: 0.0,
            ..NoiseModel::default()
        }
    }
}

/// How the mock reviewer answers the photorealism questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotorealismPolicy {
    /// Use the `realistic` flag of the image's truth sidecar.
    #[default]
    Sidecar,
    AlwaysYes,
    RejectOddSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub num_images: usize,
    pub width: [u32; 2],
    pub height: [u32; 2],
    /// Fraction of images whose detections are jittered `hard_jitter_scale` times harder.
    pub hard_rate: f64,
    pub hard_jitter_scale: f64,
    /// Probability an image gets an additional object of its own class.
    pub extra_object_rate: f64,
    pub exact_duplicate_rate: f64,
    pub near_duplicate_rate: f64,
    pub noise: NoiseModel,
    #[serde(default)]
    pub photorealism: PhotorealismPolicy,
    pub catalog: ClassCatalog,
}

impl WorldSpec {
    /// A small heavy-machinery world used by the examples and tests.
    pub fn demo(seed: u64) -> Self {
        WorldSpec {
            seed,
            num_images: 96,
            width: [160, 256],
            height: [128, 224],
            hard_rate: 0.3,
            hard_jitter_scale: 5.0,
            extra_object_rate: 0.2,
            exact_duplicate_rate: 0.04,
            near_duplicate_rate: 0.06,
            noise: NoiseModel::default(),
            photorealism: PhotorealismPolicy::Sidecar,
            catalog: demo_catalog(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("world: {name} must lie in [0, 1], got {v}")))
            }
        };
        rate("hard_rate", self.hard_rate)?;
        rate("extra_object_rate", self.extra_object_rate)?;
        rate("exact_duplicate_rate", self.exact_duplicate_rate)?;
        rate("near_duplicate_rate", self.near_duplicate_rate)?;
        rate("noise.decoy_rate", self.noise.decoy_rate)?;
        rate("noise.miss_rate", self.noise.miss_rate)?;
        rate("noise.confusion_rate", self.noise.confusion_rate)?;
        rate("noise.unrealistic_rate", self.noise.unrealistic_rate)?;
        if self.width[0] < 64 || self.height[0] < 64 || self.width[0] > self.width[1] || self.height[0] > self.height[1] {
            return Err(Error::Config("world: image size ranges must be ordered and at least 64 px".into()));
        }
        if self.num_images == 0 {
            return Err(Error::Config("world: num_images must be positive".into()));
        }
        Ok(())
    }
}

/// Eight heavy-machinery classes including a shared `crane` alias and the
/// mutually co-occurring mining trio. Articulated dump trucks do not take part
/// in diversification.
pub fn demo_catalog() -> ClassCatalog {
    const MINING: [&str; 3] = ["mining truck", "mining excavator", "mining bulldozer"];
    let mut classes = vec![
        ClassEntry::new("articulated dump truck"),
        ClassEntry::new("bulldozer").with_synonyms(&["dozer", "crawler tractor"]),
        ClassEntry::new("crawler crane").with_synonyms(&["track crane", "crane"]),
        ClassEntry::new("tower crane").with_synonyms(&["crane"]),
        ClassEntry::new("wheel loader").with_synonyms(&["front end loader", "bucket loader"]),
    ];
    for m in MINING {
        let mut c = ClassEntry::new(m);
        c.co_occurring = MINING.iter().filter(|o| **o != m).map(|o| o.to_string()).collect();
        c.terrain = Terrain::Land;
        classes.push(c);
    }
    for c in &mut classes {
        c.diversify = c.name != "articulated dump truck";
    }
    ClassCatalog::with_shared_synonyms("synthetic-1", classes).expect("demo catalog is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub class: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl TruthObject {
    pub fn bbox(&self) -> BBox {
        BBox { x1: self.x1, y1: self.y1, x2: self.x2, y2: self.y2 }
    }
}

/// Ground truth and scene parameters stored next to each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub origin: Origin,
    pub objects: Vec<TruthObject>,
    /// Multiplier on the detector's box jitter for this image.
    pub jitter_scale: f64,
    pub realistic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<String>,
}

/// Path of the truth sidecar belonging to an image file.
pub fn truth_sidecar_path(image: impl AsRef<Path>) -> PathBuf {
    image.as_ref().with_extension(TRUTH_SUFFIX)
}

pub fn read_truth_sidecar(image: impl AsRef<Path>) -> Result<TruthSidecar> {
    crate::jsonl::read_json(truth_sidecar_path(image))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub truth: TruthSidecar,
    pub background: [[u8; 3]; 2],
    pub clutter: Vec<(BBox, [u8; 3])>,
}

fn class_color(class: &str) -> [u8; 3] {
    let d = Sha256::digest(class.as_bytes());
    [60 + d[0] % 160, 60 + d[1] % 160, 60 + d[2] % 160]
}

fn shade(c: [u8; 3], delta: i16) -> [u8; 3] {
    c.map(|v| (v as i16 + delta).clamp(0, 255) as u8)
}

fn fill(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let x1 = (b.x1.max(0.0) as u32).min(w) as usize;
    let y1 = (b.y1.max(0.0) as u32).min(h) as usize;
    let x2 = (b.x2.max(0.0) as u32).min(w) as usize;
    let y2 = (b.y2.max(0.0) as u32).min(h) as usize;
    if x1 >= x2 {
        return;
    }
    let stride = w as usize * 3;
    for row in img.chunks_exact_mut(stride).take(y2).skip(y1) {
        for px in row[x1 * 3..x2 * 3].chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
    }
}

impl Scene {
    pub fn render(&self) -> RgbImage {
        let (w, h) = (self.truth.width, self.truth.height);
        let [top, bottom] = self.background;
        let mut img = RgbImage::new(w, h);
        for (y, row) in img.chunks_exact_mut(w as usize * 3).enumerate() {
            let t = y as f64 / (h.max(2) - 1) as f64;
            let c: [u8; 3] = std::array::from_fn(|i| (top[i] as f64 * (1.0 - t) + bottom[i] as f64 * t).round() as u8);
            for px in row.chunks_exact_mut(3) {
                px.copy_from_slice(&c);
            }
        }
        for (b, c) in &self.clutter {
            fill(&mut img, b, *c);
        }
        for o in &self.truth.objects {
            let b = o.bbox();
            let base = class_color(&o.class);
            fill(&mut img, &b, shade(base, -70));
            let inner = BBox { x1: b.x1 + 2.0, y1: b.y1 + 2.0, x2: b.x2 - 2.0, y2: b.y2 - 2.0 };
            if !inner.is_degenerate() {
                fill(&mut img, &inner, base);
                let mut y = inner.y1 + 4.0;
                while y + 2.0 < inner.y2 {
                    fill(&mut img, &BBox { x1: inner.x1, y1: y, x2: inner.x2, y2: y + 2.0 }, shade(base, 35));
                    y += 7.0;
                }
                let cab = BBox {
                    x1: inner.x1 + inner.width() * 0.1,
                    y1: inner.y1 + inner.height() * 0.1,
                    x2: inner.x1 + inner.width() * 0.4,
                    y2: inner.y1 + inner.height() * 0.45,
                };
                fill(&mut img, &cab, shade(base, -35));
            }
        }
        img
    }

    /// The same scene shifted by a few pixels with a slightly brighter background.
    fn near_copy(&self, id: String, rng: &mut ChaCha8Rng) -> Scene {
        let dx = rng.random_range(1..=3) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dy = rng.random_range(1..=3) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (w, h) = (self.truth.width as f64, self.truth.height as f64);
        let shift = |b: BBox| {
            let dx = dx.clamp(-b.x1, w - b.x2);
            let dy = dy.clamp(-b.y1, h - b.y2);
            BBox { x1: b.x1 + dx, y1: b.y1 + dy, x2: b.x2 + dx, y2: b.y2 + dy }
        };
        let mut copy = self.clone();
        copy.truth.image_id = id;
        copy.background = self.background.map(|c| shade(c, 4));
        for o in &mut copy.truth.objects {
            let b = shift(o.bbox());
            (o.x1, o.y1, o.x2, o.y2) = (b.x1, b.y1, b.x2, b.y2);
        }
        for (b, _) in &mut copy.clutter {
            *b = shift(*b);
        }
        copy
    }
}

fn overlaps(a: &BBox, others: &[BBox], gap: f64) -> bool {
    others.iter().any(|b| a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap)
}

fn place(rng: &mut ChaCha8Rng, w: f64, h: f64, frac: (f64, f64), taken: &[BBox]) -> Option<BBox> {
    for _ in 0..60 {
        let bw = (w * rng.random_range(frac.0..frac.1)).round();
        let bh = (h * rng.random_range(frac.0..frac.1)).round();
        let x1 = rng.random_range(0.0..=(w - bw)).round();
        let y1 = rng.random_range(0.0..=(h - bh)).round();
        let b = BBox { x1, y1, x2: x1 + bw, y2: y1 + bh };
        if !overlaps(&b, taken, 3.0) {
            return Some(b);
        }
    }
    None
}

/// Builds a scene with the given object classes (first is the primary one).
pub fn compose_scene(rng: &mut ChaCha8Rng, image_id: String, size: (u32, u32), classes: &[String], origin: Origin) -> Scene {
    let (w, h) = (size.0 as f64, size.1 as f64);
    let mut taken: Vec<BBox> = Vec::new();
    let mut objects = Vec::new();
    for (i, class) in classes.iter().enumerate() {
        let frac = if i == 0 && classes.len() <= 2 { (0.3, 0.55) } else { (0.15, 0.3) };
        if let Some(b) = place(rng, w, h, frac, &taken) {
            taken.push(b);
            objects.push(TruthObject { class: class.clone(), x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 });
        }
    }
    let mut clutter = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        if let Some(b) = place(rng, w, h, (0.05, 0.12), &taken) {
            taken.push(b);
            let g = rng.random_range(90..200u8);
            clutter.push((b, [g, g, g.saturating_sub(10)]));
        }
    }
    let background = [
        [rng.random_range(150..235), rng.random_range(150..235), rng.random_range(150..235)],
        [rng.random_range(40..130), rng.random_range(40..130), rng.random_range(40..130)],
    ];
    Scene {
        truth: TruthSidecar {
            image_id,
            width: size.0,
            height: size.1,
            origin,
            objects,
            jitter_scale: 1.0,
            realistic: true,
            seed: None,
            instance: None,
        },
        background,
        clutter,
    }
}

/// One entry of the dataset list a world writes for ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub path: String,
    pub class_names: Vec<String>,
}

/// Files written by [`SyntheticWorld::materialize`], relative to its directory.
pub const WORLD_FILE: &str = "world.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const IMAGES_FILE: &str = "images.json";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    /// The spec's catalog with instance entries pointing at world images.
    pub catalog: ClassCatalog,
    pub scenes: Vec<Scene>,
}

impl SyntheticWorld {
    pub fn build(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let names: Vec<String> = spec.catalog.class_names().iter().map(|s| s.to_string()).collect();
        let mut scenes = Vec::with_capacity(spec.num_images);
        for i in 0..spec.num_images {
            let id = format!("img{i:04}");
            let mut rng = derived_rng(spec.seed, &["scene", &id]);
            let primary = &names[i % names.len()];
            let mut classes = vec![primary.clone()];
            let co = spec.catalog.co_occurring_of(primary)?;
            if !co.is_empty() {
                let n = rng.random_range(1..=co.len());
                classes.extend(co.iter().take(n).map(|c| c.name.clone()));
            } else if rng.random_bool(spec.extra_object_rate) {
                classes.push(primary.clone());
            }
            let size = (rng.random_range(spec.width[0]..=spec.width[1]), rng.random_range(spec.height[0]..=spec.height[1]));
            let mut scene = compose_scene(&mut rng, id, size, &classes, Origin::Original);
            if rng.random_bool(spec.hard_rate) {
                scene.truth.jitter_scale = spec.hard_jitter_scale;
            }
            scenes.push(scene);
        }

        let base = scenes.len();
        let mut rng = derived_rng(spec.seed, &["duplicates"]);
        for i in 0..base {
            if rng.random_bool(spec.exact_duplicate_rate) {
                let mut copy = scenes[i].clone();
                copy.truth.image_id = format!("img{:04}", scenes.len());
                scenes.push(copy);
            } else if rng.random_bool(spec.near_duplicate_rate) {
                let id = format!("img{:04}", scenes.len());
                let copy = scenes[i].near_copy(id, &mut rng);
                scenes.push(copy);
            }
        }

        let mut classes = spec.catalog.classes().to_vec();
        for c in classes.iter_mut().filter(|c| c.diversify) {
            let refs: Vec<String> = scenes[..base]
                .iter()
                .filter(|s| s.truth.objects.first().is_some_and(|o| o.class == c.name))
                .take(4)
                .map(|s| format!("{IMAGES_DIR}/{}.png", s.truth.image_id))
                .collect();
            if refs.len() >= crate::catalog::MIN_INSTANCE_IMAGES {
                let tag = c.name.split_whitespace().map(|w| w[..1].to_ascii_uppercase()).collect::<String>();
                c.instances = vec![InstanceEntry { instance_name: format!("{tag}100"), image_refs: refs }];
            }
        }
        let catalog = if spec.catalog.shared_synonyms {
            ClassCatalog::with_shared_synonyms(spec.catalog.version.clone(), classes)?
        } else {
            ClassCatalog::new(spec.catalog.version.clone(), classes)?
        };
        Ok(SyntheticWorld { spec, catalog, scenes })
    }

    /// Truth boxes of every image, in the annotation-store format.
    pub fn truth_records(&self) -> Vec<AnnotationRecord> {
        self.scenes
            .iter()
            .flat_map(|s| {
                s.truth.objects.iter().map(|o| AnnotationRecord {
                    image_id: s.truth.image_id.clone(),
                    x1: o.x1,
                    y1: o.y1,
                    x2: o.x2,
                    y2: o.y2,
                    score: 1.0,
                    phrase: o.class.clone(),
                    class: Some(o.class.clone()),
                    stage: Stage::Final,
                    prompt_kind: PromptKind::Original,
                    synonym: false,
                })
            })
            .collect()
    }

    pub fn dataset(&self) -> Vec<DatasetEntry> {
        self.scenes
            .iter()
            .map(|s| {
                let mut class_names: Vec<String> = Vec::new();
                for o in &s.truth.objects {
                    if !class_names.contains(&o.class) {
                        class_names.push(o.class.clone());
                    }
                }
                DatasetEntry { id: s.truth.image_id.clone(), path: format!("{IMAGES_DIR}/{}.png", s.truth.image_id), class_names }
            })
            .collect()
    }

    /// Writes images, sidecars, the dataset list, truth, catalog and spec.
    pub fn materialize(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let images = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.scenes {
            let path = images.join(format!("{}.png", s.truth.image_id));
            s.render().save(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
            crate::jsonl::write_json(truth_sidecar_path(&path), &s.truth)?;
        }
        crate::jsonl::write_json(dir.join(IMAGES_FILE), &self.dataset())?;
        crate::jsonl::write_jsonl(dir.join(TRUTH_FILE), &self.truth_records())?;
        crate::catalog::save_catalog(&self.catalog, dir.join(CATALOG_FILE))?;
        let spec = WorldSpec { catalog: self.catalog.clone(), ..self.spec.clone() };
        crate::jsonl::write_json(dir.join(WORLD_FILE), &spec)
    }
}
