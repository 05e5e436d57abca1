//! Deterministic mock backend driven by synthetic-world truth sidecars.
//!
//! Every answer is a pure function of the mock's seed, the request and the
//! sidecar files the request points at. The only state is the job registry,
//! which maps content-derived job ids to what they trained.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::world::{
    compose_scene, derived_rng, read_truth_sidecar, truth_sidecar_path, PhotorealismPolicy, TruthObject, WorldSpec,
};
use super::*;
use crate::annotate::AnnotationRecord;
use crate::catalog::{normalize_phrase, ClassCatalog};
use crate::diversify::TrainingManifest;
use crate::geometry::{iou, BBox};
use crate::preprocess::Origin;
use crate::review::{read_overlay_sidecar, OverlaySidecar};

pub const MOCK_REVIEWER: &str = "mock-reviewer";
pub const DETECTOR_MODEL_PREFIX: &str = "mock-detector:";

/// Per-class label statistics the mock detector "learns" from a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// Number of training annotations.
    pub count: usize,
    /// Mean IoU of matched training annotations against truth.
    pub quality: f64,
    /// Fraction of training truth objects without an annotation.
    pub miss_rate: f64,
    /// Fraction of training annotations matching no truth object.
    pub false_positive_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub stats: BTreeMap<String, ClassStats>,
    memorized: HashMap<String, Vec<AnnotationRecord>>,
}

#[derive(Debug, Clone)]
enum JobRecord {
    Diversification { artifact_ref: String },
    Detector { model: Arc<TrainedModel> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    pub noise: NoiseModel,
    pub photorealism: PhotorealismPolicy,
    pub catalog: ClassCatalog,
    /// Where generated images go when a request names no directory.
    pub output_dir: PathBuf,
    /// Job store that lets trained models outlive the process.
    pub state_dir: Option<PathBuf>,
}

/// On-disk form of a finished job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StoredJob {
    Diversification {
        artifact_ref: String,
    },
    /// Manifest path relative to the state directory.
    Detector {
        manifest_ref: String,
    },
}

impl MockConfig {
    pub fn from_world(spec: &WorldSpec) -> Self {
        MockConfig {
            seed: spec.seed,
            noise: spec.noise.clone(),
            photorealism: spec.photorealism,
            catalog: spec.catalog.clone(),
            output_dir: std::env::temp_dir().join("labelforge-mock"),
            state_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct MockBackend {
    cfg: MockConfig,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
}

fn bad_request(message: impl Into<String>) -> BackendError {
    BackendError::Protocol { status: ErrorCode::BadRequest.http_status(), code: ErrorCode::BadRequest, message: message.into() }
}

fn hex16(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Moves each edge by `sigma` times the box size, keeping the box inside the
/// image and at least one pixel wide.
fn jitter(b: &BBox, draws: [f64; 4], sigma: f64, w: f64, h: f64) -> BBox {
    let (bw, bh) = (b.width(), b.height());
    let mut x1 = (b.x1 + draws[0] * sigma * bw).clamp(0.0, w);
    let mut y1 = (b.y1 + draws[1] * sigma * bh).clamp(0.0, h);
    let mut x2 = (b.x2 + draws[2] * sigma * bw).clamp(0.0, w);
    let mut y2 = (b.y2 + draws[3] * sigma * bh).clamp(0.0, h);
    if x2 < x1 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y2 < y1 {
        std::mem::swap(&mut y1, &mut y2);
    }
    if x2 - x1 < 1.0 {
        x2 = (x1 + 1.0).min(w);
        x1 = x2 - 1.0;
    }
    if y2 - y1 < 1.0 {
        y2 = (y1 + 1.0).min(h);
        y1 = y2 - 1.0;
    }
    BBox { x1, y1, x2, y2 }
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let bw = w * rng.random_range(0.1..0.4);
    let bh = h * rng.random_range(0.1..0.4);
    let x1 = rng.random_range(0.0..=(w - bw));
    let y1 = rng.random_range(0.0..=(h - bh));
    BBox { x1, y1, x2: x1 + bw, y2: y1 + bh }
}

fn wire(b: BBox, score: f64, phrase: &str) -> WireDetection {
    WireDetection { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2, score: score.clamp(0.0, 1.0), phrase: phrase.to_string() }
}

/// Greedy one-to-one assignment of boxes to truth objects of the same class,
/// highest IoU first. Returns (box index, truth index, IoU) triples.
pub fn assign_to_truth(boxes: &[(String, BBox)], truth: &[TruthObject], min_iou: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (i, (class, b)) in boxes.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if &t.class == class {
                let v = iou(b, &t.bbox());
                if v > 0.0 && v >= min_iou {
                    pairs.push((i, j, v));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let (mut used_b, mut used_t) = (vec![false; boxes.len()], vec![false; truth.len()]);
    let mut out = Vec::new();
    for (i, j, v) in pairs {
        if !used_b[i] && !used_t[j] {
            used_b[i] = true;
            used_t[j] = true;
            out.push((i, j, v));
        }
    }
    out
}

/// Precision/recall/fit answers for drawn boxes against truth.
pub fn judge_boxes(boxes: &[(String, BBox)], truth: &[TruthObject]) -> (bool, bool, bool) {
    let assigned = assign_to_truth(boxes, truth, 0.0);
    let precision = assigned.len() == boxes.len() && assigned.iter().all(|p| p.2 >= 0.75);
    let recall = truth.iter().all(|t| boxes.iter().any(|(class, b)| class == &t.class && iou(b, &t.bbox()) >= 0.5));
    let fit = assigned.iter().all(|p| p.2 >= 0.85);
    (precision, recall, fit)
}

pub fn verdict_text(precision: bool, recall: bool, fit: bool) -> String {
    let yn = |b: bool| if b { "Yes" } else { "No" };
    format!(
        "Each box was compared with the machines visible in the image.\n```json\n{{\n\"Precision\": \"{}\",\n\"Recall\": \"{}\",\n\"Fit\": \"{}\"\n}}\n```",
        yn(precision),
        yn(recall),
        yn(fit)
    )
}

impl TrainedModel {
    /// Learns per-class label statistics from a manifest and the truth
    /// sidecars of its images.
    pub fn fit(manifest: &TrainingManifest, manifest_path: &Path) -> Result<Self, BackendError> {
        let base = manifest.base_dir(manifest_path);
        let mut by_image: HashMap<String, Vec<AnnotationRecord>> = HashMap::new();
        for a in &manifest.annotations {
            by_image.entry(a.image_id.clone()).or_default().push(a.clone());
        }
        #[derive(Default)]
        struct Acc {
            count: usize,
            matched: usize,
            iou_sum: f64,
            truth: usize,
            truth_missed: usize,
        }
        let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
        for img in &manifest.images {
            let path = base.join(&img.path);
            let truth = read_truth_sidecar(&path).map_err(|e| bad_request(format!("training image `{}`: {e}", img.id)))?;
            let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
            let boxes: Vec<(String, BBox)> = anns.iter().map(|a| (a.class.clone().unwrap_or_default(), a.bbox())).collect();
            let assigned = assign_to_truth(&boxes, &truth.objects, 0.3);
            for (class, _) in &boxes {
                acc.entry(class.clone()).or_default().count += 1;
            }
            for &(i, _, v) in &assigned {
                let e = acc.get_mut(&boxes[i].0).expect("counted above");
                e.matched += 1;
                e.iou_sum += v;
            }
            for (j, t) in truth.objects.iter().enumerate() {
                let e = acc.entry(t.class.clone()).or_default();
                e.truth += 1;
                if !assigned.iter().any(|p| p.1 == j) {
                    e.truth_missed += 1;
                }
            }
        }
        let stats = acc
            .into_iter()
            .filter(|(_, a)| a.count > 0)
            .map(|(class, a)| {
                let s = ClassStats {
                    count: a.count,
                    quality: if a.matched > 0 { a.iou_sum / a.matched as f64 } else { 0.0 },
                    miss_rate: if a.truth > 0 { a.truth_missed as f64 / a.truth as f64 } else { 0.0 },
                    false_positive_rate: (a.count - a.matched) as f64 / a.count as f64,
                };
                (class, s)
            })
            .collect();
        Ok(TrainedModel { stats, memorized: by_image })
    }

    fn detect(
        &self,
        seed: u64,
        noise: &NoiseModel,
        image_ref: &str,
        box_threshold: f64,
    ) -> Result<Vec<WireDetection>, BackendError> {
        let truth = read_truth_sidecar(image_ref).map_err(|e| bad_request(e.to_string()))?;
        let (w, h) = (truth.width as f64, truth.height as f64);
        let mut rng = derived_rng(seed, &["trained", &truth.image_id]);
        let mut out = Vec::new();

        if let Some(anns) = self.memorized.get(&truth.image_id) {
            for a in anns {
                let class = a.class.clone().unwrap_or_default();
                let n = self.stats.get(&class).map_or(1, |s| s.count).max(1) as f64;
                let draws = [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)];
                let b = jitter(&a.bbox(), draws, noise.trained_sigma / n, w, h);
                out.push(wire(b, 0.9 + 0.09 * a.score, &class));
            }
        } else {
            for t in &truth.objects {
                // draw a fixed number of values per object so that models with
                // different statistics see the same underlying noise
                let u_miss: f64 = rng.random();
                let draws = [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)];
                let z_score = normal(&mut rng);
                let u_fp: f64 = rng.random();
                let fp_box = random_box(&mut rng, w, h);
                let z_fp = normal(&mut rng);
                let Some(s) = self.stats.get(&t.class) else { continue };
                let confidence = s.quality * (1.0 - s.false_positive_rate);
                if u_miss >= s.miss_rate {
                    let sigma = (1.0 - s.quality) * 0.5 + noise.trained_sigma / (s.count as f64).sqrt();
                    let b = jitter(&t.bbox(), draws, sigma, w, h);
                    let score = 0.25 + 0.7 * confidence - 0.6 * (1.0 - iou(&b, &t.bbox())) + 0.02 * z_score;
                    out.push(wire(b, score, &t.class));
                }
                if u_fp < s.false_positive_rate {
                    out.push(wire(fp_box, 0.1 + 0.5 * confidence + 0.02 * z_fp, &t.class));
                }
            }
        }
        out.retain(|d| d.score >= box_threshold);
        Ok(out)
    }
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        MockBackend { cfg, jobs: Mutex::new(BTreeMap::new()) }
    }

    pub fn from_world(spec: &WorldSpec) -> Self {
        Self::new(MockConfig::from_world(spec))
    }

    pub fn from_world_file(path: impl AsRef<Path>) -> crate::Result<Self> {
        let spec: WorldSpec = crate::jsonl::read_json(path)?;
        spec.validate()?;
        Ok(Self::from_world(&spec))
    }

    pub fn config(&self) -> &MockConfig {
        &self.cfg
    }

    fn prompt_class_matches(&self, class: &str, token: &str) -> bool {
        if normalize_phrase(class) == token {
            return true;
        }
        self.cfg.catalog.get(class).is_some_and(|c| c.synonyms.iter().any(|s| normalize_phrase(s) == token))
    }

    fn open_vocabulary_detect(&self, req: &DetectRequest) -> Result<Vec<WireDetection>, BackendError> {
        let truth = read_truth_sidecar(&req.image_ref).map_err(|e| bad_request(e.to_string()))?;
        let tokens: Vec<&str> = req.prompt.split('.').map(str::trim).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            return Err(bad_request("empty prompt"));
        }
        let normalized: Vec<String> = tokens.iter().map(|t| normalize_phrase(t)).collect();
        let threshold = req.box_threshold.unwrap_or(DEFAULT_BOX_THRESHOLD);
        let noise = &self.cfg.noise;
        let (w, h) = (truth.width as f64, truth.height as f64);
        let mut rng = derived_rng(self.cfg.seed, &["detect", &truth.image_id, &normalized.join(" . ")]);
        let mut out = Vec::new();

        for t in &truth.objects {
            let Some(k) = normalized.iter().position(|tok| self.prompt_class_matches(&t.class, tok)) else {
                continue;
            };
            if rng.random::<f64>() < noise.miss_rate {
                continue;
            }
            let sigma = noise.jitter_sigma * truth.jitter_scale;
            let draws = [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            let b = jitter(&t.bbox(), draws, sigma, w, h);
            let score = noise.score_max - noise.score_slope * (1.0 - iou(&b, &t.bbox())) + noise.score_sigma * normal(&mut rng);
            out.push(wire(b, score, tokens[k]));

            if tokens.len() > 1 && rng.random::<f64>() < noise.confusion_rate {
                let other = (k + rng.random_range(1..tokens.len())) % tokens.len();
                let draws = [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)];
                let b2 = jitter(&b, draws, 0.02, w, h);
                out.push(wire(b2, score - 0.15, tokens[other]));
            }
        }
        if rng.random::<f64>() < noise.decoy_rate {
            let b = random_box(&mut rng, w, h);
            let phrase = tokens[rng.random_range(0..tokens.len())];
            out.push(wire(b, rng.random_range(0.3..0.6), phrase));
        }
        out.retain(|d| d.score >= threshold);
        Ok(out)
    }

    fn model(&self, model_ref: &str) -> Result<Arc<TrainedModel>, BackendError> {
        let id = model_ref
            .strip_prefix(DETECTOR_MODEL_PREFIX)
            .ok_or_else(|| bad_request(format!("unknown model reference `{model_ref}`")))?;
        match self.job(id)? {
            Some(JobRecord::Detector { model }) => Ok(model),
            _ => Err(BackendError::UnknownJob(id.to_string())),
        }
    }

    fn job_file(&self, job_id: &str) -> Option<PathBuf> {
        let safe = job_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
        self.cfg.state_dir.as_ref().filter(|_| safe).map(|d| d.join(format!("{job_id}.json")))
    }

    /// Looks a job up in memory, then in the job store.
    fn job(&self, job_id: &str) -> Result<Option<JobRecord>, BackendError> {
        if let Some(r) = self.jobs.lock().expect("job registry poisoned").get(job_id) {
            return Ok(Some(r.clone()));
        }
        let Some(path) = self.job_file(job_id).filter(|p| p.exists()) else { return Ok(None) };
        let stored: StoredJob = crate::jsonl::read_json(&path).map_err(|e| BackendError::Transport(e.to_string()))?;
        let record = match stored {
            StoredJob::Diversification { artifact_ref } => JobRecord::Diversification { artifact_ref },
            StoredJob::Detector { manifest_ref } => {
                let manifest_path = crate::paths::resolve(path.parent().unwrap_or(Path::new("")), &manifest_ref);
                let manifest: TrainingManifest = crate::jsonl::read_json(&manifest_path)
                    .map_err(|e| BackendError::Transport(format!("stored job `{job_id}`: {e}")))?;
                JobRecord::Detector { model: Arc::new(TrainedModel::fit(&manifest, &manifest_path)?) }
            }
        };
        self.jobs.lock().expect("job registry poisoned").insert(job_id.to_string(), record.clone());
        Ok(Some(record))
    }

    fn store_job(&self, job_id: &str, stored: &StoredJob) -> Result<(), BackendError> {
        let Some(path) = self.job_file(job_id) else { return Ok(()) };
        let dir = path.parent().expect("job file has a parent");
        std::fs::create_dir_all(dir).map_err(|e| BackendError::Transport(format!("{}: {e}", dir.display())))?;
        crate::jsonl::write_json(&path, stored).map_err(|e| BackendError::Transport(e.to_string()))
    }

    fn parse_generation_prompt(&self, prompt: &str) -> Option<(String, Option<String>)> {
        let instance = prompt
            .split_once('<')
            .and_then(|(_, rest)| rest.split_once('>'))
            .map(|(inside, _)| inside.trim().to_string())
            .filter(|s| !s.is_empty());
        let text = match &instance {
            Some(i) => prompt.replacen(&format!("<{i}>"), " ", 1),
            None => prompt.to_string(),
        };
        let text = format!(" {} ", normalize_phrase(&text.replace(|c: char| !c.is_alphanumeric(), " ")));
        self.cfg
            .catalog
            .classes()
            .iter()
            .filter(|c| text.contains(&format!(" {} ", normalize_phrase(&c.name))))
            .max_by_key(|c| c.name.len())
            .map(|c| (c.name.clone(), instance))
    }
}

impl Detector for MockBackend {
    fn detect(&self, req: &DetectRequest) -> Result<DetectResponse, BackendError> {
        let detections = match &req.model_ref {
            Some(m) => self.model(m)?.detect(self.cfg.seed, &self.cfg.noise, &req.image_ref, req.box_threshold.unwrap_or(0.0))?,
            None => self.open_vocabulary_detect(req)?,
        };
        Ok(DetectResponse { protocol_version: PROTOCOL_VERSION.into(), detections })
    }
}

impl Generator for MockBackend {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        if req.count == 0 {
            return Err(bad_request("count must be positive"));
        }
        let (class, instance) = self
            .parse_generation_prompt(&req.prompt)
            .ok_or_else(|| bad_request(format!("prompt names no known class: `{}`", req.prompt)))?;
        let dir = req.output_dir.as_ref().map(PathBuf::from).unwrap_or_else(|| self.cfg.output_dir.clone());
        std::fs::create_dir_all(&dir).map_err(|e| BackendError::Transport(format!("{}: {e}", dir.display())))?;
        let multiple = normalize_phrase(&req.prompt).contains("multiple machines");
        let mut images = Vec::with_capacity(req.count as usize);
        for i in 0..req.count as u64 {
            let seed = req.seed.wrapping_add(i);
            let id = format!("gen-{}", hex16(&[req.model_ref.as_bytes(), req.prompt.as_bytes(), &seed.to_le_bytes()]));
            let mut rng = derived_rng(self.cfg.seed, &["generate", &id]);
            let n = if multiple { rng.random_range(2..=4) } else { 1 };
            let size = (rng.random_range(160..=256), rng.random_range(128..=224));
            let mut scene = compose_scene(&mut rng, id.clone(), size, &vec![class.clone(); n], Origin::Generated);
            scene.truth.realistic = rng.random::<f64>() >= self.cfg.noise.unrealistic_rate;
            scene.truth.seed = Some(seed);
            scene.truth.instance = instance.clone();
            let path = dir.join(format!("{id}.png"));
            scene.render().save(&path).map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
            crate::jsonl::write_json(truth_sidecar_path(&path), &scene.truth)
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            images.push(GeneratedRef { image_ref: path.to_string_lossy().into_owned(), seed, width: size.0, height: size.1 });
        }
        Ok(GenerateResponse { protocol_version: PROTOCOL_VERSION.into(), images })
    }
}

impl Reviewer for MockBackend {
    fn review(&self, req: &ReviewRequest) -> Result<ReviewResponse, BackendError> {
        let text = match req.task {
            ReviewTask::PseudoLabel => {
                let sidecar: OverlaySidecar = read_overlay_sidecar(&req.image_ref).map_err(|e| bad_request(e.to_string()))?;
                let source = sidecar.source_path(&req.image_ref);
                let truth = read_truth_sidecar(&source).map_err(|e| bad_request(e.to_string()))?;
                let boxes: Vec<(String, BBox)> = sidecar.boxes.iter().map(|b| (b.class.clone(), b.bbox())).collect();
                let (p, r, f) = judge_boxes(&boxes, &truth.objects);
                verdict_text(p, r, f)
            }
            ReviewTask::Photorealism => {
                let truth = read_truth_sidecar(&req.image_ref).map_err(|e| bad_request(e.to_string()))?;
                let (suitable, authentic) = match self.cfg.photorealism {
                    PhotorealismPolicy::AlwaysYes => (true, true),
                    PhotorealismPolicy::Sidecar => (true, truth.realistic),
                    PhotorealismPolicy::RejectOddSeeds => {
                        let even = truth.seed.unwrap_or(0) % 2 == 0;
                        (true, even)
                    }
                };
                let yn = |b: bool| if b { "YES" } else { "NO" };
                format!("{}\n{}", yn(suitable), yn(authentic))
            }
        };
        Ok(ReviewResponse { protocol_version: PROTOCOL_VERSION.into(), text, reviewer: MOCK_REVIEWER.into() })
    }
}

impl Trainer for MockBackend {
    fn train(&self, req: &TrainRequest) -> Result<TrainResponse, BackendError> {
        let (job_id, record) = match &req.job {
            TrainJob::Diversification(spec) => {
                if spec.train_image_refs.len() < crate::catalog::MIN_INSTANCE_IMAGES {
                    return Err(bad_request(format!("instance `{}` has too few images", spec.instance_name)));
                }
                // Content-addressed: the same images under another path give the same job.
                let mut keyed = spec.clone();
                keyed.train_image_refs = spec
                    .train_image_refs
                    .iter()
                    .map(|r| {
                        std::fs::read(r).map(|b| hex::encode(Sha256::digest(&b))).map_err(|e| bad_request(format!("{r}: {e}")))
                    })
                    .collect::<Result<_, _>>()?;
                let body = serde_json::to_vec(&keyed).map_err(|e| bad_request(e.to_string()))?;
                let id = format!("dreambooth-{}", hex16(&[&body]));
                let artifact_ref = format!("mock-sdxl:{}:k{}:{id}", spec.instance_name, spec.steps_multiplier);
                self.store_job(&id, &StoredJob::Diversification { artifact_ref: artifact_ref.clone() })?;
                (id, JobRecord::Diversification { artifact_ref })
            }
            TrainJob::Detector(spec) => {
                let path = Path::new(&spec.manifest_ref);
                let bytes = std::fs::read(path).map_err(|e| bad_request(format!("{}: {e}", path.display())))?;
                let manifest: TrainingManifest =
                    serde_json::from_slice(&bytes).map_err(|e| bad_request(format!("manifest: {e}")))?;
                let hyper = serde_json::to_vec(&spec.hyperparameters).map_err(|e| bad_request(e.to_string()))?;
                let id = format!("det-{}", hex16(&[&bytes, spec.model.as_bytes(), &hyper]));
                let model = TrainedModel::fit(&manifest, path)?;
                if let Some(file) = self.job_file(&id) {
                    let dir = file.parent().expect("job file has a parent");
                    let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
                    let manifest_ref = crate::paths::to_portable(&crate::paths::relative_path(&abs(dir), &abs(path)));
                    self.store_job(&id, &StoredJob::Detector { manifest_ref })?;
                }
                (id, JobRecord::Detector { model: Arc::new(model) })
            }
        };
        self.jobs.lock().expect("job registry poisoned").insert(job_id.clone(), record);
        Ok(TrainResponse { protocol_version: PROTOCOL_VERSION.into(), job_id })
    }

    fn poll(&self, job_id: &str) -> Result<JobStatus, BackendError> {
        let artifact_ref = match self.job(job_id)? {
            None => return Err(BackendError::UnknownJob(job_id.to_string())),
            Some(JobRecord::Diversification { artifact_ref }) => artifact_ref.clone(),
            Some(JobRecord::Detector { .. }) => format!("{DETECTOR_MODEL_PREFIX}{job_id}"),
        };
        Ok(JobStatus {
            protocol_version: PROTOCOL_VERSION.into(),
            job_id: job_id.to_string(),
            state: JobState::Succeeded,
            artifact_ref: Some(artifact_ref),
            message: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::world::SyntheticWorld;

    fn world(noise: NoiseModel, seed: u64) -> (tempfile::TempDir, SyntheticWorld, MockBackend) {
        let dir = tempfile::tempdir().unwrap();
        let spec = WorldSpec { num_images: 16, noise, ..WorldSpec::demo(seed) };
        let w = SyntheticWorld::build(spec).unwrap();
        w.materialize(dir.path()).unwrap();
        let mut cfg = MockConfig::from_world(&w.spec);
        cfg.output_dir = dir.path().join("generated");
        (dir, w, MockBackend::new(cfg))
    }

    fn image_ref(dir: &Path, id: &str) -> String {
        dir.join("images").join(format!("{id}.png")).to_string_lossy().into_owned()
    }

    #[test]
    fn noiseless_detect_returns_truth_at_max_score() {
        let (dir, w, mock) = world(NoiseModel::none(), 1);
        for s in &w.scenes {
            let class = &s.truth.objects[0].class;
            let req = DetectRequest::new(image_ref(dir.path(), &s.truth.image_id), class.clone());
            let resp = mock.detect(&req).unwrap();
            let expected: Vec<&TruthObject> = s.truth.objects.iter().filter(|o| &o.class == class).collect();
            assert_eq!(resp.detections.len(), expected.len());
            for (d, t) in resp.detections.iter().zip(expected) {
                assert_eq!((d.x1, d.y1, d.x2, d.y2), (t.x1, t.y1, t.x2, t.y2));
                assert_eq!(d.score, 0.95);
            }
        }
    }

    #[test]
    fn unrelated_prompt_detects_nothing() {
        let (dir, w, mock) = world(NoiseModel::none(), 2);
        let s = w.scenes.iter().find(|s| s.truth.objects.iter().all(|o| o.class != "tower crane")).unwrap();
        let req = DetectRequest::new(image_ref(dir.path(), &s.truth.image_id), "tower crane");
        assert!(mock.detect(&req).unwrap().detections.is_empty());
    }

    #[test]
    fn decoys_are_deterministic() {
        let noise = NoiseModel { decoy_rate: 0.5, ..NoiseModel::default() };
        let (dir, w, mock) = world(noise.clone(), 7);
        let (_, _, mock2) = world(noise, 7);
        for s in &w.scenes {
            let req = DetectRequest::new(image_ref(dir.path(), &s.truth.image_id), "bulldozer . crane");
            let a = serde_json::to_string(&mock.detect(&req).unwrap()).unwrap();
            let b = serde_json::to_string(&mock2.detect(&req).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_objects() {
        let (dir, _, mock) = world(NoiseModel::none(), 3);
        let req = GenerateRequest {
            protocol_version: PROTOCOL_VERSION.into(),
            model_ref: "m".into(),
            prompt: "a photo of multiple machines, <BD100> bulldozer working".into(),
            seed: 10,
            count: 3,
            output_dir: Some(dir.path().join("g").to_string_lossy().into_owned()),
        };
        let a = mock.generate(&req).unwrap();
        assert_eq!(a.images.len(), 3);
        let pixels: Vec<Vec<u8>> = a.images.iter().map(|g| image::open(&g.image_ref).unwrap().to_rgb8().into_raw()).collect();
        let b = mock.generate(&req).unwrap();
        assert_eq!(a, b);
        for (g, px) in b.images.iter().zip(&pixels) {
            assert_eq!(&image::open(&g.image_ref).unwrap().to_rgb8().into_raw(), px);
            let truth = read_truth_sidecar(&g.image_ref).unwrap();
            assert!((2..=4).contains(&truth.objects.len()), "{} objects", truth.objects.len());
            assert!(truth.objects.iter().all(|o| o.class == "bulldozer"));
            assert_eq!(truth.instance.as_deref(), Some("BD100"));
            assert_eq!(truth.origin, Origin::Generated);
        }
        let bad = GenerateRequest { prompt: "a photo of a giraffe".into(), ..req };
        assert!(mock.generate(&bad).is_err());
    }

    #[test]
    fn judge_rules() {
        let truth = vec![
            TruthObject { class: "a".into(), x1: 0., y1: 0., x2: 100., y2: 100. },
            TruthObject { class: "a".into(), x1: 200., y1: 0., x2: 300., y2: 100. },
        ];
        let exact: Vec<(String, BBox)> = truth.iter().map(|t| (t.class.clone(), t.bbox())).collect();
        assert_eq!(judge_boxes(&exact, &truth), (true, true, true));
        assert_eq!(judge_boxes(&exact[..1], &truth), (true, false, true));
        // shrink the first box to IoU 0.6
        let loose = vec![(String::from("a"), BBox { x1: 0., y1: 0., x2: 60., y2: 100. }), exact[1].clone()];
        let (p, r, f) = judge_boxes(&loose, &truth);
        assert!(!p && r && !f);
        let duplicate = vec![exact[0].clone(), exact[0].clone(), exact[1].clone()];
        assert!(!judge_boxes(&duplicate, &truth).0);
    }

    #[test]
    fn poll_unknown_job_fails() {
        let (_, _, mock) = world(NoiseModel::none(), 4);
        assert!(matches!(mock.poll("nope"), Err(BackendError::UnknownJob(_))));
    }
}
