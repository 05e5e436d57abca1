//! Stage implementations and the runner that chains them.
//!
//! Every stage reads its predecessors' artifacts from the run directory,
//! writes its own into `<root>/<stage>/` and finishes with a `stage.json`
//! record. Image paths inside artifacts are relative to the run root.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, MOCK_SCHEME};
use super::layout::{InputDigest, RunLayout, StageName, StageReport, StageStatus, MOCK_STATE_DIR};
use crate::annotate::{
    annotate_images, filter_and_nms_detailed, stage_accounting, Annotation, AnnotationRecord, AnnotationStore, DetectThresholds,
    Stage,
};
use crate::backends::mock::MockConfig;
use crate::backends::world::{DatasetEntry, WorldSpec};
use crate::backends::{
    wait_for_job, BackendEndpoint, BackendSet, DetectRequest, Detector, DetectorTrainSpec, Generator, HttpBackend, MockBackend,
    Reviewer, TrainJob, TrainRequest, Trainer,
};
use crate::catalog::{load_catalog, ClassCatalog, InstanceEntry};
use crate::concurrency::bounded_map;
use crate::diversify::{
    assign_models, expand_inference_prompts, make_job_specs, mix_dataset, run_generation, spread_subset, MixResult,
    PromptCatalog, Provenance, TrainingManifest,
};
use crate::evaluate::{ap_summary, confusion_matrix, CocoDataset, Detection, GroundTruth};
use crate::jsonl::{read_json, read_jsonl, write_json, write_jsonl};
use crate::paths::{normalize, relative_path, resolve, to_portable};
use crate::preprocess::{
    dedup, image_dimensions, phash_file, stratified_split, DedupResult, HashedImage, ImageRecord, Origin, Split, SplitManifest,
};
use crate::review::{review_pseudo_labels, NeedsAttention, ReviewContext, ReviewVerdict};
use crate::{Error, Result};

pub const IMAGES_JSON: &str = "images.json";
pub const DEDUP_JSON: &str = "dedup.json";
pub const HASHES_JSON: &str = "hashes.json";
pub const SPLIT_JSON: &str = "split.json";
pub const RAW_JSONL: &str = "raw.jsonl";
pub const FILTERED_JSONL: &str = "filtered.jsonl";
pub const FINAL_JSONL: &str = "final.jsonl";
pub const ACCOUNTING_JSON: &str = "accounting.json";
pub const ACCOUNTING_TXT: &str = "accounting.txt";
pub const SUMMARY_JSON: &str = "summary.json";
pub const VERDICTS_JSONL: &str = "verdicts.jsonl";
pub const ATTENTION_JSONL: &str = "needs_attention.jsonl";
pub const APPROVED_JSONL: &str = "approved.jsonl";
pub const DROPPED_JSON: &str = "dropped.json";
pub const OVERLAYS_DIR: &str = "overlays";
pub const JOBS_JSON: &str = "jobs.json";
pub const GENERATED_DIR: &str = "generated";
pub const PHOTOREALISM_JSONL: &str = "photorealism.jsonl";
pub const PROVENANCE_JSON: &str = "provenance.json";
pub const POOL_JSON: &str = "pool.json";
pub const POOL_ANNOTATIONS_JSONL: &str = "annotations.jsonl";
pub const SELECTION_JSON: &str = "selection.json";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const MODEL_JSON: &str = "model.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CONFUSION_JSON: &str = "confusion.json";
pub const DETECTIONS_JSONL: &str = "detections.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub images: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub enabled: bool,
    pub annotated_images: usize,
    pub reviewed: usize,
    pub bypassed: usize,
    pub kept: usize,
    pub dropped: usize,
    pub needs_attention: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub instance_name: String,
    pub class_name: String,
    pub steps_multiplier: u32,
    pub max_steps: u32,
    pub job_id: String,
    pub artifact_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversifySummary {
    pub enabled: bool,
    pub jobs: usize,
    pub requests: usize,
    pub failed_requests: usize,
    pub generated: usize,
    pub photorealistic: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub ratio: String,
    pub quotas: BTreeMap<String, usize>,
    pub generated_selected: usize,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: String,
    pub job_id: String,
    pub model_ref: String,
}

/// Maps image paths stored relative to `root` to absolute paths.
pub fn resolved(records: &[ImageRecord], root: &Path) -> Vec<ImageRecord> {
    records
        .iter()
        .map(|r| ImageRecord { path: normalize(&resolve(root, &r.path)).to_string_lossy().into_owned(), ..r.clone() })
        .collect()
}

fn records_of(anns: &[Annotation]) -> Vec<AnnotationRecord> {
    anns.iter().map(AnnotationRecord::from).collect()
}

fn annotations_of(records: &[AnnotationRecord]) -> Result<Vec<Annotation>> {
    records.iter().map(Annotation::try_from).collect()
}

fn by_image(anns: Vec<Annotation>) -> BTreeMap<String, Vec<Annotation>> {
    let mut m: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for a in anns {
        m.entry(a.image_id.clone()).or_default().push(a);
    }
    m
}

/// Builds one backend per role. Roles sharing a `mock:` world share one
/// in-process mock so jobs trained through one role are visible to others.
pub fn build_backends(cfg: &RunConfig, root: &Path) -> Result<BackendSet> {
    let mut mocks: HashMap<String, Arc<MockBackend>> = HashMap::new();
    let mut mock = |e: &BackendEndpoint| -> Result<Option<Arc<MockBackend>>> {
        let Some(world) = e.base_url.strip_prefix(MOCK_SCHEME) else { return Ok(None) };
        if let Some(m) = mocks.get(world) {
            return Ok(Some(m.clone()));
        }
        let spec: WorldSpec = read_json(world)?;
        spec.validate()?;
        let mut mc = MockConfig::from_world(&spec);
        mc.output_dir = root.join(StageName::Diversify.as_str()).join(GENERATED_DIR);
        mc.state_dir = Some(root.join(MOCK_STATE_DIR));
        let m = Arc::new(MockBackend::new(mc));
        mocks.insert(world.to_string(), m.clone());
        Ok(Some(m))
    };
    let e = &cfg.endpoints;
    let detect: Arc<dyn Detector> = match mock(&e.detect)? {
        Some(m) => m,
        None => Arc::new(HttpBackend::new(e.detect.clone())?),
    };
    let generate: Arc<dyn Generator> = match mock(&e.generate)? {
        Some(m) => m,
        None => Arc::new(HttpBackend::new(e.generate.clone())?),
    };
    let review: Arc<dyn Reviewer> = match mock(&e.review)? {
        Some(m) => m,
        None => Arc::new(HttpBackend::new(e.review.clone())?),
    };
    let train: Arc<dyn Trainer> = match mock(&e.train)? {
        Some(m) => m,
        None => Arc::new(HttpBackend::new(e.train.clone())?),
    };
    Ok(BackendSet { detect, generate, review, train })
}

/// Reads a ground-truth file: `.jsonl` annotation records or COCO JSON.
pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let recs: Vec<AnnotationRecord> = read_jsonl(path)?;
        Ok(GroundTruth::from_records(&recs))
    } else {
        CocoDataset::load(path)?.ground_truth()
    }
}

/// Approved annotations, summary, parsed verdicts and unparseable reviews.
type GateOutcome = (Vec<Annotation>, ReviewSummary, Vec<ReviewVerdict>, Vec<NeedsAttention>);

pub struct Runner {
    pub cfg: RunConfig,
    pub layout: RunLayout,
    pub catalog: ClassCatalog,
    pub backends: BackendSet,
    /// Skip stages whose recorded input digest is unchanged.
    pub skip_unchanged: bool,
    /// Report what would run without running it.
    pub dry_run: bool,
    pub reports: Vec<StageReport>,
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let root = normalize(&std::path::absolute(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?);
        let catalog = load_catalog(&cfg.catalog)?;
        let backends = build_backends(&cfg, &root)?;
        Ok(Runner {
            cfg,
            layout: RunLayout::new(root),
            catalog,
            backends,
            skip_unchanged: true,
            dry_run: false,
            reports: Vec::new(),
        })
    }

    pub fn with_backends(cfg: RunConfig, backends: BackendSet) -> Result<Self> {
        let mut r = Runner::new(cfg)?;
        r.backends = backends;
        Ok(r)
    }

    pub fn root(&self) -> &Path {
        &self.layout.root
    }

    fn in_flight(e: &BackendEndpoint) -> usize {
        e.max_in_flight.max(1)
    }

    fn thresholds(&self) -> DetectThresholds {
        DetectThresholds { box_threshold: self.cfg.thresholds.box_threshold, text_threshold: self.cfg.thresholds.text_threshold }
    }

    fn planned(&self, stage: StageName) -> bool {
        self.reports.iter().any(|r| r.stage == stage && r.status == StageStatus::Planned)
    }

    /// Adds a predecessor's record to a digest, or fails naming it.
    fn add_predecessor(&self, d: &mut InputDigest, stage: StageName, pred: StageName) -> Result<()> {
        match self.layout.read_record(pred) {
            Some(rec) => {
                d.json(&rec)?;
                Ok(())
            }
            None if self.dry_run && self.planned(pred) => {
                d.bytes(b"planned");
                Ok(())
            }
            None => Err(Error::MissingArtifact { stage: stage.to_string(), run_first: pred.to_string() }),
        }
    }

    /// Digest contribution of an endpoint: the world file for mocks, the URL otherwise.
    fn add_endpoint(&self, d: &mut InputDigest, e: &BackendEndpoint) -> Result<()> {
        match e.base_url.strip_prefix(MOCK_SCHEME) {
            Some(world) => {
                d.bytes(b"mock").file(Path::new(world))?;
            }
            None => {
                d.bytes(e.base_url.as_bytes());
            }
        }
        Ok(())
    }

    fn execute(
        &mut self,
        stage: StageName,
        digest: InputDigest,
        body: impl FnOnce(&mut Self, &Path) -> Result<()>,
    ) -> Result<()> {
        let digest = digest.finish();
        let status = if self.skip_unchanged && self.layout.is_current(stage, &digest) {
            log::info!("{stage}: inputs unchanged, skipped");
            StageStatus::Skipped
        } else if self.dry_run {
            log::info!("{stage}: would run");
            StageStatus::Planned
        } else {
            log::info!("{stage}: running");
            let dir = self.layout.reset_stage(stage)?;
            body(self, &dir)?;
            self.layout.write_record(stage, digest.clone())?;
            StageStatus::Ran
        };
        self.reports.push(StageReport { stage, status, digest });
        Ok(())
    }

    pub fn run_stage(&mut self, stage: StageName) -> Result<()> {
        match stage {
            StageName::Ingest => self.ingest(),
            StageName::Dedup => self.dedup(),
            StageName::Split => self.split(),
            StageName::Annotate => self.annotate(),
            StageName::Review => self.review(),
            StageName::Diversify => self.diversify(),
            StageName::Mix => self.mix(),
            StageName::Train => self.train(),
            StageName::Eval => self.eval(),
        }
    }

    /// Every stage in order. Diversification is skipped when the mix ratio
    /// selects no generated images.
    pub fn pipeline(&mut self) -> Result<()> {
        for stage in StageName::ALL {
            if stage == StageName::Diversify && self.cfg.mix.ratio.generated == 0 {
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn read_stage<T: serde::de::DeserializeOwned>(&self, stage: StageName, file: &str) -> Result<T> {
        read_json(self.layout.file(stage, file))
    }

    fn read_stage_jsonl<T: serde::de::DeserializeOwned>(&self, stage: StageName, file: &str) -> Result<Vec<T>> {
        read_jsonl(self.layout.file(stage, file))
    }

    pub fn ingest(&mut self) -> Result<()> {
        let entries: Vec<DatasetEntry> = read_json(&self.cfg.images)?;
        let list_dir = self.cfg.images.parent().unwrap_or(Path::new("/")).to_path_buf();
        let mut d = InputDigest::new(StageName::Ingest);
        d.file(&self.cfg.catalog)?.file(&self.cfg.images)?;
        for e in &entries {
            d.file(&list_dir.join(&e.path))?;
        }
        self.execute(StageName::Ingest, d, |r, dir| {
            let mut seen = BTreeSet::new();
            let mut records = Vec::with_capacity(entries.len());
            for e in &entries {
                if !seen.insert(e.id.clone()) {
                    return Err(Error::InvalidArgument(format!("duplicate image id `{}`", e.id)));
                }
                let abs = normalize(&list_dir.join(&e.path));
                let (width, height) = image_dimensions(&abs)?;
                let rec = ImageRecord {
                    id: e.id.clone(),
                    path: to_portable(&relative_path(r.root(), &abs)),
                    class_names: e.class_names.clone(),
                    origin: Origin::Original,
                    width,
                    height,
                };
                rec.validate(&r.catalog)?;
                records.push(rec);
            }
            write_json(dir.join(IMAGES_JSON), &records)
        })
    }

    pub fn dedup(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Dedup);
        self.add_predecessor(&mut d, StageName::Dedup, StageName::Ingest)?;
        d.json(&self.cfg.dedup)?;
        self.execute(StageName::Dedup, d, |r, dir| {
            let images: Vec<ImageRecord> = r.read_stage(StageName::Ingest, IMAGES_JSON)?;
            let abs = resolved(&images, r.root());
            let hashes: Vec<Result<u64>> = bounded_map(&abs, 8, |img| phash_file(&img.path));
            let mut hashed = Vec::with_capacity(images.len());
            let mut table = BTreeMap::new();
            for (img, h) in images.iter().zip(hashes) {
                let h = h?;
                table.insert(img.id.clone(), format!("{h:016x}"));
                hashed.push(HashedImage { record: img.clone(), hash: h });
            }
            let result = dedup(&hashed, r.cfg.dedup.exact, r.cfg.dedup.near);
            write_json(dir.join(HASHES_JSON), &table)?;
            write_json(dir.join(DEDUP_JSON), &result)
        })
    }

    pub fn split(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Split);
        self.add_predecessor(&mut d, StageName::Split, StageName::Ingest)?;
        self.add_predecessor(&mut d, StageName::Split, StageName::Dedup)?;
        d.json(&self.cfg.split.fractions)?.json(&self.cfg.split_seed())?;
        self.execute(StageName::Split, d, |r, dir| {
            let dd: DedupResult = r.read_stage(StageName::Dedup, DEDUP_JSON)?;
            let m = stratified_split(&dd.retained, &dd.clusters, r.cfg.split.fractions, r.cfg.split_seed())?;
            write_json(dir.join(SPLIT_JSON), &m)
        })
    }

    /// Detect, filter and NMS for a set of images.
    fn annotate_set(&self, images: &[ImageRecord]) -> Result<(AnnotationStore, usize)> {
        let abs = resolved(images, self.root());
        let raw = annotate_images(
            &abs,
            &self.catalog,
            self.backends.detect.as_ref(),
            self.thresholds(),
            Self::in_flight(&self.cfg.endpoints.detect),
        )?;
        let mut store = AnnotationStore::default();
        let mut unresolved = 0;
        for per_image in raw {
            let out = filter_and_nms_detailed(&per_image, &self.catalog, self.cfg.thresholds.filter, self.cfg.thresholds.nms)?;
            unresolved += out.unresolved;
            store.raw.extend(per_image);
            store.filtered.extend(out.filtered);
            store.final_annotations.extend(out.final_annotations);
        }
        Ok((store, unresolved))
    }

    pub fn annotate(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Annotate);
        self.add_predecessor(&mut d, StageName::Annotate, StageName::Ingest)?;
        self.add_predecessor(&mut d, StageName::Annotate, StageName::Dedup)?;
        d.json(&self.cfg.thresholds)?;
        self.add_endpoint(&mut d, &self.cfg.endpoints.detect.clone())?;
        self.execute(StageName::Annotate, d, |r, dir| {
            let dd: DedupResult = r.read_stage(StageName::Dedup, DEDUP_JSON)?;
            let (store, unresolved) = r.annotate_set(&dd.retained)?;
            let raw: Vec<AnnotationRecord> = store.raw.iter().map(AnnotationRecord::from).collect();
            write_jsonl(dir.join(RAW_JSONL), &raw)?;
            write_jsonl(dir.join(FILTERED_JSONL), &records_of(&store.filtered))?;
            write_jsonl(dir.join(FINAL_JSONL), &records_of(&store.final_annotations))?;
            let acc = stage_accounting(&store);
            write_json(dir.join(ACCOUNTING_JSON), &acc)?;
            std::fs::write(dir.join(ACCOUNTING_TXT), acc.to_table()).map_err(|e| Error::io(dir, e))?;
            write_json(dir.join(SUMMARY_JSON), &AnnotateSummary { images: dd.retained.len(), unresolved })
        })
    }

    /// Gates the final annotations of `images`; returns the approved ones.
    fn gate(&self, images: &[ImageRecord], finals: Vec<Annotation>, overlay_dir: &Path) -> Result<GateOutcome> {
        let finals = by_image(finals);
        let annotated = finals.values().filter(|v| !v.is_empty()).count();
        if !self.cfg.review.enabled {
            let approved: Vec<Annotation> = finals.into_values().flatten().collect();
            let summary = ReviewSummary {
                enabled: false,
                annotated_images: annotated,
                reviewed: 0,
                bypassed: annotated,
                kept: annotated,
                dropped: 0,
                needs_attention: 0,
            };
            return Ok((approved, summary, Vec::new(), Vec::new()));
        }
        let outcome = review_pseudo_labels(
            images,
            &finals,
            &self.catalog,
            self.backends.review.as_ref(),
            ReviewContext {
                root: self.root(),
                overlay_dir,
                inline_overlay: self.cfg.review.inline_overlay,
                max_in_flight: Self::in_flight(&self.cfg.endpoints.review),
            },
        )?;
        let mut approved = Vec::new();
        for (id, anns) in finals {
            if outcome.kept.contains(&id) {
                for mut a in anns {
                    a.advance(Stage::Approved)?;
                    approved.push(a);
                }
            }
        }
        let summary = ReviewSummary {
            enabled: true,
            annotated_images: annotated,
            reviewed: outcome.verdicts.len() + outcome.needs_attention.len(),
            bypassed: outcome.bypassed.len(),
            kept: outcome.kept.len(),
            dropped: annotated - outcome.kept.len(),
            needs_attention: outcome.needs_attention.len(),
        };
        Ok((approved, summary, outcome.verdicts, outcome.needs_attention))
    }

    pub fn review(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Review);
        self.add_predecessor(&mut d, StageName::Review, StageName::Annotate)?;
        d.json(&self.cfg.review)?;
        self.add_endpoint(&mut d, &self.cfg.endpoints.review.clone())?;
        self.execute(StageName::Review, d, |r, dir| {
            let dd: DedupResult = r.read_stage(StageName::Dedup, DEDUP_JSON)?;
            let finals = annotations_of(&r.read_stage_jsonl(StageName::Annotate, FINAL_JSONL)?)?;
            let annotated: BTreeSet<String> = finals.iter().map(|a| a.image_id.clone()).collect();
            let (approved, summary, verdicts, attention) = r.gate(&dd.retained, finals, &dir.join(OVERLAYS_DIR))?;
            let kept: BTreeSet<&str> = approved.iter().map(|a| a.image_id.as_str()).collect();
            let dropped: Vec<&String> = annotated.iter().filter(|id| !kept.contains(id.as_str())).collect();
            write_json(dir.join(DROPPED_JSON), &dropped)?;
            write_jsonl(dir.join(VERDICTS_JSONL), &verdicts)?;
            write_jsonl(dir.join(ATTENTION_JSONL), &attention)?;
            write_jsonl(dir.join(APPROVED_JSONL), &records_of(&approved))?;
            write_json(dir.join(SUMMARY_JSON), &summary)
        })
    }

    fn instance_with_absolute_refs(&self, inst: &InstanceEntry) -> InstanceEntry {
        let base = self.cfg.catalog.parent().unwrap_or(Path::new("/"));
        InstanceEntry {
            instance_name: inst.instance_name.clone(),
            image_refs: inst.image_refs.iter().map(|p| normalize(&resolve(base, p)).to_string_lossy().into_owned()).collect(),
        }
    }

    pub fn diversify(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Diversify);
        self.add_predecessor(&mut d, StageName::Diversify, StageName::Ingest)?;
        d.json(&self.cfg.diversify)?.json(&self.cfg.seed)?.json(&self.cfg.thresholds)?.json(&self.cfg.review)?;
        if let Some(p) = &self.cfg.diversify.prompts {
            d.file(p)?;
        }
        for e in self.cfg.endpoints.all().map(|e| e.clone()) {
            self.add_endpoint(&mut d, &e)?;
        }
        self.execute(StageName::Diversify, d, |r, dir| r.diversify_body(dir))
    }

    fn diversify_body(&self, dir: &Path) -> Result<()> {
        let cfg = &self.cfg.diversify;
        let prompts = match &cfg.prompts {
            Some(p) => PromptCatalog::load(p)?,
            None => PromptCatalog::builtin(),
        };
        let poll = Duration::from_millis(self.cfg.train.poll_interval_ms);
        let mut jobs = Vec::new();
        let mut requests = Vec::new();
        if cfg.enabled {
            for class in self.catalog.classes().iter().filter(|c| c.diversify) {
                for inst in &class.instances {
                    let inst = self.instance_with_absolute_refs(inst);
                    let mut models = Vec::new();
                    for spec in make_job_specs(&inst, class, &cfg.defaults)? {
                        let (k, steps) = (spec.steps_multiplier, spec.max_steps);
                        let job = self.backends.train.train(&TrainRequest::new(TrainJob::Diversification(spec)))?;
                        let status = wait_for_job(self.backends.train.as_ref(), &job.job_id, poll, self.cfg.train.max_polls)?;
                        let artifact_ref = status.artifact_ref.ok_or_else(|| {
                            Error::Backend(crate::backends::BackendError::Malformed(format!(
                                "job `{}` has no artifact",
                                job.job_id
                            )))
                        })?;
                        models.push(artifact_ref.clone());
                        jobs.push(JobRecord {
                            instance_name: inst.instance_name.clone(),
                            class_name: class.name.clone(),
                            steps_multiplier: k,
                            max_steps: steps,
                            job_id: job.job_id,
                            artifact_ref,
                        });
                    }
                    let all = expand_inference_prompts(
                        class,
                        class.terrain,
                        &prompts,
                        &inst.instance_name,
                        self.cfg.seed,
                        cfg.images_per_prompt,
                    )?;
                    let mut chosen = spread_subset(all, cfg.prompts_per_instance);
                    assign_models(&mut chosen, &models)?;
                    requests.extend(chosen);
                }
            }
        }

        let generated_dir = dir.join(GENERATED_DIR);
        let outcome = run_generation(
            &requests,
            self.backends.generate.as_ref(),
            self.backends.review.as_ref(),
            &generated_dir,
            self.root(),
            Self::in_flight(&self.cfg.endpoints.generate),
        )?;
        let mut approved_images = outcome.approved.clone();
        approved_images.sort_by(|a, b| a.id.cmp(&b.id));
        let (store, _) = self.annotate_set(&approved_images)?;
        let (approved, _, _, mut attention) = self.gate(&approved_images, store.final_annotations, &dir.join(OVERLAYS_DIR))?;
        let with_labels: BTreeSet<&str> = approved.iter().map(|a| a.image_id.as_str()).collect();
        let pool: Vec<ImageRecord> = approved_images.iter().filter(|i| with_labels.contains(i.id.as_str())).cloned().collect();
        let provenance: BTreeMap<String, Provenance> = outcome.provenance.clone();
        attention.extend(outcome.needs_attention.iter().cloned());

        let generated = outcome.verdicts.len() + outcome.needs_attention.len();
        write_json(dir.join(JOBS_JSON), &jobs)?;
        write_jsonl(dir.join(PHOTOREALISM_JSONL), &outcome.verdicts)?;
        write_jsonl(dir.join(ATTENTION_JSONL), &attention)?;
        write_json(dir.join(PROVENANCE_JSON), &provenance)?;
        write_json(dir.join(POOL_JSON), &pool)?;
        write_jsonl(dir.join(POOL_ANNOTATIONS_JSONL), &records_of(&approved))?;
        write_json(
            dir.join(SUMMARY_JSON),
            &DiversifySummary {
                enabled: cfg.enabled,
                jobs: jobs.len(),
                requests: requests.len(),
                failed_requests: outcome.failed_requests.len(),
                generated,
                photorealistic: outcome.approved.len(),
                pool: pool.len(),
            },
        )
    }

    /// The selection for the configured mix plan, without writing anything.
    pub fn plan_mix(&self) -> Result<(MixResult, Vec<AnnotationRecord>)> {
        let dd: DedupResult = self.read_stage(StageName::Dedup, DEDUP_JSON)?;
        let split: SplitManifest = self.read_stage(StageName::Split, SPLIT_JSON)?;
        // Images the review gate dropped stay on disk but leave training.
        let dropped: BTreeSet<String> = self.read_stage(StageName::Review, DROPPED_JSON)?;
        let originals: Vec<ImageRecord> =
            dd.retained.iter().filter(|i| split.get(&i.id) == Some(Split::Train) && !dropped.contains(&i.id)).cloned().collect();
        let mut annotations: Vec<AnnotationRecord> = self.read_stage_jsonl(StageName::Review, APPROVED_JSONL)?;
        let pool: Vec<ImageRecord> = if self.cfg.mix.ratio.generated > 0 {
            annotations.extend(self.read_stage_jsonl::<AnnotationRecord>(StageName::Diversify, POOL_ANNOTATIONS_JSONL)?);
            self.read_stage(StageName::Diversify, POOL_JSON)?
        } else {
            Vec::new()
        };
        let mix = mix_dataset(&originals, &pool, &self.catalog, &self.cfg.mix, self.cfg.seed)?;
        Ok((mix, annotations))
    }

    pub fn mix(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Mix);
        self.add_predecessor(&mut d, StageName::Mix, StageName::Split)?;
        self.add_predecessor(&mut d, StageName::Mix, StageName::Review)?;
        if self.cfg.mix.ratio.generated > 0 {
            self.add_predecessor(&mut d, StageName::Mix, StageName::Diversify)?;
        }
        d.json(&self.cfg.mix)?.json(&self.cfg.seed)?;
        self.execute(StageName::Mix, d, |r, dir| {
            let (mix, annotations) = r.plan_mix()?;
            let manifest = TrainingManifest::new(&mix, &annotations, r.cfg.mix.ratio, r.cfg.seed, dir, r.root());
            write_json(
                dir.join(SELECTION_JSON),
                &Selection {
                    ratio: r.cfg.mix.ratio.to_string(),
                    quotas: mix.quotas.clone(),
                    generated_selected: mix.generated_selected,
                    images: mix.images.iter().map(|i| i.id.clone()).collect(),
                },
            )?;
            write_json(dir.join(MANIFEST_JSON), &manifest)
        })
    }

    pub fn train(&mut self) -> Result<()> {
        let mut d = InputDigest::new(StageName::Train);
        self.add_predecessor(&mut d, StageName::Train, StageName::Mix)?;
        d.json(&self.cfg.train.model)?.json(&self.cfg.train.hyperparameters)?;
        self.add_endpoint(&mut d, &self.cfg.endpoints.train.clone())?;
        self.execute(StageName::Train, d, |r, dir| {
            let manifest = r.layout.file(StageName::Mix, MANIFEST_JSON);
            let spec = DetectorTrainSpec {
                model: r.cfg.train.model.clone(),
                manifest_ref: manifest.to_string_lossy().into_owned(),
                hyperparameters: r.cfg.train.hyperparameters.clone(),
            };
            let job = r.backends.train.train(&TrainRequest::new(TrainJob::Detector(spec)))?;
            let poll = Duration::from_millis(r.cfg.train.poll_interval_ms);
            let status = wait_for_job(r.backends.train.as_ref(), &job.job_id, poll, r.cfg.train.max_polls)?;
            let model_ref = status.artifact_ref.ok_or_else(|| {
                Error::Backend(crate::backends::BackendError::Malformed(format!("job `{}` has no artifact", job.job_id)))
            })?;
            write_json(dir.join(MODEL_JSON), &ModelRecord { model: r.cfg.train.model.clone(), job_id: job.job_id, model_ref })
        })
    }

    pub fn eval(&mut self) -> Result<()> {
        let gt_path =
            self.cfg.ground_truth.clone().ok_or_else(|| Error::Config("eval needs `ground_truth` in the config".into()))?;
        let mut d = InputDigest::new(StageName::Eval);
        self.add_predecessor(&mut d, StageName::Eval, StageName::Split)?;
        self.add_predecessor(&mut d, StageName::Eval, StageName::Train)?;
        d.json(&self.cfg.eval)?.file(&gt_path)?;
        self.add_endpoint(&mut d, &self.cfg.endpoints.detect.clone())?;
        self.execute(StageName::Eval, d, |r, dir| {
            let dd: DedupResult = r.read_stage(StageName::Dedup, DEDUP_JSON)?;
            let split: SplitManifest = r.read_stage(StageName::Split, SPLIT_JSON)?;
            let model: ModelRecord = r.read_stage(StageName::Train, MODEL_JSON)?;
            let test: Vec<ImageRecord> = dd.retained.iter().filter(|i| split.get(&i.id) == Some(Split::Test)).cloned().collect();
            let ids: BTreeSet<&str> = test.iter().map(|i| i.id.as_str()).collect();
            let gts: Vec<GroundTruth> =
                load_ground_truth(&gt_path)?.into_iter().filter(|g| ids.contains(g.image_id.as_str())).collect();
            let dets = r.detect_with_model(&test, &model.model_ref)?;
            let report = ap_summary(&dets, &gts)?;
            let classes: Vec<String> = r.catalog.class_names().iter().map(|s| s.to_string()).collect();
            let cm = confusion_matrix(&dets, &gts, &classes, r.cfg.eval.confusion_iou, r.cfg.eval.confusion_conf)?;
            write_jsonl(dir.join(DETECTIONS_JSONL), &dets)?;
            write_json(dir.join(REPORT_JSON), &report)?;
            std::fs::write(dir.join(REPORT_TXT), report.to_table()).map_err(|e| Error::io(dir, e))?;
            write_json(dir.join(CONFUSION_JSON), &cm)
        })
    }

    /// Runs a trained detector over `images`.
    pub fn detect_with_model(&self, images: &[ImageRecord], model_ref: &str) -> Result<Vec<Detection>> {
        let abs = resolved(images, self.root());
        let prompt = self.catalog.class_names().join(crate::annotate::PROMPT_DELIMITER);
        let responses = bounded_map(&abs, Self::in_flight(&self.cfg.endpoints.detect), |img| {
            let mut req = DetectRequest::new(img.path.clone(), prompt.clone());
            req.model_ref = Some(model_ref.to_string());
            req.box_threshold = Some(0.0);
            self.backends.detect.detect(&req)
        });
        let mut dets = Vec::new();
        for (img, resp) in abs.iter().zip(responses) {
            for w in resp?.detections {
                let class_name = match self.catalog.lookup(&w.phrase) {
                    Some(c) => c.name.clone(),
                    None => {
                        log::warn!("detection on `{}` names unknown class `{}`", img.id, w.phrase);
                        continue;
                    }
                };
                dets.push(Detection {
                    image_id: img.id.clone(),
                    bbox: crate::geometry::BBox { x1: w.x1, y1: w.y1, x2: w.x2, y2: w.y2 },
                    score: w.score,
                    class_name,
                });
            }
        }
        Ok(dets)
    }
}

/// Every file under a run directory except the run metadata and lock, with
/// its contents, for byte-level comparisons.
pub fn artifact_snapshot(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for path in super::layout::walk_files(root)? {
        let rel = relative_path(root, &path);
        let name = rel.to_string_lossy();
        if name == super::layout::RUN_META_FILE || name == super::layout::LOCK_FILE {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        out.insert(rel, bytes);
    }
    Ok(out)
}
