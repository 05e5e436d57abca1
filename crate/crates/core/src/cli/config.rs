//! Declarative run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use crate::backends::{BackendEndpoint, BackendRole, DetectorHyperparameters, DEFAULT_BOX_THRESHOLD, DEFAULT_TEXT_THRESHOLD};
use crate::diversify::{DiversificationDefaults, MixPlan, Ratio};
use crate::evaluate::{DEFAULT_CONFUSION_CONF, DEFAULT_CONFUSION_IOU};
use crate::preprocess::SplitFractions;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_box")]
    pub box_threshold: f64,
    #[serde(default = "default_text")]
    pub text_threshold: f64,
    #[serde(default = "default_filter")]
    pub filter: f64,
    #[serde(default = "default_nms")]
    pub nms: f64,
}

fn default_box() -> f64 {
    DEFAULT_BOX_THRESHOLD
}
fn default_text() -> f64 {
    DEFAULT_TEXT_THRESHOLD
}
fn default_filter() -> f64 {
    DEFAULT_SCORE_THRESHOLD
}
fn default_nms() -> f64 {
    DEFAULT_NMS_IOU
}
fn yes() -> bool {
    true
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { box_threshold: default_box(), text_threshold: default_text(), filter: default_filter(), nms: default_nms() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Send overlays base64-inlined instead of by reference.
    #[serde(default)]
    pub inline_overlay: bool,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig { enabled: true, inline_overlay: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    #[serde(default)]
    pub exact: u32,
    #[serde(default = "default_near")]
    pub near: u32,
}

fn default_near() -> u32 {
    10
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig { exact: 0, near: default_near() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default)]
    pub fractions: SplitFractions,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversifyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Prompt catalog file; the built-in 67 prompts when absent.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    /// Prompts used per instance, spread over the applicable list.
    #[serde(default = "default_prompts_per_instance")]
    pub prompts_per_instance: usize,
    #[serde(default = "default_images_per_prompt")]
    pub images_per_prompt: u32,
    #[serde(default)]
    pub defaults: DiversificationDefaults,
}

fn default_prompts_per_instance() -> usize {
    67
}
fn default_images_per_prompt() -> u32 {
    1
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        DiversifyConfig {
            enabled: true,
            prompts: None,
            prompts_per_instance: default_prompts_per_instance(),
            images_per_prompt: default_images_per_prompt(),
            defaults: DiversificationDefaults::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub hyperparameters: DetectorHyperparameters,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_max_polls")]
    pub max_polls: u32,
}

fn default_model() -> String {
    "yolov8x".into()
}
fn default_poll_ms() -> u64 {
    2000
}
fn default_max_polls() -> u32 {
    43_200
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: default_model(),
            hyperparameters: DetectorHyperparameters::default(),
            poll_interval_ms: default_poll_ms(),
            max_polls: default_max_polls(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_cm_iou")]
    pub confusion_iou: f64,
    #[serde(default = "default_cm_conf")]
    pub confusion_conf: f64,
}

fn default_cm_iou() -> f64 {
    DEFAULT_CONFUSION_IOU
}
fn default_cm_conf() -> f64 {
    DEFAULT_CONFUSION_CONF
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { confusion_iou: default_cm_iou(), confusion_conf: default_cm_conf() }
    }
}

/// Endpoint per role. A `base_url` of the form `mock:<world.json>` selects the
/// in-process synthetic-world backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoints {
    pub detect: BackendEndpoint,
    pub generate: BackendEndpoint,
    pub review: BackendEndpoint,
    pub train: BackendEndpoint,
}

impl Endpoints {
    pub fn uniform(base_url: &str) -> Self {
        Endpoints {
            detect: BackendEndpoint::new(BackendRole::Detect, base_url),
            generate: BackendEndpoint::new(BackendRole::Generate, base_url),
            review: BackendEndpoint::new(BackendRole::Review, base_url),
            train: BackendEndpoint::new(BackendRole::Train, base_url),
        }
    }

    pub fn all(&self) -> [&BackendEndpoint; 4] {
        [&self.detect, &self.generate, &self.review, &self.train]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: PathBuf,
    /// JSON list of `{id, path, class_names}`; paths relative to the list.
    pub images: PathBuf,
    /// Evaluation ground truth: annotation JSONL or COCO JSON.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub endpoints: Endpoints,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub review: ReviewConfig,
    #[serde(default)]
    pub dedup: DedupConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub diversify: DiversifyConfig,
    pub mix: MixPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Replaces `${NAME}` with the environment variable's value. Unset variables
/// are an error; `$$` escapes a dollar sign.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find('$') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        if let Some(tail) = after.strip_prefix('$') {
            out.push('$');
            rest = tail;
        } else if let Some(body) = after.strip_prefix('{') {
            let end = body.find('}').ok_or_else(|| Error::Config("unterminated `${` in config".into()))?;
            let name = &body[..end];
            let value = lookup(name).ok_or_else(|| Error::Config(format!("environment variable `{name}` is not set")))?;
            out.push_str(&value);
            rest = &body[end + 1..];
        } else {
            out.push('$');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    /// Parses a config, resolving relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, abs.parent().unwrap_or(Path::new("/")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = crate::paths::normalize(&base.join(&*p));
            }
        };
        fix(&mut self.catalog);
        fix(&mut self.images);
        fix(&mut self.output_dir);
        if let Some(g) = self.ground_truth.as_mut() {
            fix(g);
        }
        if let Some(p) = self.diversify.prompts.as_mut() {
            fix(p);
        }
        for e in [&mut self.endpoints.detect, &mut self.endpoints.generate, &mut self.endpoints.review, &mut self.endpoints.train]
        {
            if let Some(world) = e.base_url.strip_prefix(MOCK_SCHEME) {
                let mut p = PathBuf::from(world);
                fix(&mut p);
                e.base_url = format!("{MOCK_SCHEME}{}", p.display());
            }
        }
    }

    /// Checks thresholds and that referenced input files exist.
    pub fn validate(&self) -> Result<()> {
        let t = &self.thresholds;
        check_unit("thresholds.box_threshold", t.box_threshold)?;
        check_unit("thresholds.text_threshold", t.text_threshold)?;
        check_unit("thresholds.filter", t.filter)?;
        check_unit("thresholds.nms", t.nms)?;
        if !(self.eval.confusion_iou > 0.0 && self.eval.confusion_iou < 1.0) {
            return Err(Error::Config("eval.confusion_iou must lie in (0, 1)".into()));
        }
        if !(self.eval.confusion_conf > 0.0 && self.eval.confusion_conf < 1.0) {
            return Err(Error::Config("eval.confusion_conf must lie in (0, 1)".into()));
        }
        if self.dedup.exact > self.dedup.near {
            return Err(Error::Config("dedup.exact must not exceed dedup.near".into()));
        }
        let mut files: Vec<(&str, &Path)> = vec![("catalog", &self.catalog), ("images", &self.images)];
        if let Some(g) = &self.ground_truth {
            files.push(("ground_truth", g));
        }
        if let Some(p) = &self.diversify.prompts {
            files.push(("diversify.prompts", p));
        }
        for e in self.endpoints.all() {
            e.validate().map_err(|err| Error::Config(format!("endpoint {}: {err}", e.role)))?;
            if let Some(world) = e.base_url.strip_prefix(MOCK_SCHEME) {
                if !Path::new(world).is_file() {
                    return Err(Error::Config(format!("endpoint {}: mock world `{world}` does not exist", e.role)));
                }
            }
        }
        for (name, p) in files {
            if !p.is_file() {
                return Err(Error::Config(format!("{name}: `{}` does not exist", p.display())));
            }
        }
        let roles = [
            (BackendRole::Detect, &self.endpoints.detect),
            (BackendRole::Generate, &self.endpoints.generate),
            (BackendRole::Review, &self.endpoints.review),
            (BackendRole::Train, &self.endpoints.train),
        ];
        for (role, e) in roles {
            if e.role != role {
                return Err(Error::Config(format!("endpoint under `{role}` declares role `{}`", e.role)));
            }
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    pub fn set_ratio(&mut self, ratio: Ratio) {
        self.mix.ratio = ratio;
    }
}

pub const MOCK_SCHEME: &str = "mock:";

/// Per-class overrides as given on the command line (`class=count`).
pub fn parse_quota(s: &str) -> Result<(String, usize)> {
    let (c, n) =
        s.rsplit_once('=').ok_or_else(|| Error::InvalidArgument(format!("quota `{s}` is not of the form class=count")))?;
    let n = n.trim().parse().map_err(|_| Error::InvalidArgument(format!("quota count in `{s}` is not an integer")))?;
    Ok((c.trim().to_string(), n))
}

pub fn quotas_from(items: &[String]) -> Result<BTreeMap<String, usize>> {
    items.iter().map(|s| parse_quota(s)).collect()
}
