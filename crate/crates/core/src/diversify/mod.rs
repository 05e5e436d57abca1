//! Subject-driven data diversification: fine-tuning job specifications per
//! instance, inference prompt expansion, gated generation and mixing of
//! generated with original images.

mod mix;
mod prompts;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{GenerateRequest, Generator, Reviewer, PROTOCOL_VERSION};
use crate::catalog::{render_with, ClassEntry, InstanceEntry, PromptRole, PromptTemplate, Terrain, MIN_INSTANCE_IMAGES};
use crate::concurrency::bounded_map;
use crate::paths::{relative_path, to_portable};
use crate::preprocess::{ImageRecord, Origin};
use crate::review::{photorealism_request, NeedsAttention, PhotorealismVerdict};
use crate::{Error, Result};

pub use mix::{apportion_quotas, mix_dataset, MixPlan, MixResult, Ratio, TrainingManifest};
pub use prompts::{terrain_of, InferencePrompt, PromptCatalog, GENERAL_IDS, LAND_IDS, WATER_IDS};

/// Lower bound on fine-tuning steps regardless of the instance image count.
pub const MIN_STEPS: u32 = 800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversificationDefaults {
    /// One job per multiplier; steps = max(800, k * images).
    pub steps_multipliers: Vec<u32>,
    pub prior_loss_weight: f64,
    pub snr_gamma: f64,
    pub lr_unet: f64,
    pub lr_text_encoder: f64,
    pub resolution: u32,
}

impl Default for DiversificationDefaults {
    fn default() -> Self {
        DiversificationDefaults {
            steps_multipliers: vec![120, 140],
            prior_loss_weight: 1.0,
            snr_gamma: 5.0,
            lr_unet: 1e-4,
            lr_text_encoder: 5e-6,
            resolution: 1024,
        }
    }
}

/// Fine-tuning job for one instance, sent to a train backend.
///
/// `prior_loss_weight` weights the class-prior reconstruction term and
/// `snr_gamma` caps the per-timestep loss weight; both are applied by the
/// backend, which owns the noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversificationJobSpec {
    pub instance_name: String,
    pub class_name: String,
    pub train_image_refs: Vec<String>,
    pub max_steps: u32,
    pub steps_multiplier: u32,
    pub prior_loss_weight: f64,
    pub snr_gamma: f64,
    pub lr_unet: f64,
    pub lr_text_encoder: f64,
    pub resolution: u32,
    pub class_prior_prompt: String,
    pub instance_prompt: String,
}

pub fn max_steps(multiplier: u32, images: usize) -> u32 {
    MIN_STEPS.max(multiplier.saturating_mul(images as u32))
}

/// One spec per configured multiplier, identical otherwise.
pub fn make_job_specs(
    instance: &InstanceEntry,
    class: &ClassEntry,
    defaults: &DiversificationDefaults,
) -> Result<Vec<DiversificationJobSpec>> {
    let n = instance.image_refs.len();
    if n < MIN_INSTANCE_IMAGES {
        return Err(Error::TooFewInstanceImages { instance: instance.instance_name.clone(), count: n });
    }
    if !(defaults.prior_loss_weight > 0.0 && defaults.snr_gamma > 0.0) {
        return Err(Error::Config("prior_loss_weight and snr_gamma must be positive".into()));
    }
    let class_prior_prompt = render_with(&PromptTemplate::builtin(PromptRole::ClassPrior), &[("class_name", &class.name)])?;
    let instance_prompt = render_with(
        &PromptTemplate::builtin(PromptRole::InstanceTrain),
        &[("instance_name", &instance.instance_name), ("class_name", &class.name)],
    )?;
    Ok(defaults
        .steps_multipliers
        .iter()
        .map(|&k| DiversificationJobSpec {
            instance_name: instance.instance_name.clone(),
            class_name: class.name.clone(),
            train_image_refs: instance.image_refs.clone(),
            max_steps: max_steps(k, n),
            steps_multiplier: k,
            prior_loss_weight: defaults.prior_loss_weight,
            snr_gamma: defaults.snr_gamma,
            lr_unet: defaults.lr_unet,
            lr_text_encoder: defaults.lr_text_encoder,
            resolution: defaults.resolution,
            class_prior_prompt: class_prior_prompt.clone(),
            instance_prompt: instance_prompt.clone(),
        })
        .collect())
}

/// A request to render `count` images of one instance from one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Trained model to use; empty until the request is assigned one.
    pub model_ref: String,
    pub instance_name: String,
    pub class_name: String,
    pub prompt_id: u32,
    pub prompt_text: String,
    pub seed: u64,
    pub count: u32,
}

/// Expands the applicable prompts for a class instance, in prompt-id order.
pub fn expand_inference_prompts(
    class: &ClassEntry,
    terrain: Terrain,
    catalog: &PromptCatalog,
    instance_name: &str,
    seed: u64,
    count: u32,
) -> Result<Vec<GenerationRequest>> {
    catalog
        .applicable(terrain)
        .map(|p| {
            let text = render_with(
                &PromptTemplate::new(PromptRole::ClassPrior, p.template.clone()),
                &[("instance_name", instance_name), ("class_name", &class.name)],
            )?;
            Ok(GenerationRequest {
                model_ref: String::new(),
                instance_name: instance_name.to_string(),
                class_name: class.name.clone(),
                prompt_id: p.id,
                prompt_text: text,
                seed: seed.wrapping_add(p.id as u64 * 1000),
                count,
            })
        })
        .collect()
}

/// Takes `n` requests spread evenly over the list (all when `n` is larger).
pub fn spread_subset(requests: Vec<GenerationRequest>, n: usize) -> Vec<GenerationRequest> {
    let len = requests.len();
    if n >= len {
        return requests;
    }
    let picks: Vec<usize> = (0..n).map(|i| i * len / n).collect();
    requests.into_iter().enumerate().filter(|(i, _)| picks.contains(i)).map(|(_, r)| r).collect()
}

/// Assigns requests round-robin to the trained models of their instance.
pub fn assign_models(requests: &mut [GenerationRequest], models: &[String]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no trained models to assign generation requests to".into()));
    }
    for (i, r) in requests.iter_mut().enumerate() {
        r.model_ref = models[i % models.len()].clone();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub instance_name: String,
    pub class_name: String,
    pub model_ref: String,
    pub prompt_id: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationOutcome {
    /// Generated images with a positive photorealism verdict.
    pub approved: Vec<ImageRecord>,
    pub provenance: BTreeMap<String, Provenance>,
    pub verdicts: Vec<PhotorealismVerdict>,
    pub needs_attention: Vec<NeedsAttention>,
    /// Requests that failed at the generator, with the error.
    pub failed_requests: Vec<(GenerationRequest, String)>,
}

/// Runs every request, sends each image through the photorealism gate and
/// returns the approved ones. Failing requests are logged and skipped.
///
/// Image paths in the returned records are relative to `root`.
pub fn run_generation(
    requests: &[GenerationRequest],
    generator: &dyn Generator,
    reviewer: &dyn Reviewer,
    output_dir: &Path,
    root: &Path,
    max_in_flight: usize,
) -> Result<GenerationOutcome> {
    let mut outcome = GenerationOutcome::default();
    let out = output_dir.to_string_lossy().into_owned();
    let responses = bounded_map(requests, max_in_flight, |r| {
        generator.generate(&GenerateRequest {
            protocol_version: PROTOCOL_VERSION.into(),
            model_ref: r.model_ref.clone(),
            prompt: r.prompt_text.clone(),
            seed: r.seed,
            count: r.count,
            output_dir: Some(out.clone()),
        })
    });

    let mut generated = Vec::new();
    for (req, resp) in requests.iter().zip(responses) {
        match resp {
            Ok(resp) => {
                for g in resp.images {
                    generated.push((req, g));
                }
            }
            Err(e) => {
                log::warn!("generation request (prompt {}, seed {}) failed: {e}", req.prompt_id, req.seed);
                outcome.failed_requests.push((req.clone(), e.to_string()));
            }
        }
    }

    let reviews = bounded_map(&generated, max_in_flight, |(req, g)| -> Result<_> {
        let request = photorealism_request(Path::new(&g.image_ref), &req.class_name)?;
        Ok(reviewer.review(&request)?)
    });
    for ((req, g), review) in generated.iter().zip(reviews) {
        let path = Path::new(&g.image_ref);
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let resp = match review {
            Ok(r) => r,
            Err(e) => {
                outcome.needs_attention.push(NeedsAttention {
                    image_id: id,
                    task: crate::backends::ReviewTask::Photorealism,
                    reason: e.to_string(),
                    raw_text: String::new(),
                });
                continue;
            }
        };
        match PhotorealismVerdict::from_text(&id, &resp.reviewer, &resp.text) {
            Ok(v) => {
                if v.kept {
                    outcome.approved.push(ImageRecord {
                        id: id.clone(),
                        path: to_portable(&relative_path(root, path)),
                        class_names: vec![req.class_name.clone()],
                        origin: Origin::Generated,
                        width: g.width,
                        height: g.height,
                    });
                    outcome.provenance.insert(
                        id.clone(),
                        Provenance {
                            image_id: id.clone(),
                            instance_name: req.instance_name.clone(),
                            class_name: req.class_name.clone(),
                            model_ref: req.model_ref.clone(),
                            prompt_id: req.prompt_id,
                            seed: g.seed,
                        },
                    );
                }
                outcome.verdicts.push(v);
            }
            Err(e) => outcome.needs_attention.push(NeedsAttention {
                image_id: id,
                task: crate::backends::ReviewTask::Photorealism,
                reason: e.to_string(),
                raw_text: resp.text,
            }),
        }
    }
    Ok(outcome)
}
