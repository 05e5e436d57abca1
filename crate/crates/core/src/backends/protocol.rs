//! JSON wire protocol spoken between the engine and model backends.
//!
//! Endpoints: `POST /detect`, `POST /generate`, `POST /review`, `POST /train`
//! and `GET /jobs/{id}`. Every payload carries `protocol_version`. Boxes are
//! pixel `xyxy` floats with the origin at the top-left; images travel by
//! reference, except overlays which may be inlined as base64.

use serde::{Deserialize, Serialize};

use crate::diversify::DiversificationJobSpec;

pub const PROTOCOL_VERSION: &str = "1.0";

/// Detector threshold defaults applied when a request omits them.
pub const DEFAULT_BOX_THRESHOLD: f64 = 0.27;
pub const DEFAULT_TEXT_THRESHOLD: f64 = 0.25;

fn version() -> String {
    PROTOCOL_VERSION.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub image_ref: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_threshold: Option<f64>,
    /// Trained detector to run instead of the open-vocabulary model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ref: Option<String>,
}

impl DetectRequest {
    pub fn new(image_ref: impl Into<String>, prompt: impl Into<String>) -> Self {
        DetectRequest {
            protocol_version: version(),
            image_ref: image_ref.into(),
            prompt: prompt.into(),
            box_threshold: None,
            text_threshold: None,
            model_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub detections: Vec<WireDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub model_ref: String,
    pub prompt: String,
    pub seed: u64,
    pub count: u32,
    /// Directory the backend writes images into; backend default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRef {
    pub image_ref: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub images: Vec<GeneratedRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewTask {
    PseudoLabel,
    Photorealism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub task: ReviewTask,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub user_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResponse {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub text: String,
    #[serde(default)]
    pub reviewer: String,
}

/// Detector training hyperparameters, defaults from the reference YOLOv8n run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyperparameters {
    pub epochs: u32,
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub mixed_precision: String,
    pub image_size: u32,
    pub lr0: f64,
    pub lrf: f64,
    pub batch_size: u32,
    pub lr_schedule: String,
    pub warmup_epochs: u32,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    pub box_loss_gain: f64,
    pub cls_loss_gain: f64,
    pub dfl_loss_gain: f64,
    pub hsv_s: f64,
    pub hsv_v: f64,
    pub hsv_h: f64,
    pub translate: f64,
    pub fliplr: f64,
    pub scale: f64,
    pub mosaic: f64,
    pub close_mosaic: u32,
}

impl Default for DetectorHyperparameters {
    fn default() -> Self {
        DetectorHyperparameters {
            epochs: 60,
            optimizer: "AdamW".into(),
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            mixed_precision: "fp16".into(),
            image_size: 640,
            lr0: 2.7e-4,
            lrf: 0.5,
            batch_size: 64,
            lr_schedule: "cosine".into(),
            warmup_epochs: 4,
            warmup_momentum: 0.8,
            warmup_bias_lr: 0.1,
            box_loss_gain: 7.5,
            cls_loss_gain: 0.5,
            dfl_loss_gain: 1.5,
            hsv_s: 0.7,
            hsv_v: 0.4,
            hsv_h: 0.015,
            translate: 0.1,
            fliplr: 0.5,
            scale: 0.5,
            mosaic: 1.0,
            close_mosaic: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainSpec {
    pub model: String,
    /// Path of the training manifest JSON.
    pub manifest_ref: String,
    pub hyperparameters: DetectorHyperparameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainJob {
    Diversification(DiversificationJobSpec),
    Detector(DetectorTrainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub job: TrainJob,
}

impl TrainRequest {
    pub fn new(job: TrainJob) -> Self {
        TrainRequest { protocol_version: version(), job }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub job_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    NotFound,
    UnsupportedVersion,
    Quota,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::BadRequest | ErrorCode::UnsupportedVersion => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Quota => 429,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default = "version")]
    pub protocol_version: String,
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ErrorBody { protocol_version: version(), error: ErrorDetail { code, message: message.into() } }
    }
}
