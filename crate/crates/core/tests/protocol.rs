//! Wire protocol against the standalone mock server binary. Every request
//! and response is checked against the published JSON schemas.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use labelforge::backends::http::HttpBackend;
use labelforge::backends::{BackendEndpoint, BackendRole, DetectRequest, Detector, MockBackend};
use labelforge::cli::synth;
use serde_json::{json, Value};

struct Server {
    child: Child,
    url: String,
    world: PathBuf,
    _tmp: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server() -> Server {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 5, 24).unwrap();
    let world = tmp.path().join("world");
    let mut child = Command::new(env!("CARGO_BIN_EXE_labelforge-mock-server"))
        .arg("--world")
        .arg(world.join("world.json"))
        .args(["--addr", "127.0.0.1:0", "--threads", "2"])
        .arg("--state-dir")
        .arg(tmp.path().join("state"))
        .arg("--output-dir")
        .arg(tmp.path().join("generated"))
        .env("RUST_LOG", "error")
        .stdout(Stdio::piped())
        .spawn()
        .expect("mock server starts");
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "unexpected banner {url:?}");
    Server { child, url, world, _tmp: tmp }
}

fn schema(endpoint: &str, def: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("schemas/{endpoint}.schema.json"));
    let mut doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    doc["$ref"] = json!(format!("#/$defs/{def}"));
    jsonschema::draft202012::new(&doc).unwrap()
}

fn assert_valid(endpoint: &str, def: &str, v: &Value) {
    let validator = schema(endpoint, def);
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{endpoint}/{def} rejects {v}: {errors:?}");
}

fn call(server: &Server, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(20)).build();
    let url = format!("{}{path}", server.url);
    let result = match body {
        Some(b) => agent.request(method, &url).set("Content-Type", "application/json").send_string(&b.to_string()),
        None => agent.request(method, &url).call(),
    };
    let resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{method} {path}: {e}"),
    };
    let status = resp.status();
    (status, serde_json::from_str(&resp.into_string().unwrap()).unwrap())
}

fn image(server: &Server, i: usize) -> String {
    server.world.join(format!("images/img{i:04}.png")).to_string_lossy().into_owned()
}

#[test]
fn all_endpoints_conform_to_the_schemas() {
    let server = start_server();

    let detect =
        json!({"protocol_version": "1.0", "image_ref": image(&server, 1), "prompt": "bulldozer . dozer", "box_threshold": 0.2});
    assert_valid("detect", "request", &detect);
    let (status, resp) = call(&server, "POST", "/detect", Some(&detect));
    assert_eq!(status, 200, "{resp}");
    assert_valid("detect", "response", &resp);
    assert!(!resp["detections"].as_array().unwrap().is_empty());

    let refs: Vec<String> = [1, 9, 17].iter().map(|&i| image(&server, i)).collect();
    let train = json!({"protocol_version": "1.0", "job": {
        "kind": "diversification", "instance_name": "B100", "class_name": "bulldozer",
        "train_image_refs": refs, "max_steps": 800, "steps_multiplier": 120,
        "prior_loss_weight": 1.0, "snr_gamma": 5.0, "lr_unet": 1e-4, "lr_text_encoder": 5e-6,
        "resolution": 1024, "class_prior_prompt": "a photo of a bulldozer", "instance_prompt": "a photo of B100 bulldozer"}});
    assert_valid("train", "request", &train);
    let (status, resp) = call(&server, "POST", "/train", Some(&train));
    assert_eq!(status, 200, "{resp}");
    assert_valid("train", "response", &resp);
    let job_id = resp["job_id"].as_str().unwrap().to_string();

    let mut artifact = None;
    for _ in 0..50 {
        let (status, st) = call(&server, "GET", &format!("/jobs/{job_id}"), None);
        assert_eq!(status, 200, "{st}");
        assert_valid("jobs", "response", &st);
        if st["state"] == "succeeded" {
            artifact = st["artifact_ref"].as_str().map(String::from);
            break;
        }
        assert_ne!(st["state"], "failed", "{st}");
        std::thread::sleep(Duration::from_millis(20));
    }
    let artifact = artifact.expect("job finishes");

    let generate = json!({"protocol_version": "1.0", "model_ref": artifact, "prompt": "B100 bulldozer on a muddy slope", "seed": 4, "count": 2});
    assert_valid("generate", "request", &generate);
    let (status, resp) = call(&server, "POST", "/generate", Some(&generate));
    assert_eq!(status, 200, "{resp}");
    assert_valid("generate", "response", &resp);
    let images = resp["images"].as_array().unwrap();
    assert_eq!(images.len(), 2);
    let generated = images[0]["image_ref"].as_str().unwrap();
    assert!(Path::new(generated).is_file());

    let review = json!({"protocol_version": "1.0", "task": "photorealism", "image_ref": generated,
        "system_prompt": "You judge images.", "user_prompt": "Is this image photorealistic?"});
    assert_valid("review", "request", &review);
    let (status, resp) = call(&server, "POST", "/review", Some(&review));
    assert_eq!(status, 200, "{resp}");
    assert_valid("review", "response", &resp);
}

#[test]
fn errors_use_the_error_body() {
    let server = start_server();
    let cases = [
        ("GET", "/jobs/does-not-exist", None, 404, "not_found"),
        (
            "POST",
            "/detect",
            Some(json!({"protocol_version": "9.0", "image_ref": "a.png", "prompt": "x"})),
            400,
            "unsupported_version",
        ),
        ("POST", "/detect", Some(json!({"protocol_version": "1.0", "prompt": "x"})), 400, "bad_request"),
        (
            "POST",
            "/generate",
            Some(json!({"protocol_version": "1.0", "model_ref": "m", "prompt": "p", "seed": 1, "count": 0})),
            400,
            "bad_request",
        ),
        ("GET", "/detect", None, 400, "bad_request"),
        ("GET", "/nowhere", None, 404, "not_found"),
    ];
    for (method, path, body, want_status, want_code) in cases {
        let (status, resp) = call(&server, method, path, body.as_ref());
        assert_eq!(status, want_status, "{method} {path}: {resp}");
        assert_valid("error", "response", &resp);
        assert_eq!(resp["error"]["code"], want_code, "{method} {path}");
    }
}

#[test]
fn http_client_matches_in_process_backend() {
    let server = start_server();
    let client = HttpBackend::new(BackendEndpoint::new(BackendRole::Detect, server.url.clone())).unwrap();
    let local = MockBackend::from_world_file(server.world.join("world.json")).unwrap();
    for i in 0..6 {
        let req = DetectRequest::new(image(&server, i), "bulldozer . crawler crane . crane . wheel loader");
        let remote = client.detect(&req).unwrap();
        assert_eq!(remote, local.detect(&req).unwrap(), "image {i}");
    }
}

#[test]
fn engine_payloads_validate_and_schemas_reject_drift() {
    use labelforge::backends::{
        DetectorHyperparameters, DetectorTrainSpec, ErrorBody, ErrorCode, ReviewRequest, ReviewTask, TrainJob, TrainRequest,
        PROTOCOL_VERSION,
    };
    let train = TrainRequest::new(TrainJob::Detector(DetectorTrainSpec {
        model: "yolov8n".into(),
        manifest_ref: "mix/manifest.json".into(),
        hyperparameters: DetectorHyperparameters::default(),
    }));
    assert_valid("train", "request", &serde_json::to_value(&train).unwrap());
    let review = ReviewRequest {
        protocol_version: PROTOCOL_VERSION.into(),
        task: ReviewTask::PseudoLabel,
        image_ref: "overlay.png".into(),
        image_base64: Some("iVBORw0KGgo=".into()),
        system_prompt: None,
        user_prompt: "Check the boxes.".into(),
    };
    assert_valid("review", "request", &serde_json::to_value(&review).unwrap());
    assert_valid("detect", "request", &serde_json::to_value(DetectRequest::new("a.png", "crane")).unwrap());
    assert_valid("error", "response", &serde_json::to_value(ErrorBody::new(ErrorCode::Quota, "slow down")).unwrap());

    let rejects =
        |endpoint: &str, def: &str, v: Value| assert!(!schema(endpoint, def).is_valid(&v), "{endpoint}/{def} accepts {v}");
    rejects("detect", "request", json!({"image_ref": "a.png"}));
    rejects("detect", "request", json!({"image_ref": "a.png", "prompt": "x", "box_threshold": 1.5}));
    rejects("detect", "response", json!({"detections": [{"x1": 0, "y1": 0, "x2": 1, "y2": 1, "score": 0.5}]}));
    rejects("train", "request", json!({"job": {"kind": "detector", "model": "m", "manifest_ref": "x"}}));
    rejects("jobs", "response", json!({"job_id": "j", "state": "done"}));
    rejects("review", "response", json!({"protocol_version": "2.0", "text": "Yes"}));
}
