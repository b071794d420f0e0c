use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use base64::Engine;
use compass_core::generators::GeneratorSpec;
use compass_core::metrics::seeded_rca;
use compass_core::training::{load_checkpoint, save_checkpoint};
use compass_core::{DeformatorMode, TrainConfig, Trainer};
use compass_service::{router, AppState, Explorer, ExplorerOptions};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn checkpoint(dir: &Path, mode: DeformatorMode) -> PathBuf {
    let cfg = TrainConfig {
        latent_dim: 6,
        num_directions: 4,
        batch_size: 4,
        deformator_hidden: 16,
        deformator_mode: mode,
        eval_interval: 0,
        checkpoint_interval: 0,
        generator: GeneratorSpec {
            resolution: 16,
            ..GeneratorSpec::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::from_config(cfg).unwrap();
    for _ in 0..3 {
        trainer.train_step().unwrap();
    }
    let path = dir.join(format!("{mode}.bin"));
    save_checkpoint(&path, &trainer.checkpoint()).unwrap();
    path
}

fn options() -> ExplorerOptions {
    ExplorerOptions {
        rca_samples: 64,
        ..ExplorerOptions::default()
    }
}

struct Harness {
    app: axum::Router,
    _dir: tempfile::TempDir,
    path: PathBuf,
}

fn harness(mode: DeformatorMode) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path(), mode);
    let explorer = Explorer::from_checkpoint(&path, &options()).unwrap();
    Harness {
        app: router(AppState::new(explorer, 2), None),
        _dir: dir,
        path,
    }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::ORIGIN, "http://localhost:5173");
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn raw_post(app: &axum::Router, uri: &str, body: &str) -> Reply {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn png(app: &axum::Router, stack: Value) -> Vec<u8> {
    let r = call(app, "POST", "/generate", Some(stack)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    assert_eq!(r.headers[header::CONTENT_TYPE], "image/png");
    r.body
}

#[tokio::test]
async fn healthz_reports_the_model() {
    let h = harness(DeformatorMode::Nonlinear);
    let r = call(&h.app, "GET", "/healthz", None).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["K"], 4);
    assert_eq!(v["latent_dim"], 6);
    assert_eq!(v["max_shifts"], 8);
    assert_eq!(v["checkpoint_id"].as_str().unwrap().len(), 16);
    assert!(r.headers.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[tokio::test]
async fn directions_are_sorted_and_match_the_evaluation() {
    let h = harness(DeformatorMode::Nonlinear);
    let r = call(&h.app, "GET", "/directions", None).await;
    let list = r.json();
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 4);
    let scores: Vec<f64> = list.iter().map(|d| d["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let ckpt = load_checkpoint::<f32>(&h.path).unwrap();
    let gen = compass_core::GeneratorRegistry::with_builtins()
        .build(&ckpt.config.generator, ckpt.config.latent_dim)
        .unwrap();
    let report = seeded_rca(
        &ckpt.deformator,
        &ckpt.reconstructor,
        &*gen,
        64,
        &ckpt.config.magnitudes(),
        0,
    )
    .unwrap();
    for d in list {
        let k = d["index"].as_u64().unwrap() as usize;
        assert_eq!(d["score"].as_f64().unwrap(), report.per_direction[k]);
        assert!(d["centroid_norm"].as_f64().unwrap() >= 0.0);
    }
}

#[tokio::test]
async fn generate_is_deterministic_and_stacks_compose() {
    let h = harness(DeformatorMode::Linear);
    let base = png(&h.app, json!({"seed": 3, "shifts": []})).await;
    assert_eq!(base, png(&h.app, json!({"seed": 3})).await);
    let edited = png(&h.app, json!({"seed": 3, "shifts": [{"k": 1, "eps": 4.0}]})).await;
    assert_ne!(base, edited);
    assert_eq!(
        edited,
        png(&h.app, json!({"seed": 3, "shifts": [{"k": 1, "eps": 4.0}]})).await
    );
    let cancelled = png(
        &h.app,
        json!({"seed": 3, "shifts": [{"k": 1, "eps": 4.0}, {"k": 1, "eps": -4.0}]}),
    )
    .await;
    assert_eq!(cancelled, base);
    let ab = png(
        &h.app,
        json!({"seed": 3, "shifts": [{"k": 0, "eps": 2.5}, {"k": 2, "eps": -3.0}]}),
    )
    .await;
    let ba = png(
        &h.app,
        json!({"seed": 3, "shifts": [{"k": 2, "eps": -3.0}, {"k": 0, "eps": 2.5}]}),
    )
    .await;
    assert_eq!(ab, ba);
    assert_ne!(base, png(&h.app, json!({"seed": 4})).await);
}

#[tokio::test]
async fn generate_reports_norm_and_clamping() {
    let h = harness(DeformatorMode::Linear);
    let r = call(
        &h.app,
        "POST",
        "/generate",
        Some(json!({"seed": 1, "shifts": [{"k": 0, "eps": 50.0}]})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["x-eps-clamped"], "true");
    assert_eq!(r.headers["x-eps-range"], "-8,8");
    let clamped = png(&h.app, json!({"seed": 1, "shifts": [{"k": 0, "eps": 8.0}]})).await;
    assert_eq!(r.body, clamped);
    let z = compass_core::rng::latent_from_seed::<f32>(1, 6);
    let plain = call(&h.app, "POST", "/generate", Some(json!({"seed": 1}))).await;
    assert_eq!(plain.headers["x-eps-clamped"], "false");
    let norm: f64 = plain.headers["x-latent-norm"].to_str().unwrap().parse().unwrap();
    assert!((norm - f64::from(compass_core::latent::norm(z.view()))).abs() < 1e-5);
}

#[tokio::test]
async fn bad_requests_name_the_field() {
    let h = harness(DeformatorMode::Nonlinear);
    let r = raw_post(&h.app, "/generate", "{not json").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = raw_post(&h.app, "/generate", r#"{"seed": 1, "shifts": [{"k": "x", "eps": 1}]}"#).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["field"], "shifts[0].k");
    let r = raw_post(&h.app, "/generate", r#"{"seed": 1, "colour": 2}"#).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    let r = call(
        &h.app,
        "POST",
        "/generate",
        Some(json!({"seed": 1, "shifts": [{"k": 0, "eps": 1.0}, {"k": 4, "eps": 1.0}]})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["field"], "shifts[1].k");

    let many: Vec<Value> = (0..9).map(|_| json!({"k": 0, "eps": 0.1})).collect();
    let r = call(&h.app, "POST", "/generate", Some(json!({"seed": 1, "shifts": many}))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let r = call(
        &h.app,
        "POST",
        "/strip",
        Some(json!({"seed": 1, "sweep": {"k": 0, "lo": -1, "hi": 1, "n": 33}})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["field"], "sweep.n");
    let r = call(
        &h.app,
        "POST",
        "/strip",
        Some(json!({"seed": 1, "sweep": {"k": 9, "lo": -1, "hi": 1, "n": 3}})),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["field"], "sweep.k");
}

fn decode(r: &Reply) -> Vec<Vec<u8>> {
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    r.json()
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            base64::engine::general_purpose::STANDARD
                .decode(s.as_str().unwrap())
                .unwrap()
        })
        .collect()
}

#[tokio::test]
async fn strips_match_individual_generations() {
    let h = harness(DeformatorMode::Nonlinear);
    let stack = json!([{"k": 2, "eps": 3.0}]);
    let r = call(
        &h.app,
        "POST",
        "/strip",
        Some(json!({"seed": 7, "shifts": stack, "sweep": {"k": 1, "lo": -6, "hi": 6, "n": 5}})),
    )
    .await;
    let strip = decode(&r);
    assert_eq!(strip.len(), 5);
    for (img, eps) in strip.iter().zip([-6.0, -3.0, 0.0, 3.0, 6.0]) {
        let single = png(
            &h.app,
            json!({"seed": 7, "shifts": [{"k": 2, "eps": 3.0}, {"k": 1, "eps": eps}]}),
        )
        .await;
        assert_eq!(img, &single, "eps {eps}");
    }
    let stack_only = png(&h.app, json!({"seed": 7, "shifts": [{"k": 2, "eps": 3.0}]})).await;
    assert_eq!(strip[2], stack_only);

    let r = call(
        &h.app,
        "POST",
        "/strip",
        Some(json!({"seed": 7, "sweep": {"k": 0, "lo": 0, "hi": 0, "n": 1}})),
    )
    .await;
    let one = decode(&r);
    assert_eq!(one, vec![png(&h.app, json!({"seed": 7})).await]);
}

#[tokio::test]
async fn concurrent_requests_see_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path(), DeformatorMode::Nonlinear);
    let before = std::fs::read(&path).unwrap();
    let state = AppState::new(Explorer::from_checkpoint(&path, &options()).unwrap(), 2);
    let app = router(Arc::clone(&state), None);
    let stack = json!({"seed": 2, "shifts": [{"k": 3, "eps": -2.0}]});
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            let stack = stack.clone();
            tokio::spawn(async move { call(&app, "POST", "/generate", Some(stack)).await.body })
        })
        .collect();
    let mut bodies = Vec::new();
    for t in tasks {
        bodies.push(t.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(before, std::fs::read(&path).unwrap());
}

#[tokio::test]
async fn scores_can_come_from_a_saved_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path(), DeformatorMode::Nonlinear);
    let report = dir.path().join("eval.json");
    std::fs::write(
        &report,
        json!({"rca": 0.5, "ppl": 1.0, "delta": 0.1, "n_samples": 4, "per_direction": [0.1, 0.9, 0.5, 0.9],
               "ppl_normalization": "x"})
        .to_string(),
    )
    .unwrap();
    let opts = ExplorerOptions {
        report: Some(report.clone()),
        ..options()
    };
    let ex = Explorer::from_checkpoint(&path, &opts).unwrap();
    let order: Vec<usize> = ex.directions().iter().map(|d| d.index).collect();
    assert_eq!(order, vec![1, 3, 2, 0]);
    std::fs::write(
        &report,
        json!({"rca": 0.5, "ppl": 1.0, "delta": 0.1, "n_samples": 4, "per_direction": [0.1],
               "ppl_normalization": "x"})
        .to_string(),
    )
    .unwrap();
    assert!(Explorer::from_checkpoint(&path, &opts).is_err());
}
