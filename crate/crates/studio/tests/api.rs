use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use facedodge::attack::{attack_step, heatmap, region_scores, AttackConfig, AttackState};
use facedodge::embedder::{EmbedderSpec, EmbeddingModel};
use facedodge::harness::{attack_context, population, ExperimentConfig};
use facedodge::image::Image;
use facedodge::makeup::{composite, MakeupLayer};
use facedodge::synthface::{synth_stream, CameraProfile, Region};
use facedodge_studio::{router, HeatmapView, Studio};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup(attack: Option<AttackConfig>) -> (Arc<Studio>, Arc<EmbeddingModel>, ExperimentConfig) {
    let mut config = ExperimentConfig::default();
    if let Some(a) = attack {
        config.attack = a;
    }
    let surrogate = Arc::new(EmbeddingModel::init(EmbedderSpec::surrogate(31)).unwrap());
    let studio = Arc::new(Studio::new(config.clone(), surrogate.clone()).unwrap());
    (studio, surrogate, config)
}

async fn call(studio: &Arc<Studio>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let resp = router(studio.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn create(studio: &Arc<Studio>, identity: &str) -> String {
    let (status, body) = call(studio, "POST", "/sessions", Some(json!({"source": "synthetic", "identity": identity}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["id"].as_str().unwrap().to_string()
}

fn layer(studio: &Studio, entry: &str, region: Region, opacity: f64) -> MakeupLayer {
    let e = studio.config().palette.entry(entry).unwrap();
    MakeupLayer::from_entry(e, region, opacity, 1.0)
}

fn decode_png(b64: &Value) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD
        .decode(b64.as_str().unwrap())
        .unwrap()
}

#[tokio::test]
async fn synthetic_session_starts_empty_with_positive_distance() {
    let (studio, _, _) = setup(None);
    let id = create(&studio, "P01").await;
    let (status, body) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["distance"].as_f64().unwrap() > 0.0);
    assert_eq!(body["layers"], json!([]));
    assert_eq!(body["identity"], "P01");
    assert_eq!(body["threshold"], 0.368);
}

#[tokio::test]
async fn unknown_identity_and_session_are_rejected() {
    let (studio, _, _) = setup(None);
    let (status, _) = call(&studio, "POST", "/sessions", Some(json!({"source": "synthetic", "identity": "Z99"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&studio, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn upload_without_landmarks_is_rejected_with_explanation() {
    let (studio, _, _) = setup(None);
    let img = Image::filled(64, 64, [0.5, 0.5, 0.5]).to_png().unwrap();
    let png = base64::engine::general_purpose::STANDARD.encode(img);
    let (status, body) = call(&studio, "POST", "/sessions", Some(json!({"source": "upload", "images": [png.clone(), png]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("landmarks"));
}

#[tokio::test]
async fn upload_with_landmarks_creates_a_session() {
    let (studio, _, config) = setup(None);
    let pop = population(&config);
    let stream = synth_stream(&pop.participants[2].params, &CameraProfile::studio(), 3, 77, None).unwrap();
    let images: Vec<String> = stream
        .frames
        .iter()
        .map(|f| base64::engine::general_purpose::STANDARD.encode(f.image.to_png().unwrap()))
        .collect();
    let landmarks: Vec<_> = stream
        .frames
        .iter()
        .map(|f| f.ground_truth.as_ref().unwrap().landmarks.clone())
        .collect();
    let (status, body) = call(
        &studio,
        "POST",
        "/sessions",
        Some(json!({"source": "upload", "images": images, "landmarks": landmarks})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert!(body["identity"].is_null());
    assert!(body["distance"].as_f64().unwrap() > 0.0);
}

#[tokio::test]
async fn sessions_of_one_identity_are_independent() {
    let (studio, _, _) = setup(None);
    let a = create(&studio, "P02").await;
    let b = create(&studio, "P02").await;
    assert_ne!(a, b);
    let l = layer(&studio, "lip_red", Region::Lips, 0.3);
    let (status, _) = call(&studio, "POST", &format!("/sessions/{a}/actions"), Some(json!({"action": "add_layer", "layer": l}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, sa) = call(&studio, "GET", &format!("/sessions/{a}"), None).await;
    let (_, sb) = call(&studio, "GET", &format!("/sessions/{b}"), None).await;
    assert_eq!(sa["layers"].as_array().unwrap().len(), 1);
    assert_eq!(sb["layers"], json!([]));
    assert_ne!(sa["distance"], sb["distance"]);
}

#[tokio::test]
async fn add_then_undo_restores_state_exactly() {
    let (studio, _, _) = setup(None);
    let id = create(&studio, "P03").await;
    let (_, before) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;
    let (_, export_before) = call(&studio, "GET", &format!("/sessions/{id}/export"), None).await;
    let l = layer(&studio, "brow_dark", Region::LeftBrow, 0.5);
    let (status, added) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": l}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_ne!(added["state"]["distance"], before["distance"]);
    assert_eq!(added["state"]["ledger"]["left_brow"], 0.5);
    let (status, undone) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "undo"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(undone["state"]["distance"], before["distance"]);
    assert_eq!(undone["state"]["layers"], json!([]));
    let (_, export_after) = call(&studio, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(export_after["image_png"], export_before["image_png"]);
    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "undo"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn undo_reverts_auto_steps_one_at_a_time() {
    let (studio, _, _) = setup(None);
    let id = create(&studio, "P02").await;
    let mut seen = Vec::new();
    for _ in 0..3 {
        let (_, s) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;
        seen.push(s);
        let (status, body) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "auto_step"}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
    }
    for prior in seen.iter().rev() {
        let (status, undone) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "undo"}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(undone["state"]["layers"], prior["layers"]);
        assert_eq!(undone["state"]["distance"], prior["distance"]);
    }
}

#[tokio::test]
async fn invalid_layers_are_rejected_and_leave_state_unchanged() {
    let (studio, _, _) = setup(None);
    let id = create(&studio, "P04").await;
    let (_, before) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;

    let mut off_palette = layer(&studio, "lip_red", Region::Lips, 0.3);
    off_palette.color = [0.1, 0.9, 0.1];
    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": off_palette}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let wrong_region = layer(&studio, "lip_red", Region::LeftBrow, 0.3);
    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": wrong_region}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let first = layer(&studio, "lip_red", Region::Lips, 0.5);
    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": first}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, mid) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;
    let over_cap = layer(&studio, "lip_berry", Region::Lips, 0.4);
    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": over_cap}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, after) = call(&studio, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(after["layers"], mid["layers"]);
    assert_eq!(after["distance"], mid["distance"]);
    assert_ne!(mid["distance"], before["distance"]);

    let (status, _) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "paint"}))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn auto_step_matches_the_attack_module() {
    let (studio, surrogate, config) = setup(None);
    let id = create(&studio, "P05").await;
    let pop = population(&config);
    let ctx = attack_context(&config, &pop, &pop.participants[4], surrogate).unwrap();
    let mut state = AttackState::new(ctx.base());
    for _ in 0..2 {
        let (status, body) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "auto_step"}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let (next, record) = attack_step(&state, &ctx, &config.attack).unwrap();
        state = next;
        assert_eq!(body["step"], serde_json::to_value(&record).unwrap());
        assert_eq!(body["state"]["layers"], serde_json::to_value(&state.layers).unwrap());
        assert_eq!(body["state"]["distance"], json!(record.distance));
    }
}

#[tokio::test]
async fn heatmap_delegates_to_the_attack_module() {
    let (studio, surrogate, config) = setup(None);
    let id = create(&studio, "P06").await;
    let pop = population(&config);
    let ctx = attack_context(&config, &pop, &pop.participants[5], surrogate).unwrap();
    let (status, body) = call(&studio, "GET", &format!("/sessions/{id}/heatmap"), None).await;
    assert_eq!(status, StatusCode::OK);
    let view: HeatmapView = serde_json::from_value(body.clone()).unwrap();
    let expected = heatmap(&ctx, ctx.base()).unwrap();
    assert_eq!(view.values, expected.values);
    assert_eq!(view.scores, region_scores(&expected, ctx.masks()));
    assert_eq!(decode_png(&body["png"]), expected.to_png().unwrap());

    let l = layer(&studio, "shadow_bronze", Region::RightEyelid, 0.8);
    call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": l}))).await;
    let (_, after) = call(&studio, "GET", &format!("/sessions/{id}/heatmap"), None).await;
    let after: HeatmapView = serde_json::from_value(after).unwrap();
    let diff: f64 = after.values.iter().zip(&view.values).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 0.0);
}

#[tokio::test]
async fn export_replays_to_the_current_image() {
    let (studio, surrogate, config) = setup(None);
    let id = create(&studio, "P07").await;
    let pop = population(&config);
    let ctx = attack_context(&config, &pop, &pop.participants[6], surrogate).unwrap();

    let (_, empty) = call(&studio, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(empty["plan"]["layers"], json!([]));
    assert_eq!(decode_png(&empty["image_png"]), ctx.base().to_png().unwrap());

    for (entry, region, opacity) in [
        ("lip_berry", Region::Lips, 0.4),
        ("blush_peach", Region::LeftCheek, 0.3),
        ("contour_dark_brown", Region::JawContour, 0.6),
    ] {
        let l = layer(&studio, entry, region, opacity);
        call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "add_layer", "layer": l}))).await;
    }
    let (status, export) = call(&studio, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(status, StatusCode::OK);
    let layers: Vec<MakeupLayer> = serde_json::from_value(export["plan"]["layers"].clone()).unwrap();
    assert_eq!(layers.len(), 3);
    let replayed = composite(ctx.base(), &layers, ctx.masks()).unwrap();
    assert_eq!(decode_png(&export["image_png"]), replayed.to_png().unwrap());
    assert_eq!(export["plan"]["distance"], json!(ctx.distance(&replayed).unwrap()));
    assert_eq!(export["plan"]["dodged"], json!(ctx.distance(&replayed).unwrap() >= 0.368));
}

#[tokio::test]
async fn dodged_export_carries_the_flag() {
    let attack = AttackConfig {
        threshold: 1e-6,
        ..AttackConfig::default()
    };
    let (studio, _, _) = setup(Some(attack));
    let id = create(&studio, "P08").await;
    let (_, body) = call(&studio, "POST", &format!("/sessions/{id}/actions"), Some(json!({"action": "auto_step"}))).await;
    assert_eq!(body["state"]["dodged"], true);
    let (_, export) = call(&studio, "GET", &format!("/sessions/{id}/export"), None).await;
    assert_eq!(export["plan"]["dodged"], true);
    assert!(export["plan"]["distance"].as_f64().unwrap() >= 1e-6);
}
