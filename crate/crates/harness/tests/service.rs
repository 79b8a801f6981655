mod common;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use waymark::config::VariantId;
use waymark::service::{router, AppState, FrameView};
use waymark::{run_variant, Pipeline, Suggestion, VariantSpec};
use waymark_core::dataset::{load_manifest, RgbImage, SynthStyle};
use waymark_core::retrieval::{FusionConfig, ScoreNorm};

async fn call(state: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(state: &Arc<AppState>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(state, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn fixture(root: &Path) -> Arc<AppState> {
    let path = common::corpus(root, "studio", "synth", SynthStyle::Stone, 6, 9);
    AppState::open(path, None).unwrap()
}

#[tokio::test]
async fn lists_projects_frames_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (s, projects) = call_json(&state, Method::GET, "/api/projects", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(projects[0]["frames"], 6);
    assert_eq!(projects[0]["suggestions_available"], false);

    let (_, frames) = call_json(&state, Method::GET, "/api/frames?game=synth", None).await;
    assert_eq!(frames.as_array().unwrap().len(), 6);
    let (_, none) = call_json(&state, Method::GET, "/api/frames?game=moss", None).await;
    assert!(none.as_array().unwrap().is_empty());

    let (s, stats) = call_json(&state, Method::GET, "/api/stats", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(stats["frames"], 6);
    assert_eq!(stats["edited_frames"], 0);
    assert_eq!(stats["frames_per_game"]["synth"], 6);
}

#[tokio::test]
async fn serves_png_images() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (s, bytes) = call(&state, Method::GET, "/api/frames/synth_00000/image", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    let (s, _) = call(&state, Method::GET, "/api/frames/nope/image", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_frames_are_404() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (s, body) = call_json(&state, Method::GET, "/api/frames/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("nope"));
    let put = json!({"annotations": [], "revision": 0});
    let (s, _) = call(&state, Method::PUT, "/api/frames/nope/annotations", Some(put)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn two_main_doorways_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let manifest = tmp.path().join("studio/manifest.json");
    let before = std::fs::read(&manifest).unwrap();
    let (_, view) = call_json(&state, Method::GET, "/api/frames/synth_00001", None).await;
    let mut anns = view["frame"]["annotations"].as_array().unwrap().clone();
    let mut extra = anns[0].clone();
    extra["is_mstp"] = json!(true);
    anns[0]["is_mstp"] = json!(true);
    anns.push(extra);
    let (s, body) = call_json(&state, Method::PUT, "/api/frames/synth_00001/annotations", Some(json!({"annotations": anns, "revision": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let errors: Vec<&str> = body["errors"].as_array().unwrap().iter().map(|e| e.as_str().unwrap()).collect();
    assert!(errors.iter().any(|e| e.contains("exactly one annotation must be the MSTP")), "{errors:?}");
    // nothing persisted, revision unchanged
    assert_eq!(std::fs::read(&manifest).unwrap(), before);
    let (_, view) = call_json(&state, Method::GET, "/api/frames/synth_00001", None).await;
    assert_eq!(view["revision"], 0);
}

#[tokio::test]
async fn uncertain_annotation_without_note_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (_, view) = call_json(&state, Method::GET, "/api/frames/synth_00002", None).await;
    let mut anns = view["frame"]["annotations"].clone();
    anns[0]["uncertainty"] = json!("uncertain");
    let (s, body) = call_json(&state, Method::PUT, "/api/frames/synth_00002/annotations", Some(json!({"annotations": anns, "revision": 0}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body["errors"][0].as_str().unwrap().contains("requires a note"));
}

#[tokio::test]
async fn unchanged_save_bumps_the_revision_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (_, view) = call_json(&state, Method::GET, "/api/frames/synth_00003", None).await;
    let original: FrameView = serde_json::from_value(view.clone()).unwrap();
    let put = json!({"annotations": view["frame"]["annotations"], "revision": 0});
    let (s, saved) = call_json(&state, Method::PUT, "/api/frames/synth_00003/annotations", Some(put)).await;
    assert_eq!(s, StatusCode::OK);
    let saved: FrameView = serde_json::from_value(saved).unwrap();
    assert_eq!(saved.revision, 1);
    assert_eq!(saved.frame, original.frame);

    // an edit: move the main doorway and add a note
    let mut anns = original.frame.annotations.clone();
    if anns.len() > 1 {
        let i = original.frame.mstp_index().unwrap();
        anns[i].is_mstp = false;
        let n = anns.len();
        anns[(i + 1) % n].is_mstp = true;
    }
    anns[0].note = "checked".into();
    let put = json!({"annotations": anns, "revision": 1});
    let (s, _) = call(&state, Method::PUT, "/api/frames/synth_00003/annotations", Some(put)).await;
    assert_eq!(s, StatusCode::OK);
    let (_, got) = call_json(&state, Method::GET, "/api/frames/synth_00003", None).await;
    let got: FrameView = serde_json::from_value(got).unwrap();
    assert_eq!(got.revision, 2);
    assert_eq!(got.frame.annotations, anns);
    // and on disk
    let disk = load_manifest(tmp.path().join("studio/manifest.json")).unwrap();
    assert_eq!(disk.frame("synth_00003").unwrap().annotations, anns);
    assert!(!tmp.path().join("studio/manifest.json.tmp").exists());
    let (_, stats) = call_json(&state, Method::GET, "/api/stats", None).await;
    assert_eq!(stats["edited_frames"], 1);
}

#[tokio::test]
async fn stale_revision_conflicts() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (_, view) = call_json(&state, Method::GET, "/api/frames/synth_00004", None).await;
    let anns = view["frame"]["annotations"].clone();
    let (s, _) = call(&state, Method::PUT, "/api/frames/synth_00004/annotations", Some(json!({"annotations": anns, "revision": 0}))).await;
    assert_eq!(s, StatusCode::OK);
    // a second editor still holding revision 0
    let (s, body) = call_json(&state, Method::PUT, "/api/frames/synth_00004/annotations", Some(json!({"annotations": anns, "revision": 0}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["current_revision"], 1);
}

#[tokio::test]
async fn suggest_without_models_is_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let state = fixture(tmp.path());
    let (s, body) = call_json(&state, Method::POST, "/api/frames/synth_00000/suggest", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].as_str().unwrap().contains("no models"));
}

#[tokio::test]
async fn suggest_matches_the_pipeline_and_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run(tmp.path(), "runs");
    let run = run_variant(&VariantSpec::new(VariantId::A), &cfg).unwrap();
    let dir = run.dir.join("seed_42");
    let (det, sel, bank) = (dir.join("detector.wmarch"), dir.join("selector.wmarch"), dir.join("bank.wmbank"));
    // a threshold of zero keeps an undertrained detector's proposals
    let fusion = FusionConfig { alpha: 0.8, norm: ScoreNorm::Softmax };
    let load = || Pipeline::load(Some(&det), &sel, Some(&bank), fusion).unwrap().with_threshold(0.0);
    let state = AppState::open(&cfg.original, Some(load())).unwrap();
    let frame = "synth_00005";

    let (s, body) = call_json(&state, Method::POST, &format!("/api/frames/{frame}/suggest"), None).await;
    assert_eq!(s, StatusCode::OK);
    let served: Suggestion = serde_json::from_value(body).unwrap();
    assert!(!served.boxes.is_empty());

    let image = RgbImage::load_png(tmp.path().join(format!("orig/images/{frame}.png"))).unwrap();
    let direct = load().suggest(&image).unwrap();
    assert_eq!(served, direct);

    let out = Command::new(env!("CARGO_BIN_EXE_waymark"))
        .args(["infer", "--manifest"])
        .arg(&cfg.original)
        .args(["--frame", frame, "--score-threshold", "0", "--detector"])
        .arg(&det)
        .arg("--selector")
        .arg(&sel)
        .arg("--bank")
        .arg(&bank)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cli: Suggestion = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(served, cli);

    // the reported scores satisfy the fusion rule
    let (s_sel, s_ret, s_final) = (&served.s_sel, served.s_ret.as_ref().unwrap(), served.s_final.as_ref().unwrap());
    for i in 0..s_sel.len() {
        assert!((s_final[i] - (0.8 * s_sel[i] + 0.2 * s_ret[i])).abs() < 1e-4);
    }
    let best = (0..s_final.len()).max_by(|&a, &b| s_final[a].total_cmp(&s_final[b])).unwrap();
    assert_eq!(served.chosen_index, Some(best));

    let (_, stats) = call_json(&state, Method::GET, "/api/stats", None).await;
    assert_eq!(stats["suggestions_available"], true);
}
