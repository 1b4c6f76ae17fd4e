//! RemoteEmbedder against an in-process mock embedding service.

use std::net::SocketAddr;

use axum::extract::Path;
use axum::routing::post;
use axum::{Json, Router};
use base64::Engine;
use crawlcurate_core::embed::{mock_embed, EmbedError, EmbedInput, Embedder, RemoteEmbedder};
use serde_json::{json, Value};
use url::Url;

const SEED: u64 = 9;

async fn embed(Path(mode): Path<String>, Json(body): Json<Value>) -> Json<Value> {
    let dim = if mode == "wide" { 768 } else { 512 };
    let mut vectors = Vec::new();
    let mut errors = Vec::new();
    for item in body["items"].as_array().unwrap() {
        let data = item["data"].as_str().unwrap();
        let bytes = match item["kind"].as_str().unwrap() {
            "text" => data.as_bytes().to_vec(),
            "image_b64" => base64::engine::general_purpose::STANDARD.decode(data).unwrap(),
            other => panic!("unexpected kind {other}"),
        };
        if bytes == b"FAIL" {
            vectors.push(Value::Null);
            errors.push(json!("cannot embed"));
        } else {
            // deliberately not unit length; the client normalizes
            let v: Vec<f32> = mock_embed(&bytes, SEED, dim).as_slice().iter().map(|x| x * 3.0).collect();
            vectors.push(json!(v));
            errors.push(Value::Null);
        }
    }
    Json(json!({"dim": dim, "vectors": vectors, "errors": errors}))
}

fn start_server() -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let app = Router::new().route("/{mode}/embed", post(embed));
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn client(addr: SocketAddr, mode: &str) -> RemoteEmbedder {
    RemoteEmbedder::new(Url::parse(&format!("http://{addr}/{mode}")).unwrap(), 512).unwrap()
}

#[test]
fn batch_preserves_order_and_normalizes() {
    let addr = start_server();
    let e = client(addr, "ok");
    let texts: Vec<String> = (0..10).map(|i| format!("caption number {i}")).collect();
    let mut items: Vec<EmbedInput<'_>> = texts.iter().map(|t| EmbedInput::Text(t)).collect();
    items.push(EmbedInput::Image(b"\xff\xd8\xff raw image bytes"));
    let out = e.embed_batch(&items).unwrap();
    assert_eq!(out.len(), 11);
    for (t, r) in texts.iter().zip(&out) {
        let v = r.as_ref().unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-5);
        let want = mock_embed(t.as_bytes(), SEED, 512);
        for (a, b) in v.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let img = out[10].as_ref().unwrap();
    assert_eq!(img.as_slice()[0], mock_embed(b"\xff\xd8\xff raw image bytes", SEED, 512).as_slice()[0]);
    assert_eq!(e.embed_text("caption number 3").unwrap(), *out[3].as_ref().unwrap());
    assert!(e.embed_batch(&[]).unwrap().is_empty());
}

#[test]
fn one_failing_item_does_not_poison_the_batch() {
    let addr = start_server();
    let e = client(addr, "ok");
    let texts: Vec<&str> = (0..10).map(|i| if i == 6 { "FAIL" } else { "fine" }).collect();
    let items: Vec<EmbedInput<'_>> = texts.iter().map(|t| EmbedInput::Text(t)).collect();
    let out = e.embed_batch(&items).unwrap();
    assert_eq!(out.iter().filter(|r| r.is_err()).count(), 1);
    assert_eq!(out[6].as_ref().unwrap_err(), "cannot embed");
    assert!(matches!(e.embed_text("FAIL"), Err(EmbedError::Item(_))));
}

#[test]
fn dimension_mismatch_is_reported() {
    let addr = start_server();
    let e = client(addr, "wide");
    assert!(matches!(e.embed_text("x"), Err(EmbedError::DimensionMismatch { expected: 512, got: 768 })));
}

#[test]
fn unreachable_endpoint() {
    let e = RemoteEmbedder::new(Url::parse("http://127.0.0.1:9/").unwrap(), 512).unwrap();
    assert!(matches!(e.embed_text("x"), Err(EmbedError::EndpointUnreachable(_))));
}
