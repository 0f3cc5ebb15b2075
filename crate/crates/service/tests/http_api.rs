use std::net::SocketAddr;
use std::sync::Arc;

use heae_core::train::checkpoint;
use heae_core::{HeaeModel, ModelConfig};
use heae_service::{http, Assessor};
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Server {
    base: String,
    model_id: String,
    stop: Option<oneshot::Sender<()>>,
    _dir: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

async fn start() -> Server {
    let mut config = ModelConfig::default();
    config.encoder.bucket_count = 256;
    let model = HeaeModel::<f32>::new(config, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let assessor = Arc::new(Assessor::load(&path).unwrap());
    let model_id = assessor.model_id().to_string();
    let (listener, addr): (_, SocketAddr) = http::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let (tx, rx) = oneshot::channel();
    tokio::spawn(http::serve(listener, assessor, async {
        let _ = rx.await;
    }));
    Server {
        base: format!("http://{addr}"),
        model_id,
        stop: Some(tx),
        _dir: dir,
    }
}

fn body(ev: [u8; 9]) -> Value {
    json!({ "narrative": "i have been sleeping badly and nothing feels worth doing anymore", "empathy_vector": ev })
}

#[tokio::test]
async fn health_reports_model_id() {
    let s = start().await;
    let v: Value = reqwest::get(format!("{}/api/health", s.base)).await.unwrap().json().await.unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_id"], s.model_id.as_str());
}

#[tokio::test]
async fn labels_are_the_seven_levels_in_order() {
    let s = start().await;
    let v: Vec<String> = reqwest::get(format!("{}/api/labels", s.base)).await.unwrap().json().await.unwrap();
    assert_eq!(v.len(), 7);
    let expected: Vec<&str> = heae_core::SeverityLabel::ALL.iter().map(|l| l.name()).collect();
    assert_eq!(v, expected);
}

#[tokio::test]
async fn assess_returns_a_distribution() {
    let s = start().await;
    let client = reqwest::Client::new();
    let resp = client
        .post(format!("{}/api/assess", s.base))
        .json(&body([1, 2, 3, 0, 1, 2, 3, 4, 0]))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(resp.headers()["content-type"], "application/json");
    let v: Value = resp.json().await.unwrap();
    let p: Vec<f64> = serde_json::from_value(v["probabilities"].clone()).unwrap();
    assert_eq!(p.len(), 7);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let argmax = (0..7).fold(0, |b, i| if p[i] > p[b] { i } else { b });
    assert_eq!(v["label_index"], argmax);
    assert_eq!(v["label_name"], heae_core::SeverityLabel::ALL[argmax].name());
    assert_eq!(v["chunk_count"], 1);
    assert_eq!(v["model_id"], s.model_id.as_str());
}

#[tokio::test]
async fn invalid_input_is_422_with_field_details() {
    let s = start().await;
    let client = reqwest::Client::new();
    let url = format!("{}/api/assess", s.base);
    let resp = client
        .post(&url)
        .json(&json!({ "narrative": "fine", "empathy_vector": [0, 0, 0, 0, 0, 0, 0, 9, 0] }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(v["error"], "validation_error");
    assert_eq!(v["details"][0]["field"], "empathy_vector");
    assert_eq!(v["details"][0]["dimension"], 8);
    assert_eq!(v["details"][0]["index"], 7);

    let resp = client.post(&url).body("{oops").send().await.unwrap();
    assert_eq!(resp.status(), 422);

    let resp = client.post(&url).json(&json!({ "empathy_vector": [0, 0, 0, 0] })).send().await.unwrap();
    let v: Value = resp.json().await.unwrap();
    let fields: Vec<&str> = v["details"].as_array().unwrap().iter().map(|d| d["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"narrative") && fields.contains(&"empathy_vector"), "{fields:?}");
}

#[tokio::test]
async fn whatif_matches_individual_assessments() {
    let s = start().await;
    let client = reqwest::Client::new();
    let base = [2, 1, 0, 3, 2, 1, 0, 2, 1];
    let resp = client
        .post(format!("{}/api/whatif", s.base))
        .json(&json!({ "base": body(base), "dimension": 8, "values": [5, 0, 3, 3] }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 200);
    let points: Vec<Value> = resp.json().await.unwrap();
    let values: Vec<u64> = points.iter().map(|p| p["value"].as_u64().unwrap()).collect();
    assert_eq!(values, vec![0, 3, 5]);
    for p in &points {
        let mut ev = base;
        ev[8] = p["value"].as_u64().unwrap() as u8;
        let single: Value = client
            .post(format!("{}/api/assess", s.base))
            .json(&body(ev))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(p["assessment"], single);
    }
}

#[tokio::test]
async fn whatif_rejects_bad_dimension() {
    let s = start().await;
    let resp = reqwest::Client::new()
        .post(format!("{}/api/whatif", s.base))
        .json(&json!({ "base": body([0; 9]), "dimension": 9 }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);
    let v: Value = resp.json().await.unwrap();
    assert_eq!(v["details"][0]["field"], "dimension");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_give_identical_bytes() {
    let s = start().await;
    let client = reqwest::Client::new();
    let url = format!("{}/api/assess", s.base);
    let reqs = (0..24).map(|_| {
        let client = client.clone();
        let url = url.clone();
        tokio::spawn(async move {
            let r = client.post(url).json(&body([3, 3, 3, 3, 3, 3, 3, 3, 3])).send().await.unwrap();
            r.bytes().await.unwrap()
        })
    });
    let mut all = Vec::new();
    for h in reqs {
        all.push(h.await.unwrap());
    }
    assert!(all.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn unknown_route_is_404() {
    let s = start().await;
    let r = reqwest::get(format!("{}/api/nothing", s.base)).await.unwrap();
    assert_eq!(r.status(), 404);
}
