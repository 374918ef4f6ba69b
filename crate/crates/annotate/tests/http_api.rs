use std::collections::BTreeSet;
use std::sync::Arc;

use faithscope_annotate::{router, AnnotationService, AnnotationStore, Assignment, Progress, ServiceConfig};
use faithscope_core::domain::{EmotionLabel, InputVariant};
use faithscope_core::synthetic;
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Server {
    base: String,
    _dir: tempfile::TempDir,
}

async fn start(annotators: usize, samples: usize) -> Server {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>annotate</html>").unwrap();
    let per_class = samples.div_ceil(6);
    let mut corpus = synthetic::corpus(per_class, 2);
    corpus.truncate(samples);
    let names = (1..=annotators).map(|i| format!("ann{i}")).collect();
    let store = AnnotationStore::open(dir.path().join("store.jsonl")).unwrap();
    let svc = AnnotationService::new(corpus, ServiceConfig::new(names, 5, 17), store).unwrap();
    let app = router(Arc::new(svc), Some(dir.path().to_path_buf()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { base: format!("http://{addr}"), _dir: dir }
}

async fn assignment(c: &reqwest::Client, base: &str, who: &str, stage: u8) -> reqwest::Response {
    c.get(format!("{base}/api/assignments/{who}?stage={stage}")).send().await.unwrap()
}

async fn post(c: &reqwest::Client, url: String, body: Value) -> (StatusCode, Value) {
    let resp = c.post(url).json(&body).send().await.unwrap();
    let status = resp.status();
    let text = resp.text().await.unwrap();
    (status, serde_json::from_str(&text).unwrap_or_else(|_| panic!("{status}: {text}")))
}

fn stage1_body(who: &str, a: &Assignment, i: usize, words: &[String]) -> Value {
    json!({
        "annotator_id": who,
        "sample_id": a.items[i].sample_id,
        "stage": 1,
        "label": 2,
        "selected_words": words,
    })
}

#[tokio::test]
async fn two_stage_protocol_over_http() {
    let server = start(3, 12).await;
    let base = &server.base;
    let c = reqwest::Client::new();
    let who = ["ann1", "ann2", "ann3"];

    let mut stage1 = Vec::new();
    for w in who {
        let resp = assignment(&c, base, w, 1).await;
        assert_eq!(resp.status(), StatusCode::OK);
        let a: Assignment = resp.json().await.unwrap();
        assert_eq!(a.items.len(), 4);
        assert!(a.items.iter().all(|i| i.text.is_some() && i.tokens.len() >= 5));
        stage1.push(a);
    }
    let all: BTreeSet<_> = stage1.iter().flat_map(|a| a.items.iter().map(|i| i.sample_id.clone())).collect();
    assert_eq!(all.len(), 12);

    let resp = assignment(&c, base, "nobody", 1).await;
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = assignment(&c, base, "ann1", 2).await;
    assert_eq!(resp.status(), StatusCode::CONFLICT);
    assert_eq!(resp.json::<Value>().await.unwrap()["error"], "stage1_incomplete");

    let url = format!("{base}/api/annotations");
    let a1 = &stage1[0];
    let tokens: Vec<String> = {
        let mut seen = Vec::new();
        for t in &a1.items[0].tokens {
            if !seen.contains(t) {
                seen.push(t.clone());
            }
        }
        seen
    };

    let (status, body) = post(&c, url.clone(), stage1_body("ann1", a1, 0, &tokens[..4])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "invalid_word_selection");

    let mut bad = tokens[..4].to_vec();
    bad.push("کلمه‌ای‌نیست".into());
    let (status, _) = post(&c, url.clone(), stage1_body("ann1", a1, 0, &bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, body) = post(&c, url.clone(), stage1_body("ann2", a1, 0, &tokens[..5])).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "not_assigned");

    let (status, first) = post(&c, url.clone(), stage1_body("ann1", a1, 0, &tokens[..5])).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(first["selected_words"].as_array().unwrap().len(), 5);
    let (status, body) = post(&c, url.clone(), stage1_body("ann1", a1, 0, &tokens[..5])).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "duplicate");

    for (w, a) in who.iter().zip(&stage1) {
        for (i, item) in a.items.iter().enumerate() {
            if *w == "ann1" && i == 0 {
                continue;
            }
            let mut words = Vec::new();
            for t in &item.tokens {
                if !words.contains(t) && words.len() < 5 {
                    words.push(t.clone());
                }
            }
            let (status, _) = post(&c, url.clone(), stage1_body(w, a, i, &words)).await;
            assert_eq!(status, StatusCode::CREATED);
        }
    }

    for (w, a1) in who.iter().zip(&stage1) {
        let resp = assignment(&c, base, w, 2).await;
        assert_eq!(resp.status(), StatusCode::OK);
        let a2: Assignment = resp.json().await.unwrap();
        assert_eq!(a2.items.len(), 4);
        for item in &a2.items {
            assert!(!a1.contains(&item.sample_id), "{w} saw {} in both stages", item.sample_id);
            assert_ne!(item.words_from.as_deref(), Some(*w));
            let kinds: Vec<_> = item.variants.iter().map(|v| v.variant).collect();
            assert_eq!(kinds, vec![InputVariant::TopKOnly, InputVariant::TopKRemoved]);
            assert!(item.variants[1].text.contains("[حذف شده]"));
            for v in ["TopKOnly", "TopKRemoved"] {
                let body = json!({"annotator_id": w, "sample_id": item.sample_id, "stage": 2, "variant": v, "label": 0});
                let (status, _) = post(&c, url.clone(), body).await;
                assert_eq!(status, StatusCode::CREATED);
            }
        }
        let body = json!({"annotator_id": w, "sample_id": a2.items[0].sample_id, "stage": 2, "label": 0});
        let (status, _) = post(&c, url.clone(), body).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }

    let verify = format!("{base}/api/verify");
    let id = first["id"].as_str().unwrap();
    let (status, body) = post(&c, verify.clone(), json!({"record_id": id, "verifier_id": "ann1"})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "self_verification");
    let (status, body) = post(&c, verify.clone(), json!({"record_id": id, "verifier_id": "ann2"})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["verified_by"], "ann2");
    let (status, _) = post(&c, verify, json!({"record_id": "r999999", "verifier_id": "ann2"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let progress: Vec<Progress> = c.get(format!("{base}/api/progress")).send().await.unwrap().json().await.unwrap();
    assert_eq!(progress.len(), 3);
    for p in &progress {
        assert_eq!((p.stage1_assigned, p.stage1_done), (4, 4));
        assert_eq!((p.stage2_assigned, p.stage2_done), (8, 8));
    }
    assert_eq!(progress[0].verified, 1);

    let export: Value = c.get(format!("{base}/api/export")).send().await.unwrap().json().await.unwrap();
    assert_eq!(export["coverage"]["stage1_samples"], 12);
    assert_eq!(export["coverage"]["stage2_samples"], 12);
    assert_eq!(export["source"]["predictions"].as_array().unwrap().len(), 36);
    assert_eq!(export["source"]["explanations"].as_array().unwrap().len(), 12);
    assert!(export["source"]["predictions"][0]["confidence"].is_null());
    assert_eq!(export["source"]["predictions"][0]["label"], EmotionLabel::Anger.code());

    let index = c.get(format!("{base}/")).send().await.unwrap();
    assert_eq!(index.status(), StatusCode::OK);
    assert_eq!(index.text().await.unwrap(), "<html>annotate</html>");
}

#[tokio::test]
async fn concurrent_submissions_are_all_stored_once() {
    let server = start(4, 24).await;
    let base = server.base.clone();
    let c = reqwest::Client::new();
    let mut tasks = Vec::new();
    for w in ["ann1", "ann2", "ann3", "ann4"] {
        let a: Assignment = assignment(&c, &base, w, 1).await.json().await.unwrap();
        for item in a.items {
            let c = c.clone();
            let url = format!("{base}/api/annotations");
            let mut words = Vec::new();
            for t in &item.tokens {
                if !words.contains(t) && words.len() < 5 {
                    words.push(t.clone());
                }
            }
            let body = json!({"annotator_id": w, "sample_id": item.sample_id, "stage": 1, "label": 1, "selected_words": words});
            // Each submission twice at once; exactly one may win.
            for _ in 0..2 {
                let (c, url, body) = (c.clone(), url.clone(), body.clone());
                tasks.push(tokio::spawn(async move { c.post(url).json(&body).send().await.unwrap().status() }));
            }
        }
    }
    let mut created = 0;
    let mut dup = 0;
    for t in tasks {
        match t.await.unwrap() {
            StatusCode::CREATED => created += 1,
            StatusCode::CONFLICT => dup += 1,
            other => panic!("unexpected {other}"),
        }
    }
    assert_eq!((created, dup), (24, 24));
}
