mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use common::*;
use faithscope_core::gateway::{
    Backend, CacheMode, ChatMessage, Gateway, GatewayConfig, GatewayError, HttpResponse, RetryPolicy,
};

fn msgs() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system("You are an emotion classifier."),
        ChatMessage::user("Classify the following text into one of the categories. Text: سلام"),
    ]
}

fn config(attempts: u32) -> GatewayConfig {
    let mut c = GatewayConfig::new("http://example.invalid/v1/chat/completions", "m-1");
    c.retry = RetryPolicy { max_attempts: attempts, base_backoff_ms: 5 };
    c
}

fn statuses(codes: &'static [u16]) -> Arc<Scripted> {
    let i = AtomicUsize::new(0);
    Arc::new(Scripted::new(move |_| {
        let n = i.fetch_add(1, Ordering::SeqCst);
        match codes.get(n) {
            Some(&200) | None => ok(label_body("m-1", 2, [0.1, 0.1, 0.5, 0.1, 0.1, 0.1])),
            Some(&s) => Ok(HttpResponse { status: s, body: "nope".into() }),
        }
    }))
}

#[test]
fn transient_failures_are_retried_with_backoff() {
    let t = statuses(&[503, 429, 200]);
    let gw = Gateway::new(config(4), Backend::Http(t.clone())).unwrap();
    let start = Instant::now();
    let r = gw.send_chat(&msgs()).unwrap();
    assert_eq!(r.text, "2");
    assert_eq!(t.calls(), 3);
    // 5 ms then 10 ms of backoff.
    assert!(start.elapsed().as_millis() >= 15);
}

#[test]
fn rate_limit_exhausts_attempts() {
    let t = statuses(&[429, 429, 429, 429]);
    let gw = Gateway::new(config(3), Backend::Http(t.clone())).unwrap();
    assert!(matches!(gw.send_chat(&msgs()), Err(GatewayError::RateLimited { attempts: 3 })));
    assert_eq!(t.calls(), 3);
}

#[test]
fn auth_and_client_errors_are_not_retried() {
    for (code, expect_auth) in [(401, true), (403, true), (400, false)] {
        let codes: &'static [u16] = Box::leak(vec![code, 200].into_boxed_slice());
        let t = statuses(codes);
        let gw = Gateway::new(config(4), Backend::Http(t.clone())).unwrap();
        let err = gw.send_chat(&msgs()).unwrap_err();
        assert_eq!(matches!(err, GatewayError::Auth(_)), expect_auth, "{code}: {err}");
        assert_eq!(matches!(err, GatewayError::Http { status: 400, .. }), !expect_auth);
        assert_eq!(t.calls(), 1);
    }
}

#[test]
fn network_errors_report_attempts() {
    let t = Arc::new(Scripted::new(|_| Err("connection refused".into())));
    let gw = Gateway::new(config(2), Backend::Http(t.clone())).unwrap();
    match gw.send_chat(&msgs()) {
        Err(GatewayError::Network { attempts, message }) => {
            assert_eq!(attempts, 2);
            assert!(message.contains("refused"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_api_key_variable_is_an_auth_error() {
    let mut c = config(1);
    c.api_key_env = Some("FAITHSCOPE_TEST_KEY_THAT_IS_NOT_SET".into());
    let t = statuses(&[]);
    let gw = Gateway::new(c, Backend::Http(t.clone())).unwrap();
    assert!(matches!(gw.send_chat(&msgs()), Err(GatewayError::Auth(_))));
    assert_eq!(t.calls(), 0);
}

#[test]
fn request_body_asks_for_logprobs() {
    let t = Arc::new(Scripted::new(|req| {
        assert_eq!(req["model"], "m-1");
        assert_eq!(req["logprobs"], true);
        assert_eq!(req["top_logprobs"], 20);
        assert_eq!(req["temperature"], 0.0);
        assert_eq!(req["messages"][0]["role"], "system");
        assert_eq!(req["messages"].as_array().unwrap().len(), 2);
        ok(label_body("m-1", 0, [0.5, 0.1, 0.1, 0.1, 0.1, 0.1]))
    }));
    Gateway::new(config(1), Backend::Http(t)).unwrap().send_chat(&msgs()).unwrap();
}

#[test]
fn malformed_logprobs_are_protocol_errors() {
    let t = Arc::new(Scripted::new(|_| ok(r#"{"choices":[{"message":{"content":"1"},"logprobs":{"content":[{"logprob":-0.5}]}}]}"#.into())));
    let gw = Gateway::new(config(1), Backend::Http(t)).unwrap();
    assert!(matches!(gw.send_chat(&msgs()), Err(GatewayError::Protocol(_))));
}

#[test]
fn rounding_above_zero_is_clamped() {
    let t = Arc::new(Scripted::new(|_| ok(r#"{"choices":[{"message":{"content":"1"},"logprobs":{"content":[{"token":"1","logprob":1e-7}]}}]}"#.into())));
    let gw = Gateway::new(config(1), Backend::Http(t)).unwrap();
    assert_eq!(gw.send_chat(&msgs()).unwrap().token_logprobs[0].logprob, 0.0);
}

#[test]
fn record_then_replay_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1);
    c.cache_dir = Some(dir.path().to_path_buf());

    c.cache_mode = CacheMode::RecordOrReplay;
    let t = statuses(&[]);
    let gw = Gateway::new(c.clone(), Backend::Http(t.clone())).unwrap();
    let first = gw.send_chat(&msgs()).unwrap();
    let second = gw.send_chat(&msgs()).unwrap();
    assert_eq!(first, second);
    assert_eq!((t.calls(), gw.backend_calls()), (1, 1));
    let key = gw.request_key(&msgs());
    assert!(dir.path().join(format!("{key}.json")).exists());

    c.cache_mode = CacheMode::Replay;
    c.endpoint = "http://another-host.invalid".into();
    let gw = Gateway::new(c.clone(), Backend::Http(Arc::new(Unreachable))).unwrap();
    assert_eq!(gw.send_chat(&msgs()).unwrap(), first);
    assert_eq!(gw.backend_calls(), 0);

    let mut other = msgs();
    other[1].content.push('!');
    match gw.send_chat(&other) {
        Err(GatewayError::CacheMiss { key: k }) => assert_eq!(k, gw.request_key(&other)),
        r => panic!("{r:?}"),
    }
}

#[test]
fn record_mode_always_calls_and_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1);
    c.cache_dir = Some(dir.path().to_path_buf());
    c.cache_mode = CacheMode::Record;
    let t = statuses(&[]);
    let gw = Gateway::new(c, Backend::Http(t.clone())).unwrap();
    gw.send_chat(&msgs()).unwrap();
    gw.send_chat(&msgs()).unwrap();
    assert_eq!(t.calls(), 2);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn corrupt_cache_entry_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1);
    c.cache_dir = Some(dir.path().to_path_buf());
    c.cache_mode = CacheMode::Replay;
    let gw = Gateway::new(c, Backend::Http(Arc::new(Unreachable))).unwrap();
    std::fs::write(dir.path().join(format!("{}.json", gw.request_key(&msgs()))), "{not json").unwrap();
    assert!(matches!(gw.send_chat(&msgs()), Err(GatewayError::CacheCorrupt { .. })));
}

#[test]
fn gateway_is_shareable_across_threads() {
    let t = statuses(&[]);
    let gw = Arc::new(Gateway::new(config(1), Backend::Http(t.clone())).unwrap());
    std::thread::scope(|s| {
        for _ in 0..8 {
            let gw = gw.clone();
            s.spawn(move || gw.send_chat(&msgs()).unwrap());
        }
    });
    assert_eq!(gw.backend_calls(), 8);
}
