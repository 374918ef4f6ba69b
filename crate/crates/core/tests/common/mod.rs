#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use faithscope_core::gateway::{HttpResponse, Transport};
use serde_json::{json, Value};

/// The worked example: a happy text, its five explanation words and the
/// masked text with every word replaced.
pub const EXAMPLE_TEXT: &str = "دلم اون حالیو میخواد که اونقدر فکرم رها باشه اونقدر سرگرم خوندن شاهکارای ادبی دنیا باشم ساعت ۳ یهو ب پنجره نگاه کنم ببینم برف میاد و ده ها برابر حالم خوب شه و با اشتیاق ب خوندن ادامه بدم";
pub const EXAMPLE_WORDS: [&str; 5] = ["ادامه", "اشتیاق", "خوب", "سرگرم", "دلم"];
pub const EXAMPLE_MASKED: &str = "[حذف شده] اون حالیو میخواد که اونقدر فکرم رها باشه اونقدر [حذف شده] خوندن شاهکارای ادبی دنیا باشم ساعت ۳ یهو ب پنجره نگاه کنم ببینم برف میاد و ده ها برابر حالم [حذف شده] شه و با [حذف شده] ب خوندن [حذف شده] بدم";
pub const EXAMPLE_MODEL: &str = "gpt-4o";

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Chat-completions body with one token per output, carrying `top` as its
/// candidate list.
pub fn completion_body(model: &str, text: &str, top: &[(&str, f64)]) -> String {
    let lp = top.iter().find(|(t, _)| *t == text).map_or(0.0, |(_, lp)| *lp);
    let top: Vec<Value> = top.iter().map(|(t, lp)| json!({"token": t, "logprob": lp})).collect();
    json!({
        "model": model,
        "choices": [{
            "message": {"role": "assistant", "content": text},
            "logprobs": {"content": [{"token": text, "logprob": lp, "top_logprobs": top}]}
        }]
    })
    .to_string()
}

/// Label completion whose candidates are `ln(probs[i])` on "0".."5".
pub fn label_body(model: &str, label: usize, probs: [f64; 6]) -> String {
    let names = ["0", "1", "2", "3", "4", "5"];
    let top: Vec<(&str, f64)> = names.iter().zip(probs).map(|(n, p)| (*n, p.ln())).collect();
    completion_body(model, names[label], &top)
}

pub fn text_body(model: &str, text: &str) -> String {
    completion_body(model, text, &[(text, 0.0)])
}

type Responder = dyn Fn(&Value) -> Result<HttpResponse, String> + Send + Sync;

/// Transport answering from a closure over the parsed request body.
pub struct Scripted {
    respond: Box<Responder>,
    pub calls: AtomicUsize,
    pub keys_seen: Mutex<Vec<Option<String>>>,
}

impl Scripted {
    pub fn new(f: impl Fn(&Value) -> Result<HttpResponse, String> + Send + Sync + 'static) -> Self {
        Self { respond: Box::new(f), calls: AtomicUsize::new(0), keys_seen: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for Scripted {
    fn post_json(&self, _url: &str, api_key: Option<&str>, body: &str) -> Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.keys_seen.lock().unwrap().push(api_key.map(str::to_string));
        let v: Value = serde_json::from_str(body).expect("gateway sends JSON");
        (self.respond)(&v)
    }
}

/// Fails the test if the backend is ever reached.
pub struct Unreachable;

impl Transport for Unreachable {
    fn post_json(&self, _: &str, _: Option<&str>, _: &str) -> Result<HttpResponse, String> {
        panic!("replay must not touch the network")
    }
}

pub fn ok(body: String) -> Result<HttpResponse, String> {
    Ok(HttpResponse { status: 200, body })
}

pub fn system_of(req: &Value) -> &str {
    req["messages"][0]["content"].as_str().unwrap()
}

pub fn last_user(req: &Value) -> &str {
    let msgs = req["messages"].as_array().unwrap();
    msgs.iter().rev().find(|m| m["role"] == "user").unwrap()["content"].as_str().unwrap()
}

/// The model behavior shown in the worked example: label 1 on the full text
/// and on the words alone, label 0 once the words are masked.
pub fn example_responder(req: &Value) -> Result<HttpResponse, String> {
    let system = system_of(req);
    let user = last_user(req);
    let body = if user.contains("most influential words") {
        text_body(EXAMPLE_MODEL, &EXAMPLE_WORDS.join(", "))
    } else if system.contains("provided with some influential words") {
        label_body(EXAMPLE_MODEL, 1, [0.03, 0.88, 0.01, 0.05, 0.01, 0.02])
    } else if system.contains("placeholder") {
        label_body(EXAMPLE_MODEL, 0, [0.52, 0.31, 0.03, 0.08, 0.02, 0.04])
    } else {
        label_body(EXAMPLE_MODEL, 1, [0.004, 0.97, 0.002, 0.02, 0.001, 0.003])
    };
    ok(body)
}
