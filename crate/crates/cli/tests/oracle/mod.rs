//! Brute-force reference for the lexicon mock and every bundle statistic.
//!
//! Written against the definitions, not the library: texts are split on
//! single spaces, bins are found by scanning intervals, the temperature by
//! scanning the grid, and every mean is a plain loop.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};

pub type Dist = [f64; 6];

pub struct Lexicon(pub BTreeMap<String, (usize, f64)>);

impl Lexicon {
    pub fn from_core(lex: &faithscope_core::gateway::MockLexicon) -> Self {
        Self(lex.words.iter().map(|(w, e)| (w.clone(), (e.label.code() as usize, e.weight))).collect())
    }

    fn scores(&self, tokens: &[&str]) -> Dist {
        let mut s = [0.0; 6];
        for t in tokens {
            if let Some((label, w)) = self.0.get(*t) {
                s[*label] += w;
            }
        }
        s
    }

    pub fn distribution(&self, tokens: &[&str]) -> Dist {
        softmax(self.scores(tokens))
    }

    /// Lexicon hits by weight (ties by first position), then the longest other tokens.
    fn explain(&self, tokens: &[&str], k: usize) -> Vec<String> {
        let mut distinct: Vec<&str> = Vec::new();
        for t in tokens {
            if !distinct.contains(t) {
                distinct.push(t);
            }
        }
        let mut hits: Vec<(usize, &str, f64)> =
            distinct.iter().enumerate().filter_map(|(i, w)| self.0.get(*w).map(|(_, wt)| (i, *w, *wt))).collect();
        hits.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let mut out: Vec<String> = hits.iter().take(k).map(|h| h.1.to_string()).collect();
        let mut rest: Vec<(usize, &str)> =
            distinct.iter().enumerate().filter(|(_, w)| !self.0.contains_key(**w)).map(|(i, w)| (i, *w)).collect();
        rest.sort_by(|a, b| b.1.chars().count().cmp(&a.1.chars().count()).then(a.0.cmp(&b.0)));
        for (_, w) in rest {
            if out.len() == k {
                break;
            }
            out.push(w.to_string());
        }
        out
    }
}

pub fn softmax(s: Dist) -> Dist {
    let m = s.iter().cloned().fold(f64::MIN, f64::max);
    let e = s.map(|x| (x - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

pub fn argmax(p: &Dist) -> usize {
    let mut best = 0;
    for i in 1..6 {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

pub fn conf(p: &Dist) -> f64 {
    p[argmax(p)]
}

pub fn scale(p: &Dist, t: f64) -> Dist {
    softmax(p.map(|x| x.ln() / t))
}

/// What the mock returns for one sample: full, words-only and masked distributions.
pub struct MockOutputs {
    pub words: Vec<String>,
    pub full: Dist,
    pub only: Dist,
    pub removed: Dist,
}

pub fn mock_outputs(lex: &Lexicon, text: &str, k: usize) -> MockOutputs {
    let tokens: Vec<&str> = text.split(' ').collect();
    let words = lex.explain(&tokens, k);
    let only: Vec<&str> = words.iter().map(String::as_str).collect();
    let kept: Vec<&str> = tokens.iter().copied().filter(|t| !words.iter().any(|w| w == t)).collect();
    MockOutputs { full: lex.distribution(&tokens), only: lex.distribution(&only), removed: lex.distribution(&kept), words }
}

pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

pub fn bins(conf: &[f64], correct: &[bool], m: usize) -> Vec<Bin> {
    let mut out = Vec::new();
    for b in 0..m {
        let lower = b as f64 / m as f64;
        let upper = (b + 1) as f64 / m as f64;
        let mut n = 0;
        let mut hits = 0;
        let mut sum = 0.0;
        for (c, ok) in conf.iter().zip(correct) {
            let inside = *c >= lower && (*c < upper || (b == m - 1 && *c <= 1.0));
            if inside {
                n += 1;
                hits += *ok as usize;
                sum += c;
            }
        }
        let (accuracy, confidence) = if n == 0 { (0.0, 0.0) } else { (hits as f64 / n as f64, sum / n as f64) };
        out.push(Bin { lower, upper, count: n, accuracy, confidence });
    }
    out
}

pub fn ece(conf: &[f64], correct: &[bool], m: usize) -> f64 {
    let n = conf.len() as f64;
    bins(conf, correct, m).iter().map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs()).sum()
}

/// Temperature over 0.1, 0.2, ..., 21.0 minimizing ECE; the first minimum wins.
pub fn fit(dists: &[Dist], gold: &[usize], m: usize) -> (f64, f64, f64) {
    let correct: Vec<bool> = dists.iter().zip(gold).map(|(d, g)| argmax(d) == *g).collect();
    let raw: Vec<f64> = dists.iter().map(conf).collect();
    let before = ece(&raw, &correct, m);
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 1..=210 {
        let t = i as f64 / 10.0;
        let c: Vec<f64> = dists.iter().map(|d| conf(&scale(d, t))).collect();
        let e = ece(&c, &correct, m);
        if e < best.1 {
            best = (t, e);
        }
    }
    (best.0, before, best.1)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn classification(pred: &[usize], gold: &[usize]) -> Value {
    let mut confusion = [[0usize; 6]; 6];
    for (p, g) in pred.iter().zip(gold) {
        confusion[*g][*p] += 1;
    }
    let mut per_class = Vec::new();
    let (mut never, mut nosupport) = (Vec::new(), Vec::new());
    let (mut ps, mut rs, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..6 {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..6).map(|g| confusion[g][c]).sum();
        let support: usize = confusion[c].iter().sum();
        if predicted == 0 {
            never.push(c);
        }
        if support == 0 {
            nosupport.push(c);
        }
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps.push(p);
        rs.push(r);
        fs.push(f);
        per_class.push(json!({"label": c, "precision": p, "recall": r, "f1": f, "support": support, "predicted": predicted}));
    }
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    json!({
        "per_class": per_class,
        "macro_precision": mean(ps.into_iter()),
        "macro_recall": mean(rs.into_iter()),
        "macro_f1": mean(fs.into_iter()),
        "accuracy": correct as f64 / pred.len() as f64,
        "confusion": confusion,
        "n": pred.len(),
        "never_predicted": never,
        "no_support": nosupport,
    })
}

fn bins_json(b: &[Bin]) -> Value {
    Value::Array(
        b.iter()
            .enumerate()
            .map(|(i, b)| {
                json!({"index": i + 1, "lower": b.lower, "upper": b.upper, "count": b.count,
                       "accuracy": b.accuracy, "confidence": b.confidence})
            })
            .collect(),
    )
}

pub struct EvalRow {
    pub id: String,
    pub gold: usize,
    pub out: MockOutputs,
}

/// One source under one paradigm.
pub struct SourceRun {
    pub source: String,
    pub paradigm: &'static str,
    pub calib: Vec<(Dist, usize)>,
    pub eval: Vec<EvalRow>,
}

pub struct Settings {
    pub seed: u64,
    pub k: usize,
    pub fit_bins: usize,
    pub diagram_bins: usize,
    pub n_evaluation: usize,
    pub n_calibration: usize,
}

fn faithfulness(source: &str, paradigm: &str, rows: &[(Dist, Dist, Dist)]) -> Value {
    let n = rows.len() as f64;
    let comp = rows.iter().map(|(f, _, r)| conf(f) - conf(r)).sum::<f64>() / n;
    let suff = rows.iter().map(|(f, o, _)| conf(f) - conf(o)).sum::<f64>() / n;
    let df_r = rows.iter().filter(|(f, _, r)| argmax(f) != argmax(r)).count() as f64 / n;
    let df_o = rows.iter().filter(|(f, o, _)| argmax(f) != argmax(o)).count() as f64 / n;
    json!({"source": source, "paradigm": paradigm, "comp": comp, "suff": suff,
           "df_removed": df_r, "df_only": df_o, "n": rows.len()})
}

/// Every report section for model sources without exclusions among `eval`.
pub fn bundle(s: &Settings, runs: &[SourceRun]) -> Value {
    let mut classes = Vec::new();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    let mut calibration = Vec::new();
    let mut reduction = Vec::new();
    let mut reliability = Vec::new();
    let mut exclusions = Vec::new();
    let mut agreement: BTreeMap<&str, Vec<&SourceRun>> = BTreeMap::new();

    for r in runs {
        let cd: Vec<Dist> = r.calib.iter().map(|c| c.0).collect();
        let cg: Vec<usize> = r.calib.iter().map(|c| c.1).collect();
        let (t, before, after) = fit(&cd, &cg, s.fit_bins);
        let c_correct: Vec<bool> = cd.iter().zip(&cg).map(|(d, g)| argmax(d) == *g).collect();
        let c_pre: Vec<f64> = cd.iter().map(conf).collect();
        let c_post: Vec<f64> = cd.iter().map(|d| conf(&scale(d, t))).collect();

        let gold: Vec<usize> = r.eval.iter().map(|e| e.gold).collect();
        let labels: Vec<usize> = r.eval.iter().map(|e| argmax(&e.out.full)).collect();
        let e_correct: Vec<bool> = labels.iter().zip(&gold).map(|(p, g)| p == g).collect();
        let e_pre: Vec<f64> = r.eval.iter().map(|e| conf(&e.out.full)).collect();
        let e_post: Vec<f64> = r.eval.iter().map(|e| conf(&scale(&e.out.full, t))).collect();

        exclusions.push(json!({"source": r.source, "paradigm": r.paradigm, "n_evaluation": s.n_evaluation,
            "n_included": r.eval.len(), "n_excluded": s.n_evaluation - r.eval.len(),
            "excluded": [], "masking_fallbacks": []}));
        classes.push(json!({"source": r.source, "paradigm": r.paradigm, "report": classification(&labels, &gold)}));
        let raw: Vec<(Dist, Dist, Dist)> = r.eval.iter().map(|e| (e.out.full, e.out.only, e.out.removed)).collect();
        let scaled: Vec<(Dist, Dist, Dist)> =
            raw.iter().map(|(f, o, x)| (scale(f, t), scale(o, t), scale(x, t))).collect();
        pre.push(faithfulness(&r.source, r.paradigm, &raw));
        post.push(faithfulness(&r.source, r.paradigm, &scaled));
        calibration.push(json!({
            "source": r.source, "paradigm": r.paradigm,
            "model": {"temperature": t, "bins": s.fit_bins, "grid": {"lo": 0.1, "hi": 21.0, "step": 0.1},
                      "fit_ece_before": before, "fit_ece_after": after, "n": cd.len()},
            "ece_calibration_pre": before, "ece_calibration_post": after,
            "ece_evaluation_pre": ece(&e_pre, &e_correct, s.fit_bins),
            "ece_evaluation_post": ece(&e_post, &e_correct, s.fit_bins),
            "n_calibration": cd.len(), "n_evaluation": r.eval.len(), "calibration_excluded": [],
        }));
        for (split, scaled_flag, c, ok) in [
            ("calibration", false, &c_pre, &c_correct),
            ("calibration", true, &c_post, &c_correct),
            ("evaluation", false, &e_pre, &e_correct),
            ("evaluation", true, &e_post, &e_correct),
        ] {
            reliability.push(json!({"source": r.source, "paradigm": r.paradigm, "split": split,
                "scaled": scaled_flag, "bins": bins_json(&bins(c, ok, s.diagram_bins))}));
        }
        let drop = |i: usize| mean(raw.iter().zip(&scaled).map(|(a, b)| {
            let (a, b) = ([a.0, a.1, a.2][i], [b.0, b.1, b.2][i]);
            conf(&a) - conf(&b)
        }));
        reduction.push(json!({"source": r.source, "paradigm": r.paradigm,
            "full_text": drop(0), "topk_only": drop(1), "topk_removed": drop(2), "n": r.eval.len()}));
        agreement.entry(r.paradigm).or_default().push(r);
    }

    let mut agreement_json = Vec::new();
    for p in ["PE", "EP"] {
        let Some(srcs) = agreement.get(p) else { continue };
        let cells: Vec<Vec<Value>> = srcs
            .iter()
            .map(|a| srcs.iter().map(|b| agreement_cell(a, b, s.k)).collect())
            .collect();
        let names: Vec<&str> = srcs.iter().map(|r| r.source.as_str()).collect();
        agreement_json.push(json!({"paradigm": p, "matrix": {"sources": names, "cells": cells}}));
    }

    json!({
        "seed": s.seed, "k": s.k, "fit_bins": s.fit_bins, "diagram_bins": s.diagram_bins,
        "n_evaluation": s.n_evaluation, "n_calibration": s.n_calibration, "skipped_corpus_rows": 0,
        "classification": classes, "faithfulness_pre": pre, "faithfulness_post": post,
        "calibration": calibration, "confidence_reduction": reduction, "agreement": agreement_json,
        "reliability": reliability, "exclusions": exclusions,
    })
}

fn agreement_cell(a: &SourceRun, b: &SourceRun, k: usize) -> Value {
    let (mut fa, mut iou, mut n, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    for ea in &a.eval {
        let Some(eb) = b.eval.iter().find(|e| e.id == ea.id) else { continue };
        if argmax(&ea.out.full) != argmax(&eb.out.full) {
            continue;
        }
        let sa: BTreeSet<&String> = ea.out.words.iter().collect();
        let sb: BTreeSet<&String> = eb.out.words.iter().collect();
        if sa.len() != k || sb.len() != k {
            skipped += 1;
            continue;
        }
        let inter = sa.intersection(&sb).count() as f64;
        fa += inter / k as f64;
        iou += inter / sa.union(&sb).count() as f64;
        n += 1;
    }
    if n == 0 {
        return Value::Null;
    }
    json!({"source_a": a.source, "source_b": b.source, "feature_agreement": fa / n as f64,
           "iou": iou / n as f64, "n_matched": n, "n_skipped": skipped})
}

/// Walks two JSON trees; numbers may differ by `tol`, everything else must match.
pub fn compare(path: &str, want: &Value, got: &Value, tol: f64, diffs: &mut Vec<String>) {
    match (want, got) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            if (a - b).abs() > tol {
                diffs.push(format!("{path}: oracle {a} vs bundle {b}"));
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            if a.len() != b.len() {
                diffs.push(format!("{path}: oracle has {} items, bundle {}", a.len(), b.len()));
                return;
            }
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                compare(&format!("{path}[{i}]"), x, y, tol, diffs);
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let ka: BTreeSet<&String> = a.keys().collect();
            let kb: BTreeSet<&String> = b.keys().collect();
            if ka != kb {
                diffs.push(format!("{path}: keys {ka:?} vs {kb:?}"));
                return;
            }
            for (k, x) in a {
                compare(&format!("{path}.{k}"), x, &b[k], tol, diffs);
            }
        }
        (a, b) if a == b => {}
        (a, b) => diffs.push(format!("{path}: oracle {a} vs bundle {b}")),
    }
}

/// Number of leaf values in a tree.
pub fn leaves(v: &Value) -> usize {
    match v {
        Value::Array(a) => a.iter().map(leaves).sum(),
        Value::Object(o) => o.values().map(leaves).sum(),
        _ => 1,
    }
}
