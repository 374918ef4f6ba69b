use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::bundle::{AuditLog, CalibrationEntry, ReportBundle, RunArtifacts, RunMeta};
use super::config::RunConfig;
use super::corpus::SplitResult;
use super::PipelineError;
use crate::domain::{EmotionLabel, Paradigm};
use crate::metrics::FaithfulnessRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(format!("unknown report format '{other}' (json, csv, markdown)")),
        }
    }
}

/// A rate as a percentage with two decimals, rounded half away from zero.
pub fn percent(x: f64) -> String {
    format!("{:.2}", (x * 10_000.0).round() / 100.0)
}

fn opt_percent(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), percent)
}

fn paradigm_label(p: Option<Paradigm>) -> &'static str {
    p.map_or("-", Paradigm::as_str)
}

fn file_stem(source: &str, paradigm: Option<Paradigm>) -> String {
    let clean: String = source
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    match paradigm {
        Some(p) => format!("{clean}_{}", p.as_str()),
        None => clean,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| PipelineError::io(path, e))
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for row in rows {
        w.write_record(&row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

fn faithfulness_csv(rows: &[FaithfulnessRow]) -> String {
    csv_string(
        &["source", "paradigm", "comp", "suff", "df_topk_removed", "df_topk_only", "n"],
        rows.iter().map(|r| {
            vec![
                r.source.clone(),
                paradigm_label(r.paradigm).into(),
                opt_percent(r.comp),
                opt_percent(r.suff),
                percent(r.df_removed),
                percent(r.df_only),
                r.n.to_string(),
            ]
        }),
    )
}

/// `(file name, contents)` for every CSV table.
pub fn csv_tables(b: &ReportBundle) -> Vec<(String, String)> {
    let mut out = Vec::new();
    out.push((
        "classification.csv".into(),
        csv_string(
            &["source", "paradigm", "precision", "recall", "f1", "accuracy", "n"],
            b.classification.iter().map(|c| {
                vec![
                    c.source.clone(),
                    paradigm_label(c.paradigm).into(),
                    percent(c.report.macro_precision),
                    percent(c.report.macro_recall),
                    percent(c.report.macro_f1),
                    percent(c.report.accuracy),
                    c.report.n.to_string(),
                ]
            }),
        ),
    ));
    out.push((
        "classification_per_class.csv".into(),
        csv_string(
            &["source", "paradigm", "class", "precision", "recall", "f1", "support"],
            b.classification.iter().flat_map(|c| {
                c.report.per_class.iter().map(|m| {
                    vec![
                        c.source.clone(),
                        paradigm_label(c.paradigm).into(),
                        m.label.name().into(),
                        percent(m.precision),
                        percent(m.recall),
                        percent(m.f1),
                        m.support.to_string(),
                    ]
                })
            }),
        ),
    ));
    out.push(("faithfulness_post.csv".into(), faithfulness_csv(&b.faithfulness_post)));
    out.push(("faithfulness_pre.csv".into(), faithfulness_csv(&b.faithfulness_pre)));
    out.push((
        "calibration.csv".into(),
        csv_string(
            &[
                "source",
                "paradigm",
                "temperature",
                "ece_calibration_pre",
                "ece_calibration_post",
                "ece_evaluation_pre",
                "ece_evaluation_post",
                "n_calibration",
                "n_evaluation",
            ],
            b.calibration.iter().map(|c| {
                vec![
                    c.source.clone(),
                    c.paradigm.as_str().into(),
                    format!("{:.1}", c.model.temperature),
                    percent(c.ece_calibration_pre),
                    percent(c.ece_calibration_post),
                    opt_percent(c.ece_evaluation_pre),
                    opt_percent(c.ece_evaluation_post),
                    c.n_calibration.to_string(),
                    c.n_evaluation.to_string(),
                ]
            }),
        ),
    ));
    out.push((
        "confidence_reduction.csv".into(),
        csv_string(
            &["source", "paradigm", "full_text", "topk_only", "topk_removed", "n"],
            b.confidence_reduction.iter().map(|c| {
                vec![
                    c.source.clone(),
                    c.paradigm.as_str().into(),
                    percent(c.full_text),
                    percent(c.topk_only),
                    percent(c.topk_removed),
                    c.n.to_string(),
                ]
            }),
        ),
    ));
    out.push((
        "agreement.csv".into(),
        csv_string(
            &["paradigm", "source_a", "source_b", "feature_agreement", "iou", "n_matched", "n_skipped"],
            b.agreement.iter().flat_map(|a| {
                a.matrix.cells.iter().flatten().flatten().map(move |c| {
                    vec![
                        a.paradigm.as_str().into(),
                        c.source_a.clone(),
                        c.source_b.clone(),
                        percent(c.feature_agreement),
                        percent(c.iou),
                        c.n_matched.to_string(),
                        c.n_skipped.to_string(),
                    ]
                })
            }),
        ),
    ));
    out.push((
        "reliability.csv".into(),
        csv_string(
            &["source", "paradigm", "split", "scaled", "bin", "lower", "upper", "count", "accuracy", "confidence"],
            b.reliability.iter().flat_map(|r| {
                r.bins.iter().map(move |bin| {
                    vec![
                        r.source.clone(),
                        r.paradigm.as_str().into(),
                        serde_json::to_value(r.split).unwrap().as_str().unwrap_or_default().to_string(),
                        r.scaled.to_string(),
                        bin.index.to_string(),
                        bin.lower.to_string(),
                        bin.upper.to_string(),
                        bin.count.to_string(),
                        bin.accuracy.to_string(),
                        bin.confidence.to_string(),
                    ]
                })
            }),
        ),
    ));
    out.push((
        "exclusions.csv".into(),
        csv_string(
            &["source", "paradigm", "n_evaluation", "n_included", "n_excluded"],
            b.exclusions.iter().map(|e| {
                vec![
                    e.source.clone(),
                    paradigm_label(e.paradigm).into(),
                    e.n_evaluation.to_string(),
                    e.n_included.to_string(),
                    e.n_excluded.to_string(),
                ]
            }),
        ),
    ));
    for c in &b.classification {
        let mut header = vec!["gold\\predicted"];
        header.extend(EmotionLabel::ALL.iter().map(|l| l.name()));
        let rows = EmotionLabel::ALL.iter().map(|g| {
            let mut row = vec![g.name().to_string()];
            row.extend(c.report.confusion[g.index()].iter().map(usize::to_string));
            row
        });
        out.push((format!("confusion_{}.csv", file_stem(&c.source, c.paradigm)), csv_string(&header, rows)));
    }
    out
}

fn md_table(out: &mut String, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

fn faithfulness_md(out: &mut String, rows: &[FaithfulnessRow]) {
    md_table(
        out,
        &["Model", "Paradigm", "Comp (↑)", "Suff (↓)", "DF_TopKRemoved (↑)", "DF_TopKOnly (↓)", "n"],
        rows.iter().map(|r| {
            vec![
                r.source.clone(),
                paradigm_label(r.paradigm).into(),
                opt_percent(r.comp),
                opt_percent(r.suff),
                percent(r.df_removed),
                percent(r.df_only),
                r.n.to_string(),
            ]
        }),
    );
}

pub fn markdown_report(b: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Self-explanation faithfulness report\n");
    let _ = writeln!(
        out,
        "seed {}, k = {}, evaluation samples {}, calibration samples {}, ECE bins {}, reliability bins {}, corpus rows skipped {}\n",
        b.seed, b.k, b.n_evaluation, b.n_calibration, b.fit_bins, b.diagram_bins, b.skipped_corpus_rows
    );
    let _ = writeln!(out, "All rates are percentages.\n");

    let _ = writeln!(out, "## Classification (macro averages)\n");
    md_table(
        &mut out,
        &["Model", "Paradigm", "Precision", "Recall", "F1-Score", "Accuracy", "n"],
        b.classification.iter().map(|c| {
            vec![
                c.source.clone(),
                paradigm_label(c.paradigm).into(),
                percent(c.report.macro_precision),
                percent(c.report.macro_recall),
                percent(c.report.macro_f1),
                percent(c.report.accuracy),
                c.report.n.to_string(),
            ]
        }),
    );

    let _ = writeln!(out, "## Per-class F1\n");
    let mut header = vec!["Model", "Paradigm"];
    header.extend(EmotionLabel::ALL.iter().map(|l| l.name()));
    md_table(
        &mut out,
        &header,
        b.classification.iter().map(|c| {
            let mut row = vec![c.source.clone(), paradigm_label(c.paradigm).into()];
            row.extend(c.report.per_class.iter().map(|m| percent(m.f1)));
            row
        }),
    );

    let _ = writeln!(out, "## Calibration\n");
    md_table(
        &mut out,
        &["Model", "Paradigm", "Temperature", "Pre-Scale Calib.", "Post-Scale Calib.", "Pre-Scale Eval.", "Post-Scale Eval."],
        b.calibration.iter().map(|c: &CalibrationEntry| {
            vec![
                c.source.clone(),
                c.paradigm.as_str().into(),
                format!("{:.1}", c.model.temperature),
                percent(c.ece_calibration_pre),
                percent(c.ece_calibration_post),
                opt_percent(c.ece_evaluation_pre),
                opt_percent(c.ece_evaluation_post),
            ]
        }),
    );

    let _ = writeln!(out, "## Faithfulness (after calibration)\n");
    faithfulness_md(&mut out, &b.faithfulness_post);
    let _ = writeln!(out, "## Faithfulness (before calibration)\n");
    faithfulness_md(&mut out, &b.faithfulness_pre);

    let _ = writeln!(out, "## Confidence reduction from scaling\n");
    md_table(
        &mut out,
        &["Model", "Paradigm", "Full text", "Top-k only", "Top-k removed"],
        b.confidence_reduction.iter().map(|c| {
            vec![
                c.source.clone(),
                c.paradigm.as_str().into(),
                percent(c.full_text),
                percent(c.topk_only),
                percent(c.topk_removed),
            ]
        }),
    );

    let _ = writeln!(out, "## Explanation agreement\n");
    md_table(
        &mut out,
        &["Paradigm", "Source A", "Source B", "Feature agreement", "IoU", "Matched samples"],
        b.agreement.iter().flat_map(|a| {
            a.matrix.cells.iter().enumerate().flat_map(move |(i, row)| {
                row.iter().skip(i + 1).flatten().map(move |c| {
                    vec![
                        a.paradigm.as_str().into(),
                        c.source_a.clone(),
                        c.source_b.clone(),
                        percent(c.feature_agreement),
                        percent(c.iou),
                        c.n_matched.to_string(),
                    ]
                })
            })
        }),
    );

    let _ = writeln!(out, "## Exclusions\n");
    md_table(
        &mut out,
        &["Model", "Paradigm", "Evaluated", "Included", "Excluded"],
        b.exclusions.iter().map(|e| {
            vec![
                e.source.clone(),
                paradigm_label(e.paradigm).into(),
                e.n_evaluation.to_string(),
                e.n_included.to_string(),
                e.n_excluded.to_string(),
            ]
        }),
    );
    for e in &b.exclusions {
        for x in &e.excluded {
            let _ = writeln!(out, "- {} {} `{}`: {}", e.source, paradigm_label(e.paradigm), x.sample_id, x.reasons.join("; "));
        }
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize") + "\n"
}

/// Writes the bundle in one format under `dir`; returns the files written.
pub fn export_report(bundle: &ReportBundle, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let files: Vec<(String, String)> = match format {
        ReportFormat::Json => vec![("bundle.json".into(), pretty(bundle))],
        ReportFormat::Csv => csv_tables(bundle),
        ReportFormat::Markdown => vec![("report.md".into(), markdown_report(bundle))],
    };
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}

/// One JSONL line: the run seed next to the record's own fields.
#[derive(Serialize, Deserialize)]
struct Seeded<T> {
    seed: u64,
    #[serde(flatten)]
    record: T,
}

fn jsonl<T: Serialize + Clone>(seed: u64, items: &[T]) -> String {
    items
        .iter()
        .map(|record| serde_json::to_string(&Seeded { seed, record: record.clone() }).expect("records serialize") + "\n")
        .collect()
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<Seeded<T>>(l).map(|s| s.record).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    seed: u64,
    entries: Vec<CalibrationEntry>,
}

/// Persists artifacts and every report format under `dir`.
pub fn write_bundle_dir(
    dir: &Path,
    config: &RunConfig,
    split: &SplitResult,
    a: &RunArtifacts,
    bundle: &ReportBundle,
) -> Result<(), PipelineError> {
    let seed = a.meta.seed;
    write_file(&dir.join("config.json"), &pretty(config))?;
    write_file(&dir.join("meta.json"), &pretty(&a.meta))?;
    write_file(&dir.join("splits.json"), &pretty(split))?;
    write_file(&dir.join("samples.jsonl"), &jsonl(seed, &a.samples))?;
    write_file(&dir.join("predictions.jsonl"), &jsonl(seed, &a.predictions))?;
    write_file(&dir.join("explanations.jsonl"), &jsonl(seed, &a.explanations))?;
    write_file(&dir.join("transcripts.jsonl"), &jsonl(seed, &a.transcripts))?;
    write_file(&dir.join("audit.json"), &pretty(&a.audit))?;
    write_file(
        &dir.join("calibration.json"),
        &pretty(&CalibrationFile { seed, entries: bundle.calibration.clone() }),
    )?;
    let reports = dir.join("reports");
    for format in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
        export_report(bundle, format, &reports)?;
    }
    Ok(())
}

/// Reads back the stored artifacts and the stored bundle.
pub fn load_bundle_dir(dir: &Path) -> Result<(RunArtifacts, ReportBundle), PipelineError> {
    let meta: RunMeta = read_json(&dir.join("meta.json"))?;
    let audit: AuditLog = read_json(&dir.join("audit.json"))?;
    let artifacts = RunArtifacts {
        meta,
        samples: read_jsonl(&dir.join("samples.jsonl"))?,
        predictions: read_jsonl(&dir.join("predictions.jsonl"))?,
        explanations: read_jsonl(&dir.join("explanations.jsonl"))?,
        transcripts: read_jsonl(&dir.join("transcripts.jsonl"))?,
        audit,
    };
    let bundle = read_json(&dir.join("reports").join("bundle.json"))?;
    Ok((artifacts, bundle))
}

/// Stored calibration entries.
pub fn load_calibration(dir: &Path) -> Result<Vec<CalibrationEntry>, PipelineError> {
    read_json::<CalibrationFile>(&dir.join("calibration.json")).map(|f| f.entries)
}
