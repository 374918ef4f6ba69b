use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use faithscope_annotate::{AnnotationService, AnnotationStore, ServiceConfig};
use faithscope_core::domain::{Sample, Split};
use faithscope_core::gateway::CacheMode;
use faithscope_core::pipeline::{
    default_backend, export_report, load_bundle_dir, load_corpus, run_calibration, run_experiment, verify_bundle,
    ReportFormat, RunConfig,
};
use faithscope_core::synthetic;

#[derive(Parser)]
#[command(name = "faithscope", version, about = "Faithfulness evaluation of LLM top-k word self-explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// off, record, replay or record_or_replay.
    #[arg(long)]
    cache_mode: Option<CacheMode>,
    /// Output directory for the bundle.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, String> {
        let mut c = RunConfig::load(&self.config).map_err(|e| e.to_string())?;
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(mode) = self.cache_mode {
            c.cache_mode = Some(mode);
        }
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment and write a bundle directory.
    Run(RunArgs),
    /// Fit temperatures on the calibration split only.
    Calibrate(RunArgs),
    /// Re-export reports from a stored bundle.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        /// json, csv or markdown.
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Defaults to <bundle>/reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute every table from stored predictions and compare.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Serve the annotation API (and optional static UI).
    Serve(ServeArgs),
    /// Export stored annotations as a human source file for `run`.
    ExportHuman {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "human")]
        name: String,
    },
    /// Record the replay cache by running with cache mode `record`.
    Fixtures(RunArgs),
    /// Write a synthetic corpus, mock lexicon and run config to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Corpus file, or a bundle directory whose evaluation split is used.
    #[arg(long)]
    samples: PathBuf,
    /// Comma-separated annotator ids.
    #[arg(long, value_delimiter = ',', required = true)]
    annotators: Vec<String>,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Directory of static UI files served at /.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json(v: serde_json::Value) {
    // A closed pipe (e.g. `| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&v).expect("output serializes"));
}

fn cmd_run(args: &RunArgs, force: Option<CacheMode>) -> Result<(), String> {
    let mut config = args.load()?;
    if force.is_some() {
        config.cache_mode = force;
    }
    let outcome = run_experiment(&config).map_err(|e| e.to_string())?;
    println!("bundle written to {}", config.output_dir.display());
    println!(
        "evaluation samples: {}, calibration samples: {}, backend calls: {}",
        outcome.bundle.n_evaluation, outcome.bundle.n_calibration, outcome.backend_calls
    );
    for e in &outcome.bundle.exclusions {
        let paradigm = e.paradigm.map_or("-", |p| p.as_str());
        println!("{} {paradigm}: {} included, {} excluded", e.source, e.n_included, e.n_excluded);
    }
    Ok(())
}

fn cmd_calibrate(args: &RunArgs) -> Result<(), String> {
    let config = args.load()?;
    let fits = run_calibration(&config, default_backend).map_err(|e| e.to_string())?;
    let json: Vec<_> = fits
        .iter()
        .map(|(source, paradigm, model)| serde_json::json!({"source": source, "paradigm": paradigm, "model": model}))
        .collect();
    print_json(serde_json::Value::Array(json));
    Ok(())
}

fn serve_samples(path: &Path) -> Result<Vec<Sample>, String> {
    if path.is_dir() {
        let (artifacts, _) = load_bundle_dir(path).map_err(|e| e.to_string())?;
        Ok(artifacts.samples.into_iter().filter(|s| s.split == Some(Split::Evaluation)).collect())
    } else {
        Ok(load_corpus(path).map_err(|e| e.to_string())?.samples)
    }
}

fn cmd_serve(args: &ServeArgs) -> Result<(), String> {
    let samples = serve_samples(&args.samples)?;
    let store = AnnotationStore::open(&args.store).map_err(|e| e.to_string())?;
    let config = ServiceConfig::new(args.annotators.clone(), args.k, args.seed);
    let service = AnnotationService::new(samples, config, store).map_err(|e| e.to_string())?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime
        .block_on(faithscope_annotate::serve(Arc::new(service), args.addr, args.static_dir.clone()))
        .map_err(|e| e.to_string())
}

fn cmd_synth(out: &Path, per_class: usize, seed: u64) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    synthetic::write_jsonl(&synthetic::corpus(per_class, seed), &out.join("corpus.jsonl")).map_err(|e| e.to_string())?;
    synthetic::write_lexicon(&synthetic::lexicon(seed), &out.join("lexicon.json")).map_err(|e| e.to_string())?;
    let half = per_class / 2;
    let config = format!(
        r#"corpus = "corpus.jsonl"
output_dir = "bundle"
seed = {seed}
k = 5
paradigms = ["PE", "EP"]

[split]
eval_per_class = {half}
calib_per_class = {}

[[sources]]
name = "mock"
backend = "mock"
lexicon = "lexicon.json"
endpoint = ""
model = "lexicon-mock"
"#,
        per_class - half
    );
    std::fs::write(out.join("run.toml"), config).map_err(|e| e.to_string())?;
    println!("wrote corpus.jsonl, lexicon.json and run.toml to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, None),
        Command::Fixtures(args) => cmd_run(args, Some(CacheMode::Record)),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Report { bundle, format, out } => {
            let dir = out.clone().unwrap_or_else(|| bundle.join("reports"));
            load_bundle_dir(bundle)
                .and_then(|(_, b)| export_report(&b, *format, &dir))
                .map(|files| files.iter().for_each(|f| println!("{}", f.display())))
                .map_err(|e| e.to_string())
        }
        Command::Verify { bundle } => match verify_bundle(bundle) {
            Ok(report) if report.ok() => {
                println!("ok: {} sections match, {} predictions", report.sections_checked, report.predictions);
                Ok(())
            }
            Ok(report) => Err(format!("verification failed:\n  {}", report.mismatches.join("\n  "))),
            Err(e) => Err(e.to_string()),
        },
        Command::Serve(args) => cmd_serve(args),
        Command::ExportHuman { store, out, k, name } => AnnotationStore::open(store)
            .map_err(|e| e.to_string())
            .and_then(|s| {
                let (file, coverage) = faithscope_annotate::export_human_source(&s.records(), name, *k);
                file.save(out).map_err(|e| e.to_string())?;
                print_json(serde_json::to_value(coverage).map_err(|e| e.to_string())?);
                Ok(())
            }),
        Command::Synth { out, per_class, seed } => cmd_synth(out, *per_class, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
