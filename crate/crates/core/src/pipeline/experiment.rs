use std::sync::Arc;
use std::time::Duration;

use super::bundle::{assemble_bundle, AuditLog, MaskingRecord, RunArtifacts, RunMeta, SampleFailure};
use super::config::{BackendKind, RunConfig, SourceConfig};
use super::corpus::{balanced_split, load_corpus, SplitResult};
use super::export::write_bundle_dir;
use super::human::HumanSourceFile;
use super::pool::parallel_map;
use super::{PipelineError, ReportBundle};
use crate::calibrate::{fit_temperature, CalibrationModel};
use crate::domain::{Explanation, InputVariant, Paradigm, Prediction, Sample, Split};
use crate::gateway::{Backend, Gateway, GatewayError, MockLexicon, ReqwestTransport};
use crate::perturb::MaskingReport;
use crate::protocol::{FlowResult, MalformedOutput, Protocol, ProtocolError, Transcript};

const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

/// Result of a persisted run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub artifacts: RunArtifacts,
    pub bundle: ReportBundle,
    pub split: SplitResult,
    /// Requests that reached a backend rather than the replay cache.
    pub backend_calls: usize,
}

/// Builds the backend a source config asks for.
pub fn default_backend(source: &SourceConfig) -> Result<Backend, PipelineError> {
    match source.backend {
        BackendKind::Mock => {
            let path = source
                .lexicon
                .as_ref()
                .ok_or_else(|| PipelineError::Config(format!("mock source '{}' needs a lexicon", source.name)))?;
            Ok(Backend::Mock(Arc::new(MockLexicon::load(path)?)))
        }
        BackendKind::Openai => Ok(Backend::Http(Arc::new(ReqwestTransport::new(HTTP_TIMEOUT)?))),
    }
}

/// Runs every source and paradigm, persists the bundle directory and returns it.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome, PipelineError> {
    run_experiment_with(config, default_backend)
}

/// As [`run_experiment`], with a caller-supplied backend per source.
pub fn run_experiment_with(
    config: &RunConfig,
    backend_for: impl Fn(&SourceConfig) -> Result<Backend, PipelineError>,
) -> Result<RunOutcome, PipelineError> {
    let prepared = prepare(config)?;
    let mut artifacts = RunArtifacts {
        meta: prepared.meta.clone(),
        samples: prepared.samples.clone(),
        predictions: Vec::new(),
        explanations: Vec::new(),
        transcripts: Vec::new(),
        audit: AuditLog { seed: config.seed, ..AuditLog::default() },
    };
    let calib: Vec<&Sample> = prepared.samples.iter().filter(|s| s.split == Some(Split::Calibration)).collect();
    let eval: Vec<&Sample> = prepared.samples.iter().filter(|s| s.split == Some(Split::Evaluation)).collect();

    let mut backend_calls = 0;
    for source in &config.sources {
        let gateway = Gateway::new(config.effective_gateway(source), backend_for(source)?)?;
        let protocol = Protocol::new(&source.name, config.k, &config.placeholder);
        let workers = gateway.config().max_concurrency;
        for &paradigm in &config.paradigms {
            log::info!("{}: {} on {} calibration samples", source.name, paradigm, calib.len());
            let records = parallel_map(&calib, workers, |s| run_sample(&protocol, &gateway, s, paradigm, false));
            for r in records {
                r?.merge_into(&mut artifacts);
            }
            log::info!("{}: {} on {} evaluation samples", source.name, paradigm, eval.len());
            let records = parallel_map(&eval, workers, |s| run_sample(&protocol, &gateway, s, paradigm, true));
            for r in records {
                r?.merge_into(&mut artifacts);
            }
        }
        backend_calls += gateway.backend_calls();
    }
    if let Some(human) = &prepared.human {
        artifacts.predictions.extend(human.predictions.iter().cloned());
        artifacts.explanations.extend(human.explanations.iter().cloned());
    }

    let bundle = assemble_bundle(&artifacts)?;
    write_bundle_dir(&config.output_dir, config, &prepared.split, &artifacts, &bundle)?;
    Ok(RunOutcome { artifacts, bundle, split: prepared.split, backend_calls })
}

/// Fitted temperature per source and paradigm, from calibration flows only.
pub fn run_calibration(
    config: &RunConfig,
    backend_for: impl Fn(&SourceConfig) -> Result<Backend, PipelineError>,
) -> Result<Vec<(String, Paradigm, CalibrationModel)>, PipelineError> {
    let prepared = prepare(config)?;
    let calib: Vec<&Sample> = prepared.samples.iter().filter(|s| s.split == Some(Split::Calibration)).collect();
    let gold = |id: &str| prepared.samples.iter().find(|s| s.id == id).map(|s| s.gold);
    let mut out = Vec::new();
    for source in &config.sources {
        let gateway = Gateway::new(config.effective_gateway(source), backend_for(source)?)?;
        let protocol = Protocol::new(&source.name, config.k, &config.placeholder);
        for &paradigm in &config.paradigms {
            let records =
                parallel_map(&calib, gateway.config().max_concurrency, |s| run_sample(&protocol, &gateway, s, paradigm, false));
            let mut fit_input = Vec::new();
            for r in records {
                let r = r?;
                if r.failure.is_none() && r.malformed.is_empty() {
                    for p in &r.predictions {
                        if let (Some(d), Some(g)) = (p.distribution, gold(&p.sample_id)) {
                            fit_input.push((d, g));
                        }
                    }
                }
            }
            if fit_input.is_empty() {
                return Err(PipelineError::Bundle(format!("{} {paradigm}: no usable calibration predictions", source.name)));
            }
            let model = fit_temperature(&fit_input, config.calibration.grid, config.calibration.fit_bins)?;
            out.push((source.name.clone(), paradigm, model));
        }
    }
    Ok(out)
}

struct Prepared {
    meta: RunMeta,
    samples: Vec<Sample>,
    split: SplitResult,
    human: Option<HumanSourceFile>,
}

fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    config.validate()?;
    let corpus = load_corpus(&config.corpus)?;
    let (samples, split) =
        balanced_split(&corpus.samples, config.split.eval_per_class, config.split.calib_per_class, config.seed)?;
    let human = match &config.human {
        Some(h) => {
            let file = HumanSourceFile::load(&h.path)?.renamed(&h.name);
            if file.k != config.k {
                return Err(PipelineError::Config(format!("human annotations use k={}, run uses k={}", file.k, config.k)));
            }
            Some(file)
        }
        None => None,
    };
    let meta = RunMeta {
        seed: config.seed,
        k: config.k,
        paradigms: config.paradigms.clone(),
        sources: config.sources.iter().map(|s| s.name.clone()).collect(),
        human: config.human.as_ref().map(|h| h.name.clone()),
        calibration: config.calibration,
        skipped_corpus_rows: corpus.skipped,
    };
    Ok(Prepared { meta, samples, split, human })
}

/// Outputs of all flows run for one sample.
#[derive(Default)]
struct SampleRecord {
    predictions: Vec<Prediction>,
    explanation: Option<Explanation>,
    transcripts: Vec<Transcript>,
    malformed: Vec<MalformedOutput>,
    masking: Option<(String, Paradigm, MaskingReport)>,
    failure: Option<SampleFailure>,
}

impl SampleRecord {
    fn merge_into(self, a: &mut RunArtifacts) {
        a.predictions.extend(self.predictions);
        a.explanations.extend(self.explanation);
        a.transcripts.extend(self.transcripts);
        a.audit.malformed.extend(self.malformed);
        if let Some((source, paradigm, report)) = self.masking {
            a.audit.masking.push(MaskingRecord { source, paradigm, report });
        }
        a.audit.failures.extend(self.failure);
    }
}

/// Gateway errors that mean the run itself is misconfigured rather than one
/// sample being unlucky.
fn is_fatal(e: &GatewayError) -> bool {
    !matches!(
        e,
        GatewayError::Network { .. } | GatewayError::RateLimited { .. } | GatewayError::Http { .. } | GatewayError::Protocol(_)
    )
}

fn run_sample(
    protocol: &Protocol,
    gateway: &Gateway,
    sample: &Sample,
    paradigm: Paradigm,
    with_variants: bool,
) -> Result<SampleRecord, PipelineError> {
    let mut rec = SampleRecord::default();
    match run_flows(protocol, gateway, sample, paradigm, with_variants, &mut rec) {
        Ok(()) => Ok(rec),
        Err(ProtocolError::Gateway(e)) if is_fatal(&e) => Err(e.into()),
        Err(ProtocolError::InvalidVariant(v)) => Err(ProtocolError::InvalidVariant(v).into()),
        Err(e) => {
            log::warn!("{} {paradigm} {}: {e}", protocol.source, sample.id);
            rec.failure = Some(SampleFailure {
                source: protocol.source.clone(),
                paradigm,
                sample_id: sample.id.clone(),
                split: sample.split.unwrap_or(Split::Evaluation),
                message: e.to_string(),
            });
            Ok(rec)
        }
    }
}

fn run_flows(
    protocol: &Protocol,
    gateway: &Gateway,
    sample: &Sample,
    paradigm: Paradigm,
    with_variants: bool,
    rec: &mut SampleRecord,
) -> Result<(), ProtocolError> {
    let output = match protocol.run(gateway, sample, paradigm)? {
        FlowResult::Complete(output) => output,
        FlowResult::Malformed { output, transcript } => {
            rec.transcripts.push(transcript);
            rec.malformed.push(output);
            return Ok(());
        }
    };
    rec.transcripts.push(output.transcript);
    rec.predictions.push(output.prediction);
    if with_variants {
        for variant in [InputVariant::TopKOnly, InputVariant::TopKRemoved] {
            let result = protocol.run_variant(gateway, sample, &output.explanation, variant)?;
            rec.transcripts.push(result.transcript);
            if let Some(report) = result.masking {
                rec.masking = Some((protocol.source.clone(), paradigm, report));
            }
            match result.outcome {
                Ok(p) => rec.predictions.push(p),
                Err(m) => rec.malformed.push(m),
            }
        }
    }
    rec.explanation = Some(output.explanation);
    Ok(())
}
