//! Streaming evaluation: synthetic worlds, metrics, experiment runs and reports.

pub mod metrics;
pub mod report;
pub mod source;
pub mod stream;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelState, ParamGroup};
use crate::config::RunConfig;
use crate::engine::{frozen_predictions, run_stream, AdaptReport, Predictions};
use crate::error::Result;
use metrics::MetricsSummary;
use source::source_model;
use stream::{Batch, World};

/// Schema version of the JSON run summary.
pub const SUMMARY_VERSION: &str = "1.0";

/// Everything needed to evaluate one configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub model: ModelState,
    pub source_accuracy: f64,
    pub stream: Vec<Batch>,
}

impl Setup {
    pub fn new(config: &RunConfig) -> Result<Setup> {
        config.validate()?;
        let world = World::new(&config.stream, &config.backbone)?;
        let (model, source_accuracy) = source_model(&config.backbone, &world, &config.source)?;
        Ok(Setup {
            config: *config,
            model,
            source_accuracy,
            stream: world.stream()?,
        })
    }

    /// Predictions of the unadapted source model.
    pub fn frozen(&self) -> Result<Vec<Predictions>> {
        frozen_predictions(&self.model, &self.stream, &self.config.adapt)
    }

    /// Adapts a copy of the source model over the stream.
    pub fn adapt(&self) -> Result<(ModelState, Vec<AdaptReport>)> {
        let mut state = self.model.clone();
        let reports = run_stream(&mut state, &self.stream, &self.config.adapt)?;
        Ok((state, reports))
    }
}

/// Metrics pooled over paired predictions and batches.
pub fn summarize<'a>(
    preds: impl IntoIterator<Item = &'a Predictions>,
    batches: &[Batch],
) -> Result<MetricsSummary> {
    let mut p = Vec::new();
    let mut s = Vec::new();
    let mut labels = Vec::new();
    let mut ood = Vec::new();
    for (pr, b) in preds.into_iter().zip(batches) {
        p.extend_from_slice(&pr.preds);
        s.extend_from_slice(&pr.scores);
        labels.extend_from_slice(&b.labels);
        ood.extend_from_slice(&b.ood);
    }
    MetricsSummary::compute(&p, &s, &labels, &ood)
}

/// AUROC over the first and the last quarter of the stream.
pub fn quarter_aurocs(preds: &[Predictions], batches: &[Batch]) -> Result<(Option<f64>, Option<f64>)> {
    let t = preds.len();
    let q = (t / 4).max(1).min(t);
    let first = summarize(&preds[..q], &batches[..q])?.auroc;
    let last = summarize(&preds[t - q..], &batches[t - q..])?.auroc;
    Ok((first, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub spec_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub source_accuracy: f64,
    pub frozen: MetricsSummary,
    pub adapted: MetricsSummary,
    pub first_quarter_auroc: Option<f64>,
    pub last_quarter_auroc: Option<f64>,
    pub skipped_steps: usize,
    pub degenerate_steps: usize,
    /// FNV-1a checksums of the frozen groups after the run.
    pub backbone_checksum: u64,
    pub classifier_checksum: u64,
}

/// Outcome of a full adaptation run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub reports: Vec<AdaptReport>,
    pub stream: Vec<Batch>,
    /// Model after the last batch.
    pub state: ModelState,
}

pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    let setup = Setup::new(config)?;
    let frozen = setup.frozen()?;
    let (state, reports) = setup.adapt()?;
    let adapted_preds: Vec<Predictions> = reports.iter().map(|r| r.predictions.clone()).collect();
    let (first_quarter_auroc, last_quarter_auroc) = quarter_aurocs(&adapted_preds, &setup.stream)?;
    let summary = RunSummary {
        spec_version: SUMMARY_VERSION.to_string(),
        seed: config.stream.seed,
        config: *config,
        source_accuracy: setup.source_accuracy,
        frozen: summarize(&frozen, &setup.stream)?,
        adapted: summarize(&adapted_preds, &setup.stream)?,
        first_quarter_auroc,
        last_quarter_auroc,
        skipped_steps: reports.iter().filter(|r| r.skipped).count(),
        degenerate_steps: reports.iter().filter(|r| r.sam_degenerate).count(),
        backbone_checksum: state.checksum(ParamGroup::Backbone),
        classifier_checksum: state.checksum(ParamGroup::Classifier),
    };
    Ok(RunOutcome {
        summary,
        reports,
        stream: setup.stream,
        state,
    })
}
