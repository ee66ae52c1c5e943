//! Prequential evaluation: drive one adapter over one synthetic stream,
//! score every sample on its first emitted prediction, and serialize the
//! outcome as a JSON report plus a per-sample CSV.
//!
//! Ground-truth labels and domain tags live on stream events and are used
//! here, post hoc, for scoring only — adapters receive image batches.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    Adapter, ImageBatch, SourceAdapter, TbnAdapter, TbnDecAdapter, TentAdapter,
};
use crate::checkpoint::Checkpoint;
use crate::config::{Method, RunConfig, Scenario};
use crate::error::{Error, Result};
use crate::freda::FredaAdapter;
use crate::model::SmallCnn;
use crate::rng::SeededRng;
use crate::stream::{batch, continual_stream, mixed_stream, LabeledDataset, StreamEvent};
use crate::tensor::Tensor;

/// Aggregate trace of one stream step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based step number.
    pub step: usize,
    /// Samples in this batch.
    pub n: usize,
    /// Pool rows examined by the training gate.
    pub considered: usize,
    /// Rows that passed the gate.
    pub selected: usize,
    /// `selected / considered`, when anything was considered.
    pub selection_rate: Option<f64>,
    /// Cluster purity against hidden domain tags (clustering methods only).
    pub purity: Option<f64>,
    /// Mean prediction entropy over the batch.
    pub mean_entropy: f64,
    /// Mean training loss over branches that trained.
    pub loss: Option<f64>,
}

/// One scored stream sample (CSV row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub cluster: usize,
    pub domain: String,
    pub entropy: f64,
}

/// Everything one run produces. The JSON serialization carries the scalar
/// results and step traces; per-sample records go to a separate CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Deterministic digest of the config echo — equal configs, equal ids.
    pub run_id: String,
    pub method: String,
    /// Verbatim configuration echo.
    pub config: RunConfig,
    /// Samples actually consumed from the stream.
    pub stream_length: usize,
    /// Fraction of misclassified samples; absent when the stream was empty
    /// (the error rate is undefined, not zero).
    pub overall_error: Option<f64>,
    /// Error rate per corruption label, over the samples that carried it.
    pub per_domain_error: BTreeMap<String, f64>,
    /// Branch updates skipped because a loss left the finite range.
    pub numeric_aborts: usize,
    pub steps: Vec<StepTrace>,
    #[serde(skip)]
    pub samples: Vec<SampleRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(e.to_string()))
    }

    /// Per-sample CSV: `index,true_label,predicted,cluster,domain,entropy`.
    pub fn csv(&self) -> String {
        let mut out = String::from("index,true_label,predicted,cluster,domain,entropy\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.index, s.true_label, s.predicted, s.cluster, s.domain, s.entropy
            ));
        }
        out
    }
}

/// Fraction of samples whose cluster's majority domain matches their own.
pub fn purity(assignments: &[usize], domains: &[usize]) -> f64 {
    assert_eq!(assignments.len(), domains.len(), "purity input lengths");
    if assignments.is_empty() {
        return 1.0;
    }
    let k = assignments.iter().max().unwrap() + 1;
    let d = domains.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k * d];
    for (&a, &t) in assignments.iter().zip(domains) {
        counts[a * d + t] += 1;
    }
    let hits: usize = (0..k)
        .map(|a| (0..d).map(|t| counts[a * d + t]).max().unwrap_or(0))
        .sum();
    hits as f64 / assignments.len() as f64
}

/// Deterministic run identifier: SHA-256 digest of the config echo.
pub fn run_id(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_json().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Instantiates the configured adapter against a checkpoint.
pub fn build_adapter(
    model: SmallCnn,
    checkpoint: &Checkpoint,
    cfg: &RunConfig,
    rng: &SeededRng,
) -> Result<Box<dyn Adapter>> {
    Ok(match cfg.method {
        Method::Source => Box::new(SourceAdapter::new(model, checkpoint)?),
        Method::Tbn => Box::new(TbnAdapter::new(model, checkpoint)?),
        Method::TbnDec => Box::new(TbnDecAdapter::new(
            model,
            checkpoint,
            cfg.freda.clusters,
            &rng.substream("adapter"),
        )?),
        Method::Tent => Box::new(TentAdapter::new(
            model,
            checkpoint,
            cfg.freda.lr,
            cfg.predict_before_update,
        )?),
        Method::Freda => Box::new(FredaAdapter::new(
            model,
            checkpoint,
            cfg.freda.clone(),
            &rng.substream("adapter"),
        )?),
    })
}

/// Runs one adaptation episode and scores it prequentially. `exemplars` is
/// the clean dataset the stream corrupts on the fly.
pub fn run(checkpoint: &Checkpoint, exemplars: &LabeledDataset, cfg: &RunConfig) -> Result<RunReport> {
    let specs = cfg.validate(exemplars.num_classes())?;
    let model = SmallCnn::for_dataset(exemplars)?;
    let root = SeededRng::from_seed(cfg.seed);
    let mut adapter = build_adapter(model, checkpoint, cfg, &root)?;
    let events: Box<dyn Iterator<Item = StreamEvent> + '_> = match cfg.scenario {
        Scenario::Mixed => Box::new(mixed_stream(
            exemplars,
            &specs,
            cfg.length,
            root.substream("stream"),
        )?),
        Scenario::Continual => Box::new(continual_stream(
            exemplars,
            &specs,
            cfg.length / specs.len(),
            root.substream("stream"),
        )?),
    };

    let labels: Vec<String> = specs.iter().map(|s| s.label()).collect();
    let clustering_method = matches!(cfg.method, Method::TbnDec)
        || (matches!(cfg.method, Method::Freda) && !cfg.freda.disable_fd);
    let (c, h, w) = exemplars.image_dims();
    let mut steps = Vec::new();
    let mut samples = Vec::new();
    let mut wrong = 0usize;
    let mut total = 0usize;
    let mut per_domain = vec![(0usize, 0usize); specs.len()];

    for (step_idx, chunk) in batch(events, cfg.freda.batch_size).enumerate() {
        let bn = chunk.len();
        let mut data = Vec::with_capacity(bn * c * h * w);
        for e in &chunk {
            data.extend_from_slice(e.image.data());
        }
        let images = Tensor::new(vec![bn, c, h, w], data)?;
        let out = adapter.step(&ImageBatch::new(images)?)?;

        let mut ent_sum = 0.0;
        let domains: Vec<usize> = chunk.iter().map(|e| e.true_domain()).collect();
        for (i, e) in chunk.iter().enumerate() {
            let ok = out.predicted[i] == e.true_label();
            total += 1;
            wrong += usize::from(!ok);
            let slot = &mut per_domain[e.true_domain()];
            slot.1 += 1;
            slot.0 += usize::from(!ok);
            ent_sum += out.entropy[i];
            samples.push(SampleRecord {
                index: e.index,
                true_label: e.true_label(),
                predicted: out.predicted[i],
                cluster: out.cluster[i],
                domain: labels[e.true_domain()].clone(),
                entropy: out.entropy[i],
            });
        }
        steps.push(StepTrace {
            step: step_idx + 1,
            n: bn,
            considered: out.considered,
            selected: out.selected,
            selection_rate: (out.considered > 0)
                .then(|| out.selected as f64 / out.considered as f64),
            purity: clustering_method.then(|| purity(&out.cluster, &domains)),
            mean_entropy: ent_sum / bn as f64,
            loss: out.loss,
        });
    }

    Ok(RunReport {
        run_id: run_id(cfg),
        method: cfg.method.name().to_string(),
        config: cfg.clone(),
        stream_length: total,
        overall_error: (total > 0).then(|| wrong as f64 / total as f64),
        per_domain_error: labels
            .iter()
            .zip(&per_domain)
            .filter(|(_, d)| d.1 > 0)
            .map(|(l, d)| (l.clone(), d.0 as f64 / d.1 as f64))
            .collect(),
        numeric_aborts: adapter.numeric_aborts(),
        steps,
        samples,
    })
}

/// Writes `report_<method>_<id>.json` and `samples_<method>_<id>.csv` into
/// `dir`, creating it if needed. Returns both paths.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("{}_{}", report.method, report.run_id);
    let json_path = dir.join(format!("report_{stem}.json"));
    std::fs::write(&json_path, report.to_json()?)?;
    let csv_path = dir.join(format!("samples_{stem}.csv"));
    std::fs::write(&csv_path, report.csv())?;
    Ok((json_path, csv_path))
}

/// Aggregates reports into a CSV matrix: one row per method, one column per
/// corruption label plus the overall error, each cell the mean over the
/// reports (e.g. seeds) of that method.
pub fn summarize(reports: &[RunReport]) -> String {
    let domains: BTreeSet<&String> = reports
        .iter()
        .flat_map(|r| r.per_domain_error.keys())
        .collect();
    let mut by_method: BTreeMap<&str, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut out = String::from("method,runs,overall");
    for d in &domains {
        out.push(',');
        out.push_str(d);
    }
    out.push('\n');
    let mean = |vals: Vec<f64>| -> String {
        if vals.is_empty() {
            String::new()
        } else {
            format!("{:.6}", vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    for (method, group) in by_method {
        out.push_str(&format!("{method},{}", group.len()));
        out.push(',');
        out.push_str(&mean(
            group.iter().filter_map(|r| r.overall_error).collect(),
        ));
        for d in &domains {
            out.push(',');
            out.push_str(&mean(
                group
                    .iter()
                    .filter_map(|r| r.per_domain_error.get(*d).copied())
                    .collect(),
            ));
        }
        out.push('\n');
    }
    out
}
