//! Output artifacts: per-round metrics CSV, run summary JSON and the
//! reproducibility manifest.
//!
//! The metrics CSV and the summary are pure functions of the configuration
//! and seed. Timestamps appear only in the manifest.

use serde::Serialize;

use quantfl_core::costing::{format_percent, model::to_f64};
use quantfl_core::federation::{ExperimentOutcome, RoundRecord};
use quantfl_core::rng::{derive_seed, purpose};

use crate::config::Config;

/// Column order of `metrics.csv`. Bit counts cover every client sampled in
/// the round; lists are space-separated.
pub const METRICS_COLUMNS: &[&str] = &[
    "round",
    "clients",
    "refresh",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "uplink_payload_bits",
    "uplink_overhead_bits",
    "codebook_bits",
    "codebook_bits_amortised",
    "downlink_model_bits",
    "downlink_overhead_bits",
    "round_bits",
    "wire_bits",
    "cumulative_bits",
    "update_range",
    "update_variance",
    "update_excess_kurtosis",
    "client_update_range",
    "client_update_variance",
    "codebook_levels",
    "codebook_fallbacks",
];

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub clients: String,
    pub refresh: bool,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub uplink_payload_bits: u64,
    pub uplink_overhead_bits: u64,
    pub codebook_bits: u64,
    pub codebook_bits_amortised: f64,
    pub downlink_model_bits: u64,
    pub downlink_overhead_bits: u64,
    pub round_bits: u64,
    pub wire_bits: u64,
    pub cumulative_bits: u64,
    pub update_range: f64,
    pub update_variance: f64,
    pub update_excess_kurtosis: f64,
    pub client_update_range: f64,
    pub client_update_variance: f64,
    pub codebook_levels: String,
    pub codebook_fallbacks: usize,
}

fn joined(values: impl IntoIterator<Item = usize>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

impl MetricsRow {
    pub fn new(rec: &RoundRecord, cumulative_bits: u64) -> Self {
        let c = &rec.cost;
        Self {
            round: rec.round,
            clients: joined(rec.clients.iter().copied()),
            refresh: rec.refresh,
            train_loss: rec.train.loss,
            train_accuracy: rec.train.accuracy,
            test_loss: rec.test.loss,
            test_accuracy: rec.test.accuracy,
            uplink_payload_bits: c.uplink_payload_bits,
            uplink_overhead_bits: c.uplink_overhead_bits,
            codebook_bits: c.codebook_bits,
            codebook_bits_amortised: to_f64(&c.codebook_bits_amortised),
            downlink_model_bits: c.downlink_model_bits,
            downlink_overhead_bits: c.downlink_overhead_bits,
            round_bits: c.ledger_bits(),
            wire_bits: c.wire_bits,
            cumulative_bits,
            update_range: rec.update_stats.range,
            update_variance: rec.update_stats.variance,
            update_excess_kurtosis: rec.update_stats.excess_kurtosis,
            client_update_range: rec.client_update_stats.range,
            client_update_variance: rec.client_update_stats.variance,
            codebook_levels: joined(rec.codebook_levels.iter().copied()),
            codebook_fallbacks: rec.codebook_fallbacks,
        }
    }
}

pub fn metrics_rows(outcome: &ExperimentOutcome) -> Vec<MetricsRow> {
    let mut cumulative = outcome.ledger.calibration.as_ref().map_or(0, |c| c.ledger_bits());
    outcome
        .records
        .iter()
        .map(|rec| {
            cumulative += rec.cost.ledger_bits();
            MetricsRow::new(rec, cumulative)
        })
        .collect()
}

/// Renders rows as CSV. The header is written even when there are no rows.
pub fn write_csv<T: Serialize>(columns: &[&str], rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(columns)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(w.into_inner().expect("flushed writer into a Vec cannot fail"))
}

pub fn metrics_csv(outcome: &ExperimentOutcome) -> Result<Vec<u8>, csv::Error> {
    write_csv(METRICS_COLUMNS, &metrics_rows(outcome))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub quantiser: String,
    pub levels: Option<usize>,
    pub rounds: usize,
    pub parameters: usize,
    pub layer_dims: Vec<usize>,
    pub initial_train_accuracy: f64,
    pub initial_test_accuracy: f64,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub calibration_bits: u64,
    pub total_bits: u64,
    pub wire_bits: u64,
    pub baseline_bits: u64,
    pub reduction_percent: String,
    pub calibration_fallbacks: usize,
    pub codebook_fallbacks: usize,
}

impl RunSummary {
    pub fn new(cfg: &Config, outcome: &ExperimentOutcome) -> Self {
        let r = &cfg.experiment.round;
        let s = &outcome.summary;
        Self {
            name: cfg.name.clone(),
            seed: r.seed,
            quantiser: r.quantiser.name().to_owned(),
            levels: r.quantiser.levels(),
            rounds: r.rounds,
            parameters: outcome.spec.total_dim(),
            layer_dims: outcome.spec.layer_dims().to_vec(),
            initial_train_accuracy: outcome.initial_train.accuracy,
            initial_test_accuracy: outcome.initial_test.accuracy,
            final_train_accuracy: s.final_train.accuracy,
            final_test_accuracy: s.final_test.accuracy,
            final_test_loss: s.final_test.loss,
            calibration_bits: outcome.ledger.calibration.as_ref().map_or(0, |c| c.ledger_bits()),
            total_bits: s.total_bits,
            wire_bits: outcome.ledger.total_wire_bits(),
            baseline_bits: s.baseline_bits,
            reduction_percent: format_percent(&s.reduction),
            calibration_fallbacks: outcome.calibration_fallbacks,
            codebook_fallbacks: outcome.records.iter().map(|r| r.codebook_fallbacks).sum(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivedSeeds {
    pub init: u64,
    pub partition: u64,
    pub pretrain_split: u64,
    pub pretrain: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub created_at: String,
    pub command: Vec<String>,
    pub source: &'a str,
    pub seed: u64,
    pub derived_seeds: DerivedSeeds,
    pub config: &'a crate::config::ConfigFile,
}

impl<'a> Manifest<'a> {
    pub fn new(cfg: &'a Config, source: &'a str, command: Vec<String>) -> Self {
        let seed = cfg.seed();
        let d = |tag| derive_seed(seed, tag, 0, 0);
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            command,
            source,
            seed,
            derived_seeds: DerivedSeeds {
                init: d(purpose::INIT),
                partition: d(purpose::PARTITION),
                pretrain_split: d(purpose::PRETRAIN_SPLIT),
                pretrain: d(purpose::PRETRAIN),
            },
            config: &cfg.file,
        }
    }
}
