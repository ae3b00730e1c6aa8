//! Round orchestration: sample, broadcast, train locally, quantise, decode,
//! average, and keep the books.
//!
//! Every random choice is drawn from a stream derived from
//! `(seed, purpose, round, client)`, so running clients on a thread pool
//! produces bitwise the same server state as running them one by one.

mod experiment;
pub mod uplink;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Zero;

use crate::costing::wire::{encode_floats, BoundaryPrecision, Frame, FrameBits};
use crate::costing::{Bits, RoundCost};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{
    apply_update, compute_update, evaluate, local_train, Evaluation, LocalTrainConfig, ModelSpec,
    Parameters, Update,
};
use crate::quant::{bq_codebook, bu_codebook, update_stats, Codebook, UpdateStats};
use crate::rng::{derive_rng, derive_seed, purpose};

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, PartitionScheme, Summary};
use uplink::{decode_update, encode_update, expected_codebook_bits, expected_update_bits, EncodeContext};

/// Half-width of the fallback range used when a layer's update is constant.
pub const FALLBACK_HALF_RANGE: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantiser {
    /// Full-precision updates; plain FedAvg.
    None,
    /// Equal-width buckets.
    BucketUniform { levels: usize },
    /// Equal-mass buckets.
    BucketQuantile { levels: usize },
    /// Stochastic comparator with `levels` magnitude steps.
    Qsgd { levels: u32 },
}

impl Quantiser {
    pub fn is_bucketed(&self) -> bool {
        matches!(self, Self::BucketUniform { .. } | Self::BucketQuantile { .. })
    }

    pub fn levels(&self) -> Option<usize> {
        match *self {
            Self::None => None,
            Self::BucketUniform { levels } | Self::BucketQuantile { levels } => Some(levels),
            Self::Qsgd { levels } => Some(levels as usize),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::BucketUniform { .. } => "bu",
            Self::BucketQuantile { .. } => "bq",
            Self::Qsgd { .. } => "qsgd",
        }
    }
}

/// How decoded client updates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// `1/|S_k|` per client.
    #[default]
    Unweighted,
    /// Proportional to each client's sample count.
    DatasetSize,
}

/// Central training of the initial model on a held-out split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pretrain {
    /// Zero keeps the split (so federated data matches a pre-trained run)
    /// but leaves the initial model untouched.
    pub epochs: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub total_clients: usize,
    pub sampled_per_round: usize,
    pub rounds: usize,
    pub quantiser: Quantiser,
    /// Codebook refresh period `T`, in rounds.
    pub refresh_period: usize,
    pub boundary_precision: BoundaryPrecision,
    /// BU ranges are widened about their centre by this factor.
    pub range_margin: f32,
    pub aggregation: Aggregation,
    pub pretrain: Option<Pretrain>,
    /// Local optimiser settings; the seed is replaced per client and round.
    pub local: LocalTrainConfig,
    pub seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_clients == 0 {
            return Err(invalid("total_clients must be at least 1"));
        }
        if self.sampled_per_round == 0 || self.sampled_per_round > self.total_clients {
            return Err(invalid(format!(
                "sampled_per_round must lie in [1, {}]",
                self.total_clients
            )));
        }
        if self.refresh_period == 0 {
            return Err(invalid("refresh_period must be at least 1"));
        }
        match self.quantiser {
            Quantiser::BucketUniform { levels } | Quantiser::BucketQuantile { levels }
                if levels == 0 || levels > u32::MAX as usize =>
            {
                return Err(invalid("quantiser levels must lie in [1, 2^32)"));
            }
            Quantiser::Qsgd { levels: 0 } => return Err(invalid("QSGD levels must be at least 1")),
            _ => {}
        }
        if !(self.range_margin >= 1.0 && self.range_margin.is_finite()) {
            return Err(invalid("range_margin must be finite and at least 1"));
        }
        if let Some(p) = &self.pretrain {
            if !(p.fraction > 0.0 && p.fraction < 1.0) {
                return Err(invalid("pretrain fraction must lie in (0, 1)"));
            }
        }
        self.local.validate()
    }

    fn local_for(&self, round: usize, client: usize) -> LocalTrainConfig {
        LocalTrainConfig {
            seed: derive_seed(self.seed, purpose::LOCAL, round as u64, client as u64),
            ..self.local
        }
    }
}

/// Runs one job per index. Implementations may run jobs concurrently but
/// must return results in index order.
pub trait Executor {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync,
    {
        (0..n).map(f).collect()
    }
}

/// Data visible to a federation: one shard per client plus evaluation sets.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub clients: &'a [Dataset],
    /// Union of the client shards, for training metrics.
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub params: Parameters,
    /// Current per-layer codebooks at wire precision; empty unless bucketed.
    pub codebooks: Vec<Codebook>,
    pub rounds_since_refresh: usize,
    pub next_round: usize,
    /// Decoded, averaged update of the latest round.
    pub last_update: Option<Update>,
    /// Per-round share of the codebook charge of the current refresh window.
    pub amortised_codebook_bits: Bits,
    pub seed: u64,
}

impl ServerState {
    pub fn new(params: Parameters, seed: u64) -> Self {
        Self {
            params,
            codebooks: Vec::new(),
            rounds_since_refresh: 0,
            next_round: 0,
            last_update: None,
            amortised_codebook_bits: Bits::zero(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub refresh: bool,
    pub train: Evaluation,
    pub test: Evaluation,
    pub cost: RoundCost,
    /// Statistics of the applied (averaged) update, per layer.
    pub layer_stats: Vec<UpdateStats>,
    /// Statistics of the applied update over all layers at once.
    pub update_stats: UpdateStats,
    /// Mean over clients of whole-model statistics of each decoded update.
    pub client_update_stats: UpdateStats,
    /// Effective bucket count per layer in force this round.
    pub codebook_levels: Vec<usize>,
    /// Layers whose codebook fell back to the symmetric default range.
    pub codebook_fallbacks: usize,
}

/// Uniform sample of `count` distinct clients out of `total`, in ascending
/// order, determined by `(seed, round)`.
pub fn sample_clients(total: usize, count: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if count > total {
        return Err(invalid(format!("cannot sample {count} of {total} clients")));
    }
    let mut rng = derive_rng(seed, purpose::SAMPLE, round as u64, 0);
    let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Per-layer codebooks fitted to `source` (full precision, before any wire
/// rounding). Returns the codebooks and how many layers fell back to the
/// symmetric default range.
pub fn calibrate_codebooks(
    quantiser: Quantiser,
    source: &Update,
    margin: f32,
) -> Result<(Vec<Codebook>, usize)> {
    let fallback = |levels| bu_codebook(-FALLBACK_HALF_RANGE, FALLBACK_HALF_RANGE, levels);
    let mut fallbacks = 0;
    let mut books = Vec::with_capacity(source.layer_count());
    for values in &source.per_layer {
        let book = match quantiser {
            Quantiser::BucketUniform { levels } => {
                let (lo, hi) = values
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let centre = (f64::from(lo) + f64::from(hi)) * 0.5;
                let half = (f64::from(hi) - f64::from(lo)) * 0.5 * f64::from(margin);
                bu_codebook((centre - half) as f32, (centre + half) as f32, levels)
            }
            Quantiser::BucketQuantile { levels } => bq_codebook(values, levels),
            _ => return Err(invalid("only bucketed quantisers use codebooks")),
        };
        books.push(match book {
            Ok(cb) => cb,
            Err(Error::DegenerateRange { .. }) => {
                fallbacks += 1;
                fallback(quantiser.levels().unwrap_or(1))?
            }
            Err(e) => return Err(e),
        });
    }
    Ok((books, fallbacks))
}

/// Calibrates and rounds to wire precision, falling back per layer if the
/// rounding collapses a codebook.
fn wire_codebooks(
    quantiser: Quantiser,
    source: &Update,
    margin: f32,
    precision: BoundaryPrecision,
) -> Result<(Vec<Codebook>, usize)> {
    let (books, mut fallbacks) = calibrate_codebooks(quantiser, source, margin)?;
    let levels = quantiser.levels().unwrap_or(1);
    let books = books
        .iter()
        .map(|cb| match precision.round_codebook(cb) {
            Err(Error::DegenerateRange { .. }) => {
                fallbacks += 1;
                let fb = bu_codebook(-FALLBACK_HALF_RANGE, FALLBACK_HALF_RANGE, levels)?;
                precision.round_codebook(&fb)
            }
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((books, fallbacks))
}

/// Client-side view of a codebook announcement.
fn read_codebook_message(bytes: &[u8], layers: usize) -> Result<Vec<Codebook>> {
    let mut at = 0;
    let mut books = Vec::with_capacity(layers);
    for _ in 0..layers {
        let (frame, used) = Frame::decode(&bytes[at..])?;
        at += used;
        let (_, boundaries) = frame
            .codebook
            .ok_or_else(|| crate::error::corrupt("codebook announcement without boundaries"))?;
        books.push(Codebook::from_boundaries(&boundaries)?);
    }
    Ok(books)
}

fn stats_of_all(update: &Update) -> Result<UpdateStats> {
    let flat: Vec<f32> = update.iter().collect();
    update_stats(&flat)
}

/// Full-precision exchange with one client before round 0, used to fit the
/// initial codebooks. Returns the new state and the exchange's cost.
pub fn calibrate(
    state: &ServerState,
    cfg: &RoundConfig,
    fed: &Federation<'_>,
) -> Result<(ServerState, RoundCost, usize)> {
    if !cfg.quantiser.is_bucketed() {
        return Err(invalid("calibration applies to bucketed quantisers only"));
    }
    let client = sample_clients(cfg.total_clients, 1, 0, derive_seed(cfg.seed, purpose::CALIBRATION, 0, 0))?[0];
    let mut downlink = Vec::new();
    encode_floats(state.params.iter(), &mut downlink);
    let local_cfg = LocalTrainConfig {
        seed: derive_seed(cfg.seed, purpose::CALIBRATION, 1, client as u64),
        ..cfg.local
    };
    let local = local_train(fed.spec, &state.params, &fed.clients[client], &local_cfg)?;
    let update = compute_update(&local, &state.params)?;
    let mut uplink = Vec::new();
    encode_floats(update.iter(), &mut uplink);

    let (codebooks, fallbacks) = wire_codebooks(cfg.quantiser, &update, cfg.range_margin, cfg.boundary_precision)?;
    let d = fed.spec.total_dim() as u64;
    let cost = RoundCost {
        uplink_payload_bits: 32 * d,
        downlink_model_bits: 32 * d,
        wire_bits: 8 * (downlink.len() + uplink.len()) as u64,
        ..RoundCost::default()
    };
    let next = ServerState {
        codebooks,
        ..state.clone()
    };
    Ok((next, cost, fallbacks))
}

struct ClientUpload {
    bytes: Vec<u8>,
    samples: usize,
}

/// Executes round `state.next_round`.
pub fn run_round<E: Executor>(
    state: &ServerState,
    cfg: &RoundConfig,
    fed: &Federation<'_>,
    exec: &E,
) -> Result<(ServerState, RoundRecord)> {
    let k = state.next_round;
    if k >= cfg.rounds {
        return Err(invalid(format!("round {k} is past the configured {} rounds", cfg.rounds)));
    }
    if fed.clients.len() != cfg.total_clients {
        return Err(invalid(format!(
            "{} client datasets for {} clients",
            fed.clients.len(),
            cfg.total_clients
        )));
    }
    let spec = fed.spec;
    let layers = spec.layer_dims().len();
    let clients = sample_clients(cfg.total_clients, cfg.sampled_per_round, k, cfg.seed)?;
    let bucketed = cfg.quantiser.is_bucketed();
    let refresh = bucketed && k % cfg.refresh_period == 0;

    // Server side: refresh codebooks from the latest averaged update. Round
    // 0 announces the calibration codebooks already in the state.
    let mut codebooks = state.codebooks.clone();
    let mut fallbacks = 0;
    if refresh && k > 0 {
        let source = state
            .last_update
            .as_ref()
            .ok_or_else(|| invalid("refresh without a previous update"))?;
        let (books, fb) = wire_codebooks(cfg.quantiser, source, cfg.range_margin, cfg.boundary_precision)?;
        codebooks = books;
        fallbacks = fb;
    }
    if bucketed && codebooks.len() != layers {
        return Err(invalid("bucketed rounds need one calibrated codebook per layer"));
    }

    // Broadcast: model, plus the codebooks on refresh rounds.
    let mut model_msg = Vec::new();
    encode_floats(state.params.iter(), &mut model_msg);
    let mut codebook_msg = Vec::new();
    if refresh {
        for cb in &codebooks {
            Frame::codebook(cb, cfg.boundary_precision).encode_into(&mut codebook_msg)?;
        }
    }
    let client_codebooks = if refresh {
        let received = read_codebook_message(&codebook_msg, layers)?;
        for (l, (a, b)) in received.iter().zip(&codebooks).enumerate() {
            if a.boundaries() != b.boundaries() {
                return Err(Error::CodebookMismatch { layer: l });
            }
        }
        received
    } else {
        codebooks.clone()
    };
    let global = Parameters::new(
        spec.layer_dims()
            .iter()
            .scan(0usize, |at, &d| {
                let start = *at;
                *at += d * 4;
                Some(crate::costing::wire::decode_floats(&model_msg[start..], d))
            })
            .collect::<Result<Vec<_>>>()?,
    );

    let uploads: Vec<Result<ClientUpload>> = exec.map(clients.len(), |i| {
        let client = clients[i];
        let data = &fed.clients[client];
        let local = local_train(spec, &global, data, &cfg.local_for(k, client))?;
        let update = compute_update(&local, &global)?;
        let ctx = EncodeContext {
            quantiser: cfg.quantiser,
            codebooks: &client_codebooks,
            seed: cfg.seed,
            round: k,
            client,
        };
        Ok(ClientUpload {
            bytes: encode_update(&update, &ctx)?,
            samples: data.len(),
        })
    });
    let uploads = uploads.into_iter().collect::<Result<Vec<_>>>()?;

    // Server: decode in client order and average in f64.
    let total_samples: usize = uploads.iter().map(|u| u.samples).sum();
    let mut sum: Vec<Vec<f64>> = spec.layer_dims().iter().map(|&d| vec![0.0; d]).collect();
    let mut client_stats = Vec::with_capacity(uploads.len());
    let mut uplink_wire = 0u64;
    for upload in &uploads {
        uplink_wire += 8 * upload.bytes.len() as u64;
        let decoded = decode_update(&upload.bytes, spec, cfg.quantiser, &codebooks)?;
        client_stats.push(stats_of_all(&decoded)?);
        let weight = match cfg.aggregation {
            Aggregation::Unweighted => 1.0 / uploads.len() as f64,
            Aggregation::DatasetSize => upload.samples as f64 / total_samples as f64,
        };
        for (acc, layer) in sum.iter_mut().zip(&decoded.per_layer) {
            for (a, &v) in acc.iter_mut().zip(layer) {
                *a += weight * f64::from(v);
            }
        }
    }
    let mean = Update::new(
        sum.into_iter()
            .map(|layer| layer.into_iter().map(|v| v as f32).collect())
            .collect(),
    );
    let params = apply_update(&state.params, &mean, 1.0)?;
    if !params.is_finite() {
        return Err(Error::NonFinite);
    }

    // Books: the ledger is derived from the layer layout, the wire figure
    // from the serialised bytes.
    let m = clients.len() as u64;
    let per_client = expected_update_bits(spec, cfg.quantiser, &codebooks);
    let announcement = if refresh {
        expected_codebook_bits(&codebooks, cfg.boundary_precision.bits())
    } else {
        FrameBits::default()
    };
    let amortised = if refresh {
        Bits::new(i128::from(m * announcement.codebook), cfg.refresh_period as i128)
    } else {
        state.amortised_codebook_bits
    };
    let cost = RoundCost {
        uplink_payload_bits: m * per_client.index,
        uplink_overhead_bits: m * per_client.overhead,
        codebook_bits: m * announcement.codebook,
        codebook_bits_amortised: amortised,
        downlink_model_bits: m * 32 * spec.total_dim() as u64,
        downlink_overhead_bits: m * announcement.overhead,
        wire_bits: uplink_wire + m * 8 * (model_msg.len() + codebook_msg.len()) as u64,
    };

    let layer_stats = mean
        .per_layer
        .iter()
        .map(|l| update_stats(l))
        .collect::<Result<Vec<_>>>()?;
    let client_update_stats = mean_stats(&client_stats);
    let record = RoundRecord {
        round: k,
        clients,
        refresh,
        train: evaluate(spec, &params, fed.train)?,
        test: evaluate(spec, &params, fed.test)?,
        cost,
        layer_stats,
        update_stats: stats_of_all(&mean)?,
        client_update_stats,
        codebook_levels: codebooks.iter().map(Codebook::levels).collect(),
        codebook_fallbacks: fallbacks,
    };
    let next = ServerState {
        params,
        codebooks,
        rounds_since_refresh: if refresh { 1 } else { state.rounds_since_refresh + 1 },
        next_round: k + 1,
        last_update: Some(mean),
        amortised_codebook_bits: amortised,
        seed: state.seed,
    };
    Ok((next, record))
}

fn mean_stats(stats: &[UpdateStats]) -> UpdateStats {
    let n = stats.len().max(1) as f64;
    UpdateStats {
        range: stats.iter().map(|s| s.range).sum::<f64>() / n,
        variance: stats.iter().map(|s| s.variance).sum::<f64>() / n,
        excess_kurtosis: stats.iter().map(|s| s.excess_kurtosis).sum::<f64>() / n,
    }
}
