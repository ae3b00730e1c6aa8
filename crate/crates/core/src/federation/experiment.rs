use alloc::vec::Vec;

use crate::costing::{Bits, CostLedger};
use crate::data::{partition_dirichlet, partition_iid, split_pretrain, Dataset, Partition};
use crate::error::{invalid, Result};
use crate::model::{evaluate, init_model, local_train, Evaluation, LocalTrainConfig, ModelSpec};
use crate::rng::{derive_seed, purpose};

use super::{calibrate, run_round, Executor, Federation, RoundConfig, RoundRecord, ServerState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet(f64),
}

/// A complete run: network shape, data split, and round settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub round: RoundConfig,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub partition: PartitionScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub final_train: Evaluation,
    pub final_test: Evaluation,
    /// Ledger total, including any calibration exchange.
    pub total_bits: u64,
    /// Uncompressed uplink and downlink for the same rounds and clients.
    pub baseline_bits: u64,
    pub reduction: Bits,
    /// `(cumulative ledger bits, test accuracy)` after each round.
    pub accuracy_vs_bits: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub spec: ModelSpec,
    pub partition: Partition,
    /// Model before round 0 (after pre-training, if any).
    pub initial_train: Evaluation,
    pub initial_test: Evaluation,
    pub calibration_fallbacks: usize,
    pub records: Vec<RoundRecord>,
    pub ledger: CostLedger,
    pub summary: Summary,
    pub final_state: ServerState,
}

pub fn run_experiment<E: Executor>(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    exec: &E,
) -> Result<ExperimentOutcome> {
    let rc = &cfg.round;
    rc.validate()?;
    if train.feature_dim() != test.feature_dim() || train.class_count() != test.class_count() {
        return Err(invalid("train and test sets disagree on shape"));
    }
    let mut widths = Vec::with_capacity(cfg.hidden.len() + 2);
    widths.push(train.feature_dim());
    widths.extend_from_slice(&cfg.hidden);
    widths.push(train.class_count());
    let spec = ModelSpec::mlp(&widths)?;

    let mut params = init_model(&spec, derive_seed(rc.seed, purpose::INIT, 0, 0));
    let (pre, fed_data) = match &rc.pretrain {
        Some(p) => {
            let (pre, fed) = split_pretrain(train, p.fraction, derive_seed(rc.seed, purpose::PRETRAIN_SPLIT, 0, 0))?;
            (Some((pre, p.epochs)), fed)
        }
        None => (None, train.clone()),
    };
    if let Some((pre, epochs)) = &pre {
        if *epochs > 0 {
            let pcfg = LocalTrainConfig {
                epochs: *epochs,
                seed: derive_seed(rc.seed, purpose::PRETRAIN, 0, 0),
                ..rc.local
            };
            params = local_train(&spec, &params, pre, &pcfg)?;
        }
    }

    let partition_seed = derive_seed(rc.seed, purpose::PARTITION, 0, 0);
    let partition = match cfg.partition {
        PartitionScheme::Iid => partition_iid(&fed_data, rc.total_clients, partition_seed)?,
        PartitionScheme::Dirichlet(alpha) => {
            partition_dirichlet(&fed_data, rc.total_clients, alpha, partition_seed)?
        }
    };
    let shards: Vec<Dataset> = partition.assignments.iter().map(|rows| fed_data.subset(rows)).collect();
    let fed = Federation {
        spec: &spec,
        clients: &shards,
        train: &fed_data,
        test,
    };

    let initial_train = evaluate(&spec, &params, &fed_data)?;
    let initial_test = evaluate(&spec, &params, test)?;
    let mut state = ServerState::new(params, rc.seed);
    let mut ledger = CostLedger::default();
    let mut calibration_fallbacks = 0;
    if rc.quantiser.is_bucketed() && rc.rounds > 0 {
        let (next, cost, fallbacks) = calibrate(&state, rc, &fed)?;
        state = next;
        ledger.calibration = Some(cost);
        calibration_fallbacks = fallbacks;
    }

    let mut records = Vec::with_capacity(rc.rounds);
    let mut accuracy_vs_bits = Vec::with_capacity(rc.rounds);
    let mut cumulative = ledger.total_bits();
    for _ in 0..rc.rounds {
        let (next, record) = run_round(&state, rc, &fed, exec)?;
        cumulative += record.cost.ledger_bits();
        accuracy_vs_bits.push((cumulative, record.test.accuracy));
        ledger.push(record.cost.clone());
        records.push(record);
        state = next;
    }

    let (final_train, final_test) = match records.last() {
        Some(r) => (r.train, r.test),
        None => (initial_train, initial_test),
    };
    let baseline_bits = (rc.rounds * rc.sampled_per_round * 64 * spec.total_dim()) as u64;
    let summary = Summary {
        final_train,
        final_test,
        total_bits: ledger.total_bits(),
        baseline_bits,
        reduction: ledger.reduction_vs(baseline_bits),
        accuracy_vs_bits,
    };
    Ok(ExperimentOutcome {
        spec,
        partition,
        initial_train,
        initial_test,
        calibration_fallbacks,
        records,
        ledger,
        summary,
        final_state: state,
    })
}
