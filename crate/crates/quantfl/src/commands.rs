//! The `run`, `cost` and `sweep` commands as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use quantfl_core::costing::{
    baseline_cost, downlink_cost, format_percent, qsgd_cost, round_total, uplink_cost, Bits, PerLayer,
};
use quantfl_core::data::{make_synthetic, Dataset, SyntheticSpec};
use quantfl_core::federation::{
    run_experiment, Executor, ExperimentOutcome, PartitionScheme, Quantiser, Sequential,
};
use quantfl_core::rng::{derive_seed, purpose};

use crate::config::{Config, DataSource};
use crate::error::AppError;
use crate::idx::{load_idx, IdxError};
use crate::report::{metrics_csv, write_csv, Manifest, RunSummary};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "QUANTFL_OUT_DIR";

/// Output directory: the explicit flag, then the config's `out_dir`, then
/// the environment default, then `runs/<name>`.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &Config, env: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| env.map(|e| e.join(&cfg.name)))
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

pub fn load_datasets(src: &DataSource) -> Result<(Dataset, Dataset), AppError> {
    match src {
        DataSource::Synthetic { spec, test_per_class, seed } => {
            let train = make_synthetic(spec, derive_seed(*seed, purpose::DATA, 0, 0))?;
            let test_spec = SyntheticSpec {
                per_class: *test_per_class,
                ..*spec
            };
            let test = make_synthetic(&test_spec, derive_seed(*seed, purpose::DATA, 1, 0))?;
            Ok((train, test))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            feature_dim,
            expected_train,
            expected_test,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            for (what, data, expected) in [("train", &train, expected_train), ("test", &test, expected_test)] {
                if data.feature_dim() != *feature_dim {
                    return Err(AppError::Usage(format!(
                        "{what} images have {} pixels but dataset.feature_dim is {feature_dim}",
                        data.feature_dim()
                    )));
                }
                if let Some(n) = expected {
                    if data.len() != *n {
                        return Err(IdxError::UnexpectedCount { what, expected: *n, actual: data.len() }.into());
                    }
                }
            }
            Ok((train, test))
        }
    }
}

pub fn run_config<E: Executor>(cfg: &Config, exec: &E) -> Result<ExperimentOutcome, AppError> {
    let (train, test) = load_datasets(&cfg.data)?;
    Ok(run_experiment(&cfg.experiment, &train, &test, exec)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AppError> {
    fs::write(path, bytes).map_err(AppError::io(path))
}

fn create_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))
}

/// Runs the experiment and writes `metrics.csv`, `summary.json` and
/// `manifest.json` into `out_dir`.
pub fn cmd_run<E: Executor>(
    cfg: &Config,
    out_dir: &Path,
    source: &str,
    command: Vec<String>,
    exec: &E,
) -> Result<RunSummary, AppError> {
    let outcome = run_config(cfg, exec)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&outcome)?)?;
    let summary = RunSummary::new(cfg, &outcome);
    write_file(&out_dir.join("summary.json"), &json_bytes(&summary)?)?;
    let manifest = Manifest::new(cfg, source, command);
    write_file(&out_dir.join("manifest.json"), &json_bytes(&manifest)?)?;
    Ok(summary)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, AppError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub const COST_COLUMNS: &[&str] = &[
    "method",
    "levels",
    "uplink_bits",
    "downlink_bits",
    "total_bits_exact",
    "total_bits",
    "reduction_percent",
];

/// One line of the per-client, per-round cost table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub method: String,
    pub levels: Option<usize>,
    pub uplink_bits: String,
    pub downlink_bits: String,
    pub total_bits_exact: String,
    /// Rounded up to whole bits.
    pub total_bits: u128,
    pub reduction_percent: String,
}

/// An exact rational as an integer, a terminating decimal, or `n/d`.
pub fn exact_str(b: &Bits) -> String {
    if b.is_integer() {
        return b.to_integer().to_string();
    }
    let (n, d) = (*b.numer(), *b.denom());
    for places in 1..=6u32 {
        let scale = 10i128.pow(places);
        if scale % d == 0 {
            let scaled = n * (scale / d);
            let sign = if scaled < 0 { "-" } else { "" };
            let abs = scaled.unsigned_abs();
            let scale = scale as u128;
            return format!("{sign}{}.{:0width$}", abs / scale, abs % scale, width = places as usize);
        }
    }
    format!("{n}/{d}")
}

pub fn cost_table(cfg: &Config) -> Result<Vec<CostRow>, AppError> {
    let dims = &cfg.cost.layer_dims;
    let base = baseline_cost(dims);
    let mut rows = vec![CostRow {
        method: "baseline".into(),
        levels: None,
        uplink_bits: base.uplink.to_string(),
        downlink_bits: (base.total - base.uplink).to_string(),
        total_bits_exact: base.total.to_string(),
        total_bits: base.total,
        reduction_percent: format_percent(&Bits::from_integer(0)),
    }];
    for &levels in &cfg.cost.levels {
        let mut c = cfg.cost.config.clone();
        c.levels = PerLayer::uniform(levels);
        c.validate()?;
        let up = uplink_cost(dims, &c)?.total();
        let down = downlink_cost(dims, &c)?.total();
        let total = round_total(dims, &c)?;
        for method in ["bu", "bq"] {
            rows.push(CostRow {
                method: method.into(),
                levels: Some(levels),
                uplink_bits: exact_str(&up),
                downlink_bits: exact_str(&down),
                total_bits_exact: exact_str(&total.exact),
                total_bits: total.ceiling,
                reduction_percent: total.reduction_percent(),
            });
        }
        let q = qsgd_cost(dims, levels)?;
        rows.push(CostRow {
            method: "qsgd".into(),
            levels: Some(levels),
            uplink_bits: q.uplink.to_string(),
            downlink_bits: q.downlink.to_string(),
            total_bits_exact: exact_str(&q.total.exact),
            total_bits: q.total.ceiling,
            reduction_percent: q.total.reduction_percent(),
        });
    }
    Ok(rows)
}

/// Fixed-width text rendering of the cost table.
pub fn render_cost_table(cfg: &Config, rows: &[CostRow]) -> String {
    let dims = &cfg.cost.layer_dims;
    let d: usize = dims.iter().sum();
    let c = &cfg.cost.config;
    let mut out = format!(
        "layers {} (d = {d}), b = {}, T = {}, codebook scope {:?}, downlink {:?}\n",
        dims.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/"),
        c.boundary_bits,
        c.refresh_period.0[0],
        c.scope,
        c.downlink,
    );
    out.push_str(&format!(
        "{:<9} {:>7} {:>14} {:>14} {:>14} {:>10}\n",
        "method", "levels", "uplink", "downlink", "total", "reduction"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<9} {:>7} {:>14} {:>14} {:>14} {:>9}%\n",
            r.method,
            r.levels.map_or("-".to_owned(), |l| l.to_string()),
            r.uplink_bits,
            r.downlink_bits,
            r.total_bits,
            r.reduction_percent
        ));
    }
    out
}

pub fn cost_csv(rows: &[CostRow]) -> Result<Vec<u8>, AppError> {
    Ok(write_csv(COST_COLUMNS, rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Alpha,
    Levels,
    Seeds,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::Levels => "levels",
            Self::Seeds => "seeds",
        }
    }
}

/// One configuration of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: String,
    pub seed: u64,
    pub config: Config,
}

/// Expands a sweep into its cross product of axis values and seeds, in
/// canonical order.
pub fn sweep_points(cfg: &Config, axis: SweepAxis) -> Result<Vec<SweepPoint>, AppError> {
    let seeds = cfg.sweep.seeds.clone().unwrap_or_else(|| vec![cfg.seed()]);
    let missing = |key: &str| AppError::Usage(format!("sweep.{key} must list the values to sweep over"));
    let variants: Vec<(String, Config)> = match axis {
        SweepAxis::Alpha => cfg
            .sweep
            .alpha
            .as_ref()
            .ok_or_else(|| missing("alpha"))?
            .iter()
            .map(|&alpha| {
                let mut c = cfg.clone();
                c.experiment.partition = PartitionScheme::Dirichlet(alpha);
                (alpha.to_string(), c)
            })
            .collect(),
        SweepAxis::Levels => {
            let levels = cfg.sweep.levels.as_ref().ok_or_else(|| missing("levels"))?;
            levels
                .iter()
                .map(|&l| {
                    let mut c = cfg.clone();
                    c.experiment.round.quantiser = match cfg.experiment.round.quantiser {
                        Quantiser::BucketUniform { .. } => Quantiser::BucketUniform { levels: l },
                        Quantiser::BucketQuantile { .. } => Quantiser::BucketQuantile { levels: l },
                        Quantiser::Qsgd { .. } => Quantiser::Qsgd { levels: l as u32 },
                        Quantiser::None => {
                            return Err(AppError::Usage("a levels sweep needs quantiser.kind other than \"none\"".into()))
                        }
                    };
                    Ok((l.to_string(), c))
                })
                .collect::<Result<_, _>>()?
        }
        SweepAxis::Seeds => vec![("all".to_owned(), cfg.clone())],
    };
    Ok(variants
        .into_iter()
        .flat_map(|(value, c)| {
            seeds.iter().map(move |&seed| SweepPoint {
                value: value.clone(),
                seed,
                config: c.clone().with_seed(seed),
            })
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRunRow {
    pub axis: &'static str,
    pub value: String,
    pub seed: u64,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub total_bits: u64,
    pub reduction_percent: String,
}

pub const SWEEP_RUN_COLUMNS: &[&str] = &[
    "axis",
    "value",
    "seed",
    "final_train_accuracy",
    "final_test_accuracy",
    "final_test_loss",
    "total_bits",
    "reduction_percent",
];

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: String,
    pub runs: usize,
    pub final_test_accuracy_mean: f64,
    pub final_test_accuracy_std: f64,
    pub final_train_accuracy_mean: f64,
    pub final_train_accuracy_std: f64,
    pub final_test_loss_mean: f64,
    pub total_bits_mean: f64,
    pub total_bits_std: f64,
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "axis",
    "value",
    "runs",
    "final_test_accuracy_mean",
    "final_test_accuracy_std",
    "final_train_accuracy_mean",
    "final_train_accuracy_std",
    "final_test_loss_mean",
    "total_bits_mean",
    "total_bits_std",
];

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub axis: &'static str,
    pub value: String,
    pub round: usize,
    pub cumulative_bits_mean: f64,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
}

pub const CURVE_COLUMNS: &[&str] = &[
    "axis",
    "value",
    "round",
    "cumulative_bits_mean",
    "test_accuracy_mean",
    "test_accuracy_std",
];

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRunRow>,
    pub rows: Vec<SweepRow>,
    pub curves: Vec<CurveRow>,
}

/// Runs every point of the sweep (in parallel across configurations) and
/// aggregates over seeds.
pub fn run_sweep(cfg: &Config, axis: SweepAxis) -> Result<SweepOutcome, AppError> {
    let points = sweep_points(cfg, axis)?;
    let outcomes: Vec<ExperimentOutcome> = points
        .par_iter()
        .map(|p| run_config(&p.config, &Sequential))
        .collect::<Result<_, _>>()?;

    let runs: Vec<SweepRunRow> = points
        .iter()
        .zip(&outcomes)
        .map(|(p, o)| SweepRunRow {
            axis: axis.name(),
            value: p.value.clone(),
            seed: p.seed,
            final_train_accuracy: o.summary.final_train.accuracy,
            final_test_accuracy: o.summary.final_test.accuracy,
            final_test_loss: o.summary.final_test.loss,
            total_bits: o.summary.total_bits,
            reduction_percent: format_percent(&o.summary.reduction),
        })
        .collect();

    let mut values: Vec<String> = Vec::new();
    for p in &points {
        if !values.contains(&p.value) {
            values.push(p.value.clone());
        }
    }
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for value in values {
        let group: Vec<usize> = (0..points.len()).filter(|&i| points[i].value == value).collect();
        let pick = |f: &dyn Fn(&SweepRunRow) -> f64| mean_std(&group.iter().map(|&i| f(&runs[i])).collect::<Vec<_>>());
        let (test_mean, test_std) = pick(&|r| r.final_test_accuracy);
        let (train_mean, train_std) = pick(&|r| r.final_train_accuracy);
        let (loss_mean, _) = pick(&|r| r.final_test_loss);
        let (bits_mean, bits_std) = pick(&|r| r.total_bits as f64);
        rows.push(SweepRow {
            axis: axis.name(),
            value: value.clone(),
            runs: group.len(),
            final_test_accuracy_mean: test_mean,
            final_test_accuracy_std: test_std,
            final_train_accuracy_mean: train_mean,
            final_train_accuracy_std: train_std,
            final_test_loss_mean: loss_mean,
            total_bits_mean: bits_mean,
            total_bits_std: bits_std,
        });
        let rounds = group.iter().map(|&i| outcomes[i].records.len()).min().unwrap_or(0);
        for k in 0..rounds {
            let bits: Vec<f64> = group.iter().map(|&i| outcomes[i].summary.accuracy_vs_bits[k].0 as f64).collect();
            let acc: Vec<f64> = group.iter().map(|&i| outcomes[i].summary.accuracy_vs_bits[k].1).collect();
            let (acc_mean, acc_std) = mean_std(&acc);
            curves.push(CurveRow {
                axis: axis.name(),
                value: value.clone(),
                round: k,
                cumulative_bits_mean: mean_std(&bits).0,
                test_accuracy_mean: acc_mean,
                test_accuracy_std: acc_std,
            });
        }
    }
    Ok(SweepOutcome { runs, rows, curves })
}

/// Runs a sweep and writes `sweep.csv`, `sweep_runs.csv`, `sweep_curves.csv`
/// and `manifest.json` into `out_dir`.
pub fn cmd_sweep(
    cfg: &Config,
    axis: SweepAxis,
    out_dir: &Path,
    source: &str,
    command: Vec<String>,
) -> Result<SweepOutcome, AppError> {
    let outcome = run_sweep(cfg, axis)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join("sweep.csv"), &write_csv(SWEEP_COLUMNS, &outcome.rows)?)?;
    write_file(&out_dir.join("sweep_runs.csv"), &write_csv(SWEEP_RUN_COLUMNS, &outcome.runs)?)?;
    write_file(&out_dir.join("sweep_curves.csv"), &write_csv(CURVE_COLUMNS, &outcome.curves)?)?;
    let manifest = Manifest::new(cfg, source, command);
    write_file(&out_dir.join("manifest.json"), &json_bytes(&manifest)?)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_preset;

    #[test]
    fn exact_rationals_render_readably() {
        assert_eq!(exact_str(&Bits::from_integer(12)), "12");
        assert_eq!(exact_str(&Bits::new(51, 5)), "10.2");
        assert_eq!(exact_str(&Bits::new(1, 8)), "0.125");
        assert_eq!(exact_str(&Bits::new(1, 3)), "1/3");
        assert_eq!(exact_str(&Bits::new(-7, 2)), "-3.5");
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn alpha_sweep_is_the_cross_product() {
        let cfg = load_preset("dirichlet-sweep").unwrap();
        let points = sweep_points(&cfg, SweepAxis::Alpha).unwrap();
        assert_eq!(points.len(), 15);
        assert_eq!(points[0].value, "1");
        assert_eq!(points[14].seed, 5);
        assert_eq!(points[14].config.experiment.partition, PartitionScheme::Dirichlet(0.1));
        assert_eq!(points[14].config.seed(), 5);
    }

    #[test]
    fn missing_sweep_values_are_usage_errors() {
        let cfg = load_preset("synthetic-smoke").unwrap();
        assert!(matches!(sweep_points(&cfg, SweepAxis::Alpha), Err(AppError::Usage(_))));
        assert_eq!(sweep_points(&cfg, SweepAxis::Seeds).unwrap().len(), 1);
    }

    #[test]
    fn out_dir_precedence() {
        let cfg = load_preset("synthetic-smoke").unwrap();
        let env = Path::new("/tmp/env");
        assert_eq!(resolve_out_dir(Some(Path::new("x")), &cfg, Some(env)), PathBuf::from("x"));
        assert_eq!(resolve_out_dir(None, &cfg, Some(env)), env.join("synthetic-smoke"));
        assert_eq!(resolve_out_dir(None, &cfg, None), Path::new("runs").join("synthetic-smoke"));
    }
}
