//! Experiment configuration files.
//!
//! Configs are TOML. Every table rejects unknown keys. Counts are read as
//! signed integers so that a negative value produces a message naming the
//! field rather than a generic type error. See `presets/` for complete
//! examples and the README for the full schema.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use quantfl_core::costing::wire::BoundaryPrecision;
use quantfl_core::costing::{CodebookScope, CostConfig, DownlinkMode, PerLayer};
use quantfl_core::data::SyntheticSpec;
use quantfl_core::federation::{
    Aggregation, ExperimentConfig, PartitionScheme, Pretrain, Quantiser, RoundConfig,
};
use quantfl_core::model::LocalTrainConfig;

/// Presets shipped with the binary: `(name, TOML source)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("mnist-paper-cost", include_str!("../presets/mnist-paper-cost.toml")),
    ("synthetic-smoke", include_str!("../presets/synthetic-smoke.toml")),
    ("dirichlet-sweep", include_str!("../presets/dirichlet-sweep.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, src)| *src)
}

/// A configuration problem, anchored to a line of the source when possible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source_name: String,
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.source_name)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
        }
        write!(f, ": ")?;
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Seed of the synthetic generator; defaults to the root seed.
    pub seed: Option<i64>,
    pub classes: Option<i64>,
    pub per_class: Option<i64>,
    pub test_per_class: Option<i64>,
    pub feature_dim: Option<i64>,
    pub spread: Option<f64>,
    pub separation: Option<f64>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub expected_train: Option<i64>,
    pub expected_test: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub hidden: Vec<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    #[default]
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default)]
    pub kind: PartitionKind,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationKind {
    #[default]
    Unweighted,
    DatasetSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub clients: i64,
    pub sampled: i64,
    pub rounds: i64,
    #[serde(default = "default_refresh")]
    pub refresh_period: i64,
    #[serde(default)]
    pub aggregation: AggregationKind,
}

fn default_refresh() -> i64 {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantiserKind {
    None,
    Bu,
    Bq,
    Qsgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantiserSection {
    pub kind: QuantiserKind,
    #[serde(default = "default_levels")]
    pub levels: i64,
    #[serde(default = "default_boundary_bits")]
    pub boundary_bits: i64,
    #[serde(default = "default_margin")]
    pub range_margin: f64,
}

fn default_levels() -> i64 {
    64
}

fn default_boundary_bits() -> i64 {
    16
}

fn default_margin() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSection {
    #[serde(default = "default_epochs")]
    pub epochs: i64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: i64,
}

impl Default for LocalSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
        }
    }
}

fn default_epochs() -> i64 {
    2
}

fn default_lr() -> f64 {
    0.05
}

fn default_batch() -> i64 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: i64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeKind {
    #[default]
    PerLayer,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DownlinkKind {
    #[default]
    Full,
    Quantised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Overrides the layer sizes implied by the model.
    pub layer_dims: Option<Vec<i64>>,
    /// Bucket counts to tabulate; defaults to the quantiser's.
    pub levels: Option<Vec<i64>>,
    pub boundary_bits: Option<i64>,
    pub refresh_period: Option<i64>,
    #[serde(default)]
    pub codebook_scope: ScopeKind,
    #[serde(default)]
    pub endpoints_sent: bool,
    #[serde(default)]
    pub downlink: DownlinkKind,
    pub downlink_levels: Option<i64>,
    pub downlink_refresh_period: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub alpha: Option<Vec<f64>>,
    pub levels: Option<Vec<i64>>,
    pub seeds: Option<Vec<i64>>,
}

/// The file form of a configuration, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: Option<String>,
    #[serde(default)]
    pub seed: i64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub partition: PartitionSection,
    pub federation: FederationSection,
    pub quantiser: QuantiserSection,
    #[serde(default)]
    pub local: LocalSection,
    pub pretrain: Option<PretrainSection>,
    pub cost: Option<CostSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        test_per_class: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        feature_dim: usize,
        expected_train: Option<usize>,
        expected_test: Option<usize>,
    },
}

impl DataSource {
    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Synthetic { spec, .. } => spec.feature_dim,
            Self::Idx { feature_dim, .. } => *feature_dim,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Synthetic { spec, .. } => spec.classes,
            Self::Idx { .. } => crate::idx::CLASSES,
        }
    }
}

/// Settings of the `cost` command.
#[derive(Debug, Clone, PartialEq)]
pub struct CostPlan {
    pub layer_dims: Vec<usize>,
    pub levels: Vec<usize>,
    /// Template; `levels` is replaced per tabulated value.
    pub config: CostConfig,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepPlan {
    pub alpha: Option<Vec<f64>>,
    pub levels: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
}

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    pub experiment: ExperimentConfig,
    pub cost: CostPlan,
    pub sweep: SweepPlan,
    /// The file form, kept for the manifest.
    pub file: ConfigFile,
}

impl Config {
    pub fn seed(&self) -> u64 {
        self.experiment.round.seed
    }

    /// Replaces the root seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.round.seed = seed;
        if let DataSource::Synthetic { seed: s, .. } = &mut self.data {
            if self.file.dataset.seed.is_none() {
                *s = seed;
            }
        }
        self.file.seed = seed as i64;
        self
    }
}

/// Parses and validates `text`; `source_name` labels messages.
pub fn parse_config(text: &str, source_name: &str) -> Result<Config, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of_offset(text, s.start));
        ConfigError {
            source_name: source_name.to_owned(),
            line,
            field: None,
            message: e.message().trim().to_owned(),
        }
    })?;
    Validator { text, source_name }.validate(file)
}

pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        source_name: path.display().to_string(),
        line: None,
        field: None,
        message: e.to_string(),
    })?;
    parse_config(&text, &path.display().to_string())
}

pub fn load_preset(name: &str) -> Result<Config, ConfigError> {
    let text = preset(name).ok_or_else(|| ConfigError {
        source_name: format!("preset {name}"),
        line: None,
        field: None,
        message: format!(
            "unknown preset; available: {}",
            PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ),
    })?;
    parse_config(text, &format!("preset:{name}"))
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned inside `[table]` (or at top level when
/// `table` is empty).
fn locate(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            current = header.trim_end_matches(']').trim().to_owned();
            continue;
        }
        if current == table {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    if table.is_empty() {
        None
    } else {
        text.lines().position(|l| l.trim() == format!("[{table}]")).map(|i| i + 1)
    }
}

struct Validator<'a> {
    text: &'a str,
    source_name: &'a str,
}

impl Validator<'_> {
    fn err(&self, table: &str, key: &str, message: impl Into<String>) -> ConfigError {
        let field = if table.is_empty() { key.to_owned() } else { format!("{table}.{key}") };
        ConfigError {
            source_name: self.source_name.to_owned(),
            line: locate(self.text, table, key),
            field: Some(field),
            message: message.into(),
        }
    }

    fn positive(&self, table: &str, key: &str, v: i64) -> Result<usize, ConfigError> {
        if v < 1 {
            return Err(self.err(table, key, format!("must be a positive integer, got {v}")));
        }
        Ok(v as usize)
    }

    fn non_negative(&self, table: &str, key: &str, v: i64) -> Result<usize, ConfigError> {
        if v < 0 {
            return Err(self.err(table, key, format!("must not be negative, got {v}")));
        }
        Ok(v as usize)
    }

    fn required<T: Copy>(&self, table: &str, key: &str, v: Option<T>) -> Result<T, ConfigError> {
        v.ok_or_else(|| self.err(table, key, "is required"))
    }

    fn finite(&self, table: &str, key: &str, v: f64, lo: f64) -> Result<f64, ConfigError> {
        if !(v.is_finite() && v >= lo) {
            return Err(self.err(table, key, format!("must be a finite number of at least {lo}, got {v}")));
        }
        Ok(v)
    }

    fn validate(&self, file: ConfigFile) -> Result<Config, ConfigError> {
        let seed = self.non_negative("", "seed", file.seed)? as u64;
        let data = self.dataset(&file.dataset, seed)?;

        let hidden = file
            .model
            .hidden
            .iter()
            .map(|&w| self.positive("model", "hidden", w))
            .collect::<Result<Vec<_>, _>>()?;

        let fed = &file.federation;
        let clients = self.positive("federation", "clients", fed.clients)?;
        let sampled = self.positive("federation", "sampled", fed.sampled)?;
        if sampled > clients {
            return Err(self.err(
                "federation",
                "sampled",
                format!("cannot exceed federation.clients ({clients}), got {sampled}"),
            ));
        }
        let rounds = self.non_negative("federation", "rounds", fed.rounds)?;
        let refresh_period = self.positive("federation", "refresh_period", fed.refresh_period)?;

        let q = &file.quantiser;
        let levels = self.positive("quantiser", "levels", q.levels)?;
        if levels > u32::MAX as usize {
            return Err(self.err("quantiser", "levels", "must be below 2^32"));
        }
        let quantiser = match q.kind {
            QuantiserKind::None => Quantiser::None,
            QuantiserKind::Bu => Quantiser::BucketUniform { levels },
            QuantiserKind::Bq => Quantiser::BucketQuantile { levels },
            QuantiserKind::Qsgd => Quantiser::Qsgd { levels: levels as u32 },
        };
        let boundary_bits = self.positive("quantiser", "boundary_bits", q.boundary_bits)?;
        let boundary_precision = BoundaryPrecision::from_bits(boundary_bits as u32)
            .map_err(|_| self.err("quantiser", "boundary_bits", format!("must be 16 or 32, got {boundary_bits}")))?;
        let range_margin = self.finite("quantiser", "range_margin", q.range_margin, 1.0)? as f32;

        let local = LocalTrainConfig {
            epochs: self.non_negative("local", "epochs", file.local.epochs)?,
            learning_rate: self.finite("local", "learning_rate", file.local.learning_rate, 0.0)? as f32,
            batch_size: self.positive("local", "batch_size", file.local.batch_size)?,
            seed: 0,
        };

        let pretrain = match &file.pretrain {
            None => None,
            Some(p) => {
                let epochs = self.non_negative("pretrain", "epochs", p.epochs)?;
                if !(p.fraction > 0.0 && p.fraction < 1.0) {
                    return Err(self.err("pretrain", "fraction", format!("must lie in (0, 1), got {}", p.fraction)));
                }
                Some(Pretrain { epochs, fraction: p.fraction })
            }
        };

        let partition = match file.partition.kind {
            PartitionKind::Iid => {
                if file.partition.alpha.is_some() {
                    return Err(self.err("partition", "alpha", "only applies to kind = \"dirichlet\""));
                }
                PartitionScheme::Iid
            }
            PartitionKind::Dirichlet => {
                let alpha = self.required("partition", "alpha", file.partition.alpha)?;
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(self.err("partition", "alpha", format!("must be positive, got {alpha}")));
                }
                PartitionScheme::Dirichlet(alpha)
            }
        };

        let round = RoundConfig {
            total_clients: clients,
            sampled_per_round: sampled,
            rounds,
            quantiser,
            refresh_period,
            boundary_precision,
            range_margin,
            aggregation: match fed.aggregation {
                AggregationKind::Unweighted => Aggregation::Unweighted,
                AggregationKind::DatasetSize => Aggregation::DatasetSize,
            },
            pretrain,
            local,
            seed,
        };
        let experiment = ExperimentConfig {
            round,
            hidden: hidden.clone(),
            partition,
        };

        let mut widths = vec![data.feature_dim()];
        widths.extend_from_slice(&hidden);
        widths.push(data.classes());
        let model_dims: Vec<usize> = widths.windows(2).map(|w| w[0] * w[1] + w[1]).collect();
        let cost = self.cost(file.cost.clone().unwrap_or_default(), model_dims, levels, boundary_bits, refresh_period)?;
        let sweep = self.sweep(file.sweep.clone().unwrap_or_default())?;

        Ok(Config {
            name: file.name.clone().unwrap_or_else(|| "experiment".to_owned()),
            out_dir: file.out_dir.clone(),
            data,
            experiment,
            cost,
            sweep,
            file,
        })
    }

    fn dataset(&self, d: &DatasetSection, root_seed: u64) -> Result<DataSource, ConfigError> {
        const T: &str = "dataset";
        match d.kind {
            DatasetKind::Synthetic => {
                let classes = self.positive(T, "classes", self.required(T, "classes", d.classes)?)?;
                if classes < 2 {
                    return Err(self.err(T, "classes", "needs at least 2 classes"));
                }
                let feature_dim = match d.feature_dim {
                    Some(f) => self.positive(T, "feature_dim", f)?,
                    None => classes,
                };
                if feature_dim < classes {
                    return Err(self.err(T, "feature_dim", format!("must be at least dataset.classes ({classes})")));
                }
                for (key, set) in [
                    ("train_images", d.train_images.is_some()),
                    ("train_labels", d.train_labels.is_some()),
                    ("test_images", d.test_images.is_some()),
                    ("test_labels", d.test_labels.is_some()),
                    ("expected_train", d.expected_train.is_some()),
                    ("expected_test", d.expected_test.is_some()),
                ] {
                    if set {
                        return Err(self.err(T, key, "only applies to kind = \"idx\""));
                    }
                }
                let spec = SyntheticSpec {
                    classes,
                    per_class: self.positive(T, "per_class", self.required(T, "per_class", d.per_class)?)?,
                    feature_dim,
                    spread: self.finite(T, "spread", d.spread.unwrap_or(1.0), 0.0)? as f32,
                    separation: self.finite(T, "separation", d.separation.unwrap_or(3.0), f64::MIN)? as f32,
                };
                let test_per_class = match d.test_per_class {
                    Some(v) => self.positive(T, "test_per_class", v)?,
                    None => spec.per_class,
                };
                let seed = match d.seed {
                    Some(s) => self.non_negative(T, "seed", s)? as u64,
                    None => root_seed,
                };
                Ok(DataSource::Synthetic { spec, test_per_class, seed })
            }
            DatasetKind::Idx => {
                let path = |key: &str, p: &Option<PathBuf>| {
                    p.clone().ok_or_else(|| self.err(T, key, "is required for kind = \"idx\""))
                };
                for (key, set) in [
                    ("classes", d.classes.is_some()),
                    ("per_class", d.per_class.is_some()),
                    ("test_per_class", d.test_per_class.is_some()),
                    ("spread", d.spread.is_some()),
                    ("separation", d.separation.is_some()),
                ] {
                    if set {
                        return Err(self.err(T, key, "only applies to kind = \"synthetic\""));
                    }
                }
                Ok(DataSource::Idx {
                    train_images: path("train_images", &d.train_images)?,
                    train_labels: path("train_labels", &d.train_labels)?,
                    test_images: path("test_images", &d.test_images)?,
                    test_labels: path("test_labels", &d.test_labels)?,
                    feature_dim: self.positive(T, "feature_dim", d.feature_dim.unwrap_or(784))?,
                    expected_train: d.expected_train.map(|v| self.positive(T, "expected_train", v)).transpose()?,
                    expected_test: d.expected_test.map(|v| self.positive(T, "expected_test", v)).transpose()?,
                })
            }
        }
    }

    fn cost(
        &self,
        c: CostSection,
        model_dims: Vec<usize>,
        levels: usize,
        boundary_bits: usize,
        refresh_period: usize,
    ) -> Result<CostPlan, ConfigError> {
        const T: &str = "cost";
        let layer_dims = match &c.layer_dims {
            Some(dims) if dims.is_empty() => return Err(self.err(T, "layer_dims", "must not be empty")),
            Some(dims) => dims
                .iter()
                .map(|&d| self.positive(T, "layer_dims", d))
                .collect::<Result<Vec<_>, _>>()?,
            None => model_dims,
        };
        let levels = match &c.levels {
            Some(l) if l.is_empty() => return Err(self.err(T, "levels", "must not be empty")),
            Some(l) => l.iter().map(|&v| self.positive(T, "levels", v)).collect::<Result<Vec<_>, _>>()?,
            None => vec![levels],
        };
        let boundary_bits = match c.boundary_bits {
            Some(b) => self.positive(T, "boundary_bits", b)?,
            None => boundary_bits,
        };
        let refresh_period = match c.refresh_period {
            Some(t) => self.positive(T, "refresh_period", t)?,
            None => refresh_period,
        };
        let downlink = match c.downlink {
            DownlinkKind::Full => DownlinkMode::FullPrecision,
            DownlinkKind::Quantised => DownlinkMode::Quantised {
                levels: PerLayer::uniform(self.positive(
                    T,
                    "downlink_levels",
                    self.required(T, "downlink_levels", c.downlink_levels)?,
                )?),
                refresh_period: PerLayer::uniform(match c.downlink_refresh_period {
                    Some(t) => self.positive(T, "downlink_refresh_period", t)?,
                    None => refresh_period,
                }),
            },
        };
        let config = CostConfig {
            boundary_bits: boundary_bits as u32,
            levels: PerLayer::uniform(levels[0]),
            refresh_period: PerLayer::uniform(refresh_period),
            downlink,
            scope: match c.codebook_scope {
                ScopeKind::PerLayer => CodebookScope::PerLayer,
                ScopeKind::Shared => CodebookScope::Shared,
            },
            endpoints_sent: c.endpoints_sent,
        };
        Ok(CostPlan { layer_dims, levels, config })
    }

    fn sweep(&self, s: SweepSection) -> Result<SweepPlan, ConfigError> {
        const T: &str = "sweep";
        let nonempty = |key: &str, len: Option<usize>| match len {
            Some(0) => Err(self.err(T, key, "must list at least one value")),
            _ => Ok(()),
        };
        nonempty("alpha", s.alpha.as_ref().map(Vec::len))?;
        nonempty("levels", s.levels.as_ref().map(Vec::len))?;
        nonempty("seeds", s.seeds.as_ref().map(Vec::len))?;
        if let Some(a) = &s.alpha {
            if let Some(bad) = a.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(self.err(T, "alpha", format!("values must be positive, got {bad}")));
            }
        }
        Ok(SweepPlan {
            alpha: s.alpha,
            levels: s
                .levels
                .map(|l| l.iter().map(|&v| self.positive(T, "levels", v)).collect::<Result<Vec<_>, _>>())
                .transpose()?,
            seeds: s
                .seeds
                .map(|l| {
                    l.iter()
                        .map(|&v| self.non_negative(T, "seeds", v).map(|v| v as u64))
                        .collect::<Result<Vec<_>, _>>()
                })
                .transpose()?,
        })
    }
}
