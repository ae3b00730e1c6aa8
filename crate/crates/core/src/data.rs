//! Datasets, the synthetic Gaussian-blob task, and client partitioning.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    feature_dim: usize,
    labels: Vec<u32>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        feature_dim: usize,
        labels: Vec<u32>,
        class_count: usize,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(invalid(format!(
                "{} feature values do not fill {} rows of width {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= class_count) {
            return Err(invalid(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            features,
            feature_dim,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            feature_dim: self.feature_dim,
            labels,
            class_count: self.class_count,
        }
    }

    pub fn class_histogram(&self, rows: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for r in rows {
            counts[self.labels[r] as usize] += 1;
        }
        counts
    }
}

/// Shannon entropy (nats) of the label distribution over `rows`.
pub fn label_entropy(data: &Dataset, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let n = rows.len() as f64;
    data.class_histogram(rows.iter().copied())
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f32,
    /// Scale of the simplex the class means sit on.
    pub separation: f32,
}

/// Gaussian blobs: class `c` has mean `separation · e_c` and isotropic
/// standard deviation `spread`. Rows are grouped by class.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(invalid("synthetic task needs at least two classes"));
    }
    if spec.per_class == 0 {
        return Err(invalid("synthetic task needs at least one sample per class"));
    }
    if spec.feature_dim < spec.classes {
        return Err(invalid(format!(
            "feature_dim {} cannot hold {} simplex vertices",
            spec.feature_dim, spec.classes
        )));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite() && spec.separation.is_finite()) {
        return Err(invalid("spread must be finite and non-negative"));
    }
    let mut rng = rng_from_seed(seed);
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            for j in 0..spec.feature_dim {
                let mean = if j == c { spec.separation } else { 0.0 };
                let noise: f32 = rng.sample(StandardNormal);
                features.push(mean + spec.spread * noise);
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(features, spec.feature_dim, labels, spec.classes)
}

/// Disjoint client shards over the row indices of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    /// Dirichlet concentration; `None` for IID shards.
    pub alpha: Option<f64>,
    pub seed: u64,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    /// Whether the shards are pairwise disjoint, non-empty, and cover `0..n`.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for shard in &self.assignments {
            if shard.is_empty() {
                return false;
            }
            for &i in shard {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_client_count(n: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(invalid("need at least one client"));
    }
    if n < clients {
        return Err(invalid(format!("{n} samples cannot fill {clients} clients")));
    }
    Ok(())
}

/// Random permutation split into near-equal shards.
pub fn partition_iid(data: &Dataset, clients: usize, seed: u64) -> Result<Partition> {
    let n = data.len();
    check_client_count(n, clients)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let base = n / clients;
    let extra = n % clients;
    let mut assignments = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        assignments.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition {
        assignments,
        alpha: None,
        seed,
    })
}

/// Draws attempted before a Dirichlet partition is declared infeasible.
pub const DIRICHLET_RETRIES: usize = 100;

/// Per-class Dirichlet(α) label skew. Draws that leave a client empty are
/// discarded and redrawn.
pub fn partition_dirichlet(
    data: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    check_client_count(data.len(), clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid("dirichlet alpha must be positive and finite"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| invalid(format!("alpha {alpha}: {e}")))?;
    let mut rng = rng_from_seed(seed);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y as usize].push(i);
    }

    let mut proportions = vec![0.0f64; clients];
    for _ in 0..DIRICHLET_RETRIES {
        let mut assignments = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut total = 0.0;
            for p in proportions.iter_mut() {
                *p = gamma.sample(&mut rng);
                total += *p;
            }
            if total.is_nan() || total <= 0.0 {
                // Every gamma draw underflowed; put the class on one client.
                let pick = rng.random_range(0..clients);
                proportions.iter_mut().for_each(|p| *p = 0.0);
                proportions[pick] = 1.0;
                total = 1.0;
            }
            let m = members.len() as f64;
            let mut cumulative = 0.0;
            let mut start = 0usize;
            for (c, p) in proportions.iter().enumerate() {
                cumulative += p / total;
                let end = if c + 1 == clients {
                    members.len()
                } else {
                    (libm::round(cumulative * m) as usize).clamp(start, members.len())
                };
                assignments[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(Partition {
                assignments,
                alpha: Some(alpha),
                seed,
            });
        }
    }
    Err(Error::PartitionInfeasible {
        retries: DIRICHLET_RETRIES,
    })
}

/// Random disjoint split; the first part holds `⌊fraction · n⌋` rows.
pub fn split_pretrain(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("pre-training fraction must lie in (0, 1)"));
    }
    let n = data.len();
    let take = libm::floor(fraction * n as f64) as usize;
    if take == 0 || take == n {
        return Err(invalid(format!(
            "fraction {fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (pre, fed) = order.split_at(take);
    Ok((data.subset(pre), data.subset(fed)))
}
