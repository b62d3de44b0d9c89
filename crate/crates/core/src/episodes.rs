//! Datasets, synthetic mixtures and few-shot episode samplers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::Rng;

/// Draw budget for [`greedy_sample_k2k`] when the caller has no better bound.
pub const DEFAULT_MAX_ATTEMPTS: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Labelled feature vectors with contiguous class ids `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    items: Vec<Item>,
    class_index: Vec<Vec<usize>>,
    true_spread: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let dim = items
            .first()
            .map(|it| it.features.len())
            .ok_or_else(|| contract("dataset has no items"))?;
        if dim == 0 {
            return Err(contract("feature dimension must be >= 1"));
        }
        let num_classes = items.iter().map(|it| it.label).max().unwrap_or(0) + 1;
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, it) in items.iter().enumerate() {
            if it.features.len() != dim {
                return Err(contract(format!(
                    "item {i} has dimension {} but the dataset has {dim}",
                    it.features.len()
                )));
            }
            if it.features.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!("item {i} has non-finite features")));
            }
            class_index[it.label].push(i);
        }
        if let Some(empty) = class_index.iter().position(Vec::is_empty) {
            return Err(contract(format!(
                "labels must be contiguous: class {empty} has no items"
            )));
        }
        Ok(Self {
            dim,
            items,
            class_index,
            true_spread: None,
        })
    }

    /// Attaches the generator's per-class spread (one value per class).
    pub fn with_true_spread(mut self, spread: Vec<f64>) -> Result<Self> {
        if spread.len() != self.num_classes() {
            return Err(contract("one true spread value per class is required"));
        }
        self.true_spread = Some(spread);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, index: usize) -> &Item {
        &self.items[index]
    }

    /// Indices of the items of `class`.
    pub fn class_items(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn true_spread(&self) -> Option<&[f64]> {
        self.true_spread.as_deref()
    }
}

/// Parameters of a synthetic isotropic Gaussian-mixture dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Class means are uniform in `[−mean_scale, mean_scale]^dim`.
    pub mean_scale: f64,
    pub spread_lo: f64,
    pub spread_hi: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(contract("mixture needs >= 1 class, dimension and sample"));
        }
        if !self.spread_hi.is_finite()
            || self.spread_lo.is_nan()
            || self.spread_lo <= 0.0
            || self.spread_hi < self.spread_lo
        {
            return Err(contract(format!(
                "spread range must satisfy 0 < lo <= hi, got [{}, {}]",
                self.spread_lo, self.spread_hi
            )));
        }
        if !self.mean_scale.is_finite() || self.mean_scale < 0.0 {
            return Err(contract("mean_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Samples `mean_c + σ_c·N(0, I)` for every class, class by class.
pub fn make_gaussian_mixture(spec: &MixtureSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed, 0);
    let mut mean_rng = root.fork(1);
    let mut spread_rng = root.fork(2);
    let mut noise_rng = root.fork(3);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| mean_rng.uniform_in(-spec.mean_scale, spec.mean_scale))
                .collect()
        })
        .collect();
    let spreads: Vec<f64> = (0..spec.n_classes)
        .map(|_| spread_rng.uniform_in(spec.spread_lo, spec.spread_hi))
        .collect();
    let mut items = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (label, (mean, &sigma)) in means.iter().zip(&spreads).enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = mean.iter().map(|m| m + sigma * noise_rng.standard_normal()).collect();
            items.push(Item { features, label });
        }
    }
    Dataset::new(items)?.with_true_spread(spreads)
}

/// One N-way K-shot task. Labels are dataset class ids; `classes` is sorted
/// ascending so an item's position in it is its episode-local index.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Item>,
    pub query: Vec<Item>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    /// Episode-local index of a dataset class id.
    pub fn position(&self, label: usize) -> Option<usize> {
        self.classes.binary_search(&label).ok()
    }

    /// Support features grouped by episode-local class.
    pub fn support_by_class(&self) -> Vec<Vec<Vec<f64>>> {
        let mut groups = vec![Vec::new(); self.classes.len()];
        for it in &self.support {
            let pos = self.position(it.label).expect("support label belongs to the episode");
            groups[pos].push(it.features.clone());
        }
        groups
    }
}

/// `n` distinct classes chosen uniformly, sorted ascending.
pub fn sample_classes(ds: &Dataset, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(contract("an episode needs at least one class"));
    }
    if n > ds.num_classes() {
        return Err(Error::Sampling(format!(
            "requested {n} classes but the dataset has only {}",
            ds.num_classes()
        )));
    }
    let mut classes = rng.sample_indices(ds.num_classes(), n);
    classes.sort_unstable();
    Ok(classes)
}

/// Draws `k_shot + n_query` distinct items per class; the first `k_shot` form
/// the support set and the rest the query set.
pub fn sample_episode_for_classes(
    ds: &Dataset,
    classes: &[usize],
    k_shot: usize,
    n_query: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(contract("episode classes must be distinct"));
    }
    let mut episode = Episode {
        classes: sorted,
        support: Vec::new(),
        query: Vec::new(),
        support_indices: Vec::new(),
        query_indices: Vec::new(),
    };
    for &class in &episode.classes {
        if class >= ds.num_classes() {
            return Err(Error::Sampling(format!("class {class} is not in the dataset")));
        }
        let pool = ds.class_items(class);
        let need = k_shot + n_query;
        if pool.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} has {} items but {need} are needed",
                pool.len()
            )));
        }
        let picks = rng.sample_indices(pool.len(), need);
        for (j, &p) in picks.iter().enumerate() {
            let idx = pool[p];
            if j < k_shot {
                episode.support_indices.push(idx);
                episode.support.push(ds.item(idx).clone());
            } else {
                episode.query_indices.push(idx);
                episode.query.push(ds.item(idx).clone());
            }
        }
    }
    Ok(episode)
}

pub fn sample_episode(ds: &Dataset, n_way: usize, k_shot: usize, n_query: usize, rng: &mut Rng) -> Result<Episode> {
    let classes = sample_classes(ds, n_way, rng)?;
    sample_episode_for_classes(ds, &classes, k_shot, n_query, rng)
}

/// Splits the classes into disjoint train and test datasets. Each part is
/// relabelled to contiguous ids in ascending order of the original ids; true
/// spreads follow their classes.
pub fn split_train_test_classes(ds: &Dataset, n_test_classes: usize, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    let total = ds.num_classes();
    if n_test_classes == 0 || n_test_classes >= total {
        return Err(contract(format!(
            "test class count must be in 1..{total}, got {n_test_classes}"
        )));
    }
    let test: BTreeSet<usize> = rng.sample_indices(total, n_test_classes).into_iter().collect();
    let train: Vec<usize> = (0..total).filter(|c| !test.contains(c)).collect();
    let test: Vec<usize> = test.into_iter().collect();
    Ok((subset_classes(ds, &train)?, subset_classes(ds, &test)?))
}

/// The items of `classes` (ascending), relabelled to `0..classes.len()`.
pub fn subset_classes(ds: &Dataset, classes: &[usize]) -> Result<Dataset> {
    let mut items = Vec::new();
    for (new_label, &class) in classes.iter().enumerate() {
        for &idx in ds.class_items(class) {
            items.push(Item {
                features: ds.item(idx).features.clone(),
                label: new_label,
            });
        }
    }
    let subset = Dataset::new(items)?;
    match ds.true_spread() {
        Some(spread) => subset.with_true_spread(classes.iter().map(|&c| spread[c]).collect()),
        None => Ok(subset),
    }
}

/// An item carrying a multiset of labels (e.g. a sentence with several entities).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiLabelItem {
    pub id: u64,
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelDataset {
    items: Vec<MultiLabelItem>,
}

impl MultiLabelDataset {
    pub fn new(items: Vec<MultiLabelItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(contract("multi-label dataset has no items"));
        }
        if let Some(it) = items.iter().find(|it| it.labels.values().any(|&c| c == 0)) {
            return Err(contract(format!("item {} lists a label with count 0", it.id)));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[MultiLabelItem] {
        &self.items
    }
}

/// Result of greedy N-way K~2K sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedySample {
    /// Indices into the dataset's item list, in acceptance order.
    pub items: Vec<usize>,
    pub counts: BTreeMap<usize, usize>,
}

impl GreedySample {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.counts.keys().copied().collect()
    }
}

/// Greedy N-way K~2K-shot sampling for multi-label items.
///
/// Items are drawn uniformly at random. An item is rejected when adding its
/// whole label multiset would open more than `n_way` classes or push any count
/// above `2·k_shot`; items already taken are skipped. Sampling stops once
/// exactly `n_way` classes each reach `k_shot`. Every draw counts toward
/// `max_attempts`.
pub fn greedy_sample_k2k(
    ds: &MultiLabelDataset,
    n_way: usize,
    k_shot: usize,
    rng: &mut Rng,
    max_attempts: u64,
) -> Result<GreedySample> {
    if n_way == 0 || k_shot == 0 {
        return Err(contract("greedy sampling needs N >= 1 and K >= 1"));
    }
    let cap = 2 * k_shot;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut taken = vec![false; ds.items.len()];
    let mut selected = Vec::new();
    let done = |counts: &BTreeMap<usize, usize>| counts.len() == n_way && counts.values().all(|&c| c >= k_shot);
    for _ in 0..max_attempts {
        let idx = rng.below(ds.items.len());
        if taken[idx] {
            continue;
        }
        let mut updated = counts.clone();
        for (&class, &c) in &ds.items[idx].labels {
            *updated.entry(class).or_insert(0) += c;
        }
        if updated.len() > n_way || updated.values().any(|&c| c > cap) {
            continue;
        }
        counts = updated;
        taken[idx] = true;
        selected.push(idx);
        if done(&counts) {
            return Ok(GreedySample {
                items: selected,
                counts,
            });
        }
    }
    Err(Error::SamplingTimeout { attempts: max_attempts })
}
