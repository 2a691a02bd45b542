//! Datasets, non-IID partitions and the shared unlabeled probe set.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::rng::{self, Rng, Stream};

/// Redraw budget when a Dirichlet split leaves a device empty.
pub const DIRICHLET_MAX_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(&'static str),
    #[error("partition error: {0}")]
    Partition(&'static str),
    #[error("requested {requested} samples from a pool of {available}")]
    TooMany { requested: usize, available: usize },
    #[error("index {index} out of range for {len} samples")]
    Index { index: usize, len: usize },
}

/// Labeled samples with flat row-major feature storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Invalid("feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(DataError::Invalid("feature and label counts disagree"));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(DataError::Invalid("label out of range"));
        }
        Ok(Self {
            dim,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DataError::Index { index: i, len: self.len() });
            }
            features.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.dim, features, labels, self.num_classes)
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-class size of the held-out pool the shared set is drawn from.
    pub pool_per_class: usize,
    pub input_dim: usize,
    /// Standard deviation of each cluster-center coordinate; noise is unit variance.
    pub separation: f64,
    /// Gaussian sub-clusters per class. Above one, classes are not linearly
    /// separable.
    pub clusters_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 100,
            pool_per_class: 100,
            input_dim: 16,
            separation: 1.5,
            clusters_per_class: 3,
        }
    }
}

/// Train / test / shared-pool splits drawn from the same class-conditional blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub pool: Dataset,
    /// `cluster_centers[k]` holds the sub-cluster centers of class `k`.
    pub cluster_centers: Vec<Vec<Vec<f64>>>,
}

/// Gaussian mixtures: every class owns `clusters_per_class` centers drawn
/// `~ N(0, separation²)` per coordinate; samples cycle through their class's
/// centers and add `N(0, 1)` noise. The three splits are disjoint draws.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData, DataError> {
    if spec.num_classes < 2 {
        return Err(DataError::Invalid("at least two classes are required"));
    }
    if spec.train_per_class == 0 || spec.input_dim == 0 {
        return Err(DataError::Invalid("empty synthetic dataset"));
    }
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(DataError::Invalid("separation must be positive"));
    }
    if spec.clusters_per_class == 0 {
        return Err(DataError::Invalid("at least one cluster per class is required"));
    }
    let mut rng = rng::stream(seed, Stream::Dataset, &[]);
    let centers = Normal::new(0.0, spec.separation).expect("positive std");
    let cluster_centers: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.clusters_per_class)
                .map(|_| (0..spec.input_dim).map(|_| centers.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit std");
    let draw = |per_class: usize, rng: &mut Rng| -> Dataset {
        let mut features = Vec::with_capacity(per_class * spec.num_classes * spec.input_dim);
        let mut labels = Vec::with_capacity(per_class * spec.num_classes);
        for (k, class_centers) in cluster_centers.iter().enumerate() {
            for s in 0..per_class {
                let mean = &class_centers[s % class_centers.len()];
                features.extend(mean.iter().map(|m| m + noise.sample(rng)));
                labels.push(k);
            }
        }
        Dataset::new(spec.input_dim, features, labels, spec.num_classes).expect("consistent by construction")
    };
    let train = draw(spec.train_per_class, &mut rng);
    let test = draw(spec.test_per_class.max(1), &mut rng);
    let pool = draw(spec.pool_per_class.max(1), &mut rng);
    Ok(SyntheticData {
        train,
        test,
        pool,
        cluster_centers,
    })
}

/// Disjoint, nonempty per-device index lists into a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(assignment: Vec<Vec<usize>>, dataset_len: usize) -> Result<Self, DataError> {
        if assignment.is_empty() {
            return Err(DataError::Partition("no devices"));
        }
        let mut seen = vec![false; dataset_len];
        for list in &assignment {
            if list.is_empty() {
                return Err(DataError::Partition("a device holds no samples"));
            }
            for &i in list {
                if i >= dataset_len {
                    return Err(DataError::Index { index: i, len: dataset_len });
                }
                if seen[i] {
                    return Err(DataError::Partition("a sample is assigned twice"));
                }
                seen[i] = true;
            }
        }
        Ok(Self { assignment })
    }

    pub fn num_devices(&self) -> usize {
        self.assignment.len()
    }

    pub fn device(&self, i: usize) -> &[usize] {
        &self.assignment[i]
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn into_assignment(self) -> Vec<Vec<usize>> {
        self.assignment
    }
}

/// Each device holds exactly `classes_per_device` classes, assigned round
/// robin (`device i` gets classes `(i·c + j) mod K`). Every holder of a class
/// gets an equal share of it, so all devices hold the same number of samples.
pub fn partition_k_class(
    d: &Dataset,
    n_devices: usize,
    classes_per_device: usize,
    seed: u64,
) -> Result<Partition, DataError> {
    let k = d.num_classes();
    if n_devices == 0 || classes_per_device == 0 {
        return Err(DataError::Partition("device and class counts must be positive"));
    }
    if classes_per_device > k {
        return Err(DataError::Partition("more classes per device than classes"));
    }
    if n_devices * classes_per_device < k {
        return Err(DataError::Partition("some class would be held by no device"));
    }
    let owned: Vec<Vec<usize>> = (0..n_devices)
        .map(|i| (0..classes_per_device).map(|j| (i * classes_per_device + j) % k).collect())
        .collect();
    let mut holders = vec![Vec::new(); k];
    for (dev, classes) in owned.iter().enumerate() {
        for &c in classes {
            holders[c].push(dev);
        }
    }
    let mut rng = rng::stream(seed, Stream::Partition, &[n_devices as u64, classes_per_device as u64]);
    let mut by_class = d.indices_by_class();
    for list in &mut by_class {
        list.shuffle(&mut rng);
    }
    let share = holders
        .iter()
        .zip(&by_class)
        .map(|(h, idx)| idx.len() / h.len())
        .min()
        .unwrap_or(0);
    if share == 0 {
        return Err(DataError::Partition("not enough samples per class for every holder"));
    }
    let mut assignment = vec![Vec::new(); n_devices];
    for (c, devices) in holders.iter().enumerate() {
        for (slot, &dev) in devices.iter().enumerate() {
            assignment[dev].extend_from_slice(&by_class[c][slot * share..(slot + 1) * share]);
        }
    }
    for list in &mut assignment {
        list.sort_unstable();
    }
    Partition::new(assignment, d.len())
}

/// Uniform random split into `n_devices` near-equal parts.
pub fn partition_iid(d: &Dataset, n_devices: usize, seed: u64) -> Result<Partition, DataError> {
    if n_devices == 0 || d.len() < n_devices {
        return Err(DataError::Partition("need at least one sample per device"));
    }
    let mut rng = rng::stream(seed, Stream::Partition, &[n_devices as u64]);
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut rng);
    let counts = split_counts(d.len(), &vec![1.0 / n_devices as f64; n_devices]);
    let mut assignment = Vec::with_capacity(n_devices);
    let mut start = 0;
    for c in counts {
        let mut part = order[start..start + c].to_vec();
        part.sort_unstable();
        assignment.push(part);
        start += c;
    }
    Partition::new(assignment, d.len())
}

/// Splits every class across devices with shares drawn from `Dirichlet(α·1)`.
/// The whole draw is repeated (up to [`DIRICHLET_MAX_TRIES`]) until no device
/// is empty.
pub fn partition_dirichlet(d: &Dataset, n_devices: usize, alpha: f64, seed: u64) -> Result<Partition, DataError> {
    if n_devices == 0 {
        return Err(DataError::Partition("device count must be positive"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::Partition("alpha must be positive"));
    }
    if d.len() < n_devices {
        return Err(DataError::Partition("fewer samples than devices"));
    }
    let mut rng = rng::stream(seed, Stream::Partition, &[n_devices as u64, alpha.to_bits()]);
    let by_class = d.indices_by_class();
    for _ in 0..DIRICHLET_MAX_TRIES {
        let mut assignment = vec![Vec::new(); n_devices];
        for class_indices in &by_class {
            let mut idx = class_indices.clone();
            idx.shuffle(&mut rng);
            let shares = dirichlet(&mut rng, n_devices, alpha);
            let counts = split_counts(idx.len(), &shares);
            let mut start = 0;
            for (dev, &c) in counts.iter().enumerate() {
                assignment[dev].extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if assignment.iter().all(|l| !l.is_empty()) {
            for list in &mut assignment {
                list.sort_unstable();
            }
            return Partition::new(assignment, d.len());
        }
    }
    Err(DataError::Partition("could not give every device a sample"))
}

/// A symmetric Dirichlet draw via normalized Gamma variates.
pub fn dirichlet(rng: &mut Rng, n: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Integer counts summing to `total`, proportional to `shares` (largest remainder).
fn split_counts(total: usize, shares: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| *r as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - counts[a] as f64;
        let fb = raw[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// How the shared set is drawn from the held-out pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SharedMode {
    Iid,
    /// Label composition skewed by a `Dirichlet(α)` class-share draw.
    Dirichlet { alpha: f64 },
}

/// Unlabeled shared probe set `D_s`. Order is fixed for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSet {
    dim: usize,
    features: Vec<f64>,
    /// Indices into the pool the samples were drawn from.
    ids: Vec<usize>,
}

impl SharedSet {
    pub fn new(dim: usize, features: Vec<f64>, ids: Vec<usize>) -> Result<Self, DataError> {
        if features.len() != dim * ids.len() {
            return Err(DataError::Invalid("feature and id counts disagree"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Invalid("duplicate shared-sample id"));
        }
        Ok(Self { dim, features, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Draws `count` samples from `pool` and drops their labels.
pub fn sample_shared(pool: &Dataset, count: usize, mode: SharedMode, seed: u64) -> Result<SharedSet, DataError> {
    if count > pool.len() {
        return Err(DataError::TooMany {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = rng::stream(seed, Stream::Shared, &[count as u64]);
    let mut ids = match mode {
        SharedMode::Iid => {
            let mut all: Vec<usize> = (0..pool.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(count);
            all
        }
        SharedMode::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(DataError::Invalid("alpha must be positive"));
            }
            skewed_draw(pool, count, alpha, &mut rng)
        }
    };
    ids.shuffle(&mut rng);
    let mut features = Vec::with_capacity(count * pool.dim());
    for &i in &ids {
        features.extend_from_slice(pool.input(i));
    }
    SharedSet::new(pool.dim(), features, ids)
}

fn skewed_draw(pool: &Dataset, count: usize, alpha: f64, rng: &mut Rng) -> Vec<usize> {
    let mut by_class = pool.indices_by_class();
    for list in &mut by_class {
        list.shuffle(rng);
    }
    let shares = dirichlet(rng, pool.num_classes(), alpha);
    let mut want = split_counts(count, &shares);
    // move any excess over class availability to classes with room
    let mut excess = 0;
    for (w, list) in want.iter_mut().zip(&by_class) {
        if *w > list.len() {
            excess += *w - list.len();
            *w = list.len();
        }
    }
    while excess > 0 {
        let mut moved = false;
        for (w, list) in want.iter_mut().zip(&by_class) {
            if excess > 0 && *w < list.len() {
                *w += 1;
                excess -= 1;
                moved = true;
            }
        }
        debug_assert!(moved, "count <= pool size guarantees room");
        if !moved {
            break;
        }
    }
    let mut ids = Vec::with_capacity(count);
    for (w, list) in want.iter().zip(&by_class) {
        ids.extend_from_slice(&list[..*w]);
    }
    ids
}

/// `KL(empirical label distribution ‖ uniform)` per device, with `0·log 0 = 0`.
pub fn label_kl_from_uniform(p: &Partition, d: &Dataset) -> Vec<f64> {
    let k = d.num_classes() as f64;
    p.assignment()
        .iter()
        .map(|list| {
            let hist = d.class_histogram(list);
            let total = list.len() as f64;
            hist.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let q = c as f64 / total;
                    q * math::ln(q * k)
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let spec = SyntheticSpec {
            num_classes: 10,
            train_per_class: 20,
            test_per_class: 5,
            pool_per_class: 10,
            input_dim: 4,
            separation: 1.0,
            clusters_per_class: 1,
        };
        make_synthetic(&spec, 3).unwrap().train
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let spec = SyntheticSpec {
            num_classes: 3,
            train_per_class: 100,
            ..SyntheticSpec::default()
        };
        let a = make_synthetic(&spec, 1).unwrap();
        let b = make_synthetic(&spec, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 300);
        assert_eq!(a.train.class_histogram(&(0..300).collect::<Vec<_>>()), vec![100; 3]);
        let c = make_synthetic(&spec, 2).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn one_class_partition_gives_device_i_class_i() {
        let d = small();
        let p = partition_k_class(&d, 10, 1, 0).unwrap();
        for i in 0..10 {
            assert!(p.device(i).iter().all(|&s| d.label(s) == i));
            assert_eq!(p.device(i).len(), 20);
        }
    }

    #[test]
    fn two_class_partition_covers_each_class_twice() {
        let d = small();
        let p = partition_k_class(&d, 10, 2, 0).unwrap();
        let mut holders = vec![0; 10];
        for i in 0..10 {
            let h = d.class_histogram(p.device(i));
            assert_eq!(h.iter().filter(|&&c| c > 0).count(), 2);
            for (c, &n) in h.iter().enumerate() {
                if n > 0 {
                    holders[c] += 1;
                }
            }
        }
        assert_eq!(holders, vec![2; 10]);
    }

    #[test]
    fn single_device_holds_everything() {
        let d = small();
        let p = partition_k_class(&d, 1, 10, 0).unwrap();
        assert_eq!(p.device(0).len(), d.len());
    }

    #[test]
    fn infeasible_k_class_partition() {
        let d = small();
        assert!(partition_k_class(&d, 3, 2, 0).is_err());
        assert!(partition_k_class(&d, 3, 11, 0).is_err());
    }

    #[test]
    fn partition_rejects_overlap_and_empty() {
        assert!(Partition::new(vec![vec![0, 1], vec![1]], 3).is_err());
        assert!(Partition::new(vec![vec![0], vec![]], 3).is_err());
        assert!(Partition::new(vec![vec![5]], 3).is_err());
    }

    #[test]
    fn kl_values() {
        let d = small();
        let one = partition_k_class(&d, 10, 1, 0).unwrap();
        for kl in label_kl_from_uniform(&one, &d) {
            assert!((kl - core::f64::consts::LN_10).abs() < 1e-12);
        }
        let two = partition_k_class(&d, 10, 2, 0).unwrap();
        for kl in label_kl_from_uniform(&two, &d) {
            assert!((kl - math::ln(5.0)).abs() < 1e-12);
        }
        let all = partition_k_class(&d, 1, 10, 0).unwrap();
        assert!(label_kl_from_uniform(&all, &d)[0].abs() < 1e-12);
    }

    #[test]
    fn split_counts_sum_to_total() {
        assert_eq!(split_counts(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(split_counts(7, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn shared_set_too_large() {
        let d = small();
        assert!(matches!(
            sample_shared(&d, d.len() + 1, SharedMode::Iid, 0),
            Err(DataError::TooMany { .. })
        ));
    }

    #[test]
    fn shared_full_pool_is_a_permutation() {
        let d = small();
        let s = sample_shared(&d, d.len(), SharedMode::Iid, 4).unwrap();
        let mut ids = s.ids().to_vec();
        assert_ne!(ids, (0..d.len()).collect::<Vec<_>>());
        ids.sort_unstable();
        assert_eq!(ids, (0..d.len()).collect::<Vec<_>>());
        assert_eq!(s.input(0), d.input(s.ids()[0]));
    }
}
