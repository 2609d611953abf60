//! Desk-scale datasets: IDX ingestion, reproducible synthetic generation,
//! and deterministic train/val/test and client splits.

pub mod idx;
pub mod synthetic;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use idx::{load_idx, write_idx};
pub use synthetic::generate_synthetic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    IdxFile,
    Synthetic { seed: u64 },
}

/// Images in `[0,1]` with class labels.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub images: Tensor, // [N,C,H,W]
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl DataSet {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        n_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.n_samples() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images vs {} labels",
                images.n_samples(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label: bad, n_classes });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig("pixel values outside [0,1]".into()));
        }
        Ok(Self { images, labels, n_classes, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// New dataset from the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> DataSet {
        let per = self.images.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        DataSet {
            images: Tensor::new(shape, data).expect("subset shape consistent"),
            labels,
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }
}

/// Fractions summing to one plus the permutation seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&f| f < 0.0) {
            return Err(Error::InvalidConfig("split fractions must be non-negative".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {sum}, want 1")));
        }
        Ok(())
    }
}

/// Disjoint, exhaustive partition; val/test sizes round to the nearest
/// sample, the remainder goes to train. Each part keeps ascending original
/// order, so `(1,0,0)` returns the dataset unchanged.
pub fn split_dataset(ds: &DataSet, spec: &SplitSpec) -> Result<(DataSet, DataSet, DataSet)> {
    spec.validate()?;
    let n = ds.len();
    let n_val = (spec.val * n as f64).round() as usize;
    let n_test = (spec.test * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(Error::InvalidConfig("val + test exceed the dataset".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(spec.seed, &[0x5911_7]));
    let n_train = n - n_val - n_test;
    let mut train_idx: Vec<usize> = perm[..n_train].to_vec();
    let mut val_idx: Vec<usize> = perm[n_train..n_train + n_val].to_vec();
    let mut test_idx: Vec<usize> = perm[n_train + n_val..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&val_idx), ds.subset(&test_idx)))
}

/// IID shards of near-equal size (difference at most one sample).
pub fn partition_clients(train: &DataSet, n_clients: usize, seed: u64) -> Result<Vec<DataSet>> {
    if n_clients < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 clients, got {n_clients}")));
    }
    if train.len() < n_clients {
        return Err(Error::InvalidConfig(format!(
            "{} samples cannot fill {} client shards",
            train.len(),
            n_clients
        )));
    }
    let mut perm: Vec<usize> = (0..train.len()).collect();
    perm.shuffle(&mut rng::stream(seed, &[0xC11E_7]));
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (j, &idx) in perm.iter().enumerate() {
        shards[j % n_clients].push(idx);
    }
    Ok(shards
        .into_iter()
        .map(|mut idxs| {
            idxs.sort_unstable();
            train.subset(&idxs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> DataSet {
        let data: Vec<f32> = (0..n * 4).map(|i| (i % 7) as f32 / 7.0).collect();
        DataSet::new(
            Tensor::new(vec![n, 1, 2, 2], data).unwrap(),
            (0..n).map(|i| i % 3).collect(),
            3,
            Provenance::IdxFile,
        )
        .unwrap()
    }

    #[test]
    fn all_train_split_is_identity() {
        let ds = toy(30);
        let (train, val, test) =
            split_dataset(&ds, &SplitSpec { train: 1.0, val: 0.0, test: 0.0, seed: 4 }).unwrap();
        assert_eq!(train.images.data(), ds.images.data());
        assert_eq!(train.labels, ds.labels);
        assert!(val.is_empty() && test.is_empty());
    }

    #[test]
    fn split_sizes_round_with_remainder_to_train() {
        let ds = toy(100);
        let (train, val, test) =
            split_dataset(&ds, &SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 4 }).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (80, 10, 10));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let ds = toy(55);
        let spec = SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 9 };
        let (a1, b1, c1) = split_dataset(&ds, &spec).unwrap();
        let (a2, _, _) = split_dataset(&ds, &spec).unwrap();
        assert_eq!(a1.images.data(), a2.images.data());
        let mut all: Vec<Vec<u8>> = Vec::new();
        for part in [&a1, &b1, &c1] {
            for i in 0..part.len() {
                all.push(part.images.sample(i).iter().flat_map(|v| v.to_le_bytes()).collect());
            }
        }
        assert_eq!(all.len(), ds.len());
        let mut orig: Vec<Vec<u8>> = (0..ds.len())
            .map(|i| ds.images.sample(i).iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn client_shards_balance_and_cover() {
        let ds = toy(201);
        let shards = partition_clients(&ds, 2, 3).unwrap();
        let mut sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![100, 101]);
        let total: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total, 201);

        let even = partition_clients(&toy(200), 2, 3).unwrap();
        assert!(even.iter().all(|s| s.len() == 100));
    }

    #[test]
    fn single_client_partition_is_rejected() {
        assert!(partition_clients(&toy(10), 1, 0).is_err());
        assert!(partition_clients(&toy(1), 2, 0).is_err());
    }
}
