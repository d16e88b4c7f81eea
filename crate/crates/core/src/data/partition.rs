use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encode::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;

/// One client's shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset<T> {
    pub client: usize,
    pub data: Dataset<T>,
}

impl<T: Scalar> ClientDataset<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    #[default]
    Iid,
}

/// Index shards for `n_rows` rows: a seeded shuffle cut into `n_clients`
/// contiguous runs whose sizes differ by at most one.
pub fn partition_indices(n_rows: usize, n_clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    if n_clients > n_rows {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n_rows} rows across {n_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut rng::global(seed, Purpose::Partition));
    let base = n_rows / n_clients;
    let extra = n_rows % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut start = 0;
    for c in 0..n_clients {
        let len = base + usize::from(c < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(shards)
}

pub fn partition_clients<T: Scalar>(
    data: &Dataset<T>,
    n_clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<ClientDataset<T>>> {
    match strategy {
        PartitionStrategy::Iid => Ok(partition_indices(data.len(), n_clients, seed)?
            .into_iter()
            .enumerate()
            .map(|(client, idx)| ClientDataset {
                client,
                data: data.select(&idx),
            })
            .collect()),
    }
}

/// Seeded split of a shard into (train, test); the test side gets
/// `round(test_fraction * n)` rows, leaving at least one training row.
pub fn train_test_split<T: Scalar>(
    shard: &ClientDataset<T>,
    test_fraction: f64,
    seed: u64,
) -> (ClientDataset<T>, ClientDataset<T>) {
    let n = shard.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::TestSplit, shard.client as u32, 0));
    let n_test = ((test_fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let (test, train) = order.split_at(n_test);
    (
        ClientDataset {
            client: shard.client,
            data: shard.data.select(train),
        },
        ClientDataset {
            client: shard.client,
            data: shard.data.select(test),
        },
    )
}

/// Endless mini-batch index stream: each epoch is a fresh shuffle of
/// `0..n` cut into `ceil(n / batch)` batches, the last possibly short.
#[derive(Debug, Clone)]
pub struct BatchIter<R> {
    n: usize,
    batch: usize,
    rng: R,
    order: Vec<usize>,
    pos: usize,
}

impl<R: Rng> BatchIter<R> {
    pub fn new(n: usize, batch: usize, rng: R) -> Result<Self> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if batch > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch} exceeds dataset size {n}"
            )));
        }
        Ok(Self {
            n,
            batch,
            rng,
            order: Vec::new(),
            pos: n,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }
}

impl<R: Rng> Iterator for BatchIter<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.n {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// Batches of exactly one epoch.
pub fn batch_iter<R: Rng>(n: usize, batch: usize, rng: R) -> Result<Vec<Vec<usize>>> {
    let it = BatchIter::new(n, batch, rng)?;
    let k = it.batches_per_epoch();
    Ok(it.take(k).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn toy(n: usize) -> Dataset<f64> {
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(x, vec![0; n], vec![0; n], 1).unwrap()
    }

    fn sizes(shards: &[Vec<usize>]) -> Vec<usize> {
        shards.iter().map(Vec::len).collect()
    }

    #[test]
    fn even_split() {
        assert_eq!(sizes(&partition_indices(10, 5, 3).unwrap()), vec![2; 5]);
    }

    #[test]
    fn uneven_split_covers_all_rows() {
        let shards = partition_indices(11, 5, 3).unwrap();
        let mut s = sizes(&shards);
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        let mut all: Vec<usize> = shards.concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_deterministic() {
        let d = toy(37);
        let a = partition_clients(&d, 4, PartitionStrategy::Iid, 99).unwrap();
        let b = partition_clients(&d, 4, PartitionStrategy::Iid, 99).unwrap();
        assert_eq!(a, b);
        let c = partition_clients(&d, 4, PartitionStrategy::Iid, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_clients() {
        assert!(partition_indices(3, 4, 0).is_err());
        assert!(partition_indices(3, 0, 0).is_err());
    }

    #[test]
    fn full_batch() {
        let b = batch_iter(4, 4, rng::global(1, Purpose::FairBatches)).unwrap();
        assert_eq!(b.len(), 1);
        let mut all = b[0].clone();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ragged_last_batch() {
        let b = batch_iter(5, 2, rng::global(1, Purpose::FairBatches)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
        let mut all = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batches_are_seeded() {
        let a: Vec<_> = BatchIter::new(9, 2, rng::global(5, Purpose::FairBatches)).unwrap().take(12).collect();
        let b: Vec<_> = BatchIter::new(9, 2, rng::global(5, Purpose::FairBatches)).unwrap().take(12).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(BatchIter::new(3, 0, rng::global(0, Purpose::FairBatches)).is_err());
        assert!(BatchIter::new(3, 4, rng::global(0, Purpose::FairBatches)).is_err());
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let shard = ClientDataset { client: 2, data: toy(50) };
        let (train, test) = train_test_split(&shard, 0.2, 11);
        assert_eq!(test.len(), 10);
        assert_eq!(train.len(), 40);
        let mut all: Vec<f64> = train.data.features.as_slice().to_vec();
        all.extend_from_slice(test.data.features.as_slice());
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, (0..50).map(|i| i as f64).collect::<Vec<_>>());
    }
}
