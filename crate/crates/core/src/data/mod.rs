//! Impression data: samples, label scenarios, statistics and minibatches.

pub mod adapter;
mod hash;
mod tsv;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use hash::{fnv1a64, hash_feature};
pub use tsv::{load_tsv, read_tsv, LabelPolicy, LoadOutcome, LABEL_CTR, LABEL_CVR};

use crate::error::{Error, Result};
use crate::loss::ScenarioPartition;

/// Default number of hash buckets per field (prime).
pub const DEFAULT_VOCAB_SIZE: usize = 100_003;

/// One impression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Hashed index per field.
    pub feature_indices: Vec<usize>,
    pub y_ctr: u8,
    pub y_cvr: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub field_names: Vec<String>,
    /// Hash buckets per field; every index of field `f` is below `vocab_sizes[f]`.
    pub vocab_sizes: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(field_names: Vec<String>, vocab_sizes: Vec<usize>) -> Self {
        Dataset {
            field_names,
            vocab_sizes,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.field_names.len()
    }

    /// Rows `range` as a new dataset sharing the schema.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            field_names: self.field_names.clone(),
            vocab_sizes: self.vocab_sizes.clone(),
            samples: self.samples[range].to_vec(),
        }
    }

    /// Gather rows `indices` into a field-major batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut fields = vec![Vec::with_capacity(indices.len()); self.num_fields()];
        let mut y_ctr = Vec::with_capacity(indices.len());
        let mut y_cvr = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            for (col, &v) in fields.iter_mut().zip(&s.feature_indices) {
                col.push(v);
            }
            y_ctr.push(s.y_ctr);
            y_cvr.push(s.y_cvr);
        }
        Batch {
            rows: indices.to_vec(),
            fields,
            y_ctr,
            y_cvr,
        }
    }

    pub fn y_ctr(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.y_ctr).collect()
    }

    /// Entire-space click-and-convert labels `y_ctr * y_cvr`.
    pub fn y_ctcvr(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.y_ctr & s.y_cvr).collect()
    }
}

/// Field-major minibatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Dataset row of each batch position.
    pub rows: Vec<usize>,
    pub fields: Vec<Vec<usize>>,
    pub y_ctr: Vec<u8>,
    pub y_cvr: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Split the target-head scores of `batch` into the three label scenarios.
pub fn partition_batch(batch: &Batch, scores: &[f64]) -> Result<ScenarioPartition> {
    if scores.len() != batch.len() {
        return Err(Error::Argument(format!(
            "{} scores for a batch of {}",
            scores.len(),
            batch.len()
        )));
    }
    ScenarioPartition::from_labels(scores, &batch.y_ctr, &batch.y_cvr)
}

/// Impression / click / conversion counts and the derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DatasetStats {
    pub impressions: u64,
    pub clicks: u64,
    pub conversions: u64,
    /// `clicks / impressions`; absent without impressions.
    pub ctr_ratio: Option<f64>,
    /// `conversions / clicks`; absent without clicks.
    pub cvr_ratio: Option<f64>,
    /// `conversions / impressions`; absent without impressions.
    pub ctcvr_ratio: Option<f64>,
}

impl DatasetStats {
    pub fn from_counts(impressions: u64, clicks: u64, conversions: u64) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        DatasetStats {
            impressions,
            clicks,
            conversions,
            ctr_ratio: ratio(clicks, impressions),
            cvr_ratio: ratio(conversions, clicks),
            ctcvr_ratio: ratio(conversions, impressions),
        }
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |r: Option<f64>| {
            r.map_or_else(|| "absent".to_string(), |r| format!("{:.2}%", 100.0 * r))
        };
        writeln!(f, "impressions={}", self.impressions)?;
        writeln!(f, "clicks={}", self.clicks)?;
        writeln!(f, "conversions={}", self.conversions)?;
        writeln!(f, "ctr={}", pct(self.ctr_ratio))?;
        writeln!(f, "cvr={}", pct(self.cvr_ratio))?;
        write!(f, "ctcvr={}", pct(self.ctcvr_ratio))
    }
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    let clicks = dataset.samples.iter().filter(|s| s.y_ctr == 1).count() as u64;
    let conversions = dataset.samples.iter().filter(|s| s.y_cvr == 1).count() as u64;
    DatasetStats::from_counts(dataset.len() as u64, clicks, conversions)
}

/// Sample order for one epoch: identity, or a permutation drawn from `seed`.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Minibatches covering every sample exactly once; the last may be short.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    Ok(BatchIter {
        dataset,
        order: epoch_order(dataset.len(), seed, shuffle),
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[(u8, u8)]) -> Dataset {
        let mut d = Dataset::new(vec!["f".into()], vec![10]);
        d.samples = labels
            .iter()
            .enumerate()
            .map(|(i, &(c, v))| Sample {
                feature_indices: vec![i % 10],
                y_ctr: c,
                y_cvr: v,
            })
            .collect();
        d
    }

    #[test]
    fn one_row_per_scenario() {
        let d = toy(&[(1, 1), (1, 0), (0, 0)]);
        let b = d.batch(&[0, 1, 2]);
        let p = partition_batch(&b, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.sizes(), (1, 1, 1));
    }

    #[test]
    fn unclicked_batch_is_all_zeros() {
        let d = toy(&[(0, 0); 7]);
        let b = d.batch(&(0..7).collect::<Vec<_>>());
        assert_eq!(partition_batch(&b, &[0.1; 7]).unwrap().sizes(), (0, 0, 7));
        assert!(matches!(
            partition_batch(&b, &[0.1; 6]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn stats_by_hand() {
        let mut labels = vec![(0u8, 0u8); 100];
        labels[..4].fill((1, 0));
        labels[0] = (1, 1);
        let s = stats(&toy(&labels));
        assert_eq!((s.impressions, s.clicks, s.conversions), (100, 4, 1));
        assert!((s.ctr_ratio.unwrap() - 0.04).abs() < 1e-15);
        assert!((s.cvr_ratio.unwrap() - 0.25).abs() < 1e-15);
        assert!((s.ctcvr_ratio.unwrap() - 0.01).abs() < 1e-15);
        assert!(s.to_string().contains("ctr=4.00%"));
    }

    #[test]
    fn stats_edge_cases() {
        let s = stats(&toy(&[(0, 0)]));
        assert_eq!(s.ctr_ratio, Some(0.0));
        assert_eq!(s.cvr_ratio, None);
        let s = stats(&toy(&[]));
        assert_eq!((s.impressions, s.clicks, s.conversions), (0, 0, 0));
        assert_eq!(s.ctr_ratio, None);
    }

    #[test]
    fn batches_in_file_order() {
        let d = toy(&[(0, 0); 5]);
        let sizes: Vec<_> = batch_iter(&d, 2, 0, false)
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, [2, 2, 1]);
        let rows: Vec<_> = batch_iter(&d, 2, 0, false)
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        assert_eq!(rows, [0, 1, 2, 3, 4]);
        assert!(batch_iter(&d, 0, 0, false).is_err());
    }

    #[test]
    fn shuffled_epochs_are_seeded_permutations() {
        let d = toy(&[(0, 0); 103]);
        let a: Vec<_> = batch_iter(&d, 16, 9, true)
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        let b: Vec<_> = batch_iter(&d, 16, 9, true)
            .unwrap()
            .flat_map(|b| b.rows)
            .collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..103).collect::<Vec<_>>());
        assert_ne!(a, epoch_order(103, 10, true));
    }
}
