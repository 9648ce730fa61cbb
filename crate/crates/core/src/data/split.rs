use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, FeatureRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
    pub seed: u64,
}

impl SplitManifest {
    /// Indices into `records` of the train and test partitions, in record order.
    pub fn indices(&self, records: &[FeatureRecord]) -> (Vec<usize>, Vec<usize>) {
        let test: HashSet<u64> = self.test.iter().copied().collect();
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if test.contains(&r.id) {
                te.push(i);
            } else {
                tr.push(i);
            }
        }
        (tr, te)
    }
}

/// Stratified, seeded split. Each label class contributes
/// `round(test_fraction · class_size)` records to the test side.
pub fn split(records: &[FeatureRecord], test_fraction: f64, seed: u64) -> Result<SplitManifest, DataError> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(DataError::Param(format!(
            "test_fraction {test_fraction} outside [0, 1]"
        )));
    }
    let mut seen = HashSet::with_capacity(records.len());
    if let Some(dup) = records.iter().find(|r| !seen.insert(r.id)) {
        return Err(DataError::Param(format!("duplicate record id {}", dup.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = HashSet::new();
    for label in [0u8, 1] {
        let mut ids: Vec<u64> = records.iter().filter(|r| r.label == label).map(|r| r.id).collect();
        ids.shuffle(&mut rng);
        let take = (test_fraction * ids.len() as f64).round() as usize;
        test.extend(ids.into_iter().take(take));
    }
    let (te, tr): (Vec<u64>, Vec<u64>) = records.iter().map(|r| r.id).partition(|id| test.contains(id));
    Ok(SplitManifest {
        train: tr,
        test: te,
        seed,
    })
}

/// Per-epoch shuffled batches of positions `0..n`. The order is keyed by
/// `(seed, epoch)`. A final short batch is kept when it has at least two
/// rows and dropped otherwise, since train-mode batchnorm needs two.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch_size must be at least 2");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.last().is_some_and(|b| b.len() < 2) {
        log::warn!("dropping a final batch of 1 record (batchnorm needs at least 2)");
        out.pop();
    }
    out
}
