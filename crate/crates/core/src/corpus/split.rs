//! Chronological train/val/test partitioning.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AbbrevExample;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub ratios: [f64; 3],
    pub dedup_val_test: bool,
    pub max_abbrev_len: Option<usize>,
    /// Sizes before val/test filtering.
    pub pre_filter: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<AbbrevExample>,
    pub val: Vec<AbbrevExample>,
    pub test: Vec<AbbrevExample>,
    pub policy: SplitPolicy,
}

fn ids_digest(examples: &[AbbrevExample]) -> String {
    let mut h = Sha256::new();
    for ex in examples {
        h.update(ex.id().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl SplitSet {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Counts, policy and a digest of each split's member ids.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "policy": self.policy,
            "counts": {
                "train": self.train.len(),
                "val": self.val.len(),
                "test": self.test.len(),
            },
            "digests": {
                "train": ids_digest(&self.train),
                "val": ids_digest(&self.val),
                "test": ids_digest(&self.test),
            },
        })
    }
}

/// Splits along the time axis, then filters val/test only.
///
/// Partition sizes are `round(n·r₀)`, `round(n·r₁)` and the remainder. Val and
/// test are filtered by abbreviation length and, when `dedup_val_test` is set,
/// stripped of any expansion already seen in an earlier split or earlier in
/// the same split. Training data is never filtered.
pub fn chronological_split(
    examples: &[AbbrevExample],
    ratios: [f64; 3],
    dedup_val_test: bool,
    max_abbrev_len: Option<usize>,
) -> Result<SplitSet> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(CoreError::InvalidArgument(format!("ratios {ratios:?} must sum to 1")));
    }
    if examples.is_empty() {
        return Err(CoreError::NoRecords);
    }
    let first = examples[0].timestamp;
    if examples.len() > 1 && examples.iter().all(|e| e.timestamp == first) {
        return Err(CoreError::InvalidArgument(
            "all timestamps identical; no chronological order".into(),
        ));
    }
    let mut sorted = examples.to_vec();
    sorted.sort_by_key(|e| e.timestamp);
    let n = sorted.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_val = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    let train = sorted;
    let pre_filter = [train.len(), val.len(), test.len()];

    let mut seen: HashSet<String> = if dedup_val_test {
        train.iter().map(|e| e.expansion.clone()).collect()
    } else {
        HashSet::new()
    };
    let mut filter = |part: Vec<AbbrevExample>| -> Vec<AbbrevExample> {
        let kept: Vec<AbbrevExample> = part
            .into_iter()
            .filter(|e| max_abbrev_len.map_or(true, |m| e.abbreviation_length() <= m))
            .filter(|e| !dedup_val_test || seen.insert(e.expansion.clone()))
            .collect();
        kept
    };
    let val = filter(val);
    let test = filter(test);
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(CoreError::EmptySplit(name));
        }
    }
    Ok(SplitSet {
        train,
        val,
        test,
        policy: SplitPolicy {
            ratios,
            dedup_val_test,
            max_abbrev_len,
            pre_filter,
        },
    })
}
