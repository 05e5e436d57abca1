use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dedup::{DupCluster, DupKind};
use super::ImageRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.64, val: 0.16, test: 0.20 }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let all = [train, val, test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidArgument(format!("split fractions must be non-negative: {all:?}")));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split fractions must sum to 1: {all:?}")));
        }
        Ok(SplitFractions { train, val, test })
    }
}

impl TryFrom<[f64; 3]> for SplitFractions {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        SplitFractions::new(v[0], v[1], v[2])
    }
}

impl From<SplitFractions> for [f64; 3] {
    fn from(f: SplitFractions) -> Self {
        [f.train, f.val, f.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.assignments.iter().filter(|(_, s)| **s == split).map(|(id, _)| id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignments.get(id).copied()
    }
}

/// Per-class stratified split.
///
/// Images are stratified on their primary class. Members of near-duplicate
/// clusters are pinned to train before sampling. Each class contributes
/// `max(1, round(n * test))` test images and up to `round(n * val)` validation
/// images drawn from its unpinned images.
pub fn stratified_split(
    images: &[ImageRecord],
    clusters: &[DupCluster],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitManifest> {
    let pinned: BTreeSet<&str> =
        clusters.iter().filter(|c| c.kind == DupKind::Near).flat_map(|c| c.members.iter().map(String::as_str)).collect();

    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for img in images {
        strata.entry(img.primary_class()).or_default().push(img.id.as_str());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    for (class, ids) in strata {
        let n = ids.len();
        let mut free: Vec<&str> = ids.iter().copied().filter(|id| !pinned.contains(id)).collect();
        free.sort_unstable();
        let n_test = ((n as f64 * fractions.test).round() as usize).max(1);
        if free.len() < n_test {
            return Err(Error::Stratification { class: class.to_string(), available: free.len(), needed: n_test });
        }
        let n_val = ((n as f64 * fractions.val).round() as usize).min(free.len() - n_test);
        free.shuffle(&mut rng);
        for (i, id) in free.iter().enumerate() {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            assignments.insert(id.to_string(), split);
        }
        for id in ids.iter().filter(|id| pinned.contains(*id)) {
            assignments.insert(id.to_string(), Split::Train);
        }
    }

    Ok(SplitManifest { seed, fractions, assignments })
}
