//! Seeded hold-out and k-fold dataset splitting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    InternalTest,
    ExternalTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Test,
        Split::InternalTest,
        Split::ExternalTest,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::InternalTest => "internal_test",
            Split::ExternalTest => "external_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split '{s}'")))
    }
}

/// Hold-out proportions of the reference split scheme:
/// train / test / internal test / external test.
pub const HOLDOUT_PROPORTIONS: [(Split, u64); 4] = [
    (Split::Train, 6915),
    (Split::Test, 2965),
    (Split::InternalTest, 300),
    (Split::ExternalTest, 300),
];

/// Requested partition of a set of ids.
#[derive(Debug, Clone)]
pub enum SplitScheme {
    /// Sizes proportional to the given weights, largest-remainder rounded.
    Proportional(Vec<(Split, u64)>),
    /// Exact sizes; must sum to the population size.
    Counts(Vec<(Split, usize)>),
}

/// Largest-remainder apportionment of `n` items over integer weights.
/// Rounding ties go to the earlier entry.
pub fn apportion(n: usize, weights: &[u64]) -> Result<Vec<usize>> {
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return Err(Error::Config("split proportions sum to zero".into()));
    }
    let mut sizes: Vec<usize> = Vec::with_capacity(weights.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(weights.len());
    let mut assigned = 0usize;
    for (i, &w) in weights.iter().enumerate() {
        let exact = n as f64 * w as f64 / total as f64;
        let fl = exact.floor() as usize;
        sizes.push(fl);
        assigned += fl;
        remainders.push((i, exact - fl as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(n - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle then partition per the requested scheme.
pub fn split_dataset(
    ids: &[String],
    scheme: &SplitScheme,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id set".into()));
    }
    let mut uniq = ids.to_vec();
    uniq.sort();
    uniq.dedup();
    if uniq.len() != ids.len() {
        return Err(Error::Config("duplicate ids in split input".into()));
    }
    let (splits, sizes): (Vec<Split>, Vec<usize>) = match scheme {
        SplitScheme::Proportional(props) => {
            let weights: Vec<u64> = props.iter().map(|&(_, w)| w).collect();
            let sizes = apportion(ids.len(), &weights)?;
            (props.iter().map(|&(s, _)| s).collect(), sizes)
        }
        SplitScheme::Counts(counts) => {
            let total: usize = counts.iter().map(|&(_, c)| c).sum();
            if total != ids.len() {
                return Err(Error::Config(format!(
                    "requested split sizes sum to {total} but population is {}",
                    ids.len()
                )));
            }
            (
                counts.iter().map(|&(s, _)| s).collect(),
                counts.iter().map(|&(_, c)| c).collect(),
            )
        }
    };
    let mut shuffled = uniq;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut out = BTreeMap::new();
    let mut cursor = 0usize;
    for (split, size) in splits.into_iter().zip(sizes) {
        for id in &shuffled[cursor..cursor + size] {
            out.insert(id.clone(), split);
        }
        cursor += size;
    }
    Ok(out)
}

/// Partitions ids into `k` disjoint folds of near-equal size.
pub fn kfold(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if ids.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot form {k} folds",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(folds)
}
