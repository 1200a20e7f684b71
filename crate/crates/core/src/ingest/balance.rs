use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameRecord;
use crate::error::{Error, Result};

pub trait Labeled {
    fn label(&self) -> &str;
}

impl Labeled for FrameRecord {
    fn label(&self) -> &str {
        &self.label
    }
}

impl Labeled for String {
    fn label(&self) -> &str {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balancing {
    Upsample,
    Downsample,
    None,
}

pub fn class_counts<T: Labeled>(records: &[T]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.label().to_string()).or_insert(0) += 1;
    }
    counts
}

fn by_class<T: Labeled>(records: &[T]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.label()).or_default().push(i);
    }
    groups
}

/// Raises every class to the largest class count. The input comes first,
/// followed by per-class draws with replacement, classes in sorted order.
pub fn balance_upsample<T: Labeled + Clone>(records: &[T], seed: u64) -> Result<Vec<T>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot balance an empty record list".into()));
    }
    let groups = by_class(records);
    let max = groups.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for members in groups.values() {
        for _ in members.len()..max {
            let pick = members[rng.random_range(0..members.len())];
            out.push(records[pick].clone());
        }
    }
    Ok(out)
}

/// Lowers every class to the smallest class count by sampling without
/// replacement. Kept records stay in input order.
pub fn balance_downsample<T: Labeled + Clone>(records: &[T], seed: u64) -> Result<Vec<T>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot balance an empty record list".into()));
    }
    let groups = by_class(records);
    let min = groups.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for members in groups.values() {
        for k in sample(&mut rng, members.len(), min) {
            keep[members[k]] = true;
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}

pub fn balance<T: Labeled + Clone>(records: &[T], mode: Balancing, seed: u64) -> Result<Vec<T>> {
    match mode {
        Balancing::Upsample => balance_upsample(records, seed),
        Balancing::Downsample => balance_downsample(records, seed),
        Balancing::None => Ok(records.to_vec()),
    }
}
