use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameRecord;
use crate::error::{Error, Result};
use crate::util::{read_json, write_json};

/// How many videos go to train, val and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Ratios(f64, f64, f64),
    Counts(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Video-level partition; each list is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Frame records grouped by the split their video belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitRecords {
    pub train: Vec<FrameRecord>,
    pub val: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
}

impl SplitRecords {
    pub fn get(&self, name: SplitName) -> &[FrameRecord] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

impl DatasetSplit {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn split_of(&self, video_id: &str) -> Option<SplitName> {
        let has = |v: &[String]| v.binary_search_by(|x| x.as_str().cmp(video_id)).is_ok();
        if has(&self.train) {
            Some(SplitName::Train)
        } else if has(&self.val) {
            Some(SplitName::Val)
        } else if has(&self.test) {
            Some(SplitName::Test)
        } else {
            None
        }
    }

    pub fn videos(&self, name: SplitName) -> &[String] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Routes each record by its video. Records of videos outside the split
    /// are an error.
    pub fn partition(&self, records: &[FrameRecord]) -> Result<SplitRecords> {
        let mut out = SplitRecords::default();
        for r in records {
            match self.split_of(&r.video_id) {
                Some(SplitName::Train) => out.train.push(r.clone()),
                Some(SplitName::Val) => out.val.push(r.clone()),
                Some(SplitName::Test) => out.test.push(r.clone()),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "video {} is not in the split",
                        r.video_id
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Largest-remainder apportionment of `n` by `ratios`, then at least one
/// video for every set with a positive ratio when `n` allows it.
fn ratio_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Infeasible(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = (quotas[i] + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .filter(|&j| counts[j] > 1)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)));
            if let Some(d) = donor {
                counts[d] -= 1;
                counts[i] += 1;
            }
        }
    }
    Ok(counts)
}

/// Shuffles the sorted video list with `seed` and cuts it into train, val
/// and test.
pub fn make_split(videos: &[String], spec: SplitSpec, seed: u64) -> Result<DatasetSplit> {
    let unique: BTreeSet<&String> = videos.iter().collect();
    if unique.len() != videos.len() {
        return Err(Error::InvalidInput("duplicate video ids".into()));
    }
    let n = videos.len();
    let counts = match spec {
        SplitSpec::Ratios(a, b, c) => ratio_counts(n, [a, b, c])?,
        SplitSpec::Counts(a, b, c) => {
            if a + b + c != n {
                return Err(Error::Infeasible(format!(
                    "counts ({a}, {b}, {c}) need {} videos, got {n}",
                    a + b + c
                )));
            }
            [a, b, c]
        }
    };
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = order.into_iter();
    let mut take = |k: usize| {
        let mut v: Vec<String> = rest.by_ref().take(k).collect();
        v.sort();
        v
    };
    let train = take(counts[0]);
    let val = take(counts[1]);
    let test = take(counts[2]);
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("video{i:02}")).collect()
    }

    fn sizes(s: &DatasetSplit) -> (usize, usize, usize) {
        (s.train.len(), s.val.len(), s.test.len())
    }

    #[test]
    fn paper_shapes() {
        let s = make_split(&vids(13), SplitSpec::Counts(9, 1, 3), 42).unwrap();
        assert_eq!(sizes(&s), (9, 1, 3));
        let s = make_split(&vids(10), SplitSpec::Ratios(0.6, 0.1, 0.3), 1).unwrap();
        assert_eq!(sizes(&s), (6, 1, 3));
        assert!(matches!(
            make_split(&vids(10), SplitSpec::Counts(9, 1, 3), 0),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn small_ratio_splits_are_non_empty() {
        for n in 3..12 {
            let s = make_split(&vids(n), SplitSpec::Ratios(0.6, 0.1, 0.3), 7).unwrap();
            let (a, b, c) = sizes(&s);
            assert!(a > 0 && b > 0 && c > 0, "n={n}: {a}/{b}/{c}");
            assert_eq!(a + b + c, n);
        }
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let v = vids(20);
        let a = make_split(&v, SplitSpec::Ratios(0.6, 0.1, 0.3), 3).unwrap();
        assert_eq!(a, make_split(&v, SplitSpec::Ratios(0.6, 0.1, 0.3), 3).unwrap());
        let mut rev = v.clone();
        rev.reverse();
        assert_eq!(a.train, make_split(&rev, SplitSpec::Ratios(0.6, 0.1, 0.3), 3).unwrap().train);
        assert_ne!(a.train, make_split(&v, SplitSpec::Ratios(0.6, 0.1, 0.3), 4).unwrap().train);
        assert_eq!(a.split_of(&a.test[0]), Some(SplitName::Test));
        assert_eq!(a.split_of("nope"), None);
    }
}
