//! Stratified 4:1:1 splitting and nested subsampling of the training split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Case, Diagnosis};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Split ratio train : val : test.
pub const SPLIT_RATIO: (usize, usize, usize) = (4, 1, 1);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Splits the AD/NC cases into train/val/test with sizes
/// `floor(4N/6)`, `floor(N/6)` and the remainder. MCI cases are ignored.
///
/// Each class is sorted by id and shuffled with its own seeded stream, then
/// the classes are laid end to end and dealt into splits by a low-discrepancy
/// sequence, which keeps every class within one case of its proportional share.
pub fn split_dataset(cases: &[Case], seed: u64) -> Result<DatasetSplit> {
    let entries: Vec<(&str, Diagnosis)> =
        cases.iter().map(|c| (c.id.as_str(), c.diagnosis)).collect();
    split_entries(&entries, seed)
}

pub(crate) fn split_entries(entries: &[(&str, Diagnosis)], seed: u64) -> Result<DatasetSplit> {
    let mut nc = class_ids(entries, Diagnosis::NC)?;
    let mut ad = class_ids(entries, Diagnosis::AD)?;
    let n = nc.len() + ad.len();
    if n < 6 {
        return Err(Error::InsufficientData(format!(
            "{n} AD/NC cases; at least 6 are required"
        )));
    }
    if nc.is_empty() || ad.is_empty() {
        return Err(Error::InsufficientData(
            "both NC and AD cases are required".into(),
        ));
    }
    nc.shuffle(&mut rng_for(seed, "split/NC"));
    ad.shuffle(&mut rng_for(seed, "split/AD"));

    let (rt, rv, rs) = SPLIT_RATIO;
    let total = rt + rv + rs;
    let sizes = [rt * n / total, rv * n / total, 0];
    let sizes = [sizes[0], sizes[1], n - sizes[0] - sizes[1]];
    let slots = deal(&sizes);

    let mut split = DatasetSplit {
        train: Vec::with_capacity(sizes[0]),
        val: Vec::with_capacity(sizes[1]),
        test: Vec::with_capacity(sizes[2]),
        seed,
    };
    for (id, slot) in nc.iter().chain(ad.iter()).zip(slots) {
        let target = match slot {
            0 => &mut split.train,
            1 => &mut split.val,
            _ => &mut split.test,
        };
        target.push(id.to_string());
    }
    let train_has = |set: &BTreeSet<&str>| split.train.iter().any(|id| set.contains(id.as_str()));
    let nc_set: BTreeSet<&str> = nc.iter().copied().collect();
    let ad_set: BTreeSet<&str> = ad.iter().copied().collect();
    if !train_has(&nc_set) || !train_has(&ad_set) {
        return Err(Error::InsufficientData(
            "training split would miss a detection class".into(),
        ));
    }
    Ok(split)
}

fn class_ids<'a>(entries: &[(&'a str, Diagnosis)], class: Diagnosis) -> Result<Vec<&'a str>> {
    let mut ids: Vec<&str> = entries
        .iter()
        .filter(|(_, d)| *d == class)
        .map(|(id, _)| *id)
        .collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidCase {
            id: w[0].to_string(),
            reason: "duplicate id".into(),
        });
    }
    Ok(ids)
}

/// Greedy largest-deficit sequence over the split slots: position `j` goes to
/// the split whose count lags its ideal share `(j + 1) * size / n` the most.
fn deal(sizes: &[usize; 3]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut counts = [0usize; 3];
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        // deficits scaled by n to stay in integers
        let best = (0..3)
            .max_by_key(|&s| {
                let ideal = ((j + 1) * sizes[s]) as i64;
                let have = (counts[s] * n) as i64;
                (ideal - have, std::cmp::Reverse(s))
            })
            .expect("three splits");
        counts[best] += 1;
        out.push(best);
    }
    out
}

/// Nested stratified subset of `ids`: per class, a seeded permutation is cut at
/// `floor(n_class * fraction)`, so smaller fractions are always contained in
/// larger ones. The result keeps the input order.
pub fn stratified_subset(
    ids: &[String],
    class_of: impl Fn(&str) -> Option<Diagnosis>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InsufficientData(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let mut keep = BTreeSet::new();
    for class in [Diagnosis::NC, Diagnosis::AD] {
        let mut members: Vec<&str> = ids
            .iter()
            .map(String::as_str)
            .filter(|id| class_of(id) == Some(class))
            .collect();
        members.sort_unstable();
        members.shuffle(&mut rng_for(seed, &format!("subset/{class}")));
        let take = ((members.len() as f64) * fraction + 1e-9).floor() as usize;
        if take == 0 {
            return Err(Error::InsufficientData(format!(
                "fraction {fraction} leaves no {class} training case"
            )));
        }
        keep.extend(members.into_iter().take(take));
    }
    Ok(ids
        .iter()
        .filter(|id| keep.contains(id.as_str()))
        .cloned()
        .collect())
}
