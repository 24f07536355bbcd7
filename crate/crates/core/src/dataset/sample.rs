//! Proportional stratified sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::VerifiedRecord;
use crate::digest::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    QuestionType,
    Domain,
    FigureType,
}

impl std::str::FromStr for StratumKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "question_type" => Ok(StratumKey::QuestionType),
            "domain" => Ok(StratumKey::Domain),
            "figure_type" => Ok(StratumKey::FigureType),
            _ => Err(format!("unknown stratum key {s:?}")),
        }
    }
}

/// The record's stratum, or `None` when a key is unlabeled.
pub fn stratum_of(record: &VerifiedRecord, keys: &[StratumKey]) -> Option<Vec<String>> {
    keys.iter()
        .map(|k| match k {
            StratumKey::QuestionType => record.question_type.map(|v| v.as_str().to_string()),
            StratumKey::FigureType => record.figure_type.map(|v| v.as_str().to_string()),
            StratumKey::Domain => Some(record.primary_category.clone()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("requested {requested} records but only {available} are labeled on every key")]
    NotEnoughRecords { requested: usize, available: usize },
    #[error("no stratification keys given")]
    NoKeys,
}

/// Largest-remainder allocation of `n` seats over strata of the given
/// sizes. Ties in the remainder go to the larger stratum, then to the
/// earlier one. Returns the allocation and the indices of strata whose
/// share exceeded their size; their excess goes to the strata with the
/// most unallocated records.
pub fn allocate_proportional(sizes: &[usize], n: usize) -> Result<(Vec<usize>, Vec<usize>), SampleError> {
    let total: usize = sizes.iter().sum();
    if n > total {
        return Err(SampleError::NotEnoughRecords {
            requested: n,
            available: total,
        });
    }
    if total == 0 {
        return Ok((vec![0; sizes.len()], Vec::new()));
    }
    let (n128, total128) = (n as u128, total as u128);
    let mut alloc: Vec<usize> = sizes.iter().map(|s| (n128 * *s as u128 / total128) as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = n128 * sizes[a] as u128 % total128;
        let rb = n128 * sizes[b] as u128 % total128;
        rb.cmp(&ra).then(sizes[b].cmp(&sizes[a])).then(a.cmp(&b))
    });
    let leftover = n - alloc.iter().sum::<usize>();
    for &i in order.iter().take(leftover) {
        alloc[i] += 1;
    }
    let mut insufficient = Vec::new();
    let mut excess = 0;
    for (i, a) in alloc.iter_mut().enumerate() {
        if *a > sizes[i] {
            insufficient.push(i);
            excess += *a - sizes[i];
            *a = sizes[i];
        }
    }
    while excess > 0 {
        let target = (0..sizes.len())
            .filter(|&i| alloc[i] < sizes[i])
            .max_by(|&a, &b| (sizes[a] - alloc[a]).cmp(&(sizes[b] - alloc[b])).then(b.cmp(&a)))
            .expect("n <= total leaves room");
        alloc[target] += 1;
        excess -= 1;
    }
    Ok((alloc, insufficient))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratumAllocation {
    pub stratum: Vec<String>,
    pub population: usize,
    pub allocated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleOutcome {
    /// Selected records, ordered by key.
    pub records: Vec<VerifiedRecord>,
    pub allocation: Vec<StratumAllocation>,
    /// Records skipped for missing a label on some key.
    pub excluded_unlabeled: usize,
    /// Strata whose proportional share exceeded their population.
    pub insufficient: Vec<Vec<String>>,
}

/// Draws exactly `n` records with per-stratum counts proportional to the
/// stratum sizes. Selection inside a stratum is a uniform draw seeded by
/// `seed` and the stratum name.
pub fn stratified_sample(
    records: &[VerifiedRecord],
    n: usize,
    keys: &[StratumKey],
    seed: u64,
) -> Result<SampleOutcome, SampleError> {
    if keys.is_empty() {
        return Err(SampleError::NoKeys);
    }
    let mut strata: BTreeMap<Vec<String>, Vec<&VerifiedRecord>> = BTreeMap::new();
    let mut excluded = 0;
    for r in records {
        match stratum_of(r, keys) {
            Some(s) => strata.entry(s).or_default().push(r),
            None => excluded += 1,
        }
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let (alloc, insufficient) = allocate_proportional(&sizes, n)?;
    let names: Vec<Vec<String>> = strata.keys().cloned().collect();
    for &i in &insufficient {
        log::warn!("stratum {:?} is smaller than its share; excess reallocated", names[i]);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut allocation = Vec::with_capacity(strata.len());
    for ((name, mut members), k) in strata.into_iter().zip(alloc) {
        members.sort_by(|a, b| a.key.cmp(&b.key));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample", &name.join("\u{1f}")));
        members.shuffle(&mut rng);
        chosen.extend(members.iter().take(k).map(|r| (*r).clone()));
        allocation.push(StratumAllocation {
            stratum: name,
            population: members.len(),
            allocated: k,
        });
    }
    chosen.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(SampleOutcome {
        records: chosen,
        allocation,
        excluded_unlabeled: excluded,
        insufficient: insufficient.into_iter().map(|i| names[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::record;
    use crate::dataset::{FigureType, QuestionType};
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(allocate_proportional(&[50, 50], 10).unwrap().0, vec![5, 5]);
        assert_eq!(allocate_proportional(&[75, 25], 8).unwrap().0, vec![6, 2]);
        assert_eq!(allocate_proportional(&[1, 1, 1], 2).unwrap().0, vec![1, 1, 0]);
        assert!(matches!(
            allocate_proportional(&[3], 4),
            Err(SampleError::NotEnoughRecords { requested: 4, available: 3 })
        ));
    }

    fn corpus(n: usize) -> Vec<VerifiedRecord> {
        (0..n)
            .map(|i| {
                let mut r = record(&format!("r{i:04}"));
                r.figure_type = Some(FigureType::ALL[i % 3]);
                r.question_type = Some(QuestionType::ALL[(i / 3) % 2]);
                r.primary_category = ["cs", "math", "astro-ph"][(i * 7) % 3].to_string();
                r
            })
            .collect()
    }

    #[test]
    fn sample_is_deterministic_and_exact() {
        let records = corpus(200);
        let keys = [StratumKey::QuestionType, StratumKey::Domain, StratumKey::FigureType];
        let a = stratified_sample(&records, 37, &keys, 9).unwrap();
        let b = stratified_sample(&records, 37, &keys, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 37);
        let c = stratified_sample(&records, 37, &keys, 10).unwrap();
        assert_eq!(a.allocation, c.allocation);
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn unlabeled_records_excluded() {
        let mut records = corpus(20);
        records[0].figure_type = None;
        let out = stratified_sample(&records, 19, &[StratumKey::FigureType], 1).unwrap();
        assert_eq!(out.excluded_unlabeled, 1);
        assert!(out.records.iter().all(|r| r.key != "r0000"));
        assert!(stratified_sample(&records, 20, &[StratumKey::FigureType], 1).is_err());
        let out = stratified_sample(&records, 20, &[StratumKey::Domain], 1).unwrap();
        assert_eq!(out.excluded_unlabeled, 0);
    }

    proptest! {
        #[test]
        fn allocation_is_proportional(sizes in proptest::collection::vec(0usize..60, 1..12), frac in 0.0f64..=1.0) {
            let total: usize = sizes.iter().sum();
            let n = ((total as f64) * frac) as usize;
            let (alloc, insufficient) = allocate_proportional(&sizes, n).unwrap();
            prop_assert!(insufficient.is_empty());
            prop_assert_eq!(alloc.iter().sum::<usize>(), n);
            for (a, s) in alloc.iter().zip(&sizes) {
                prop_assert!(a <= s);
                // |a - n*s/total| <= 1, cross-multiplied
                let lhs = (*a as i128 * total as i128 - n as i128 * *s as i128).abs();
                prop_assert!(lhs <= total as i128);
            }
        }
    }
}
