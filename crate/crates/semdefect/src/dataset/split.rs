use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImageRecord, Split};
use crate::error::{Error, Result};

/// Mix a base seed with a stream tag and index into an independent seed.
/// splitmix64 finalizer; stable across platforms.
pub(crate) fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
    h = h.wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Result of a wafer-aware split: updated records plus warnings and
/// per-split image counts (train, val, test).
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub records: Vec<ImageRecord>,
    pub warnings: Vec<String>,
    pub counts: [usize; 3],
}

/// Assign whole wafers to train/val/test so no wafer spans two splits.
///
/// Greedy: wafers are ordered largest first (seeded shuffle breaks size
/// ties), each assigned to the split with the largest remaining image
/// deficit against `ratios`. Degenerate inputs warn instead of failing.
pub fn wafer_aware_split(
    records: Vec<ImageRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitOutcome> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be nonnegative, got ({rt}, {rv}, {rs})"
        )));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            rt + rv + rs
        )));
    }
    if records.iter().any(|r| r.wafer_id.is_empty()) {
        return Err(Error::Data("record with empty wafer id".into()));
    }

    let mut by_wafer: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_wafer.entry(rec.wafer_id.clone()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "wafer-split", 0));
    let mut wafers: Vec<(u64, String, Vec<usize>)> = by_wafer
        .into_iter()
        .map(|(w, idx)| (rand::Rng::random::<u64>(&mut rng), w, idx))
        .collect();
    // Largest wafers first; the random key decides among equal sizes.
    wafers.sort_by(|a, b| b.2.len().cmp(&a.2.len()).then(a.0.cmp(&b.0)));

    let total = records.len() as f64;
    let targets = [rt * total, rv * total, rs * total];
    let mut assigned = [0usize; 3];
    let mut records = records;
    let mut warnings = Vec::new();

    for (_, _, idx) in &wafers {
        let mut best = 0usize;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = targets[s] - assigned[s] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = s;
            }
        }
        let split = [Split::Train, Split::Val, Split::Test][best];
        for &i in idx {
            records[i].split = split;
        }
        assigned[best] += idx.len();
    }

    if wafers.len() == 1 && !records.is_empty() {
        warnings.push(format!(
            "all {} records share wafer \"{}\"; the whole dataset lands in one split",
            records.len(),
            wafers[0].1
        ));
    }
    for (s, name) in [(0, "train"), (1, "val"), (2, "test")] {
        if targets[s] > 0.0 && assigned[s] == 0 {
            warnings.push(format!(
                "split \"{name}\" has a nonzero target ratio but received no wafers"
            ));
        }
    }

    Ok(SplitOutcome {
        records,
        warnings,
        counts: assigned,
    })
}

/// Few-shot sample: indices into the input slice.
#[derive(Debug, Clone)]
pub struct FewShotSample {
    /// Selected labeled records, `n_per_class` per class where available.
    pub labeled: Vec<usize>,
    /// Remaining records; training on the pool must not read their labels.
    pub pool: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Stratified sampling of `min(n_per_class, available)` records per class
/// without replacement. Remaining records form the unlabeled pool (ground
/// truth stays on the records for evaluation only). Deterministic given seed.
pub fn sample_few_shot(
    records: &[ImageRecord],
    n_per_class: usize,
    seed: u64,
) -> Result<FewShotSample> {
    if n_per_class < 1 {
        return Err(Error::Config(format!(
            "n_per_class must be at least 1, got {n_per_class}"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut pool = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        match rec.class_label {
            Some(c) => by_class.entry(c).or_default().push(i),
            None => pool.push(i),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "few-shot", n_per_class as u64));
    let mut labeled = Vec::new();
    let mut warnings = Vec::new();
    for (class, idx) in &by_class {
        let take = n_per_class.min(idx.len());
        if take < n_per_class {
            warnings.push(format!(
                "class {class} has only {} train records, requested {n_per_class}",
                idx.len()
            ));
        }
        let mut chosen = rand::seq::index::sample(&mut rng, idx.len(), take).into_vec();
        chosen.sort_unstable();
        let mut next = 0usize;
        for (pos, &i) in idx.iter().enumerate() {
            if next < chosen.len() && chosen[next] == pos {
                labeled.push(i);
                next += 1;
            } else {
                pool.push(i);
            }
        }
    }
    labeled.sort_unstable();
    pool.sort_unstable();
    Ok(FewShotSample {
        labeled,
        pool,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn record(path: &str, label: Option<u32>, wafer: &str) -> ImageRecord {
        ImageRecord {
            image_path: path.into(),
            layer_id: 1,
            class_label: label,
            wafer_id: wafer.into(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn two_wafers_half_half() {
        let records = vec![
            record("a", Some(1), "w1"),
            record("b", Some(1), "w1"),
            record("c", Some(2), "w2"),
            record("d", Some(2), "w2"),
        ];
        let out = wafer_aware_split(records, (0.5, 0.0, 0.5), 3).unwrap();
        let w1: Vec<Split> = out
            .records
            .iter()
            .filter(|r| r.wafer_id == "w1")
            .map(|r| r.split)
            .collect();
        let w2: Vec<Split> = out
            .records
            .iter()
            .filter(|r| r.wafer_id == "w2")
            .map(|r| r.split)
            .collect();
        assert!(w1.iter().all(|&s| s == w1[0]));
        assert!(w2.iter().all(|&s| s == w2[0]));
        assert_ne!(w1[0], w2[0]);
        assert!(w1[0] != Split::Val && w2[0] != Split::Val);
    }

    #[test]
    fn single_wafer_warns_and_goes_to_train() {
        let records = vec![
            record("a", Some(1), "w1"),
            record("b", Some(2), "w1"),
            record("c", Some(1), "w1"),
        ];
        let out = wafer_aware_split(records, (0.7, 0.1, 0.2), 9).unwrap();
        assert!(out.records.iter().all(|r| r.split == Split::Train));
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let records = vec![record("a", Some(1), "w1")];
        assert!(wafer_aware_split(records, (0.5, 0.0, 0.4), 0).is_err());
    }

    #[test]
    fn fuzz_wafer_disjoint_and_near_target() {
        for trial in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(1234, "fuzz", trial));
            let n_wafers = 20;
            let mut records = Vec::new();
            for i in 0..200 {
                let w = rng.random_range(0..n_wafers);
                records.push(record(&format!("img{i}"), Some(1 + (i % 4) as u32), &format!("w{w}")));
            }
            let out = wafer_aware_split(records, (0.7, 0.1, 0.2), trial).unwrap();

            let mut wafer_splits: BTreeMap<&str, Split> = BTreeMap::new();
            let mut max_wafer = 0usize;
            let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &out.records {
                *sizes.entry(r.wafer_id.as_str()).or_default() += 1;
                if let Some(prev) = wafer_splits.insert(r.wafer_id.as_str(), r.split) {
                    assert_eq!(prev, r.split, "wafer {} spans two splits", r.wafer_id);
                }
            }
            for (_, s) in sizes {
                max_wafer = max_wafer.max(s);
            }
            let total = out.records.len() as f64;
            let train_dev = (out.counts[0] as f64 - 0.7 * total).abs();
            assert!(
                train_dev <= max_wafer as f64,
                "train count {} deviates from target {} by more than one wafer ({})",
                out.counts[0],
                0.7 * total,
                max_wafer
            );
        }
    }

    #[test]
    fn split_deterministic_given_seed() {
        let make = || {
            (0..60)
                .map(|i| record(&format!("i{i}"), Some(1 + i % 3), &format!("w{}", i % 7)))
                .collect::<Vec<_>>()
        };
        let a = wafer_aware_split(make(), (0.7, 0.1, 0.2), 42).unwrap();
        let b = wafer_aware_split(make(), (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn few_shot_exact_counts() {
        let mut records = Vec::new();
        for c in 1..=11u32 {
            for i in 0..30 {
                records.push(record(&format!("c{c}i{i}"), Some(c), "w"));
            }
        }
        let s = sample_few_shot(&records, 15, 7).unwrap();
        assert_eq!(s.labeled.len(), 165);
        assert_eq!(s.pool.len(), records.len() - 165);
        for c in 1..=11u32 {
            let got = s
                .labeled
                .iter()
                .filter(|&&i| records[i].class_label == Some(c))
                .count();
            assert_eq!(got, 15);
        }
    }

    #[test]
    fn few_shot_short_class_warns() {
        let mut records = vec![record("a", Some(1), "w"), record("b", Some(1), "w")];
        for i in 0..10 {
            records.push(record(&format!("c{i}"), Some(2), "w"));
        }
        let s = sample_few_shot(&records, 5, 1).unwrap();
        assert_eq!(
            s.labeled
                .iter()
                .filter(|&&i| records[i].class_label == Some(1))
                .count(),
            2
        );
        assert!(!s.warnings.is_empty());
    }

    #[test]
    fn few_shot_deterministic_and_disjoint() {
        let records: Vec<ImageRecord> = (0..40)
            .map(|i| record(&format!("i{i}"), Some(1 + i % 4), "w"))
            .collect();
        let a = sample_few_shot(&records, 3, 99).unwrap();
        let b = sample_few_shot(&records, 3, 99).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.pool, b.pool);
        let mut all: Vec<usize> = a.labeled.iter().chain(&a.pool).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn few_shot_rejects_zero() {
        let records = vec![record("a", Some(1), "w")];
        assert!(sample_few_shot(&records, 0, 0).is_err());
    }
}
