//! Per-class batch sampler: every mini-batch carries exactly `n` patches of
//! each grade present in the dataset, drawn without replacement. All pools
//! reshuffle as soon as the smallest class would be exhausted; that reset
//! cycle is what the training loop calls an epoch.

use crate::dataset::GenantGrade;
use crate::error::{Error, Result};
use crate::seeding;

use rand::seq::SliceRandom;

/// Number of batches before the smallest class is exhausted and the sampler
/// resets: `floor(min_count / n)`.
pub fn epoch_length(class_counts: &[usize], n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::config("sampler n must be at least 1".to_string()));
    }
    let present: Vec<usize> = class_counts.iter().copied().filter(|c| *c > 0).collect();
    if present.is_empty() {
        return Err(Error::data("sampler: dataset has no patches".to_string()));
    }
    let min = *present.iter().min().unwrap();
    if min < n {
        return Err(Error::data(format!(
            "sampler: smallest class has {min} members, need at least n = {n}"
        )));
    }
    Ok(min / n)
}

/// Sampler state: per-class index pools consumed without replacement.
#[derive(Debug, Clone)]
pub struct PerClassSampler {
    /// Index pools per present grade, reshuffled at every reset.
    pools: Vec<(GenantGrade, Vec<usize>)>,
    cursor: usize,
    n: usize,
    seed: u64,
    resets: u64,
    batches_emitted: u64,
}

impl PerClassSampler {
    /// Build from the grade of each dataset item; `items[i]` is the grade of
    /// patch index `i`. Fails loudly when any present class has fewer than
    /// `n` members.
    pub fn new(items: &[GenantGrade], n: usize, seed: u64) -> Result<Self> {
        let mut by_grade: Vec<(GenantGrade, Vec<usize>)> = Vec::new();
        for grade in GenantGrade::ALL {
            let indices: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|(_, g)| **g == grade)
                .map(|(i, _)| i)
                .collect();
            if !indices.is_empty() {
                by_grade.push((grade, indices));
            }
        }
        let counts: Vec<usize> = by_grade.iter().map(|(_, p)| p.len()).collect();
        epoch_length(&counts, n)?; // validates n and minimum class size
        let mut sampler = PerClassSampler {
            pools: by_grade,
            cursor: 0,
            n,
            seed,
            resets: 0,
            batches_emitted: 0,
        };
        sampler.shuffle_pools();
        Ok(sampler)
    }

    fn shuffle_pools(&mut self) {
        for (k, (_, pool)) in self.pools.iter_mut().enumerate() {
            let mut rng = seeding::rng_at(seeding::subseed(self.seed, self.resets), k as u64);
            pool.shuffle(&mut rng);
        }
        self.cursor = 0;
    }

    /// Batches emitted per reset cycle.
    pub fn epoch_len(&self) -> usize {
        let min = self.pools.iter().map(|(_, p)| p.len()).min().unwrap_or(0);
        min / self.n
    }

    /// Number of items per batch (`n` times the number of present classes).
    pub fn batch_len(&self) -> usize {
        self.n * self.pools.len()
    }

    pub fn batches_emitted(&self) -> u64 {
        self.batches_emitted
    }

    /// Emit the next balanced batch: exactly `n` indices of every present
    /// class, in grade order. Reshuffles all pools first whenever any pool
    /// has fewer than `n` remaining.
    pub fn next_batch(&mut self) -> Vec<(usize, GenantGrade)> {
        let remaining = |pool_len: usize, cursor: usize| pool_len.saturating_sub(cursor * self.n);
        let exhausted = self
            .pools
            .iter()
            .any(|(_, p)| remaining(p.len(), self.cursor) < self.n);
        if exhausted {
            self.resets += 1;
            self.shuffle_pools();
        }
        let mut batch = Vec::with_capacity(self.batch_len());
        for (grade, pool) in &self.pools {
            let start = self.cursor * self.n;
            for idx in &pool[start..start + self.n] {
                batch.push((*idx, *grade));
            }
        }
        self.cursor += 1;
        self.batches_emitted += 1;
        batch
    }

    /// Replay `batches` emissions (used when resuming from a checkpoint).
    pub fn advance(&mut self, batches: u64) {
        for _ in 0..batches {
            self.next_batch();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn grades(counts: [usize; 4]) -> Vec<GenantGrade> {
        let mut v = Vec::new();
        for (i, c) in counts.iter().enumerate() {
            for _ in 0..*c {
                v.push(GenantGrade::from_index(i as u8).unwrap());
            }
        }
        v
    }

    #[test]
    fn epoch_length_examples() {
        assert_eq!(epoch_length(&[10, 3, 5, 5], 1).unwrap(), 3);
        assert_eq!(epoch_length(&[6, 6, 6, 6], 6).unwrap(), 1);
        assert_eq!(epoch_length(&[8, 8, 8, 8], 8).unwrap(), 1);
        assert_eq!(epoch_length(&[10, 30, 30, 30], 6).unwrap(), 1);
        assert!(epoch_length(&[5, 6, 6, 6], 6).is_err());
        assert!(epoch_length(&[10, 10], 0).is_err());
    }

    #[test]
    fn batches_are_exactly_balanced() {
        let items = grades([10, 30, 30, 30]);
        let mut s = PerClassSampler::new(&items, 6, 42).unwrap();
        assert_eq!(s.batch_len(), 24);
        for _ in 0..50 {
            let batch = s.next_batch();
            assert_eq!(batch.len(), 24);
            let mut per_class = BTreeMap::new();
            for (_, g) in &batch {
                *per_class.entry(*g).or_insert(0usize) += 1;
            }
            assert!(per_class.values().all(|c| *c == 6));
        }
    }

    #[test]
    fn two_class_enumeration_resets_after_smallest_class() {
        // A has 4 members, B has 2; n = 1 -> reset after 2 batches.
        let mut items = vec![GenantGrade::G0; 4];
        items.extend(vec![GenantGrade::G1; 2]);
        let mut s = PerClassSampler::new(&items, 1, 7).unwrap();
        assert_eq!(s.epoch_len(), 2);
        let mut seen_b = BTreeSet::new();
        for _ in 0..2 {
            let batch = s.next_batch();
            assert_eq!(batch.len(), 2);
            let b_idx = batch.iter().find(|(_, g)| *g == GenantGrade::G1).unwrap().0;
            assert!(seen_b.insert(b_idx), "B repeated within the epoch");
        }
        // Third batch starts a fresh cycle; B indices may repeat now.
        let batch = s.next_batch();
        assert_eq!(batch.len(), 2);
    }

    #[test]
    fn no_repetition_within_an_epoch() {
        let items = grades([12, 18, 24, 30]);
        let mut s = PerClassSampler::new(&items, 3, 5).unwrap();
        let epoch = s.epoch_len();
        assert_eq!(epoch, 4);
        let mut seen = BTreeSet::new();
        for _ in 0..epoch {
            for (idx, _) in s.next_batch() {
                assert!(seen.insert(idx), "index {idx} repeated within epoch");
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let items = grades([8, 8, 8, 8]);
        let mut a = PerClassSampler::new(&items, 2, 99).unwrap();
        let mut b = PerClassSampler::new(&items, 2, 99).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut c = PerClassSampler::new(&items, 2, 100).unwrap();
        let differs = (0..20).any(|_| a.next_batch() != c.next_batch());
        assert!(differs);
    }

    #[test]
    fn construction_fails_when_a_class_is_too_small() {
        let items = grades([2, 8, 8, 8]);
        let err = PerClassSampler::new(&items, 6, 0).unwrap_err().to_string();
        assert!(err.contains("smallest class has 2"), "{err}");
    }

    #[test]
    fn absent_classes_shrink_the_batch() {
        let items = grades([5, 0, 5, 0]);
        let mut s = PerClassSampler::new(&items, 2, 1).unwrap();
        assert_eq!(s.batch_len(), 4);
        let batch = s.next_batch();
        assert_eq!(batch.len(), 4);
        assert!(batch
            .iter()
            .all(|(_, g)| *g == GenantGrade::G0 || *g == GenantGrade::G2));
    }

    #[test]
    fn coverage_rates_track_class_sizes() {
        // n = 1: smallest class members appear exactly once per epoch; a
        // class k times larger appears ~1/k as often per member.
        let items = grades([4, 12, 0, 0]);
        let mut s = PerClassSampler::new(&items, 1, 11).unwrap();
        let epochs = 2400;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..epochs {
            for _ in 0..s.epoch_len() {
                for (idx, _) in s.next_batch() {
                    *counts.entry(idx).or_insert(0) += 1;
                }
            }
        }
        // smallest class: each member exactly once per epoch
        for idx in 0..4 {
            assert_eq!(counts[&idx], epochs, "small-class member {idx}");
        }
        // large class: expected epochs * 4 / 12 each, within 10%
        let expected = epochs as f64 * 4.0 / 12.0;
        for idx in 4..16 {
            let got = counts[&idx] as f64;
            assert!(
                (got - expected).abs() <= 0.10 * expected,
                "member {idx}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn advance_replays_deterministically() {
        let items = grades([6, 6, 6, 6]);
        let mut a = PerClassSampler::new(&items, 2, 3).unwrap();
        for _ in 0..7 {
            a.next_batch();
        }
        let mut b = PerClassSampler::new(&items, 2, 3).unwrap();
        b.advance(7);
        for _ in 0..5 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }
}
