//! Shared helpers for the integration tests.

use std::path::Path;

use vfgrade::dataset::{split_cases, Manifest, SplitSet};

/// Split a manifest at case level, scanning split seeds until the test
/// partition carries both binary classes and every grade present in the
/// train partition has at least `min_per_class` members. Rewrites the
/// manifest file in place. Deterministic: the first satisfying seed wins.
pub fn presplit_manifest(manifest_path: &Path, test_fraction: f64, min_per_class: usize) {
    let manifest = Manifest::load(manifest_path).unwrap();
    for seed in 0..1000u64 {
        let candidate = split_cases(&manifest, test_fraction, seed).unwrap();
        let test_counts = candidate.grade_counts(SplitSet::Test);
        let train_counts = candidate.grade_counts(SplitSet::Train);
        let test_total: usize = test_counts.iter().sum();
        let normals = test_counts[0];
        let binary_ok = normals > 0 && normals < test_total;
        let train_ok = train_counts.iter().all(|c| *c == 0 || *c >= min_per_class);
        if binary_ok && train_ok {
            candidate.save(manifest_path).unwrap();
            return;
        }
    }
    panic!("no split seed below 1000 satisfies the test preconditions");
}
