//! Shared fixtures for the criterion benches.

use mini_elsa::dataset::{split, subsplit_test, synth_ccpp};
use mini_elsa::sse::{keygen, SearchableStore};
use mini_elsa::valuation::LabeledSet;
use mini_elsa::{Dataset, FeatureMatrix, Scaler};

pub const SEED: u64 = 2024;

/// Scaled training rows and the valuation reference block of a synthetic
/// dataset with `n` records, split 90/10 as in the pipeline.
pub struct ScreeningFixture {
    pub train: LabeledSet,
    pub refs: LabeledSet,
    pub scaled_train: FeatureMatrix,
    pub stream: Vec<([f64; 4], f64)>,
}

pub fn screening_fixture(n: usize, ref_size: usize) -> ScreeningFixture {
    let data = synth_ccpp(n, SEED).expect("synthetic data");
    let (train, test) = split(&data, 0.9, 42).expect("split");
    let (refs, validation) = subsplit_test(&test, ref_size).expect("subsplit");
    let scaler = Scaler::fit(&train).expect("scaler");
    let labeled = |d: &Dataset| LabeledSet::new(scaler.apply(d), d.targets()).expect("labeled set");
    ScreeningFixture {
        train: labeled(&train),
        refs: labeled(&refs),
        scaled_train: scaler.apply(&train),
        stream: validation
            .records()
            .iter()
            .map(|r| (scaler.transform_row(&r.features()), r.pe))
            .collect(),
    }
}

/// A store holding the first `n` synthetic records.
pub fn store_fixture(n: usize) -> SearchableStore {
    let keys = keygen(b"bench master secret").expect("keys");
    let mut store = SearchableStore::new(keys);
    for r in synth_ccpp(n, SEED).expect("synthetic data").records() {
        store.insert(r).expect("fresh id");
    }
    store
}
