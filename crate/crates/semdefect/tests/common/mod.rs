//! Shared fixtures for the integration and acceptance suites.

use std::path::Path;

use semdefect::dataset::{ClassSet, ImageRecord, Separation, Split, SynthSpec};
use semdefect::embedder::{embed_records, EmbeddingStore, PreprocessSpec, ReferenceBackend};

pub fn embed_all(records: &[ImageRecord], dir: &Path) -> EmbeddingStore {
    let backend = ReferenceBackend::new();
    embed_records(records, dir, &|_| PreprocessSpec::default(), &backend, 4)
        .expect("embedding the synthetic set succeeds")
}

pub fn dense_labels(store: &EmbeddingStore, class_set: &ClassSet) -> Vec<u32> {
    store
        .labels
        .as_ref()
        .expect("labeled store")
        .iter()
        .map(|&l| class_set.index_of(l).expect("label in class set") as u32)
        .collect()
}

pub fn records_of(records: &[ImageRecord], split: Split) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub fn synth_spec(separation: Separation, images_per_class: usize, wafers: usize) -> SynthSpec {
    SynthSpec {
        num_classes: 11,
        images_per_class,
        wafers_per_class: wafers,
        separation,
        ..SynthSpec::default()
    }
}
