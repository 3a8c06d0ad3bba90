//! End-to-end flows: dataset preparation, training and canvas expansion.

mod dataset;
mod expand;
mod train;

pub use dataset::{
    discover_pairs, load_records, parse_records, prepare_dataset, PrepareOptions, PrepareReport,
    Provenance, SkippedPair, SourcePair, TrainingRecord, IMAGES_DIR, RECORDS_FILE, REPORT_FILE,
};
pub use expand::{
    expand, expand_from, replay, step_seed, ExpandFailure, ExpandObserver, ExpandSettings,
    ExpansionLog, ExpansionState, StepLog, CANVAS_PNG, INITIAL_PNG, STATE_FILE,
};
pub use train::{build_examples, train, NoopObserver, TrainObserver, TrainSummary};

use sha2::{Digest, Sha256};

/// First eight bytes (LE) of `SHA-256(master_le || index_le)`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
