//! Corpus simulation, manifests and the end-to-end training pipeline.

mod manifest;
mod run;
mod simulate;
mod stages;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use manifest::{
    CorpusManifest, MixtureRecord, Oracle, Split, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use run::{config_hash, run_all, RunConfig, RunSummary, SCHEMA_VERSION};
pub use simulate::{simulate_corpus, synth_speech, SimCorpusConfig, SimulatedCorpus, SplitCounts};
pub use stages::{
    derive_pseudo_labels, enhance, evaluate, evaluate_mixture, monaural, real_example, relative_to,
    run_sync, simu_example, train_ctpulse, train_ctse, train_model, ChannelPlan, EpochLog,
    SyncReport, TrainData, TrainOutcome,
};

/// An independent random stream derived from a run seed and a purpose name.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
