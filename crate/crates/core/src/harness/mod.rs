//! Experiment harness: configuration, the training loop, checkpoints, run
//! records, sweeps and Pareto fronts.

pub mod checkpoint;
pub mod config;
mod float_serde;
pub mod pareto;
pub mod record;
pub mod sweep;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{RunConfig, DATA_DIR_ENV};
pub use pareto::pareto_front;
pub use record::{MetricsRow, RunMetadata, RunRecord, RunStatus};
pub use sweep::{run_sweep, SweepConfig};
pub use train::{run_training, run_training_with};

/// Independent seed for sub-stream `tag` of `seed` (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
