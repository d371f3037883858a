//! Command implementations behind the `noisebench` binary.
//!
//! Every command writes into a fresh output directory and finishes with a
//! `manifest.json` listing each produced file with its SHA-256. Runs are
//! deterministic, so the same config reproduces the same hashes.

mod artifact;
mod commands;
mod config;

pub use artifact::{prepare_output, write_file, write_json, FileEntry, Manifest};
pub use commands::{
    cmd_hpo, cmd_landscape, cmd_ood, cmd_rank, cmd_train, kendall_rows, load_data, load_run_config, ood_partitions,
    rank_entries, resolve_scaling, KendallRow, Loaded, OodRecord, OutputOptions, RankOutput, RunArtifact, STUDY_FILE,
};
pub use config::{
    sha256_hex, DatasetRef, ExperimentConfig, HpoOptions, LandscapeOptions, OodOptions, TrainOptions, DATA_DIR_ENV,
    DEFAULT_EPOCHS, DEFAULT_HIDDEN, DEFAULT_LR, DEFAULT_SEEDS, DEFAULT_TRIALS,
};
