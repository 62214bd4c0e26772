//! N-ary error correcting output codes for multi-class classification.
//!
//! A multi-class problem over `N_C` classes is split into `N_L` smaller
//! problems. Each base learner sees the original classes merged into `N`
//! meta-classes (one column of a [`CodingMatrix`]); at prediction time the
//! learners' meta-class votes form a codeword that is decoded back to the
//! nearest class row by Hamming distance.
//!
//! The crate is organised by subsystem:
//!
//! * [`coding`]: coding-matrix generation, validation, metrics and CSV I/O.
//! * [`decoding`]: minimum Hamming distance decoding.
//! * [`learners`]: from-scratch feed-forward networks, optimizers and
//!   learning-rate schedules.
//! * [`ensemble`]: relabeling, training under the three parameter-sharing
//!   strategies, and ensemble prediction.
//! * [`data`]: IDX/CSV loaders, synthetic blobs, splitting, standardization.
//! * [`experiment`]: seeded sweeps over `N`, `N_L` and sharing strategy.

pub mod coding;
pub mod data;
pub mod decoding;
pub mod ensemble;
mod error;
pub mod experiment;
pub mod learners;
pub mod seed;

pub use coding::{
    class_merge_degree, generate_coding_matrix, min_row_distance, suggested_learner_range, CodingMatrix, MatrixMetrics,
    MetaPartition, ValidationReport, Violation,
};
pub use data::Dataset;
pub use decoding::{decode, decode_batch, hamming_distance, DecodeResult, PredictionVector};
pub use ensemble::{
    evaluate_accuracy, parameter_counts, predict_ensemble, relabel, train_ensemble, EnsembleModel, EnsembleOptions,
    ParamCountReport, ShareKind, SharingStrategy,
};
pub use error::{Error, Result};
pub use experiment::{
    emit_report, prepare_data, run_experiment, ExperimentConfig, ExperimentReport, PreparedData, ReportFormat,
};
pub use learners::{Activation, LabeledBatch, NetworkParams, NetworkSpec, OptimizerKind, ScheduleKind, TrainConfig};
