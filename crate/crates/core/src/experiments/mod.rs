//! Deterministic experiment orchestration behind the `gpitlab` CLI:
//! configuration, provenance-stamped CSV output, evaluation tables, and
//! the full training arc.

mod config;
mod csvio;
mod run;
mod table;

pub use config::ExperimentConfig;
pub use csvio::{fmt_f64, write_csv, Provenance};
pub use run::{
    cmd_dump_logits, cmd_evaluate, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_pretrain_seed,
    cmd_sweep_alpha, cmd_sweep_tsl, cmd_train_recognizers, evaluate, finetune, load_or_pretrain,
    load_recognizer_checkpoint, load_separator_checkpoint, metrics_table, pretrain,
    save_recognizer_checkpoint, save_separator_checkpoint, train_recognizers, validation_sisdr,
    Arm, EpochLog, EvalSource, FinetuneOutcome, PretrainOutcome, RecSelector, RecognizerPair,
    StepLog,
};
pub use table::{MetricsTable, TableRow, MIXTURE_LABEL, ORACLE_LABEL};

use thiserror::Error;

use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::recognizer::RecognizerError;
use crate::separator::SeparatorError;
use crate::signals::SignalError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("missing artifact: {0} (run the producing command first)")]
    Missing(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Recognizer(#[from] RecognizerError),
    #[error(transparent)]
    Separator(#[from] SeparatorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
