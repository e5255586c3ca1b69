//! Configuration, training, checkpoints, evaluation sweeps, and the
//! end-to-end demo pipeline behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod demo;
pub mod eval;
pub mod oracle_check;
pub mod svg;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, LrSchedule, ModelConfig, OptimizerConfig};
pub use demo::{gauss_config, run_demo, DemoOptions, DemoSummary, GaussDiagnostics};
pub use eval::{evaluate, latency_report, measure_latencies, measure_latency, write_sampler_dump, EvalDraw, Quality, SamplerOptions};
pub use sweep::{eval_seeds, nfe_specs, sweep_alpha, sweep_nfe, AlphaSweep, NfeSweep, DEFAULT_ALPHA_GRID};
pub use train::{train, train_with_progress, LogRow, TrainOutcome, Trainer, ValLosses};
pub use oracle_check::{finite_difference_checks, oracle_check, OracleCheckOptions, OracleReport};
