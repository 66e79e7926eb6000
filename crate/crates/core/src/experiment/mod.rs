//! Benchmark experiments on generated or file-backed data, and the ablation
//! runner that turns a grid of arms and seeds into a report.

mod ablation;
mod bench;
mod postbench;

pub use ablation::{median, run_ablation, AblationReport, AblationRow, ArmSpec, DataSource, ExperimentConfig, SourceFiles, SummaryRow};
pub use bench::{standard_synth, standard_train, SourceData, TrainBench, TrainBenchConfig};
pub use postbench::{generate_post_bench, PostBenchConfig};
