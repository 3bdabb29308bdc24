//! Configuration, experiment drivers and metric files used by the CLI.

pub mod config;
pub mod experiments;
pub mod output;

pub use config::ExperimentConfig;
pub use experiments::{
    ablation_experiment, diversity_experiment, evaluate, load_model, noise_table, pretrain, reward_window_means,
    run_ablate, run_align, run_diversity, run_eval, run_noise_table, run_pretrain, summary_window, AblationRun,
    DiversityRow, EvalReport, NoiseRow,
};
pub use output::{read_metrics, MetricSink, RunDir, TableWriter};
