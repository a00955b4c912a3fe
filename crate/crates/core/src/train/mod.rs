//! Training harness: synthetic data, metrics, Adam with temperature
//! schedules, and gradient verification.

pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use data::{generate_synthetic, random_terms, Dataset, PlantedTerm, SyntheticSpec};
pub use gradcheck::{finite_diff_grad_check, GradCheckConfig, GradCheckReport};
pub use metrics::{auc, bce_loss, uauc, Uauc};
pub use optim::{anneal_tau, Adam, AdamConfig, AnnealSchedule};
pub use trainer::{evaluate, loss_and_grads, train, write_trace_csv, EvalMetrics, StepRecord, TrainConfig, TrainOutcome, WarmRestart};
