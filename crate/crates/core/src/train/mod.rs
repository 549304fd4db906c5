//! Training loop, multi-seed ablation, gradient checking of the full model
//! and synthetic data generation.

mod ablate;
mod config;
mod gradcheck;
mod optim;
mod synth;
mod trainer;

pub use ablate::{
    ablate, ablate_on, cell_dir, summarize, AblationCell, AblationRow, AblationTable, TOP_K,
};
pub use config::{Method, OptimizerKind, TrainConfig};
pub use gradcheck::{gradcheck_model, toy_gradcheck_config, GradcheckOptions};
pub use optim::Optimizer;
pub use synth::{jaccard_score, make_synthetic_corpus, make_synthetic_sts, WORDS};
pub use trainer::{
    evaluate_checkpoint, load_datasets, mean_positive_cosine, train, train_on, RunRecord, StepLog,
    TrainOutcome, CHECKPOINT_FILE, LOG_FILE, RUN_FILE, VOCAB_FILE,
};
