//! Training stages, evaluation protocols and the ablation grid.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod stages;

pub use ablation::{ablation_run, AblationConfig, AblationMean, AblationRow, AblationTable};
pub use config::{Stage, StageConfig, Toggles};
pub use eval::{
    build_retrieval_questions, eval_recognition, eval_retrieval, RecognitionReport,
    RetrievalQuestion, RetrievalReport,
};
pub use metrics::{MetricsReport, StepRecord};
pub use stages::{finetune, pretrain_mmp, train_contrastive, StageOutcome, TrainOptions};
