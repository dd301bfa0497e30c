//! The compact student network, its losses and training, transfer to new
//! label sets, and evaluation.

pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, write_metrics};
pub use eval::{
    auc, evaluate_identification, evaluate_retrieval, evaluate_verification, verification_pairs,
    verification_scores, IdentificationReport, VerificationPair,
};
pub use loss::{classification_loss, regression_loss, total_loss, LossTerms, Objective, Supervision};
pub use model::{
    init_student, transfer_student, xavier_uniform, Activation, Architecture, Dense, Gradients, LayerSpec,
    StudentModel, Tap, DEFAULT_IDENTITY_DIM, DEFAULT_TEACHER_PARAM_BUDGET,
};
pub use train::{finetune, gradient_check, pretrain_student, EpochMetrics, TrainConfig};
