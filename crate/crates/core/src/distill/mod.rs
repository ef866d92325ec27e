//! Objectives, trajectory segmentation, teacher training and the staged
//! distillation loop.

pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod plan;
pub mod stage;
pub mod teacher;

pub use eval::{caption_score, image_agreement, unique_prompts, CaptionScore, TextDecoder};
pub use losses::{
    ar_loss, caption_loss, distill_terms, frozen_logits, image_terms, mtp_loss, text_terms, total_loss, DistillBatch,
    ImageSample, LossTerms, MtpItem, TextSample,
};
pub use metrics::MetricsWriter;
pub use plan::{segment_boundaries, LossWeights, SegmentationPlan, StagePlan, TeacherSource};
pub use stage::{collect_pools, distill_pipeline, distill_pipeline_with, pool_seed, run_stage, stage_probe, StageCheckpoint, StageOptions, StageOutcome, StagePools};
pub use teacher::{evaluate_teacher, train_teacher, EvalRecord, TeacherConfig, TeacherData, TeacherReport};
