//! Inference: mask schedule, MaskGIT image sampling with CFG and top-k,
//! regularization labels, inpainting, greedy AR and Jacobi text decoding,
//! and trajectory records.

pub mod image;
pub mod schedule;
pub mod text;
pub mod trajectory;

pub use image::{
    argmax, cfg_combine, guided_logits, image_logits, inpaint, maskgit_step, sample_image, top_k_filter,
    update_reg_label, SamplingConfig, StepOutcome,
};
pub use schedule::{cosine_schedule, MaskSchedule};
pub use text::{ar_decode, decode_text_long, default_max_iters, jacobi_decode, LongDecode};
pub use trajectory::{ImageTrajectory, StepRecord, TextTrajectory, Trajectory};
