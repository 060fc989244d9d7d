//! Objectives, λ sampling, data, and the training loop.

pub mod data;
pub mod lambda;
pub mod loss;
pub mod trainer;

pub use data::{list_images, read_named, synthetic_textures, write_images, Dataset};
pub use lambda::{equal_mass_bin_edges, pdf_lambda, sample_lambda, LambdaSchedule, LambdaSpacing};
pub use loss::{loss_fixed, loss_variable, rd_objective, LossParts};
pub use trainer::{LogRecord, LossMode, LrSchedule, TrainConfig, Trainer};
