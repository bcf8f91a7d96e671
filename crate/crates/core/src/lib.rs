//! Distribution-aware prompt tuning over frozen mini dual encoders.
//!
//! Learnable text and visual prompts are optimized against a CLIP-style
//! contrastive loss plus two dispersion terms: one spreads class text
//! embeddings apart on the hypersphere, the other pulls image embeddings
//! toward per-class prototypes. Everything, including the reverse-mode
//! differentiation, is implemented in this crate.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod prompts;
pub mod rng;
pub mod trainer;

pub use analysis::{evaluate, ExperimentReport};
pub use autodiff::{grad_check, grad_check_many, Axis, Graph, Tensor, Var};
pub use data::{base_new_split, generate_dataset, sample_k_shot, FewShotDataset, Sample, Split};
pub use encoders::{EncoderConfig, FrozenEncoderPair};
pub use error::{Error, Result};
pub use losses::{LossWeights, Prototypes};
pub use config::ExperimentConfig;
pub use prompts::PromptSet;
pub use trainer::{Mode, TrainConfig, TrainTrace};
