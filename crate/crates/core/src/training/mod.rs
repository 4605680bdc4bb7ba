//! Training loops, metrics, and the fine-tuning/evaluation harness.

pub mod ablation;
pub mod dice;
pub mod finetune;
pub mod metrics;
pub mod pretrain;
pub mod seeds;
