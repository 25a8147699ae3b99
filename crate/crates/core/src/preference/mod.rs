//! Preference optimization of the retriever against generator rewards.

pub mod annotate;
pub mod losses;
pub mod train;

pub use annotate::{annotate_pair, Annotation, PreferencePair, ScoredSet, DEFAULT_MAX_RESAMPLES};
pub use losses::{dpo_loss, grpo_advantages, grpo_loss, ndcg_reward, nll_loss, simpo_loss, PairLoss};
pub use train::{train_rl, Algorithm, CheckpointMeta, SampleGroup, StepRecord, TrainConfig, TrainOutcome, Validator};
