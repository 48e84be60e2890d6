//! Losses and trainers: calibrated features from contextual feature queries,
//! multi-task baseline representations, and downstream rewards.

pub mod calibrated;
pub mod data;
pub mod loss;
pub mod multitask;
pub mod reward;
pub mod train;

pub use calibrated::{train_calibrated_feature, CalibratedFeature, CalibratedRepresentation, FeatureRep};
pub use data::{sample_pairs, Featurizer, Query, QueryDataset, QueryStream, CF_INPUT_DIM};
pub use loss::{bt_learn_prob, ce_loss, reg_loss, total_loss, LossWeights};
pub use multitask::{split_budget, train_multitask, MultiTaskRep, LATENT_DIM};
pub use reward::{train_reward, Representation, RewardModel};
pub use train::{chain_loss, chain_loss_grad, max_gradient_error, train_chain, ChainScratch, PairInputs, TrainLog};
