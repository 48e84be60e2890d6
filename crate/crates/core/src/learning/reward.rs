use serde::{Deserialize, Serialize};

use super::calibrated::CalibratedRepresentation;
use super::data::{Featurizer, QueryDataset};
use super::multitask::{latents_of, LATENT_DIM};
use super::train::{train_chain, PairInputs};
use crate::env::{State, NUM_FEATURES, STATE_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::tinynet::{InitMode, Mat, MlpModel, MlpSpec, Tape, TrainHyper};

/// Representation a downstream reward is learned on.
#[derive(Clone, Copy, Debug)]
pub enum Representation<'a> {
    Calibrated(&'a CalibratedRepresentation),
    /// A pretrained multi-task trunk.
    MultiTask(&'a MlpModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardModel {
    /// Linear weights over the three calibrated feature values.
    LinearOverCalibrated {
        representation: CalibratedRepresentation,
        linear: MlpModel,
    },
    /// One hidden ReLU layer over the trunk's latent code.
    MlpHeadOverLatent {
        trunk: MlpModel,
        head: MlpModel,
        frozen: bool,
    },
}

impl RewardModel {
    pub fn values(&self, fz: &Featurizer, states: &[State]) -> Result<Vec<f64>> {
        match self {
            RewardModel::LinearOverCalibrated { representation, linear } => {
                let feats = representation.values(fz, states)?;
                scalar_outputs(linear, feats.iter().map(|f| f.as_slice()), NUM_FEATURES)
            }
            RewardModel::MlpHeadOverLatent { trunk, head, .. } => {
                let lat = latents_of(trunk, fz, states)?;
                scalar_outputs(head, lat.iter().map(|z| z.as_slice()), LATENT_DIM)
            }
        }
    }

    pub fn linear_weights(&self) -> Option<[f64; NUM_FEATURES]> {
        match self {
            RewardModel::LinearOverCalibrated { linear, .. } => {
                let w = &linear.layers[0].weights;
                Some([w[0], w[1], w[2]])
            }
            _ => None,
        }
    }
}

pub(crate) fn scalar_outputs<'a, I>(net: &MlpModel, rows: I, dim: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    let mut out = Vec::with_capacity(rows.len());
    let mut tape = Tape::default();
    for chunk in rows.chunks(256) {
        let m = Mat::from_samples(dim, chunk.iter().copied());
        out.extend_from_slice(net.forward_batch(&m, &mut tape)?.row(0));
    }
    Ok(out)
}

/// Fresh linear reward over calibrated features, no bias.
pub fn init_linear_reward(seed: u64) -> Result<MlpModel> {
    MlpModel::init(MlpSpec::linear(NUM_FEATURES, 1, false), derive_seed(seed, &[tag("linear-reward")]), InitMode::Default)
}

/// Fresh 1x32 reward head over the latent code.
pub fn init_reward_head(seed: u64) -> Result<MlpModel> {
    MlpModel::init(MlpSpec::reward_head(LATENT_DIM), derive_seed(seed, &[tag("reward-head")]), InitMode::Default)
}

/// Trains a linear reward on precomputed calibrated feature values (`dim = 3`).
pub fn train_linear_reward(inputs: &PairInputs, hyper: &TrainHyper, seed: u64) -> Result<MlpModel> {
    let mut linear = init_linear_reward(seed)?;
    train_chain(&mut [&mut linear], inputs, hyper, seed, 0, false)?;
    Ok(linear)
}

/// Trains a reward head on precomputed latent codes of a frozen trunk.
pub fn train_frozen_head(latent_inputs: &PairInputs, hyper: &TrainHyper, seed: u64) -> Result<MlpModel> {
    let mut head = init_reward_head(seed)?;
    train_chain(&mut [&mut head], latent_inputs, hyper, seed, 0, false)?;
    Ok(head)
}

/// Fine-tunes a copy of `trunk` together with a fresh reward head on
/// normalized state inputs.
pub fn train_unfrozen_head(trunk: &MlpModel, state_inputs: &PairInputs, hyper: &TrainHyper, seed: u64) -> Result<(MlpModel, MlpModel)> {
    let mut trunk = trunk.clone();
    trunk.reset_optimizer();
    let mut head = init_reward_head(seed)?;
    train_chain(&mut [&mut trunk, &mut head], state_inputs, hyper, seed, 0, false)?;
    Ok((trunk, head))
}

/// Learns a downstream reward from reward queries on top of `rep`.
///
/// Calibrated representations only support the frozen protocol. Queries
/// labelled equivalent are expected to have been replaced upstream when
/// `hyper.lambda_equiv` is `None`.
pub fn train_reward(
    rep: Representation<'_>,
    data: &QueryDataset,
    fz: &Featurizer,
    hyper: &TrainHyper,
    frozen: bool,
    seed: u64,
) -> Result<RewardModel> {
    match rep {
        Representation::Calibrated(cr) => {
            if !frozen {
                return Err(Error::CalibratedAlwaysFrozen);
            }
            let mut states = Vec::with_capacity(2 * data.len());
            for q in &data.queries {
                states.push(q.s1);
                states.push(q.s2);
            }
            let feats = cr.values(fz, &states)?;
            let mut inputs = PairInputs::new(NUM_FEATURES);
            for (k, q) in data.queries.iter().enumerate() {
                inputs.push(&feats[2 * k], &feats[2 * k + 1], q.label, 0, 1.0);
            }
            let linear = train_linear_reward(&inputs, hyper, seed)?;
            Ok(RewardModel::LinearOverCalibrated {
                representation: cr.clone(),
                linear,
            })
        }
        Representation::MultiTask(trunk) => {
            if frozen {
                let mut states = Vec::with_capacity(2 * data.len());
                for q in &data.queries {
                    states.push(q.s1);
                    states.push(q.s2);
                }
                let lat = latents_of(trunk, fz, &states)?;
                let mut inputs = PairInputs::new(LATENT_DIM);
                for (k, q) in data.queries.iter().enumerate() {
                    inputs.push(&lat[2 * k], &lat[2 * k + 1], q.label, 0, 1.0);
                }
                let head = train_frozen_head(&inputs, hyper, seed)?;
                Ok(RewardModel::MlpHeadOverLatent {
                    trunk: trunk.clone(),
                    head,
                    frozen: true,
                })
            } else {
                let mut inputs = PairInputs::new(STATE_DIM);
                for q in &data.queries {
                    inputs.push(&fz.state_input(&q.s1), &fz.state_input(&q.s2), q.label, 0, 1.0);
                }
                let (trunk, head) = train_unfrozen_head(trunk, &inputs, hyper, seed)?;
                Ok(RewardModel::MlpHeadOverLatent {
                    trunk,
                    head,
                    frozen: false,
                })
            }
        }
    }
}
