use serde::{Deserialize, Serialize};

use super::data::{Featurizer, QueryDataset, CF_INPUT_DIM};
use super::train::{train_chain, PairInputs, TrainLog};
use crate::env::{FeatureId, State, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::tinynet::{InitMode, MlpModel, MlpSpec, TrainHyper};

/// A learned mapping from (base feature value, state) to a reshaped feature value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedFeature {
    pub base_id: FeatureId,
    /// Position of the base feature in the environment's feature list.
    pub index: usize,
    pub net: MlpModel,
}

impl CalibratedFeature {
    pub fn untrained(base_id: FeatureId, index: usize, seed: u64) -> Result<Self> {
        let net = MlpModel::init(MlpSpec::calibrated_feature(CF_INPUT_DIM), seed, InitMode::XavierLeaky)?;
        Ok(CalibratedFeature { base_id, index, net })
    }

    pub fn raw(&self, fz: &Featurizer, s: &State) -> Result<f64> {
        Ok(self.net.forward(&fz.cf_input(self.index, s)?)?[0])
    }

    /// Output rescaled by the logit range seen during training.
    pub fn value(&self, fz: &Featurizer, s: &State) -> Result<f64> {
        self.net.logit_range.normalize(self.raw(fz, s)?)
    }

    /// Normalized values for many states.
    pub fn values(&self, fz: &Featurizer, states: &[State]) -> Result<Vec<f64>> {
        let inputs = states
            .iter()
            .map(|s| fz.cf_input(self.index, s))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[f64]> = inputs.iter().map(|x| x.as_slice()).collect();
        self.net
            .forward_scalar_many(&views)?
            .into_iter()
            .map(|r| self.net.logit_range.normalize(r))
            .collect()
    }
}

pub(crate) fn cf_pair_inputs(fz: &Featurizer, index: usize, data: &QueryDataset) -> Result<PairInputs> {
    let mut inputs = PairInputs::new(CF_INPUT_DIM);
    for q in &data.queries {
        inputs.push(&fz.cf_input(index, &q.s1)?, &fz.cf_input(index, &q.s2)?, q.label, 0, 1.0);
    }
    Ok(inputs)
}

/// Trains a calibrated feature for the environment's feature `base_id` from
/// contextual feature queries. With no queries the network stays at its
/// initialization and keeps the default `(0, 1)` logit range.
pub fn train_calibrated_feature(
    base_id: FeatureId,
    data: &QueryDataset,
    fz: &Featurizer,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(CalibratedFeature, TrainLog)> {
    let index = fz
        .env
        .kind
        .feature_index(base_id)
        .ok_or_else(|| Error::UnknownFeature(format!("{base_id} in {}", fz.env.kind)))?;
    let mut cf = CalibratedFeature::untrained(base_id, index, seed)?;
    let inputs = cf_pair_inputs(fz, index, data)?;
    let log = train_chain(&mut [&mut cf.net], &inputs, hyper, seed, 0, true)?;
    Ok((cf, log))
}

/// Per-feature representation used by downstream rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRep {
    /// The normalized base feature, unchanged.
    Identity,
    Learned(CalibratedFeature),
}

/// Three feature representations composed into reward inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedRepresentation {
    pub features: Vec<FeatureRep>,
}

impl CalibratedRepresentation {
    pub fn new(features: Vec<FeatureRep>) -> Result<Self> {
        if features.len() != NUM_FEATURES {
            return Err(Error::DimensionMismatch {
                expected: NUM_FEATURES,
                got: features.len(),
            });
        }
        Ok(CalibratedRepresentation { features })
    }

    /// Reward inputs for every state, `states.len() x 3`.
    pub fn values(&self, fz: &Featurizer, states: &[State]) -> Result<Vec<[f64; NUM_FEATURES]>> {
        let mut out = vec![[0.0; NUM_FEATURES]; states.len()];
        for (i, rep) in self.features.iter().enumerate() {
            match rep {
                FeatureRep::Identity => {
                    for (o, s) in out.iter_mut().zip(states) {
                        o[i] = fz.base_values(s)?[i];
                    }
                }
                FeatureRep::Learned(cf) => {
                    for (o, v) in out.iter_mut().zip(cf.values(fz, states)?) {
                        o[i] = v;
                    }
                }
            }
        }
        Ok(out)
    }
}
