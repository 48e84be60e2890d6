use serde::{Deserialize, Serialize};

use super::data::{Featurizer, QueryDataset};
use super::train::{train_chain, PairInputs, TrainLog};
use crate::env::{State, STATE_DIM};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::tinynet::{InitMode, Mat, MlpModel, MlpSpec, Tape, TrainHyper};

pub const LATENT_DIM: usize = 7;

/// Shared trunk with one linear head per training reward. The heads are
/// stored as a single `latent -> N` linear map; row `h` is head `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskRep {
    pub trunk: MlpModel,
    pub heads: MlpModel,
}

impl MultiTaskRep {
    pub fn untrained(num_heads: usize, seed: u64) -> Result<Self> {
        let trunk = MlpModel::init(MlpSpec::trunk(STATE_DIM, LATENT_DIM), derive_seed(seed, &[tag("trunk")]), InitMode::XavierLeaky)?;
        let heads = MlpModel::init(MlpSpec::linear(LATENT_DIM, num_heads, true), derive_seed(seed, &[tag("heads")]), InitMode::XavierLeaky)?;
        Ok(MultiTaskRep { trunk, heads })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.spec.output_dim
    }

    /// Latent codes of normalized state inputs.
    pub fn latents(&self, fz: &Featurizer, states: &[State]) -> Result<Vec<[f64; LATENT_DIM]>> {
        latents_of(&self.trunk, fz, states)
    }

    /// Per-head reward values, `heads x states`.
    pub fn head_values(&self, fz: &Featurizer, states: &[State]) -> Result<Vec<Vec<f64>>> {
        let lat = self.latents(fz, states)?;
        let m = Mat::from_samples(LATENT_DIM, lat.iter().map(|z| z.as_slice()));
        let mut tape = Tape::default();
        let out = self.heads.forward_batch(&m, &mut tape)?;
        Ok((0..out.rows).map(|h| out.row(h).to_vec()).collect())
    }
}

pub(crate) fn latents_of(trunk: &MlpModel, fz: &Featurizer, states: &[State]) -> Result<Vec<[f64; LATENT_DIM]>> {
    let mut out = Vec::with_capacity(states.len());
    let mut tape = Tape::default();
    for chunk in states.chunks(256) {
        let inputs: Vec<[f64; STATE_DIM]> = chunk.iter().map(|s| fz.state_input(s)).collect();
        let m = Mat::from_samples(STATE_DIM, inputs.iter().map(|x| x.as_slice()));
        let z = trunk.forward_batch(&m, &mut tape)?;
        for c in 0..z.cols {
            let mut v = [0.0; LATENT_DIM];
            for (r, vr) in v.iter_mut().enumerate() {
                *vr = z.data[r * z.cols + c];
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Splits a query budget across `heads`, giving the remainder to the
/// lowest-index heads one query each.
pub fn split_budget(total: usize, heads: usize) -> Vec<usize> {
    (0..heads).map(|h| total / heads + usize::from(h < total % heads)).collect()
}

/// Pair inputs for joint multi-task training. Each pair is weighted so a
/// batch estimates the unweighted sum of per-head mean losses.
pub(crate) fn multitask_pair_inputs(fz: &Featurizer, per_head: &[QueryDataset]) -> PairInputs {
    let total: usize = per_head.iter().map(QueryDataset::len).sum();
    let mut inputs = PairInputs::new(STATE_DIM);
    for (h, data) in per_head.iter().enumerate() {
        let w = total as f64 / data.len().max(1) as f64;
        for q in &data.queries {
            inputs.push(&fz.state_input(&q.s1), &fz.state_input(&q.s2), q.label, h, w);
        }
    }
    inputs
}

/// Jointly trains the trunk and all linear heads; `per_head[h]` holds the
/// reward queries answered under training reward `h`.
pub fn train_multitask(
    per_head: &[QueryDataset],
    fz: &Featurizer,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(MultiTaskRep, TrainLog)> {
    if per_head.is_empty() {
        return Err(Error::Config("multi-task training needs at least one head".into()));
    }
    let mut rep = MultiTaskRep::untrained(per_head.len(), seed)?;
    let inputs = multitask_pair_inputs(fz, per_head);
    let log = train_chain(&mut [&mut rep.trunk, &mut rep.heads], &inputs, hyper, seed, 0, false)?;
    Ok((rep, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(100, 50), vec![2; 50]);
        assert_eq!(split_budget(100, 25), vec![4; 25]);
        assert_eq!(split_budget(100, 1), vec![100]);
        let s = split_budget(100, 3);
        assert_eq!(s, vec![34, 33, 33]);
        assert_eq!(split_budget(7, 10).iter().sum::<usize>(), 7);
    }
}
