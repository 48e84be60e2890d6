//! Minibatch training over chains of networks applied to paired inputs.
//!
//! A chain is a sequence of networks where each feeds the next (a single
//! calibrated-feature net, a trunk followed by linear task heads, a trunk
//! followed by a reward head). Each query contributes one output row of the
//! last network, selected by its group index.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::error::{Error, Result};
use crate::oracle::Label;
use crate::rng::{derive_seed, tag, Rng};
use crate::tinynet::{Gradients, Mat, MlpModel, Tape, TrainHyper};

/// Precomputed network inputs for a set of pairs.
#[derive(Clone, Debug, Default)]
pub struct PairInputs {
    pub dim: usize,
    /// Row `i` (length `dim`) is the first state of pair `i`.
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub labels: Vec<Label>,
    /// Output row of the last network for each pair.
    pub group: Vec<usize>,
    /// Per-pair loss multiplier applied on top of the `1 / batch` mean.
    pub weight: Vec<f64>,
}

impl PairInputs {
    pub fn new(dim: usize) -> Self {
        PairInputs {
            dim,
            ..Default::default()
        }
    }

    pub fn push(&mut self, x1: &[f64], x2: &[f64], label: Label, group: usize, weight: f64) {
        debug_assert!(x1.len() == self.dim && x2.len() == self.dim);
        self.x1.extend_from_slice(x1);
        self.x2.extend_from_slice(x2);
        self.labels.push(label);
        self.group.push(group);
        self.weight.push(weight);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `dim x 2B` batch: columns `0..B` hold first states, `B..2B` second states.
    pub fn batch_matrix(&self, idx: &[usize], out: &mut Mat) {
        let b = idx.len();
        out.reset(self.dim, 2 * b);
        let cols = 2 * b;
        for (c, &i) in idx.iter().enumerate() {
            let r1 = &self.x1[i * self.dim..(i + 1) * self.dim];
            let r2 = &self.x2[i * self.dim..(i + 1) * self.dim];
            for d in 0..self.dim {
                out.data[d * cols + c] = r1[d];
                out.data[d * cols + b + c] = r2[d];
            }
        }
    }
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Reusable buffers for one chain.
#[derive(Default)]
pub struct ChainScratch {
    tapes: Vec<Tape>,
    batch: Mat,
    pub values: Vec<f64>,
}

/// Mean loss of the pairs `idx` under the chain, accumulating gradients for
/// networks `trainable_from..` into `grads`. Returns the batch loss; the raw
/// values of both states of every pair are left in `scratch.values`.
pub fn chain_loss_grad(
    nets: &[&MlpModel],
    data: &PairInputs,
    idx: &[usize],
    weights: LossWeights,
    grads: &mut [Gradients],
    trainable_from: usize,
    scratch: &mut ChainScratch,
) -> Result<f64> {
    let b = idx.len();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    scratch.tapes.resize_with(nets.len(), Tape::default);
    data.batch_matrix(idx, &mut scratch.batch);
    let mut input = std::mem::take(&mut scratch.batch);
    for (k, net) in nets.iter().enumerate() {
        let out = net.forward_batch(&input, &mut scratch.tapes[k])?;
        input.clone_from(out);
    }
    let out = input;
    let cols = 2 * b;
    let mut d_out = Mat::zeros(out.rows, cols);
    let mut loss = 0.0;
    scratch.values.clear();
    let inv_b = 1.0 / b as f64;
    for (c, &i) in idx.iter().enumerate() {
        let row = data.group[i];
        let v1 = out.data[row * cols + c];
        let v2 = out.data[row * cols + b + c];
        scratch.values.push(v1);
        scratch.values.push(v2);
        let (l, d1, d2) = weights.pair_term(v1, v2, data.labels[i]);
        let w = data.weight[i] * inv_b;
        loss += w * l;
        d_out.data[row * cols + c] = w * d1;
        d_out.data[row * cols + b + c] = w * d2;
    }
    scratch.batch = out;
    let mut upstream = d_out;
    for k in (trainable_from..nets.len()).rev() {
        let need_input = k > trainable_from;
        match nets[k].backward(&scratch.tapes[k], &upstream, &mut grads[k], need_input) {
            Some(dx) => upstream = dx,
            None => break,
        }
    }
    Ok(loss)
}

/// Trains networks `trainable_from..` of the chain with Adam, shuffling the
/// pairs each epoch and keeping the final partial batch. When `track_logits`
/// is set, every raw output seen is folded into the last network's logit range.
pub fn train_chain(
    nets: &mut [&mut MlpModel],
    data: &PairInputs,
    hyper: &TrainHyper,
    seed: u64,
    trainable_from: usize,
    track_logits: bool,
) -> Result<TrainLog> {
    hyper.validate()?;
    let mut log = TrainLog::default();
    if data.is_empty() {
        return Ok(log);
    }
    let weights = LossWeights::from(hyper);
    let mut rng = Rng::seed_from_u64(derive_seed(seed, &[tag("shuffle")]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads: Vec<Gradients> = nets.iter().map(|n| Gradients::zeros_like(n)).collect();
    let mut scratch = ChainScratch::default();
    let last = nets.len() - 1;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            grads.iter_mut().for_each(Gradients::fill_zero);
            let loss = {
                let view: Vec<&MlpModel> = nets.iter().map(|n| &**n).collect();
                chain_loss_grad(&view, data, chunk, weights, &mut grads, trainable_from, &mut scratch)?
            };
            epoch_loss += loss * chunk.len() as f64;
            if track_logits {
                nets[last].track_logits(&scratch.values);
            }
            for k in trainable_from..nets.len() {
                nets[k].adam_step(&grads[k], hyper);
            }
        }
        log.epoch_loss.push(epoch_loss / data.len() as f64);
    }
    Ok(log)
}

/// Mean loss over all pairs without touching parameters.
pub fn chain_loss(nets: &[&MlpModel], data: &PairInputs, weights: LossWeights) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut grads: Vec<Gradients> = nets.iter().map(|n| Gradients::zeros_like(n)).collect();
    chain_loss_grad(nets, data, &idx, weights, &mut grads, nets.len(), &mut ChainScratch::default())
}

/// Largest relative error between backprop gradients of the full-data loss
/// and central finite differences, over all parameters of networks
/// `trainable_from..`. Each parameter is probed at steps `h` and `h / 10`
/// and the closer agreement is kept: the wider step may straddle a
/// leaky-ReLU kink, the narrower one loses digits to roundoff, and a wrong
/// gradient disagrees at both.
pub fn max_gradient_error(nets: &[MlpModel], data: &PairInputs, weights: LossWeights, trainable_from: usize, h: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let view: Vec<&MlpModel> = nets.iter().collect();
    let mut grads: Vec<Gradients> = nets.iter().map(Gradients::zeros_like).collect();
    chain_loss_grad(&view, data, &idx, weights, &mut grads, trainable_from, &mut ChainScratch::default())?;
    let mut worst = 0.0f64;
    let mut probe: Vec<MlpModel> = nets.to_vec();
    for k in trainable_from..nets.len() {
        let analytic = grads[k].flatten();
        let base = nets[k].params_flat();
        for (p, &a) in analytic.iter().enumerate() {
            let mut best = f64::INFINITY;
            for step in [h, h / 10.0] {
                let mut shifted = base.clone();
                shifted[p] = base[p] + step;
                probe[k].set_params_flat(&shifted)?;
                let up = chain_loss(&probe.iter().collect::<Vec<_>>(), data, weights)?;
                shifted[p] = base[p] - step;
                probe[k].set_params_flat(&shifted)?;
                let down = chain_loss(&probe.iter().collect::<Vec<_>>(), data, weights)?;
                probe[k].set_params_flat(&base)?;
                let numeric = (up - down) / (2.0 * step);
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
