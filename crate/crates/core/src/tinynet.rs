//! A small feed-forward network engine: batched forward pass, exact
//! reverse-mode gradients, Adam with coupled L2 weight decay and JSON
//! checkpoints.
//!
//! Activations are stored unit-major (`rows = units`, `cols = batch`) so the
//! inner loops run contiguously over the batch.

use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Dense row-major matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn reset(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.clear();
        self.data.resize(rows * cols, 0.0);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Unit-major batch from per-sample rows.
    pub fn from_samples<'a, I>(dim: usize, samples: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
        I::IntoIter: ExactSizeIterator,
    {
        let it = samples.into_iter();
        let n = it.len();
        let mut m = Mat::zeros(dim, n);
        for (b, x) in it.enumerate() {
            debug_assert_eq!(x.len(), dim);
            for (i, &v) in x.iter().enumerate() {
                m.data[i * n + b] = v;
            }
        }
        m
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// LeakyReLU negative slope for hidden layers; 0 gives a plain ReLU.
    pub negative_slope: f64,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl MlpSpec {
    /// Three 32-unit LeakyReLU layers and a positive scalar output.
    pub fn calibrated_feature(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![32, 32, 32],
            negative_slope: DEFAULT_LEAKY_SLOPE,
            output_dim: 1,
            output_activation: OutputActivation::Softplus,
            bias: true,
        }
    }

    /// Shared multi-task trunk: three 32-unit layers into a 7-dim latent.
    pub fn trunk(input_dim: usize, latent_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![32, 32, 32],
            negative_slope: DEFAULT_LEAKY_SLOPE,
            output_dim: latent_dim,
            output_activation: OutputActivation::Identity,
            bias: true,
        }
    }

    /// Single affine map.
    pub fn linear(input_dim: usize, output_dim: usize, bias: bool) -> Self {
        MlpSpec {
            input_dim,
            hidden: Vec::new(),
            negative_slope: DEFAULT_LEAKY_SLOPE,
            output_dim,
            output_activation: OutputActivation::Identity,
            bias,
        }
    }

    /// One 32-unit ReLU layer with a scalar output.
    pub fn reward_head(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: vec![32],
            negative_slope: 0.0,
            output_dim: 1,
            output_activation: OutputActivation::Identity,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_dim >= 1 && self.output_dim >= 1 && self.hidden.iter().all(|&h| h >= 1);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid network shape {self:?}")))
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }
}

/// One affine layer. `weights` is `out_dim x in_dim`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Layer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: if bias { vec![0.0; out_dim] } else { Vec::new() },
        }
    }

    fn zeros_like(&self) -> Self {
        Layer {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, input: &Mat, out: &mut Mat) {
        let n = input.cols;
        out.reset(self.out_dim, n);
        affine_cols(&mut out.data, n, &self.weights, self.in_dim, &input.data, Init::RowBias(&self.bias));
    }
}

/// Per-parameter gradients (or Adam moments), shaped like the layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= k);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Gradients,
    pub v: Gradients,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Running range of raw outputs seen during training; `(0, 1)` until the
/// first observation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRange {
    pub min: f64,
    pub max: f64,
    pub observed: bool,
}

impl Default for LogitRange {
    fn default() -> Self {
        LogitRange {
            min: 0.0,
            max: 1.0,
            observed: false,
        }
    }
}

impl LogitRange {
    pub fn track(&mut self, outputs: &[f64]) {
        for &v in outputs {
            if !self.observed {
                self.min = v;
                self.max = v;
                self.observed = true;
            } else {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
        }
    }

    /// `(raw - min) / (max - min)`, unclamped.
    pub fn normalize(&self, raw: f64) -> Result<f64> {
        let span = self.max - self.min;
        if !(span > 0.0) {
            return Err(Error::CollapsedLogitRange(self.min));
        }
        Ok((raw - self.min) / span)
    }
}

/// Optimizer settings for one training role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda_reg: f64,
    /// Weight of equivalence-labelled pairs. `None` means equivalence answers
    /// are discarded and replaced by fresh non-equivalent queries.
    pub lambda_equiv: Option<f64>,
    pub epochs: usize,
}

impl TrainHyper {
    pub fn calibrated_feature() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            lambda_reg: 1e-4,
            lambda_equiv: Some(10.0),
            epochs: 500,
        }
    }

    pub fn multitask_representation() -> Self {
        TrainHyper {
            epochs: 3000,
            ..TrainHyper::calibrated_feature()
        }
    }

    pub fn calibrated_reward() -> Self {
        TrainHyper {
            lr: 1e-2,
            batch_size: 32,
            weight_decay: 0.0,
            lambda_reg: 0.0,
            lambda_equiv: None,
            epochs: 200,
        }
    }

    pub fn multitask_reward() -> Self {
        TrainHyper {
            lr: 1e-4,
            batch_size: 64,
            weight_decay: 1e-3,
            lambda_reg: 1e-3,
            lambda_equiv: Some(1.0),
            epochs: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr > 0.0 && self.batch_size >= 1 && self.weight_decay >= 0.0 && self.lambda_reg >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Xavier-uniform scaled by the LeakyReLU gain; zero biases.
    XavierLeaky,
    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    Default,
}

/// Saved forward and pre-activation values for one batch.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// `inputs[l]` is the input to layer `l`.
    inputs: Vec<Mat>,
    /// Pre-activation output of each layer.
    pre: Vec<Mat>,
    output: Mat,
}

impl Tape {
    pub fn output(&self) -> &Mat {
        &self.output
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub adam: AdamState,
    pub logit_range: LogitRange,
}

const LANES: usize = 8;

/// Starting value of each output element in [`affine_cols`].
#[derive(Clone, Copy)]
enum Init<'a> {
    Zero,
    RowBias(&'a [f64]),
    /// Add onto the existing contents of `out`.
    Accumulate,
}

/// Accumulates `W` columns of one output row in registers.
#[inline(always)]
fn affine_block<const W: usize>(orow: &mut [f64], c: usize, start: Option<f64>, wrow: &[f64], x: &[f64], n: usize) {
    let mut acc = [0.0; W];
    match start {
        Some(b) => acc = [b; W],
        None => acc.copy_from_slice(&orow[c..c + W]),
    }
    for (&wi, xrow) in wrow.iter().zip(x.chunks_exact(n)) {
        let xs: &[f64; W] = xrow[c..c + W].try_into().unwrap();
        for l in 0..W {
            acc[l] += wi * xs[l];
        }
    }
    orow[c..c + W].copy_from_slice(&acc);
}

/// `out[j][c] = init + sum_i w[j][i] * x[i][c]` for row-major `w`
/// (`rows x k`), `x` (`k x n`) and `out` (`rows x n`). Terms are added in
/// increasing `i` for every element; blocks of columns are kept in
/// registers with several independent accumulators.
fn affine_cols(out: &mut [f64], n: usize, w: &[f64], k: usize, x: &[f64], init: Init<'_>) {
    const WIDE: usize = 4 * LANES;
    for (j, (orow, wrow)) in out.chunks_exact_mut(n).zip(w.chunks_exact(k)).enumerate() {
        let start = match init {
            Init::Zero => Some(0.0),
            Init::RowBias(b) => Some(b.get(j).copied().unwrap_or(0.0)),
            Init::Accumulate => None,
        };
        let mut c = 0;
        while c + WIDE <= n {
            affine_block::<WIDE>(orow, c, start, wrow, x, n);
            c += WIDE;
        }
        while c + LANES <= n {
            affine_block::<LANES>(orow, c, start, wrow, x, n);
            c += LANES;
        }
        while c < n {
            affine_block::<1>(orow, c, start, wrow, x, n);
            c += 1;
        }
    }
}

/// Row-major transpose of a `rows x cols` matrix into `out`.
fn transpose_into(data: &[f64], rows: usize, cols: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(rows * cols, 0.0);
    for (r, row) in data.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for k in 0..LANES {
            acc[k] += x[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Written as a multiply by a selected constant so it compiles without
/// data-dependent branches.
fn leaky_relu(v: &mut [f64], slope: f64) {
    for x in v {
        *x *= if *x >= 0.0 { 1.0 } else { slope };
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    crate::oracle::sigmoid(x)
}

impl MlpModel {
    pub fn init(spec: MlpSpec, seed: u64, mode: InitMode) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let dims = spec.dims();
        let gain = (2.0 / (1.0 + spec.negative_slope * spec.negative_slope)).sqrt();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut layer = Layer::zeros(fan_in, fan_out, spec.bias);
            let bound = match mode {
                InitMode::XavierLeaky => gain * (6.0 / (fan_in + fan_out) as f64).sqrt(),
                InitMode::Default => 1.0 / (fan_in as f64).sqrt(),
            };
            for v in &mut layer.weights {
                *v = rng.gen_range(-bound..bound);
            }
            if mode == InitMode::Default {
                for v in &mut layer.bias {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            layers.push(layer);
        }
        Ok(Self::from_layers(spec, layers))
    }

    fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Self {
        let zeros = Gradients {
            layers: layers.iter().map(Layer::zeros_like).collect(),
        };
        MlpModel {
            spec,
            layers,
            adam: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            logit_range: LogitRange::default(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Drops optimizer moments, e.g. before fine-tuning a pretrained network.
    pub fn reset_optimizer(&mut self) {
        self.adam.step = 0;
        self.adam.m.fill_zero();
        self.adam.v.fill_zero();
    }


    /// Batched forward pass. `input` is `input_dim x batch`.
    pub fn forward_batch<'t>(&self, input: &Mat, tape: &'t mut Tape) -> Result<&'t Mat> {
        if input.rows != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: input.rows,
            });
        }
        let nl = self.layers.len();
        tape.inputs.resize_with(nl, Mat::default);
        tape.pre.resize_with(nl, Mat::default);
        tape.inputs[0].clone_from(input);
        for l in 0..nl {
            let (ins, pre) = (&tape.inputs, &mut tape.pre);
            self.layers[l].forward(&ins[l], &mut pre[l]);
            if l + 1 < nl {
                let next = &mut tape.inputs[l + 1];
                next.clone_from(&tape.pre[l]);
                leaky_relu(&mut next.data, self.spec.negative_slope);
            }
        }
        tape.output.clone_from(&tape.pre[nl - 1]);
        if self.spec.output_activation == OutputActivation::Softplus {
            for v in &mut tape.output.data {
                *v = softplus(*v);
            }
        }
        Ok(&tape.output)
    }

    /// Forward pass for one sample.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let mut tape = Tape::default();
        let input = Mat {
            rows: x.len(),
            cols: 1,
            data: x.to_vec(),
        };
        Ok(self.forward_batch(&input, &mut tape)?.data.clone())
    }

    /// Scalar outputs for many samples, evaluated in chunks.
    pub fn forward_scalar_many(&self, samples: &[&[f64]]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        let mut tape = Tape::default();
        for chunk in samples.chunks(256) {
            let m = Mat::from_samples(self.spec.input_dim, chunk.iter().copied());
            let y = self.forward_batch(&m, &mut tape)?;
            out.extend_from_slice(y.row(0));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for upstream gradient `d_out`
    /// (`output_dim x batch`) into `grads`. Returns the input gradient when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        d_out: &Mat,
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> Option<Mat> {
        let nl = self.layers.len();
        let n = d_out.cols;
        let mut dz = d_out.clone();
        if self.spec.output_activation == OutputActivation::Softplus {
            for (d, &z) in dz.data.iter_mut().zip(&tape.pre[nl - 1].data) {
                *d *= logistic(z);
            }
        }
        let mut dx = Mat::default();
        let mut wt = Vec::new();
        let mut xt = Vec::new();
        for l in (0..nl).rev() {
            let layer = &self.layers[l];
            let g = &mut grads.layers[l];
            let input = &tape.inputs[l];
            if !g.bias.is_empty() {
                for (gb, dzj) in g.bias.iter_mut().zip(dz.data.chunks_exact(n)) {
                    *gb += lane_sum(dzj);
                }
            }
            // dW += dZ X^T, with X^T laid out as `n x in_dim`.
            transpose_into(&input.data, layer.in_dim, n, &mut xt);
            affine_cols(&mut g.weights, layer.in_dim, &dz.data, n, &xt, Init::Accumulate);
            if l == 0 && !want_input_grad {
                return None;
            }
            dx.reset(layer.in_dim, n);
            wt.clear();
            wt.extend((0..layer.in_dim).flat_map(|i| (0..layer.out_dim).map(move |j| layer.weights[j * layer.in_dim + i])));
            affine_cols(&mut dx.data, n, &wt, layer.out_dim, &dz.data, Init::Zero);
            if l == 0 {
                return Some(dx);
            }
            // Through the hidden activation that produced this layer's input.
            let slope = self.spec.negative_slope;
            for (d, &z) in dx.data.iter_mut().zip(&tape.pre[l - 1].data) {
                *d *= if z < 0.0 { slope } else { 1.0 };
            }
            std::mem::swap(&mut dz, &mut dx);
        }
        None
    }

    /// One Adam update with weight decay added to the gradient.
    pub fn adam_step(&mut self, grads: &Gradients, hyper: &TrainHyper) {
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let step_size = hyper.lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        let wd = hyper.weight_decay;
        let adam = &mut self.adam;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let (m, v) = (&mut adam.m.layers[l], &mut adam.v.layers[l]);
            let pairs = [
                (&mut layer.weights, &g.weights, &mut m.weights, &mut v.weights),
                (&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (p, g, m, v) in pairs {
                for (((pk, &gk), mk), vk) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let gk = gk + wd * *pk;
                    *mk = ADAM_BETA1 * *mk + (1.0 - ADAM_BETA1) * gk;
                    *vk = ADAM_BETA2 * *vk + (1.0 - ADAM_BETA2) * gk * gk;
                    *pk -= step_size * *mk / (vk.sqrt() / bc2_sqrt + ADAM_EPS);
                }
            }
        }
    }

    pub fn track_logits(&mut self, outputs: &[f64]) {
        self.logit_range.track(outputs);
    }

    /// Scalar output rescaled by the tracked logit range.
    pub fn normalized_output(&self, x: &[f64]) -> Result<f64> {
        let raw = self.forward(x)?[0];
        self.logit_range.normalize(raw)
    }

    pub fn to_checkpoint(&self, train_meta: Option<TrainMeta>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            logit_range: self.logit_range,
            train_meta,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: ck.version,
            });
        }
        ck.spec.validate()?;
        let dims = ck.spec.dims();
        if ck.layers.len() + 1 != dims.len() {
            return Err(Error::Config("checkpoint layer count does not match spec".into()));
        }
        for (l, w) in ck.layers.iter().zip(dims.windows(2)) {
            let nb = if ck.spec.bias { w[1] } else { 0 };
            if l.in_dim != w[0] || l.out_dim != w[1] || l.weights.len() != w[0] * w[1] || l.bias.len() != nb {
                return Err(Error::Config("checkpoint layer shape does not match spec".into()));
            }
        }
        let mut model = Self::from_layers(ck.spec, ck.layers);
        model.logit_range = ck.logit_range;
        Ok(model)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub hyper: TrainHyper,
    pub query_count: usize,
}

/// On-disk model: spec, row-major layer weights, logit range and training metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    pub logit_range: LogitRange,
    pub train_meta: Option<TrainMeta>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 3,
            hidden: vec![4, 4],
            negative_slope: 0.01,
            output_dim: 2,
            output_activation: OutputActivation::Identity,
            bias: true,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = MlpModel::init(MlpSpec::calibrated_feature(24), 7, InitMode::XavierLeaky).unwrap();
        let b = MlpModel::init(MlpSpec::calibrated_feature(24), 7, InitMode::XavierLeaky).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        let c = MlpModel::init(MlpSpec::calibrated_feature(24), 8, InitMode::XavierLeaky).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn xavier_std_matches_gain() {
        let spec = MlpSpec {
            input_dim: 128,
            hidden: vec![128],
            negative_slope: 0.01,
            output_dim: 1,
            output_activation: OutputActivation::Identity,
            bias: true,
        };
        let m = MlpModel::init(spec, 3, InitMode::XavierLeaky).unwrap();
        let w = &m.layers[1 - 1].weights;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let gain = (2.0f64 / (1.0 + 0.01 * 0.01)).sqrt();
        let want = gain * (2.0 / 256.0f64).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "std {std} want {want}");
    }

    #[test]
    fn default_init_bounds() {
        let m = MlpModel::init(MlpSpec::reward_head(7), 1, InitMode::Default).unwrap();
        let b0 = 1.0 / 7f64.sqrt();
        assert!(m.layers[0].weights.iter().chain(&m.layers[0].bias).all(|v| v.abs() <= b0));
        assert!(m.layers[0].bias.iter().any(|&v| v != 0.0));
        let b1 = 1.0 / 32f64.sqrt();
        assert!(m.layers[1].weights.iter().all(|v| v.abs() <= b1));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = MlpModel::init(tiny_spec(), 0, InitMode::XavierLeaky).unwrap();
        m.set_params_flat(&vec![0.0; m.num_params()]).unwrap();
        assert_eq!(m.forward(&[0.3, -2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn linear_layer_matches_hand_multiply() {
        let mut m = MlpModel::init(MlpSpec::linear(2, 2, true), 0, InitMode::Default).unwrap();
        // W = [[1, 2], [3, 4]], b = [0.5, -1]
        m.set_params_flat(&[1.0, 2.0, 3.0, 4.0, 0.5, -1.0]).unwrap();
        let y = m.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 2.0 + 0.5, 3.0 - 4.0 - 1.0]);
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let spec = MlpSpec {
            input_dim: 1,
            hidden: vec![1],
            negative_slope: 0.01,
            output_dim: 1,
            output_activation: OutputActivation::Identity,
            bias: true,
        };
        let mut m = MlpModel::init(spec, 0, InitMode::XavierLeaky).unwrap();
        m.set_params_flat(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((m.forward(&[-1.0]).unwrap()[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn softplus_output_is_positive() {
        let mut m = MlpModel::init(MlpSpec::calibrated_feature(2), 0, InitMode::XavierLeaky).unwrap();
        let flat: Vec<f64> = m.params_flat().iter().map(|v| v * 3.0).collect();
        m.set_params_flat(&flat).unwrap();
        for x in [[-3.0, 4.0], [5.0, -2.0], [0.0, 0.0]] {
            assert!(m.forward(&x).unwrap()[0] > 0.0);
        }
        let flat: Vec<f64> = m.params_flat().iter().map(|v| v * 40.0).collect();
        m.set_params_flat(&flat).unwrap();
        for x in [[-30.0, 40.0], [50.0, -20.0]] {
            let y = m.forward(&x).unwrap()[0];
            assert!(y.is_finite() && y >= 0.0);
        }
    }

    #[test]
    fn backward_matches_finite_differences_for_sum_of_squares() {
        let mut m = MlpModel::init(tiny_spec(), 11, InitMode::Default).unwrap();
        let xs: Vec<Vec<f64>> = vec![vec![0.2, -0.7, 1.1], vec![-0.4, 0.3, 0.9], vec![1.5, 0.1, -0.2]];
        let input = Mat::from_samples(3, xs.iter().map(|v| v.as_slice()));
        let loss = |m: &MlpModel| {
            let mut t = Tape::default();
            m.forward_batch(&input, &mut t).unwrap().data.iter().map(|v| v * v).sum::<f64>()
        };
        let mut tape = Tape::default();
        let out = m.forward_batch(&input, &mut tape).unwrap().clone();
        let d_out = Mat {
            rows: out.rows,
            cols: out.cols,
            data: out.data.iter().map(|v| 2.0 * v).collect(),
        };
        let mut g = Gradients::zeros_like(&m);
        let dx = m.backward(&tape, &d_out, &mut g, true).unwrap();
        let analytic = g.flatten();
        let theta = m.params_flat();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut p = theta.clone();
            p[k] += h;
            m.set_params_flat(&p).unwrap();
            let up = loss(&m);
            p[k] -= 2.0 * h;
            m.set_params_flat(&p).unwrap();
            let down = loss(&m);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
        }
        m.set_params_flat(&theta).unwrap();
        // input gradient for sample 0, feature 1
        let mut xp = xs.clone();
        xp[0][1] += h;
        let up = {
            let i = Mat::from_samples(3, xp.iter().map(|v| v.as_slice()));
            let mut t = Tape::default();
            m.forward_batch(&i, &mut t).unwrap().data.iter().map(|v| v * v).sum::<f64>()
        };
        xp[0][1] -= 2.0 * h;
        let down = {
            let i = Mat::from_samples(3, xp.iter().map(|v| v.as_slice()));
            let mut t = Tape::default();
            m.forward_batch(&i, &mut t).unwrap().data.iter().map(|v| v * v).sum::<f64>()
        };
        let fd = (up - down) / (2.0 * h);
        assert!((fd - dx.data[1 * 3]).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = MlpModel::init(tiny_spec(), 1, InitMode::XavierLeaky).unwrap();
        let before = m.params_flat();
        let mut g = Gradients::zeros_like(&m);
        for (k, l) in g.layers.iter_mut().enumerate() {
            l.weights.iter_mut().enumerate().for_each(|(i, v)| *v = if (i + k) % 2 == 0 { 0.3 } else { -2.0 });
            l.bias.fill(1e-3);
        }
        let hyper = TrainHyper {
            weight_decay: 0.0,
            ..TrainHyper::calibrated_feature()
        };
        m.adam_step(&g, &hyper);
        assert_eq!(m.adam.step, 1);
        let flat_g = g.flatten();
        for ((a, b), gk) in m.params_flat().iter().zip(&before).zip(&flat_g) {
            let delta = a - b;
            assert!((delta + 1e-3 * gk.signum()).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn adam_with_zero_grad_and_no_decay_is_identity() {
        let mut m = MlpModel::init(tiny_spec(), 1, InitMode::XavierLeaky).unwrap();
        let before = m.params_flat();
        let g = Gradients::zeros_like(&m);
        let hyper = TrainHyper {
            weight_decay: 0.0,
            ..TrainHyper::calibrated_feature()
        };
        m.adam_step(&g, &hyper);
        m.adam_step(&g, &hyper);
        assert_eq!(m.params_flat(), before);
        assert_eq!(m.adam.step, 2);
    }

    #[test]
    fn logit_range_normalization() {
        let mut r = LogitRange::default();
        assert_eq!(r.normalize(1.7).unwrap(), 1.7);
        r.track(&[0.2, 0.8]);
        assert!((r.normalize(0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!(r.normalize(0.1).unwrap() < 0.0);
        let mut flat = LogitRange::default();
        flat.track(&[0.4, 0.4]);
        assert!(matches!(flat.normalize(0.4), Err(Error::CollapsedLogitRange(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = MlpModel::init(MlpSpec::calibrated_feature(24), 5, InitMode::XavierLeaky).unwrap();
        m.track_logits(&[0.1, 2.5]);
        let meta = TrainMeta {
            seed: 5,
            hyper: TrainHyper::calibrated_feature(),
            query_count: 100,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.to_checkpoint(Some(meta.clone())).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.train_meta, Some(meta));
        let back = MlpModel::from_checkpoint(ck).unwrap();
        assert_eq!(back.params_flat(), m.params_flat());
        assert_eq!(back.logit_range, m.logit_range);
        let mut bad = m.to_checkpoint(None);
        bad.version = 9;
        assert!(MlpModel::from_checkpoint(bad).is_err());
    }
}
