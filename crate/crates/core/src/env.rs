//! Tabletop environments: state layout, state sampling, the six closed-form
//! base features and dataset-level min-max normalization.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag, Rng};

pub const STATE_DIM: usize = 23;
pub const NUM_FEATURES: usize = 3;
pub const NUM_CONTEXTS: usize = 2;
pub const DEFAULT_STATE_COUNT: usize = 10_000;
pub const TRAIN_FRACTION: f64 = 0.8;

const LAPTOP_CAP: f64 = 0.8;
const HUMAN_CAP: f64 = 1.0;
const STOVE_CAP: f64 = 0.8;

/// Seed of the per-environment state pool. Seeds passed to
/// [`build_state_set`] only change the train/test partition.
pub const STATE_POOL_SEED: u64 = 0x5747_4154_4553;

/// A tabletop scene. Flattens to 23 scalars in the order
/// `[ee_pos, ee_rot (row-major), human_pos, stove_pos, laptop_pos, context]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; STATE_DIM]", into = "[f64; STATE_DIM]")]
pub struct State {
    pub ee_pos: [f64; 3],
    /// End-effector-to-world rotation, row-major.
    pub ee_rot: [f64; 9],
    pub human_pos: [f64; 3],
    pub stove_pos: [f64; 3],
    pub laptop_pos: [f64; 3],
    pub context: [f64; NUM_CONTEXTS],
}

impl State {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[0..3].copy_from_slice(&self.ee_pos);
        out[3..12].copy_from_slice(&self.ee_rot);
        out[12..15].copy_from_slice(&self.human_pos);
        out[15..18].copy_from_slice(&self.stove_pos);
        out[18..21].copy_from_slice(&self.laptop_pos);
        out[21..23].copy_from_slice(&self.context);
        out
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                expected: STATE_DIM,
                got: v.len(),
            });
        }
        let take3 = |o: usize| [v[o], v[o + 1], v[o + 2]];
        let mut ee_rot = [0.0; 9];
        ee_rot.copy_from_slice(&v[3..12]);
        Ok(State {
            ee_pos: take3(0),
            ee_rot,
            human_pos: take3(12),
            stove_pos: take3(15),
            laptop_pos: take3(18),
            context: [v[21], v[22]],
        })
    }

    /// EE x-axis expressed in the world frame (first column of the rotation).
    pub fn ee_x_axis(&self) -> [f64; 3] {
        [self.ee_rot[0], self.ee_rot[3], self.ee_rot[6]]
    }
}

impl From<[f64; STATE_DIM]> for State {
    fn from(v: [f64; STATE_DIM]) -> Self {
        State::from_slice(&v).expect("fixed-size array")
    }
}

impl From<State> for [f64; STATE_DIM] {
    fn from(s: State) -> Self {
        s.to_array()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    WeightedBlock,
    Cup,
    Utensil,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::WeightedBlock, EnvKind::Cup, EnvKind::Utensil];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::WeightedBlock => "weighted_block",
            EnvKind::Cup => "cup",
            EnvKind::Utensil => "utensil",
        }
    }

    /// Features in reward-weight order. Stove distance is always first.
    pub fn features(self) -> [FeatureId; NUM_FEATURES] {
        use FeatureId::*;
        match self {
            EnvKind::WeightedBlock => [StoveDist, TableDist, LaptopDist],
            EnvKind::Cup => [StoveDist, CupAngle, LaptopDist],
            EnvKind::Utensil => [StoveDist, HumanDist, PointAtHuman],
        }
    }

    /// Contextual elements; stove heat is always element 0.
    pub fn contexts(self) -> [ContextElement; NUM_CONTEXTS] {
        use ContextElement::*;
        match self {
            EnvKind::WeightedBlock => [StoveHeat, BlockWeight],
            EnvKind::Cup => [StoveHeat, CupFullness],
            EnvKind::Utensil => [StoveHeat, UtensilSharpness],
        }
    }

    /// Index of the context element that reshapes the given feature.
    pub fn affecting_context(self, feature: FeatureId) -> usize {
        match feature {
            FeatureId::StoveDist => 0,
            _ => 1,
        }
    }

    pub fn feature_index(self, feature: FeatureId) -> Option<usize> {
        self.features().iter().position(|&f| f == feature)
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownEnvironment(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    TableDist,
    LaptopDist,
    HumanDist,
    PointAtHuman,
    CupAngle,
    StoveDist,
}

impl FeatureId {
    pub const ALL: [FeatureId; 6] = [
        FeatureId::TableDist,
        FeatureId::LaptopDist,
        FeatureId::HumanDist,
        FeatureId::PointAtHuman,
        FeatureId::CupAngle,
        FeatureId::StoveDist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::TableDist => "table_dist",
            FeatureId::LaptopDist => "laptop_dist",
            FeatureId::HumanDist => "human_dist",
            FeatureId::PointAtHuman => "point_at_human",
            FeatureId::CupAngle => "cup_angle",
            FeatureId::StoveDist => "stove_dist",
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownFeature(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextElement {
    StoveHeat,
    BlockWeight,
    CupFullness,
    UtensilSharpness,
}

impl ContextElement {
    pub fn name(self) -> &'static str {
        match self {
            ContextElement::StoveHeat => "stove_heat",
            ContextElement::BlockWeight => "block_weight",
            ContextElement::CupFullness => "cup_fullness",
            ContextElement::UtensilSharpness => "utensil_sharpness",
        }
    }

    /// Number of evenly spaced values used for visualization and live sessions.
    pub fn discrete_levels(self) -> usize {
        match self {
            ContextElement::StoveHeat => 8,
            ContextElement::BlockWeight => 16,
            ContextElement::CupFullness => 6,
            ContextElement::UtensilSharpness => 4,
        }
    }

    /// Discrete values, evenly spaced over `[0, 1]` inclusive.
    pub fn discrete_values(self) -> Vec<f64> {
        let n = self.discrete_levels();
        (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
    }
}

impl FromStr for ContextElement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ContextElement::StoveHeat,
            ContextElement::BlockWeight,
            ContextElement::CupFullness,
            ContextElement::UtensilSharpness,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::UnknownContext(s.to_string()))
    }
}

/// Fixed object positions. Objects do not move between states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Layout {
    pub table_z: f64,
    pub human: [f64; 3],
    pub stove: [f64; 3],
    pub laptop: [f64; 3],
    pub workspace: WorkspaceBox,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            table_z: 0.0,
            human: [-0.60, 0.00, 0.0],
            stove: [0.40, 0.30, 0.0],
            laptop: [0.30, -0.30, 0.0],
            workspace: WorkspaceBox::default(),
        }
    }
}

/// Axis-aligned bounds for end-effector positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for WorkspaceBox {
    fn default() -> Self {
        WorkspaceBox {
            min: [-0.8, -0.8, 0.0],
            max: [0.8, 0.8, 0.8],
        }
    }
}

impl WorkspaceBox {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).all(|i| self.max[i] > self.min[i]) {
            Ok(())
        } else {
            Err(Error::Config(format!("degenerate workspace box {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub layout: Layout,
}

impl EnvironmentSpec {
    pub fn new(kind: EnvKind, layout: Layout) -> Result<Self> {
        layout.workspace.validate()?;
        Ok(EnvironmentSpec { kind, layout })
    }

    pub fn with_default_layout(kind: EnvKind) -> Self {
        EnvironmentSpec {
            kind,
            layout: Layout::default(),
        }
    }

    pub fn features(&self) -> [FeatureId; NUM_FEATURES] {
        self.kind.features()
    }

    pub fn contexts(&self) -> [ContextElement; NUM_CONTEXTS] {
        self.kind.contexts()
    }

    pub fn base_feature(&self, id: FeatureId, s: &State) -> Result<f64> {
        base_feature(id, s, &self.layout)
    }

    /// Raw (unnormalized) values of this environment's three features.
    pub fn base_features(&self, s: &State) -> Result<[f64; NUM_FEATURES]> {
        let ids = self.features();
        Ok([
            self.base_feature(ids[0], s)?,
            self.base_feature(ids[1], s)?,
            self.base_feature(ids[2], s)?,
        ])
    }

    /// A state with the given EE pose and context and this layout's objects.
    pub fn state_at(&self, ee_pos: [f64; 3], ee_rot: [f64; 9], context: [f64; 2]) -> State {
        State {
            ee_pos,
            ee_rot,
            human_pos: self.layout.human,
            stove_pos: self.layout.stove,
            laptop_pos: self.layout.laptop,
            context,
        }
    }
}

/// Uniformly distributed rotation matrix (row-major) from a uniform unit quaternion.
pub fn random_rotation(rng: &mut Rng) -> [f64; 9] {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y) = (a * (2.0 * PI * u2).sin(), a * (2.0 * PI * u2).cos());
    let (z, w) = (b * (2.0 * PI * u3).sin(), b * (2.0 * PI * u3).cos());
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

fn random_ee_pos(layout: &Layout, rng: &mut Rng) -> [f64; 3] {
    let wb = &layout.workspace;
    let mut p = [0.0; 3];
    for i in 0..3 {
        p[i] = rng.gen_range(wb.min[i]..=wb.max[i]);
    }
    p
}

/// Samples an EE position in the workspace, a uniform orientation and a
/// uniform context in `[0, 1]^2`.
pub fn sample_state(env: &EnvironmentSpec, rng: &mut Rng) -> State {
    let ee_pos = random_ee_pos(&env.layout, rng);
    let ee_rot = random_rotation(rng);
    let context = [rng.gen::<f64>(), rng.gen::<f64>()];
    env.state_at(ee_pos, ee_rot, context)
}

/// Like [`sample_state`] but each context element takes one of its discrete levels.
pub fn sample_state_discrete(env: &EnvironmentSpec, rng: &mut Rng) -> State {
    let ee_pos = random_ee_pos(&env.layout, rng);
    let ee_rot = random_rotation(rng);
    let ctx = env.contexts();
    let mut context = [0.0; 2];
    for (c, el) in context.iter_mut().zip(ctx) {
        let n = el.discrete_levels();
        *c = rng.gen_range(0..n) as f64 / (n - 1) as f64;
    }
    env.state_at(ee_pos, ee_rot, context)
}

fn planar_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Closed-form feature value before normalization.
pub fn base_feature(id: FeatureId, s: &State, layout: &Layout) -> Result<f64> {
    Ok(match id {
        FeatureId::TableDist => s.ee_pos[2] - layout.table_z,
        FeatureId::LaptopDist => planar_dist(&s.ee_pos, &s.laptop_pos).min(LAPTOP_CAP),
        FeatureId::HumanDist => planar_dist(&s.ee_pos, &s.human_pos).min(HUMAN_CAP),
        FeatureId::StoveDist => planar_dist(&s.ee_pos, &s.stove_pos).min(STOVE_CAP),
        FeatureId::PointAtHuman => {
            let d = [
                s.human_pos[0] - s.ee_pos[0],
                s.human_pos[1] - s.ee_pos[1],
                s.human_pos[2] - s.ee_pos[2],
            ];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm < 1e-12 {
                return Err(Error::CoincidentPositions);
            }
            let x = s.ee_x_axis();
            ((x[0] * d[0] + x[1] * d[1] + x[2] * d[2]) / norm).clamp(-1.0, 1.0)
        }
        FeatureId::CupAngle => s.ee_rot[6],
    })
}

/// Min-max bounds for an environment's features and for every state dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub features: [FeatureId; NUM_FEATURES],
    pub feature_min: [f64; NUM_FEATURES],
    pub feature_max: [f64; NUM_FEATURES],
    pub state_min: [f64; STATE_DIM],
    pub state_max: [f64; STATE_DIM],
}

impl Normalizer {
    pub fn fit(states: &[State], env: &EnvironmentSpec) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyStateSet);
        }
        let features = env.features();
        let mut feature_min = [f64::INFINITY; NUM_FEATURES];
        let mut feature_max = [f64::NEG_INFINITY; NUM_FEATURES];
        let mut state_min = [f64::INFINITY; STATE_DIM];
        let mut state_max = [f64::NEG_INFINITY; STATE_DIM];
        for s in states {
            let raw = env.base_features(s)?;
            for i in 0..NUM_FEATURES {
                feature_min[i] = feature_min[i].min(raw[i]);
                feature_max[i] = feature_max[i].max(raw[i]);
            }
            for (d, v) in s.to_array().into_iter().enumerate() {
                state_min[d] = state_min[d].min(v);
                state_max[d] = state_max[d].max(v);
            }
        }
        for i in 0..NUM_FEATURES {
            if feature_max[i] <= feature_min[i] {
                return Err(Error::DegenerateFeatureRange(features[i].to_string()));
            }
        }
        Ok(Normalizer {
            features,
            feature_min,
            feature_max,
            state_min,
            state_max,
        })
    }

    /// Affine map of a raw feature value. Not clamped: held-out states may leave `[0, 1]`.
    pub fn feature(&self, index: usize, raw: f64) -> f64 {
        (raw - self.feature_min[index]) / (self.feature_max[index] - self.feature_min[index])
    }

    pub fn features(&self, env: &EnvironmentSpec, s: &State) -> Result<[f64; NUM_FEATURES]> {
        let raw = env.base_features(s)?;
        Ok([
            self.feature(0, raw[0]),
            self.feature(1, raw[1]),
            self.feature(2, raw[2]),
        ])
    }

    /// Per-dimension min-max normalized state. Constant dimensions map to 0.
    pub fn state(&self, s: &State) -> [f64; STATE_DIM] {
        let mut out = s.to_array();
        for (d, v) in out.iter_mut().enumerate() {
            let span = self.state_max[d] - self.state_min[d];
            *v = if span > 0.0 {
                (*v - self.state_min[d]) / span
            } else {
                0.0
            };
        }
        out
    }
}

pub fn fit_normalizer(set: &StateSet, env: &EnvironmentSpec) -> Result<Normalizer> {
    Normalizer::fit(&set.states, env)
}

const STATE_SET_VERSION: u32 = 1;

/// A sampled state pool with a seed-dependent 80/20 train/test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSet {
    pub version: u32,
    pub env: EnvKind,
    pub seed: u64,
    pub n: usize,
    pub layout: Layout,
    #[serde(default)]
    pub discrete_contexts: bool,
    pub states: Vec<State>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl StateSet {
    pub fn train_states(&self) -> impl Iterator<Item = &State> + '_ {
        self.train_idx.iter().map(|&i| &self.states[i])
    }

    pub fn test_states(&self) -> impl Iterator<Item = &State> + '_ {
        self.test_idx.iter().map(|&i| &self.states[i])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_vec(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let set: StateSet = serde_json::from_slice(&body)?;
        if set.version != STATE_SET_VERSION {
            return Err(Error::Version {
                expected: STATE_SET_VERSION,
                found: set.version,
            });
        }
        Ok(set)
    }
}

/// `n` states from the environment's fixed pool, split 80/20 by `seed`.
pub fn build_state_set(env: &EnvironmentSpec, n: usize, seed: u64) -> Result<StateSet> {
    build(env, n, seed, false)
}

/// Same as [`build_state_set`] with contexts restricted to their discrete levels.
pub fn build_discrete_state_set(env: &EnvironmentSpec, n: usize, seed: u64) -> Result<StateSet> {
    build(env, n, seed, true)
}

fn build(env: &EnvironmentSpec, n: usize, seed: u64, discrete: bool) -> Result<StateSet> {
    if n < 10 {
        return Err(Error::TooFewStates { min: 10, got: n });
    }
    env.layout.workspace.validate()?;
    let mode = if discrete { "discrete" } else { "continuous" };
    let mut pool_rng = rng_from(STATE_POOL_SEED, &[tag(env.kind.name()), tag(mode), n as u64]);
    let states: Vec<State> = (0..n)
        .map(|_| {
            if discrete {
                sample_state_discrete(env, &mut pool_rng)
            } else {
                sample_state(env, &mut pool_rng)
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng_from(seed, &[tag("split"), tag(env.kind.name())]);
    order.shuffle(&mut split_rng);
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut test_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(StateSet {
        version: STATE_SET_VERSION,
        env: env.kind,
        seed,
        n,
        layout: env.layout,
        discrete_contexts: discrete,
        states,
        train_idx,
        test_idx,
    })
}
