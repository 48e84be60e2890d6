//! Simulated human: ground-truth calibrated features, linear ground-truth
//! rewards and Bradley-Terry responses with an equivalence threshold.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{EnvKind, EnvironmentSpec, FeatureId, Normalizer, State, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag, Rng};

/// Bell-shaped surface peaking at `(mu_phi, mu_c)`.
pub fn gaussian(phi: f64, c: f64, sigma: f64, mu_phi: f64, mu_c: f64, n: f64, b: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2 = (phi - mu_phi).powi(2) + (c - mu_c).powi(2);
    n / (2.0 * std::f64::consts::PI * s2) * (-r2 / (2.0 * s2)).exp() + b
}

pub fn logistic(phi: f64, l: f64, k: f64, mu_phi: f64, b: f64) -> f64 {
    l / (1.0 + (-k * (phi - mu_phi)).exp()) + b
}

/// Parabolic bowl with minimum `b` at `(mu_phi, mu_c)`.
pub fn bowl(phi: f64, c: f64, n_phi: f64, n_c: f64, mu_phi: f64, mu_c: f64, b: f64) -> f64 {
    n_phi * (phi - mu_phi).powi(2) + n_c * (c - mu_c).powi(2) + b
}

/// Logistic variant whose denominator is `1 + e^{-k} (phi - mu_phi)`; the
/// offset multiplies the exponential instead of sitting inside it.
pub fn modlogistic(phi: f64, l: f64, k: f64, mu_phi: f64, b: f64) -> Result<f64> {
    let denom = 1.0 + (-k).exp() * (phi - mu_phi);
    if denom.abs() < 1e-12 {
        return Err(Error::Pole(phi));
    }
    Ok(l / denom + b)
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// The seven ground-truth calibrated feature shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtCalibratedFn {
    Stove,
    Table,
    LaptopByWeight,
    CupAngle,
    LaptopByFullness,
    Human,
    Point,
}

impl GtCalibratedFn {
    pub const ALL: [GtCalibratedFn; 7] = [
        GtCalibratedFn::Stove,
        GtCalibratedFn::Table,
        GtCalibratedFn::LaptopByWeight,
        GtCalibratedFn::CupAngle,
        GtCalibratedFn::LaptopByFullness,
        GtCalibratedFn::Human,
        GtCalibratedFn::Point,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GtCalibratedFn::Stove => "stove",
            GtCalibratedFn::Table => "table",
            GtCalibratedFn::LaptopByWeight => "laptop_by_weight",
            GtCalibratedFn::CupAngle => "cup_angle",
            GtCalibratedFn::LaptopByFullness => "laptop_by_fullness",
            GtCalibratedFn::Human => "human",
            GtCalibratedFn::Point => "point",
        }
    }

    /// Which function reshapes `feature` in environment `env`.
    pub fn for_feature(env: EnvKind, feature: FeatureId) -> Self {
        match (env, feature) {
            (_, FeatureId::StoveDist) => GtCalibratedFn::Stove,
            (_, FeatureId::TableDist) => GtCalibratedFn::Table,
            (EnvKind::Cup, FeatureId::LaptopDist) => GtCalibratedFn::LaptopByFullness,
            (_, FeatureId::LaptopDist) => GtCalibratedFn::LaptopByWeight,
            (_, FeatureId::CupAngle) => GtCalibratedFn::CupAngle,
            (_, FeatureId::HumanDist) => GtCalibratedFn::Human,
            (_, FeatureId::PointAtHuman) => GtCalibratedFn::Point,
        }
    }

    /// Environment and feature this function is defined over.
    pub fn home(self) -> (EnvKind, FeatureId) {
        match self {
            GtCalibratedFn::Stove => (EnvKind::WeightedBlock, FeatureId::StoveDist),
            GtCalibratedFn::Table => (EnvKind::WeightedBlock, FeatureId::TableDist),
            GtCalibratedFn::LaptopByWeight => (EnvKind::WeightedBlock, FeatureId::LaptopDist),
            GtCalibratedFn::CupAngle => (EnvKind::Cup, FeatureId::CupAngle),
            GtCalibratedFn::LaptopByFullness => (EnvKind::Cup, FeatureId::LaptopDist),
            GtCalibratedFn::Human => (EnvKind::Utensil, FeatureId::HumanDist),
            GtCalibratedFn::Point => (EnvKind::Utensil, FeatureId::PointAtHuman),
        }
    }
}

impl fmt::Display for GtCalibratedFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GtCalibratedFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GtCalibratedFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFunction(s.to_string()))
    }
}

/// Ground-truth calibrated value of normalized base feature `phi` under context `c`.
pub fn gt_calibrated(f: GtCalibratedFn, phi: f64, c: f64) -> Result<f64> {
    use GtCalibratedFn::*;
    let v = match f {
        Stove => {
            if c == 0.0 {
                1.0
            } else {
                bowl(phi, c, 1.0, 2.0, -1.0, 1.0, -3.0)
            }
        }
        Table => bowl(phi, c, 1.8, 1.5, 1.0, 1.0, 0.0),
        LaptopByWeight => {
            if c == 0.0 || phi >= 1.0 {
                1.0
            } else {
                bowl(phi, c, 2.5, 2.5, 0.0, 1.0, -1.0)
            }
        }
        CupAngle => {
            if c == 0.0 || phi >= 1.0 {
                1.0
            } else {
                modlogistic(phi, -2.0, -1.1, 2.0, -0.65)? + bowl(phi, c, 0.5, 1.2, -0.2, 1.0, -1.0)
            }
        }
        LaptopByFullness => {
            if c == 0.0 || phi >= 1.0 {
                1.0
            } else {
                bowl(phi, c, 2.0, 1.5, 0.0, 1.0, -1.5)
            }
        }
        Human => {
            if phi >= 1.0 {
                1.0
            } else {
                gaussian(phi, c, 0.2, 1.0, 0.0, 6.0, -0.55) + modlogistic(phi, -2.0, -1.1, 2.0, -0.4)?
            }
        }
        Point => {
            if phi < 1.0 / 3.0 {
                1.0
            } else {
                modlogistic(phi, 0.2, -1.0, 0.5, 0.0)? + gaussian(phi, c, 0.5, 0.4, 0.0, 2.0, -0.5)
            }
        }
    };
    Ok(clamp01(v))
}

/// Which of an environment's features are context-calibrated in the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "feature")]
pub enum Scenario {
    /// Only this feature is reshaped by context; the other two pass through.
    Single(FeatureId),
    All,
}

impl Scenario {
    pub fn for_env(env: EnvKind) -> Vec<Scenario> {
        let mut out = vec![Scenario::All];
        out.extend(env.features().into_iter().map(Scenario::Single));
        out
    }

    pub fn calibrated_mask(self, env: EnvKind) -> [bool; NUM_FEATURES] {
        let feats = env.features();
        match self {
            Scenario::All => [true; NUM_FEATURES],
            Scenario::Single(f) => [feats[0] == f, feats[1] == f, feats[2] == f],
        }
    }

    pub fn validate(self, env: EnvKind) -> Result<Self> {
        match self {
            Scenario::Single(f) if env.feature_index(f).is_none() => Err(Error::InvalidScenario(
                format!("{f} is not a feature of {env}"),
            )),
            s => Ok(s),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Single(id) => write!(f, "single:{id}"),
            Scenario::All => f.write_str("all"),
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Scenario::All);
        }
        match s.strip_prefix("single:") {
            Some(feat) => Ok(Scenario::Single(feat.parse()?)),
            None => Err(Error::InvalidScenario(s.to_string())),
        }
    }
}

/// Linear reward weights over an environment's three features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub [f64; NUM_FEATURES]);

pub const WEIGHT_LEVELS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

impl RewardWeights {
    pub const UNIFORM: RewardWeights = RewardWeights([1.0, 1.0, 1.0]);

    /// All 125 grid rewards in lexicographic order.
    pub fn grid() -> Vec<RewardWeights> {
        let mut out = Vec::with_capacity(125);
        for a in WEIGHT_LEVELS {
            for b in WEIGHT_LEVELS {
                for c in WEIGHT_LEVELS {
                    out.push(RewardWeights([a, b, c]));
                }
            }
        }
        out
    }

    pub fn dot(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        self.0[0] * x[0] + self.0[1] * x[1] + self.0[2] * x[2]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0.0)
    }
}

/// Ground truth for one environment: calibrated features of normalized base
/// features and the linear rewards built on them.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub env: EnvironmentSpec,
    pub normalizer: Normalizer,
    fns: [GtCalibratedFn; NUM_FEATURES],
    contexts: [usize; NUM_FEATURES],
}

impl GroundTruth {
    pub fn new(env: EnvironmentSpec, normalizer: Normalizer) -> Self {
        let feats = env.features();
        let fns = feats.map(|f| GtCalibratedFn::for_feature(env.kind, f));
        let contexts = feats.map(|f| env.kind.affecting_context(f));
        GroundTruth {
            env,
            normalizer,
            fns,
            contexts,
        }
    }

    pub fn function(&self, index: usize) -> GtCalibratedFn {
        self.fns[index]
    }

    pub fn context_index(&self, index: usize) -> usize {
        self.contexts[index]
    }

    pub fn base_values(&self, s: &State) -> Result<[f64; NUM_FEATURES]> {
        self.normalizer.features(&self.env, s)
    }

    /// Ground-truth calibrated values of all three features.
    pub fn calibrated_values(&self, s: &State) -> Result<[f64; NUM_FEATURES]> {
        let base = self.base_values(s)?;
        let mut out = [0.0; NUM_FEATURES];
        for i in 0..NUM_FEATURES {
            out[i] = gt_calibrated(self.fns[i], base[i], s.context[self.contexts[i]])?;
        }
        Ok(out)
    }

    pub fn feature_value(&self, index: usize, s: &State) -> Result<f64> {
        let base = self.base_values(s)?;
        gt_calibrated(self.fns[index], base[index], s.context[self.contexts[index]])
    }

    /// Per-feature reward inputs: calibrated where the scenario says so, the
    /// normalized base feature otherwise.
    pub fn reward_inputs(&self, s: &State, scenario: Scenario) -> Result<[f64; NUM_FEATURES]> {
        let base = self.base_values(s)?;
        let mask = scenario.calibrated_mask(self.env.kind);
        let mut out = base;
        for i in 0..NUM_FEATURES {
            if mask[i] {
                out[i] = gt_calibrated(self.fns[i], base[i], s.context[self.contexts[i]])?;
            }
        }
        Ok(out)
    }

    pub fn reward(&self, theta: &RewardWeights, s: &State, scenario: Scenario) -> Result<f64> {
        Ok(theta.dot(&self.reward_inputs(s, scenario)?))
    }
}

pub fn gt_reward(
    gt: &GroundTruth,
    theta: &RewardWeights,
    s: &State,
    scenario: Scenario,
) -> Result<f64> {
    gt.reward(theta, s, scenario)
}

/// Three-way answer to a paired query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    First,
    Equal,
    Second,
}

impl Label {
    /// Soft target: 1 for first, 0.5 for equal, 0 for second.
    pub fn target(self) -> f64 {
        match self {
            Label::First => 1.0,
            Label::Equal => 0.5,
            Label::Second => 0.0,
        }
    }

    pub fn swapped(self) -> Label {
        match self {
            Label::First => Label::Second,
            Label::Equal => Label::Equal,
            Label::Second => Label::First,
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Label::First),
            "equal" => Ok(Label::Equal),
            "second" => Ok(Label::Second),
            _ => Err(Error::Config(format!("unknown label `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            beta: 20.0,
            epsilon: 0.01,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "oracle needs beta > 0 and epsilon >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry probability that the first item is chosen, with rationality `beta`.
pub fn bt_prob(v1: f64, v2: f64, beta: f64) -> f64 {
    sigmoid(beta * (v1 - v2))
}

/// Labels a pair from its ground-truth values.
pub fn respond_values(v1: f64, v2: f64, cfg: &OracleConfig, rng: &mut Rng) -> Label {
    if (v1 - v2).abs() <= cfg.epsilon {
        return Label::Equal;
    }
    let p = bt_prob(v1, v2, cfg.beta);
    if rng.gen::<f64>() < p {
        Label::First
    } else {
        Label::Second
    }
}

/// Labels `(s1, s2)` with the simulated human whose values come from `value_fn`.
pub fn respond<F>(s1: &State, s2: &State, value_fn: F, cfg: &OracleConfig, rng: &mut Rng) -> Result<Label>
where
    F: Fn(&State) -> Result<f64>,
{
    Ok(respond_values(value_fn(s1)?, value_fn(s2)?, cfg, rng))
}

/// Held-out test rewards and the nested training reward sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardGrids {
    pub seed: u64,
    pub test: Vec<RewardWeights>,
    /// `[1, 1, 1]` followed by the remaining training candidates in draw order.
    pub train_order: Vec<RewardWeights>,
}

pub const NUM_TEST_REWARDS: usize = 10;

impl RewardGrids {
    /// First `n` training rewards; smaller grids are prefixes of larger ones.
    pub fn train(&self, n: usize) -> &[RewardWeights] {
        &self.train_order[..n.min(self.train_order.len())]
    }

    pub fn single_pref(&self) -> &[RewardWeights] {
        self.train(1)
    }
}

/// Draws 10 test rewards without replacement (never `[1,1,1]` or all-zero)
/// and orders the remaining grid points for nested training grids.
pub fn make_reward_grids(seed: u64) -> RewardGrids {
    let mut rng = rng_from(seed, &[tag("reward-grids")]);
    let mut pool: Vec<RewardWeights> = RewardWeights::grid()
        .into_iter()
        .filter(|w| !w.is_zero() && *w != RewardWeights::UNIFORM)
        .collect();
    pool.shuffle(&mut rng);
    let test = pool[..NUM_TEST_REWARDS].to_vec();
    let mut train_order = vec![RewardWeights::UNIFORM];
    train_order.extend_from_slice(&pool[NUM_TEST_REWARDS..]);
    RewardGrids {
        seed,
        test,
        train_order,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn base_function_values() {
        assert!((bowl(1.0, 1.0, 1.0, 2.0, -1.0, 1.0, -3.0) - 1.0).abs() < 1e-15);
        assert!((logistic(0.3, 2.0, 5.0, 0.3, 0.1) - 1.1).abs() < 1e-15);
        let sigma: f64 = 0.4;
        let peak = 3.0 / (2.0 * std::f64::consts::PI * sigma * sigma) - 0.2;
        assert!((gaussian(0.2, 0.7, sigma, 0.2, 0.7, 3.0, -0.2) - peak).abs() < 1e-12);
        // Pole at phi = mu + e^{k} for k = 0: phi = mu - 1.
        assert!(matches!(modlogistic(-0.5, 1.0, 0.0, 0.5, 0.0), Err(Error::Pole(_))));
        assert!((modlogistic(0.5, 2.0, 1.0, 0.5, 0.25).unwrap() - 2.25).abs() < 1e-15);
    }

    #[test]
    fn gt_function_examples() {
        use GtCalibratedFn::*;
        for phi in [0.0, 0.3, 1.0] {
            assert_eq!(gt_calibrated(Stove, phi, 0.0).unwrap(), 1.0);
        }
        assert_eq!(gt_calibrated(Stove, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(gt_calibrated(LaptopByWeight, 1.2, 0.7).unwrap(), 1.0);
        assert_eq!(gt_calibrated(Point, 0.2, 0.9).unwrap(), 1.0);
        assert!("nope".parse::<GtCalibratedFn>().is_err());
    }

    #[test]
    fn gt_functions_stay_in_unit_range() {
        for f in GtCalibratedFn::ALL {
            for i in 0..=100 {
                for j in 0..=100 {
                    let v = gt_calibrated(f, i as f64 / 100.0, j as f64 / 100.0).unwrap();
                    assert!((0.0..=1.0).contains(&v), "{f} at ({i},{j}) = {v}");
                }
            }
        }
    }

    #[test]
    fn stove_is_non_increasing_in_heat() {
        for i in 0..100 {
            let phi = i as f64 / 100.0;
            let mut prev = f64::INFINITY;
            for j in 1..=100 {
                let v = gt_calibrated(GtCalibratedFn::Stove, phi, j as f64 / 100.0).unwrap();
                assert!(v <= prev + 1e-15);
                prev = v;
            }
        }
    }

    #[test]
    fn bt_prob_values() {
        assert_eq!(bt_prob(0.3, 0.3, 20.0), 0.5);
        assert!((bt_prob(0.55, 0.45, 20.0) - 0.880_797_077_977_882_4).abs() < 1e-9);
        assert!((bt_prob(1.0, 0.0, 1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        for d in [-40.0, -1.0, 1.0, 40.0] {
            let p = bt_prob(d, 0.0, 20.0);
            assert!(p.is_finite() && (0.0..=1.0).contains(&p));
        }
        assert!(bt_prob(-1.5, 0.0, 20.0) > 0.0);
    }

    proptest::proptest! {
        #[test]
        fn bt_prob_is_antisymmetric(a in -50.0f64..50.0, b in -50.0f64..50.0, beta in 0.01f64..20.0) {
            let s = bt_prob(a, b, beta) + bt_prob(b, a, beta);
            proptest::prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn respond_equal_within_threshold() {
        let cfg = OracleConfig::default();
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(respond_values(0.5, 0.495, &cfg, &mut rng), Label::Equal);
        }
    }

    #[test]
    fn respond_large_gap_is_nearly_always_first() {
        let cfg = OracleConfig::default();
        let mut rng = Rng::seed_from_u64(1);
        let firsts = (0..10_000)
            .filter(|_| respond_values(1.0, 0.0, &cfg, &mut rng) == Label::First)
            .count();
        assert!(firsts >= 9990);
    }

    #[test]
    fn respond_is_deterministic_and_argmax_at_high_beta() {
        let cfg = OracleConfig { beta: 1e6, epsilon: 0.0 };
        let mut rng = Rng::seed_from_u64(2);
        let mut vals = Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, b): (f64, f64) = (vals.gen(), vals.gen());
            let want = if a > b { Label::First } else { Label::Second };
            assert_eq!(respond_values(a, b, &cfg, &mut rng), want);
        }
        let draw = |seed| {
            let mut r = Rng::seed_from_u64(seed);
            (0..50)
                .map(|i| respond_values(0.1 * (i % 7) as f64, 0.3, &OracleConfig::default(), &mut r))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn reward_grids_nest_and_hold_out() {
        let g = make_reward_grids(0);
        assert_eq!(g.train(1), &[RewardWeights::UNIFORM]);
        assert_eq!(g.single_pref(), &[RewardWeights::UNIFORM]);
        assert_eq!(&g.train(50)[..25], g.train(25));
        assert_eq!(&g.train(25)[..10], g.train(10));
        assert_eq!(g.test.len(), 10);
        for t in &g.test {
            assert!(!g.train(50).contains(t));
            assert!(!t.is_zero());
        }
        let mut seen = g.train(50).to_vec();
        seen.dedup();
        assert_eq!(seen.len(), 50);
        assert_eq!(make_reward_grids(0), g);
    }

    #[test]
    fn scenario_parsing() {
        assert_eq!("all".parse::<Scenario>().unwrap(), Scenario::All);
        assert_eq!(
            "single:stove_dist".parse::<Scenario>().unwrap(),
            Scenario::Single(FeatureId::StoveDist)
        );
        assert!("single:oven".parse::<Scenario>().is_err());
        assert!(Scenario::Single(FeatureId::CupAngle).validate(EnvKind::Utensil).is_err());
        assert_eq!(Scenario::Single(FeatureId::HumanDist).to_string(), "single:human_dist");
    }

    #[test]
    fn rewards_follow_scenario() {
        let env = EnvironmentSpec::with_default_layout(EnvKind::WeightedBlock);
        let set = crate::env::build_state_set(&env, 500, 0).unwrap();
        let norm = crate::env::fit_normalizer(&set, &env).unwrap();
        let gt = GroundTruth::new(env, norm);
        let zero = RewardWeights([0.0; 3]);
        let first = RewardWeights([1.0, 0.0, 0.0]);
        for s in set.states.iter().take(100) {
            assert_eq!(gt.reward(&zero, s, Scenario::All).unwrap(), 0.0);
            let r = gt.reward(&first, s, Scenario::All).unwrap();
            assert_eq!(r, gt.feature_value(0, s).unwrap());

            // Single(table): the stove heat only reshapes stove distance, which
            // passes through unchanged here.
            let theta = RewardWeights([0.5, -1.0, 1.0]);
            let sc = Scenario::Single(FeatureId::TableDist);
            let mut hotter = *s;
            hotter.context[0] = (s.context[0] + 0.37) % 1.0;
            assert_eq!(gt.reward(&theta, s, sc).unwrap(), gt.reward(&theta, &hotter, sc).unwrap());
        }
    }
}
