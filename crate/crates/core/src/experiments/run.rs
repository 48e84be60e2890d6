use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{workers_from_env, ExperimentPlan, Method};
use super::metrics::{evaluable_pairs, mean_se, metric_mse, metric_reward_accuracy};
use crate::env::{build_state_set, EnvironmentSpec, FeatureId, Normalizer, State, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::learning::multitask::LATENT_DIM;
use crate::learning::reward::{init_linear_reward, init_reward_head, scalar_outputs, train_frozen_head, train_linear_reward, train_unfrozen_head};
use crate::learning::{
    sample_pairs, split_budget, train_calibrated_feature, train_multitask, CalibratedFeature, CalibratedRepresentation, FeatureRep, Featurizer,
    MultiTaskRep, PairInputs, QueryDataset, QueryStream,
};
use crate::oracle::{make_reward_grids, GroundTruth, GtCalibratedFn, Label, RewardGrids, RewardWeights};
use crate::rng::{derive_seed, rng_from, tag};
use crate::tinynet::MlpModel;

pub const RESULT_VERSION: u32 = 1;

/// Downstream reward accuracy of one method at one query count, averaged
/// over the test rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub method: Method,
    pub seed: u64,
    pub query_count: usize,
    pub accuracy: f64,
    pub per_reward: Vec<f64>,
}

/// Test MSE of a calibrated feature trained on `query_count` queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature: FeatureId,
    pub function: GtCalibratedFn,
    pub seed: u64,
    pub query_count: usize,
    pub mse: f64,
}

/// Accuracy of a multi-task model's own training heads, averaged over heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub heads: usize,
    pub seed: u64,
    pub query_count: usize,
    pub accuracy: f64,
}

/// Number of evaluation pairs kept for one test reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluableRecord {
    pub seed: u64,
    pub reward: usize,
    pub weights: RewardWeights,
    pub evaluable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub seed: u64,
    pub model: String,
    pub epoch_loss: Vec<f64>,
}

/// Everything measured for one seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub reward: Vec<RewardRecord>,
    pub feature: Vec<FeatureRecord>,
    pub pretrain: Vec<PretrainRecord>,
    pub evaluable: Vec<EvaluableRecord>,
    pub losses: Vec<LossCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: u32,
    pub plan: ExperimentPlan,
    pub reward_grids: RewardGrids,
    pub reward: Vec<RewardRecord>,
    pub feature: Vec<FeatureRecord>,
    pub pretrain: Vec<PretrainRecord>,
    pub evaluable: Vec<EvaluableRecord>,
    pub losses: Vec<LossCurve>,
}

/// Seed-level mean and standard error of one method at one query count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: Method,
    pub query_count: usize,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureAggregate {
    pub feature: FeatureId,
    pub function: GtCalibratedFn,
    pub query_count: usize,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Our method against the strongest baseline at one query count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowDataRow {
    pub query_count: usize,
    pub calibrated: f64,
    pub best_baseline: Method,
    pub baseline: f64,
}

impl ExperimentResult {
    pub fn from_seeds(plan: ExperimentPlan, seeds: Vec<SeedResult>) -> Self {
        let mut out = ExperimentResult {
            version: RESULT_VERSION,
            reward_grids: make_reward_grids(plan.config.reward_grid_seed),
            plan,
            reward: Vec::new(),
            feature: Vec::new(),
            pretrain: Vec::new(),
            evaluable: Vec::new(),
            losses: Vec::new(),
        };
        for s in seeds {
            out.reward.extend(s.reward);
            out.feature.extend(s.feature);
            out.pretrain.extend(s.pretrain);
            out.evaluable.extend(s.evaluable);
            out.losses.extend(s.losses);
        }
        out
    }

    /// Records of a single seed, as [`run_cell`] would produce them.
    pub fn seed_result(&self, seed: u64) -> SeedResult {
        SeedResult {
            reward: self.reward.iter().filter(|r| r.seed == seed).cloned().collect(),
            feature: self.feature.iter().filter(|r| r.seed == seed).cloned().collect(),
            pretrain: self.pretrain.iter().filter(|r| r.seed == seed).cloned().collect(),
            evaluable: self.evaluable.iter().filter(|r| r.seed == seed).cloned().collect(),
            losses: self.losses.iter().filter(|r| r.seed == seed).cloned().collect(),
        }
    }

    /// Reward accuracy per method and query count, across seeds.
    pub fn aggregate_rewards(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for method in self.plan.methods() {
            for &qc in &self.plan.config.reward_query_grid {
                let vals: Vec<f64> = self
                    .reward
                    .iter()
                    .filter(|r| r.method == method && r.query_count == qc)
                    .map(|r| r.accuracy)
                    .collect();
                let (mean, se) = mean_se(&vals);
                out.push(Aggregate {
                    method,
                    query_count: qc,
                    mean,
                    se,
                    n: vals.len(),
                });
            }
        }
        out
    }

    pub fn aggregate_features(&self) -> Vec<FeatureAggregate> {
        let mut keys: Vec<(FeatureId, GtCalibratedFn, usize)> = self.feature.iter().map(|r| (r.feature, r.function, r.query_count)).collect();
        keys.sort_by_key(|&(f, _, q)| (f, q));
        keys.dedup();
        keys.into_iter()
            .map(|(feature, function, query_count)| {
                let vals: Vec<f64> = self
                    .feature
                    .iter()
                    .filter(|r| r.feature == feature && r.query_count == query_count)
                    .map(|r| r.mse)
                    .collect();
                let (mean, se) = mean_se(&vals);
                FeatureAggregate {
                    feature,
                    function,
                    query_count,
                    mean,
                    se,
                    n: vals.len(),
                }
            })
            .collect()
    }

    /// Seed-mean accuracy of `method` at `query_count`.
    pub fn mean_accuracy(&self, method: Method, query_count: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .reward
            .iter()
            .filter(|r| r.method == method && r.query_count == query_count)
            .map(|r| r.accuracy)
            .collect();
        (!vals.is_empty()).then(|| mean_se(&vals).0)
    }

    /// Our method against the best baseline (over training-reward counts
    /// and freezing) at `query_count`.
    pub fn low_data_row(&self, query_count: usize) -> Option<LowDataRow> {
        let calibrated = self.mean_accuracy(Method::Calibrated, query_count)?;
        let (best_baseline, baseline) = self
            .plan
            .methods()
            .into_iter()
            .filter(|m| m.is_baseline())
            .filter_map(|m| self.mean_accuracy(m, query_count).map(|v| (m, v)))
            .fold(None, |best: Option<(Method, f64)>, (m, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((m, v)),
            })?;
        Some(LowDataRow {
            query_count,
            calibrated,
            best_baseline,
            baseline,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let r: ExperimentResult = serde_json::from_slice(&body)?;
        if r.version != RESULT_VERSION {
            return Err(Error::Version {
                expected: RESULT_VERSION,
                found: r.version,
            });
        }
        Ok(r)
    }
}

/// Runs every seed of the plan on a worker pool sized by the worker
/// environment variable (all cores otherwise) and merges in seed order.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResult> {
    let workers = workers_from_env()?;
    run_experiment_with(plan, workers)
}

pub fn run_experiment_with(plan: &ExperimentPlan, workers: Option<usize>) -> Result<ExperimentResult> {
    plan.config.validate()?;
    plan.scenario.validate(plan.env)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let seeds = pool.install(|| plan.seeds.par_iter().map(|&s| run_cell(plan, s)).collect::<Result<Vec<_>>>())?;
    Ok(ExperimentResult::from_seeds(plan.clone(), seeds))
}

/// State pool, ground truth and evaluation pairs shared by every method
/// within one seed.
struct Cell<'a> {
    plan: &'a ExperimentPlan,
    seed: u64,
    scenario_tag: u64,
    states: Vec<State>,
    train_idx: Vec<usize>,
    test_states: Vec<State>,
    fz: Featurizer,
    gt: GroundTruth,
    grids: RewardGrids,
    /// Evaluation pairs as positions into `test_states`.
    eval_pairs: Vec<(usize, usize)>,
}

/// Runs one seed of the plan: pre-trains every representation, learns each
/// test reward at every query count, and evaluates on the shared test pairs.
pub fn run_cell(plan: &ExperimentPlan, seed: u64) -> Result<SeedResult> {
    let cfg = &plan.config;
    let env = EnvironmentSpec::new(plan.env, cfg.layout)?;
    let set = build_state_set(&env, cfg.state_count, seed)?;
    let normalizer = Normalizer::fit(&set.states, &env)?;
    let test_states: Vec<State> = set.test_states().copied().collect();
    let positions: Vec<usize> = (0..test_states.len()).collect();
    let eval_pairs = sample_pairs(&positions, cfg.eval_pairs, &mut rng_from(seed, &[tag("eval-pairs")]));
    let cell = Cell {
        plan,
        seed,
        scenario_tag: tag(&plan.scenario.to_string()),
        fz: Featurizer::new(env, normalizer.clone()),
        gt: GroundTruth::new(env, normalizer),
        grids: make_reward_grids(cfg.reward_grid_seed),
        states: set.states,
        train_idx: set.train_idx,
        test_states,
        eval_pairs,
    };
    cell.run()
}

impl Cell<'_> {
    fn run(&self) -> Result<SeedResult> {
        let mut out = SeedResult::default();
        let (rep, features, mut losses) = self.calibrated_stage()?;
        out.feature = features;
        let (models, pretrain, mt_losses) = self.multitask_stage()?;
        out.pretrain = pretrain;
        losses.extend(mt_losses);
        out.losses = losses;

        let cf_all = rep.values(&self.fz, &self.states)?;
        let cf_test = rep.values(&self.fz, &self.test_states)?;
        let latents: Vec<(Latents, Latents)> = models
            .iter()
            .map(|m| Ok((m.latents(&self.fz, &self.states)?, m.latents(&self.fz, &self.test_states)?)))
            .collect::<Result<_>>()?;
        let shared = Shared {
            cf_all,
            cf_test,
            models,
            latents,
        };

        let per_reward: Vec<RewardOutcome> = (0..self.grids.test.len())
            .into_par_iter()
            .map(|r| self.downstream(r, &shared))
            .collect::<Result<_>>()?;

        for (r, o) in per_reward.iter().enumerate() {
            out.evaluable.push(EvaluableRecord {
                seed: self.seed,
                reward: r,
                weights: self.grids.test[r],
                evaluable: o.evaluable,
            });
        }
        for (m, method) in self.plan.methods().into_iter().enumerate() {
            for (q, &qc) in self.plan.config.reward_query_grid.iter().enumerate() {
                let accs: Vec<f64> = per_reward.iter().map(|o| o.accuracy[m][q]).collect();
                out.reward.push(RewardRecord {
                    method,
                    seed: self.seed,
                    query_count: qc,
                    accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                    per_reward: accs,
                });
            }
        }
        Ok(out)
    }

    fn calibrated_mask(&self) -> [bool; NUM_FEATURES] {
        self.plan.scenario.calibrated_mask(self.plan.env)
    }

    /// Learns each calibrated feature of the scenario at every learning-curve
    /// query count; the model at the pre-training budget joins the
    /// representation. Streams and initializations depend only on the seed
    /// and the feature, so every scenario reuses the same features.
    fn calibrated_stage(&self) -> Result<(CalibratedRepresentation, Vec<FeatureRecord>, Vec<LossCurve>)> {
        let cfg = &self.plan.config;
        let feats = self.plan.env.features();
        let mut budgets = cfg.feature_query_grid.clone();
        budgets.push(cfg.pretrain_queries_per_feature);
        budgets.sort_unstable();
        budgets.dedup();
        let mask = self.calibrated_mask();
        type FeatureOut = (usize, CalibratedFeature, Vec<FeatureRecord>, LossCurve);
        let learned: Vec<FeatureOut> = (0..NUM_FEATURES)
            .into_par_iter()
            .filter(|&i| mask[i])
            .map(|i| {
                let value = |k: usize| self.gt.feature_value(i, &self.states[k]);
                let mut stream = QueryStream::new(
                    &self.states,
                    &self.train_idx,
                    value,
                    cfg.oracle,
                    rng_from(self.seed, &[tag("cf-pairs"), i as u64]),
                    rng_from(self.seed, &[tag("cf-labels"), i as u64]),
                );
                let init_seed = derive_seed(self.seed, &[tag("cf-init"), i as u64]);
                let mut records = Vec::new();
                let mut kept = None;
                for &qc in &budgets {
                    let data = stream.prefix(qc)?;
                    let (cf, log) = train_calibrated_feature(feats[i], &data, &self.fz, &cfg.hyper.calibrated_feature, init_seed)?;
                    if cfg.feature_query_grid.contains(&qc) {
                        records.push(FeatureRecord {
                            feature: feats[i],
                            function: self.gt.function(i),
                            seed: self.seed,
                            query_count: qc,
                            mse: metric_mse(&cf, &self.gt, &self.fz, &self.test_states)?,
                        });
                    }
                    if qc == cfg.pretrain_queries_per_feature {
                        let curve = LossCurve {
                            seed: self.seed,
                            model: format!("cf:{}", feats[i]),
                            epoch_loss: log.epoch_loss,
                        };
                        kept = Some((cf, curve));
                    }
                }
                let (cf, curve) = kept.expect("pre-training budget is in the query list");
                Ok((i, cf, records, curve))
            })
            .collect::<Result<_>>()?;
        let mut reps: Vec<FeatureRep> = (0..NUM_FEATURES).map(|_| FeatureRep::Identity).collect();
        let mut records = Vec::new();
        let mut curves = Vec::new();
        for (i, cf, r, c) in learned {
            reps[i] = FeatureRep::Learned(cf);
            records.extend(r);
            curves.push(c);
        }
        Ok((CalibratedRepresentation::new(reps)?, records, curves))
    }

    fn head_stream_seeds(&self, h: usize) -> (u64, u64) {
        (
            derive_seed(self.seed, &[self.scenario_tag, tag("mt-pairs"), h as u64]),
            derive_seed(self.seed, &[self.scenario_tag, tag("mt-labels"), h as u64]),
        )
    }

    /// Trains every multi-task variant. Head `h` always answers training
    /// reward `h` from its own query stream, so variants with more heads
    /// extend the smaller ones and each head's data is a prefix of its stream.
    fn multitask_stage(&self) -> Result<(Vec<MultiTaskRep>, Vec<PretrainRecord>, Vec<LossCurve>)> {
        let cfg = &self.plan.config;
        let budget = self.plan.pretrain_budget();
        let max_heads = cfg.multitask_heads.iter().copied().max().unwrap_or(0);
        let mut need = vec![0usize; max_heads];
        for &n in &cfg.multitask_heads {
            for (h, k) in split_budget(budget, n).into_iter().enumerate() {
                need[h] = need[h].max(k);
            }
        }
        let head_data: Vec<QueryDataset> = (0..max_heads)
            .into_par_iter()
            .map(|h| {
                let theta = self.grids.train_order[h];
                let value = |k: usize| self.gt.reward(&theta, &self.states[k], self.plan.scenario);
                let (ps, ls) = self.head_stream_seeds(h);
                let mut stream = QueryStream::new(&self.states, &self.train_idx, value, cfg.oracle, rand::SeedableRng::seed_from_u64(ps), rand::SeedableRng::seed_from_u64(ls));
                stream.prefix(need[h])
            })
            .collect::<Result<_>>()?;
        let trained: Vec<(MultiTaskRep, PretrainRecord, LossCurve)> = cfg
            .multitask_heads
            .par_iter()
            .map(|&n| {
                let per_head: Vec<QueryDataset> = split_budget(budget, n)
                    .into_iter()
                    .enumerate()
                    .map(|(h, k)| QueryDataset::new(head_data[h].queries[..k].to_vec()))
                    .collect();
                let seed = derive_seed(self.seed, &[self.scenario_tag, tag("multitask"), n as u64]);
                let (rep, log) = train_multitask(&per_head, &self.fz, &cfg.hyper.multitask_representation, seed)?;
                let values = rep.head_values(&self.fz, &self.test_states)?;
                let mut accs = Vec::with_capacity(n);
                for (h, v) in values.iter().enumerate() {
                    let gt = self.gt_values(&self.grids.train_order[h])?;
                    accs.push(metric_reward_accuracy(v, &gt, &self.eval_pairs, cfg.oracle.epsilon)?);
                }
                let record = PretrainRecord {
                    heads: n,
                    seed: self.seed,
                    query_count: budget,
                    accuracy: accs.iter().sum::<f64>() / n as f64,
                };
                let curve = LossCurve {
                    seed: self.seed,
                    model: format!("multitask:{n}"),
                    epoch_loss: log.epoch_loss,
                };
                Ok((rep, record, curve))
            })
            .collect::<Result<_>>()?;
        let mut reps = Vec::new();
        let mut records = Vec::new();
        let mut curves = Vec::new();
        for (r, p, c) in trained {
            reps.push(r);
            records.push(p);
            curves.push(c);
        }
        Ok((reps, records, curves))
    }

    fn gt_values(&self, theta: &RewardWeights) -> Result<Vec<f64>> {
        self.test_states.iter().map(|s| self.gt.reward(theta, s, self.plan.scenario)).collect()
    }

    /// Learns test reward `r` with every method at every query count.
    fn downstream(&self, r: usize, sh: &Shared) -> Result<RewardOutcome> {
        let cfg = &self.plan.config;
        let eps = cfg.oracle.epsilon;
        let theta = self.grids.test[r];
        let gt_test = self.gt_values(&theta)?;
        let value = |k: usize| self.gt.reward(&theta, &self.states[k], self.plan.scenario);
        let mut stream = QueryStream::new(
            &self.states,
            &self.train_idx,
            value,
            cfg.oracle,
            rng_from(self.seed, &[self.scenario_tag, tag("reward-pairs"), r as u64]),
            rng_from(self.seed, &[self.scenario_tag, tag("reward-labels"), r as u64]),
        );
        let methods = self.plan.methods();
        let grid = &cfg.reward_query_grid;
        let mut accuracy = vec![vec![0.0; grid.len()]; methods.len()];
        for (q, &qc) in grid.iter().enumerate() {
            let model_seed = derive_seed(self.seed, &[self.scenario_tag, tag("reward-model"), r as u64, qc as u64]);
            // Equivalence answers carry no weight for the linear reward, so
            // it keeps asking until it has `qc` strict preferences.
            let strict = stream.non_equivalent_items(qc)?;
            let with_equiv = stream.prefix_items(qc)?;
            for (m, method) in methods.iter().enumerate() {
                let values = match *method {
                    Method::Calibrated => {
                        let linear = if qc == 0 {
                            init_linear_reward(model_seed)?
                        } else {
                            let inputs = pair_inputs(&strict, |s| sh.cf_all[s]);
                            train_linear_reward(&inputs, &cfg.hyper.calibrated_reward, model_seed)?
                        };
                        scalar_outputs(&linear, sh.cf_test.iter().map(|f| f.as_slice()), NUM_FEATURES)?
                    }
                    Method::MultiTask { heads, frozen } => {
                        let v = cfg.multitask_heads.iter().position(|&n| n == heads).expect("method from plan");
                        let (lat_all, lat_test) = &sh.latents[v];
                        if qc == 0 {
                            let head = init_reward_head(model_seed)?;
                            scalar_outputs(&head, lat_test.iter().map(|z| z.as_slice()), LATENT_DIM)?
                        } else if frozen {
                            let inputs = pair_inputs(&with_equiv, |s| lat_all[s]);
                            let head = train_frozen_head(&inputs, &cfg.hyper.multitask_reward, model_seed)?;
                            scalar_outputs(&head, lat_test.iter().map(|z| z.as_slice()), LATENT_DIM)?
                        } else {
                            let inputs = pair_inputs(&with_equiv, |s| self.fz.state_input(&self.states[s]));
                            let (trunk, head) = train_unfrozen_head(&sh.models[v].trunk, &inputs, &cfg.hyper.multitask_reward, model_seed)?;
                            head_over_trunk(&trunk, &head, &self.fz, &self.test_states)?
                        }
                    }
                };
                accuracy[m][q] = metric_reward_accuracy(&values, &gt_test, &self.eval_pairs, eps)?;
            }
        }
        Ok(RewardOutcome {
            evaluable: evaluable_pairs(&gt_test, &self.eval_pairs, eps),
            accuracy,
        })
    }
}

type Latents = Vec<[f64; LATENT_DIM]>;

struct Shared {
    cf_all: Vec<[f64; NUM_FEATURES]>,
    cf_test: Vec<[f64; NUM_FEATURES]>,
    models: Vec<MultiTaskRep>,
    /// Latent codes of every state and of the test states, per variant.
    latents: Vec<(Latents, Latents)>,
}

struct RewardOutcome {
    evaluable: usize,
    /// `[method][query count]`.
    accuracy: Vec<Vec<f64>>,
}

/// Pair inputs from per-state vectors of indexed queries.
fn pair_inputs<const D: usize>(items: &[(usize, usize, Label)], input: impl Fn(usize) -> [f64; D]) -> PairInputs {
    let mut out = PairInputs::new(D);
    for &(a, b, label) in items {
        out.push(&input(a), &input(b), label, 0, 1.0);
    }
    out
}

fn head_over_trunk(trunk: &MlpModel, head: &MlpModel, fz: &Featurizer, states: &[State]) -> Result<Vec<f64>> {
    let lat = crate::learning::multitask::latents_of(trunk, fz, states)?;
    scalar_outputs(head, lat.iter().map(|z| z.as_slice()), LATENT_DIM)
}

/// Re-runs `seed` of a stored result and reports whether every recorded
/// value comes out bit-for-bit the same.
pub fn reproduces(stored: &ExperimentResult, seed: u64) -> Result<bool> {
    if !stored.plan.seeds.contains(&seed) {
        return Err(Error::Config(format!("seed {seed} is not part of the stored experiment")));
    }
    let fresh = run_cell(&stored.plan, seed)?;
    Ok(serde_json::to_vec(&fresh)? == serde_json::to_vec(&stored.seed_result(seed))?)
}
